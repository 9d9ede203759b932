import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm, wasserstein_distance

from vrfm import distributions as D
from vrfm import metrics as M
from vrfm.models import VelocityModel, VelocityModelConfig


def test_true_log_likelihood_example():
    tgt = D.builtin_spec("target_1d_bimodal")
    x = np.array([[-1.0], [1.0]])
    assert M.true_log_likelihood(x, tgt) == pytest.approx(float(D.log_density(tgt, [-1.0])), abs=1e-14)
    with pytest.raises(ValueError):
        M.true_log_likelihood(np.zeros((0, 1)), tgt)


def test_parzen_examples():
    h = 0.3
    assert M.parzen_log_likelihood(np.zeros((1, 2)), np.zeros((1, 2)), h) == pytest.approx(-math.log(2 * math.pi * h * h), abs=1e-14)
    gen = np.array([[-1.0], [0.5], [2.0]])
    test = np.array([[0.0], [1.0]])
    ref = np.mean([math.log(np.mean(norm.pdf(x, gen[:, 0], h))) for x in test[:, 0]])
    assert M.parzen_log_likelihood(gen, test, h) == pytest.approx(ref, abs=1e-12)
    with pytest.raises(ValueError):
        M.parzen_log_likelihood(gen, test, 0.0)


def test_parzen_is_kde_on_generated_scored_on_test():
    # a single far-away generated point makes the score very poor; swapping roles would not
    gen = np.array([[10.0]])
    test = np.zeros((5, 1))
    assert M.parzen_log_likelihood(gen, test, 0.5) < M.parzen_log_likelihood(test, gen, 0.5) + 1e-9
    chunked = M._parzen_scores(np.random.default_rng(0).normal(size=(300, 2)), np.random.default_rng(1).normal(size=(1100, 2)), 0.2, chunk=64)
    whole = M._parzen_scores(np.random.default_rng(0).normal(size=(300, 2)), np.random.default_rng(1).normal(size=(1100, 2)), 0.2, chunk=4096)
    assert np.allclose(chunked, whole, rtol=0, atol=1e-12)


def test_bandwidth_selection_prefers_sensible_scale():
    gen = np.random.default_rng(0).normal(size=(4000, 1))
    h = M.select_parzen_bandwidth(gen, np.random.default_rng(1))
    assert h in M.PARZEN_GRID
    # Silverman's rule gives about 0.2 for n=4000 standard normal data
    assert 0.08 < h < 0.5
    assert h == M.select_parzen_bandwidth(gen, np.random.default_rng(1))


def test_w1_examples():
    a = np.random.default_rng(0).normal(size=500)
    assert M.wasserstein_1d(a, a + 0.75) == pytest.approx(0.75, abs=1e-12)
    assert M.wasserstein_1d(a, a[::-1]) == 0.0
    assert M.wasserstein_1d(a, -a) == pytest.approx(wasserstein_distance(a, -a), abs=1e-12)
    with pytest.raises(ValueError):
        M.wasserstein_1d(a, a[:10])


def test_exact_w1_matches_sorted_pairing_in_1d():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=300), rng.exponential(size=300)
    assert M.exact_wasserstein(a, b) == pytest.approx(M.wasserstein_1d(a, b), abs=1e-12)


def test_sliced_w1_of_pure_shift():
    # a shift c along one axis projects to c |cos(theta)|, whose mean is 2c / pi
    a = np.random.default_rng(0).normal(size=(400, 2))
    b = a + [1.5, 0.0]
    val, se = M.sliced_wasserstein(a, b, n_projections=4000, rng=np.random.default_rng(1), return_stderr=True)
    assert abs(val - 3.0 / math.pi) < 4 * se


def test_sliced_w1_bounded_by_exact_w1():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(200, 2)), rng.normal(size=(200, 2)) * [2.0, 0.5] + 0.3
    assert M.sliced_wasserstein(a, b, 256, np.random.default_rng(4)) <= M.exact_wasserstein(a, b) + 1e-12


def test_sliced_w1_validation():
    with pytest.raises(ValueError):
        M.sliced_wasserstein(np.zeros((3, 2)), np.zeros((4, 2)))
    with pytest.raises(ValueError):
        M.sliced_wasserstein(np.zeros((3, 2)), np.zeros((3, 2)), n_projections=0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 40))
def test_w1_metric_properties(seed, n):
    rng = np.random.default_rng(seed)
    a, b, c = rng.normal(size=(3, n, 2))
    dab, dba = M.exact_wasserstein(a, b), M.exact_wasserstein(b, a)
    assert dab == pytest.approx(dba, abs=1e-12)
    assert M.exact_wasserstein(a, a) == 0.0
    assert dab <= M.exact_wasserstein(a, c) + M.exact_wasserstein(c, b) + 1e-12
    assert M.wasserstein_1d(a[:, 0], b[:, 0]) == pytest.approx(M.wasserstein_1d(b[:, 0], a[:, 0]), abs=1e-15)


def _small_grid(**kw):
    return M.AmbiguityGrid(x_centers=(-1.0, 0.0, 1.0), t_centers=(0.0, 0.5), probes=((0.0, 0.5),), **kw)


def test_baseline_model_has_zero_spread():
    m = VelocityModel(VelocityModelConfig(1), seed=0)
    rep = M.ambiguity_map(m, _small_grid(), 20, np.random.default_rng(0))
    assert rep.source == "model_rfm"
    assert rep.mask.all() and np.all(rep.std == 0.0)


def test_latent_model_has_positive_spread():
    m = VelocityModel(VelocityModelConfig(2, latent_dim=3), seed=0)
    rep = M.ambiguity_map(m, _small_grid(), 20, np.random.default_rng(0))
    assert rep.source == "model_vrfm" and np.all(rep.std > 0)
    assert rep.probe_samples[(0.0, 0.5)].shape == (20, 2)


def test_ground_truth_report_masks_sparse_bins(tmp_path):
    specs = (D.builtin_spec("source_1d"), D.builtin_spec("target_1d_bimodal"))
    grid = M.AmbiguityGrid(x_centers=(0.0, 1.9), t_centers=(0.0, 0.95), probes=((0.0, 0.0),), min_count=50, max_draws=200_000)
    rep = M.ambiguity_map("ground_truth", grid, 50, np.random.default_rng(0), specs=specs)
    assert rep.mask[0, 0] and not rep.mask[1, 0]
    assert np.isnan(rep.std[1, 0]) and rep.counts[1, 0] < 50
    # spread at t=0 is that of x1 - x0 with x0 pinned near 0: about sqrt(1 + 0.15^2)
    assert rep.std_at(0.0, 0.0) == pytest.approx(math.sqrt(1 + 0.15**2), rel=0.3)
    rep.write_grid_csv(tmp_path / "g.csv")
    rep.write_histograms_csv(tmp_path / "h.csv")
    lines = (tmp_path / "g.csv").read_text().splitlines()
    assert lines[0] == "source,x,t,std,count,masked" and len(lines) == 5
    assert any(line.endswith(",1") and ",," in line for line in lines[1:])
    hist = (tmp_path / "h.csv").read_text().splitlines()
    assert len(hist) == 1 + len(grid.hist_edges) - 1


def test_ambiguity_source_validation():
    with pytest.raises(ValueError):
        M.ambiguity_map("oracle", _small_grid())
    with pytest.raises(ValueError, match="specs"):
        M.ambiguity_map("ground_truth", _small_grid())
    with pytest.raises(TypeError):
        M.ambiguity_map(3, _small_grid())


def test_ambiguity_correlation_examples():
    m = VelocityModel(VelocityModelConfig(1, latent_dim=2), seed=0)
    rep = M.ambiguity_map(m, _small_grid(), 30, np.random.default_rng(0))
    assert M.ambiguity_correlation(rep, rep) == pytest.approx(1.0, abs=1e-12)
    flipped = M.AmbiguityReport("x", rep.x_centers, rep.t_centers, -rep.std, rep.mask, rep.counts)
    assert M.ambiguity_correlation(flipped, rep) == pytest.approx(-1.0, abs=1e-12)


def test_metric_rows_round_trip(tmp_path):
    rows = [M.MetricRow("rfm", "2", "0", np.float64(-1.25), -2.0, 0.1, 2), M.MetricRow("vrfm", "adaptive", "mean", 0.1, 0.2, 0.3, 44.5)]
    M.write_metric_rows(rows, tmp_path / "m.csv")
    text = (tmp_path / "m.csv").read_text()
    assert "np." not in text and text.splitlines()[0] == ",".join(M.METRIC_HEADER)
    assert M.read_metric_rows(tmp_path / "m.csv") == rows


def test_crossing_examples():
    x = np.array([[[0.0, 0.0], [1.0, 1.0]], [[0.0, 1.0], [1.0, 0.0]]])
    assert M.crossing_pairs(x) == [(0, 1)]
    parallel = np.array([[[0.0, 0.0], [1.0, 0.0]], [[0.0, 1.0], [1.0, 1.0]]])
    assert M.crossing_pairs(parallel) == []
    touching = np.array([[[0.0, 0.0], [1.0, 0.0]], [[1.0, 0.0], [2.0, 1.0]]])
    assert M.crossing_pairs(touching) == [(0, 1)]
    overlap = np.array([[[0.0, 0.0], [2.0, 0.0]], [[1.0, 0.0], [3.0, 0.0]]])
    assert M.crossing_pairs(overlap) == [(0, 1)]
    assert M.crossing_pairs(x[:1]) == []
    with pytest.raises(ValueError):
        M.crossing_pairs(np.zeros((2, 3)))


def _brute_force_crossings(paths):
    # parametric segment intersection; valid for paths in general position
    out = []
    for i in range(len(paths)):
        for j in range(i + 1, len(paths)):
            hit = False
            for a, b in zip(paths[i][:-1], paths[i][1:]):
                for c, d in zip(paths[j][:-1], paths[j][1:]):
                    m = np.column_stack([b - a, c - d])
                    if abs(np.linalg.det(m)) < 1e-14:
                        continue
                    s, u = np.linalg.solve(m, c - a)
                    if 0 <= s <= 1 and 0 <= u <= 1:
                        hit = True
            if hit:
                out.append((i, j))
    return out


def test_crossings_match_brute_force_on_random_walks():
    rng = np.random.default_rng(0)
    paths = np.cumsum(rng.normal(size=(40, 6, 2)), axis=1) + rng.uniform(-8, 8, size=(40, 1, 2))
    got = M.crossing_pairs(paths)
    assert got == _brute_force_crossings(paths) and len(got) > 5
    assert M.crossing_pairs(paths, limit=3) == got[:3]


def test_straight_rays_from_a_common_origin_only_touch_at_it():
    ang = np.linspace(0, np.pi, 5, endpoint=False)
    rays = np.stack([np.outer(np.linspace(0.1, 1, 10), [np.cos(a), np.sin(a)]) for a in ang])
    assert M.crossing_pairs(rays) == []
