"""Minimal SVG plots: scatter, line and heatmap. CSV remains the data contract;
these are for eyeballing results without a plotting dependency."""

from __future__ import annotations

from html import escape

import numpy as np

__all__ = ["scatter_svg", "line_svg", "heatmap_svg", "paths_svg"]

W, H = 480, 360
PAD_L, PAD_R, PAD_T, PAD_B = 56, 16, 28, 40
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


class _Frame:
    def __init__(self, xlim, ylim, title="", xlabel="", ylabel=""):
        self.x0, self.x1 = _pad_range(xlim)
        self.y0, self.y1 = _pad_range(ylim)
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
            f'<rect width="{W}" height="{H}" fill="white"/>',
        ]
        self.title, self.xlabel, self.ylabel = title, xlabel, ylabel

    def px(self, x):
        return PAD_L + (np.asarray(x) - self.x0) / (self.x1 - self.x0) * (W - PAD_L - PAD_R)

    def py(self, y):
        return H - PAD_B - (np.asarray(y) - self.y0) / (self.y1 - self.y0) * (H - PAD_T - PAD_B)

    def add(self, s):
        self.parts.append(s)

    def finish(self, legend=()):
        x_lo, x_hi, y_lo, y_hi = PAD_L, W - PAD_R, PAD_T, H - PAD_B
        self.add(f'<rect x="{x_lo}" y="{y_lo}" width="{x_hi - x_lo}" height="{y_hi - y_lo}" fill="none" stroke="black"/>')
        for v in np.linspace(self.x0, self.x1, 5):
            x = self.px(v)
            self.add(f'<text x="{x:.1f}" y="{y_hi + 14}" font-size="10" text-anchor="middle">{v:.3g}</text>')
        for v in np.linspace(self.y0, self.y1, 5):
            y = self.py(v)
            self.add(f'<text x="{x_lo - 4}" y="{y + 3:.1f}" font-size="10" text-anchor="end">{v:.3g}</text>')
        self.add(f'<text x="{W / 2}" y="{H - 6}" font-size="12" text-anchor="middle">{escape(self.xlabel)}</text>')
        self.add(
            f'<text x="12" y="{H / 2}" font-size="12" text-anchor="middle" '
            f'transform="rotate(-90 12 {H / 2})">{escape(self.ylabel)}</text>'
        )
        self.add(f'<text x="{W / 2}" y="18" font-size="13" text-anchor="middle">{escape(self.title)}</text>')
        for i, (name, color) in enumerate(legend):
            y = y_lo + 12 + 14 * i
            self.add(f'<rect x="{x_hi - 110}" y="{y - 8}" width="10" height="10" fill="{color}"/>')
            self.add(f'<text x="{x_hi - 96}" y="{y + 1}" font-size="11">{escape(str(name))}</text>')
        self.add("</svg>")
        return "\n".join(self.parts) + "\n"


def _pad_range(lim):
    lo, hi = float(lim[0]), float(lim[1])
    if not np.isfinite(lo) or not np.isfinite(hi):
        lo, hi = 0.0, 1.0
    if hi <= lo:
        lo, hi = lo - 0.5, hi + 0.5
    return lo, hi


def _limits(arrays):
    v = np.concatenate([np.asarray(a, dtype=float).ravel() for a in arrays])
    v = v[np.isfinite(v)]
    if v.size == 0:
        return 0.0, 1.0
    lo, hi = v.min(), v.max()
    m = 0.05 * (hi - lo) if hi > lo else 0.5
    return lo - m, hi + m


def scatter_svg(series: dict, title="", xlabel="x", ylabel="y", radius=1.5):
    """``series`` maps a label to an (n, 2) array."""
    pts = [np.asarray(p, dtype=float).reshape(-1, 2) for p in series.values()]
    f = _Frame(_limits([p[:, 0] for p in pts]), _limits([p[:, 1] for p in pts]), title, xlabel, ylabel)
    legend = []
    for i, (name, p) in enumerate(zip(series, pts)):
        color = PALETTE[i % len(PALETTE)]
        legend.append((name, color))
        xs, ys = f.px(p[:, 0]), f.py(p[:, 1])
        f.add(f'<g fill="{color}" fill-opacity="0.5">')
        f.add("".join(f'<circle cx="{x:.1f}" cy="{y:.1f}" r="{radius}"/>' for x, y in zip(xs, ys)))
        f.add("</g>")
    return f.finish(legend)


def line_svg(series: dict, title="", xlabel="x", ylabel="y", log_x=False):
    """``series`` maps a label to ``(x, y)`` or ``(x, y, yerr)``."""
    tx = np.log10 if log_x else (lambda a: np.asarray(a, dtype=float))
    xs = [tx(np.asarray(s[0], dtype=float)) for s in series.values()]
    ys = []
    for s in series.values():
        y = np.asarray(s[1], dtype=float)
        e = np.asarray(s[2], dtype=float) if len(s) > 2 else np.zeros_like(y)
        ys += [y - e, y + e]
    f = _Frame(_limits(xs), _limits(ys), title, ("log10 " if log_x else "") + xlabel, ylabel)
    legend = []
    for i, (name, s) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        legend.append((name, color))
        x = xs[i]
        y = np.asarray(s[1], dtype=float)
        pts = " ".join(f"{a:.1f},{b:.1f}" for a, b in zip(f.px(x), f.py(y)))
        f.add(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        if len(s) > 2:
            for a, b, e in zip(x, y, np.asarray(s[2], dtype=float)):
                f.add(f'<line x1="{f.px(a):.1f}" x2="{f.px(a):.1f}" y1="{f.py(b - e):.1f}" y2="{f.py(b + e):.1f}" stroke="{color}"/>')
        for a, b in zip(f.px(x), f.py(y)):
            f.add(f'<circle cx="{a:.1f}" cy="{b:.1f}" r="2.5" fill="{color}"/>')
    return f.finish(legend)


def _color(v, lo, hi):
    # white -> dark blue ramp
    u = 0.0 if hi <= lo else float(np.clip((v - lo) / (hi - lo), 0.0, 1.0))
    r = int(round(255 * (1 - u) + 8 * u))
    g = int(round(255 * (1 - u) + 48 * u))
    b = int(round(255 * (1 - u) + 107 * u))
    return f"#{r:02x}{g:02x}{b:02x}"


def heatmap_svg(values, x_centers, y_centers, title="", xlabel="x", ylabel="t"):
    """``values[i, j]`` at ``(x_centers[j], y_centers[i])``; NaN cells are hatched grey."""
    values = np.asarray(values, dtype=float)
    xc = np.asarray(x_centers, dtype=float)
    yc = np.asarray(y_centers, dtype=float)
    dx = (xc[1] - xc[0]) if xc.size > 1 else 1.0
    dy = (yc[1] - yc[0]) if yc.size > 1 else 1.0
    f = _Frame((xc[0] - dx / 2, xc[-1] + dx / 2), (yc[0] - dy / 2, yc[-1] + dy / 2), title, xlabel, ylabel)
    finite = values[np.isfinite(values)]
    lo, hi = (finite.min(), finite.max()) if finite.size else (0.0, 1.0)
    cw = abs(f.px(dx) - f.px(0))
    ch = abs(f.py(dy) - f.py(0))
    for i, y in enumerate(yc):
        for j, x in enumerate(xc):
            v = values[i, j]
            fill = "#bbbbbb" if not np.isfinite(v) else _color(v, lo, hi)
            f.add(
                f'<rect x="{f.px(x - dx / 2):.1f}" y="{f.py(y + dy / 2):.1f}" '
                f'width="{cw:.1f}" height="{ch:.1f}" fill="{fill}"/>'
            )
    f.add(f'<text x="{W - PAD_R}" y="{PAD_T - 4}" font-size="10" text-anchor="end">range {lo:.3g} to {hi:.3g}</text>')
    return f.finish()


def paths_svg(paths, title="", xlabel="x", ylabel="y", color="#1f77b4"):
    """Polylines, one per (k, 2) array."""
    paths = [np.asarray(p, dtype=float).reshape(-1, 2) for p in paths]
    f = _Frame(_limits([p[:, 0] for p in paths]), _limits([p[:, 1] for p in paths]), title, xlabel, ylabel)
    for p in paths:
        pts = " ".join(f"{a:.1f},{b:.1f}" for a, b in zip(f.px(p[:, 0]), f.py(p[:, 1])))
        f.add(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-opacity="0.4" stroke-width="0.8"/>')
    return f.finish()
