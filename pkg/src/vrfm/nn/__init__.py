"""Minimal reverse-mode autodiff, layers and AdamW used by the flow models."""

from .gradcheck import grad_check, numerical_grad, parameter_grad_check
from .layers import MLP, Linear, Parameter, ParameterSet, mlp_forward, sinusoidal_embed, sinusoidal_frequencies
from .optim import AdamW, OptimizerState, adamw_step
from .tape import OPS, Node, ShapeError, Tape, backward, constant, forward

__all__ = [
    "AdamW",
    "Linear",
    "MLP",
    "Node",
    "OPS",
    "OptimizerState",
    "Parameter",
    "ParameterSet",
    "ShapeError",
    "Tape",
    "adamw_step",
    "backward",
    "constant",
    "forward",
    "grad_check",
    "mlp_forward",
    "numerical_grad",
    "parameter_grad_check",
    "sinusoidal_embed",
    "sinusoidal_frequencies",
]
