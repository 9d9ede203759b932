"""Variational and classic rectified flow matching on small synthetic problems."""

from .estimators import RectifiedFlowMatching, VariationalRectifiedFlowMatching

__version__ = "0.1.0"

__all__ = ["RectifiedFlowMatching", "VariationalRectifiedFlowMatching"]
