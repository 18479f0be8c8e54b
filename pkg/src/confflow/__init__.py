"""Numerical laboratory for prescribed scalar and boundary mean curvature
on one-dimensional warped products with boundary."""

from .errors import ConfflowError, ConfigError, NonConvergence, NumericalError
from .geometry import WarpedModel, build_synthetic_model, build_warped_model
from .conformal import ProblemData

__version__ = "0.1.0"

__all__ = [
    "ConfflowError",
    "ConfigError",
    "NonConvergence",
    "NumericalError",
    "WarpedModel",
    "build_synthetic_model",
    "build_warped_model",
    "ProblemData",
]
