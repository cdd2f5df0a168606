"""Dynamic multi-level feature fusion for semantic edge detection.

A numpy/scipy library: a small float64 autograd engine (`dff.tensor`,
`dff.ops`, `dff.optim`), the fusion pipeline with fixed, location-invariant
and location-adaptive weighting (`dff.fusion`), the full model and loss
(`dff.model`), the MF-at-ODS boundary benchmark (`dff.evaluation`) and a
synthetic-data training harness (`dff.harness`).
"""

from .errors import (
    ConfigError,
    DffError,
    DimensionError,
    FileFormatError,
    NumericError,
)
from .tensor import Graph, Tensor, backward, set_finite_checks

__all__ = [
    "ConfigError",
    "DffError",
    "DimensionError",
    "FileFormatError",
    "NumericError",
    "Graph",
    "Tensor",
    "backward",
    "set_finite_checks",
]

__version__ = "0.1.0"
