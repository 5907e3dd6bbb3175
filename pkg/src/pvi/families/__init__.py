"""Reparameterized variational families."""

from .base import Family, KLValue, ParamLayout
from .gaussian import GaussianDense, GaussianDiag
from .spline import Spline1D

__all__ = [
    "Family",
    "GaussianDense",
    "GaussianDiag",
    "KLValue",
    "ParamLayout",
    "Spline1D",
    "make_family",
]


def make_family(kind: str, dim: int = 1, **options) -> Family:
    if kind == "gaussian_diag":
        return GaussianDiag(dim)
    if kind == "gaussian_dense":
        return GaussianDense(dim)
    if kind == "spline1d":
        if dim != 1:
            raise ValueError("spline1d is one-dimensional")
        return Spline1D(**options)
    raise ValueError(f"unknown family kind {kind!r}")
