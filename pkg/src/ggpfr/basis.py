"""Cubic B-spline basis for the functional coefficient of the mean structure.

Knots carry boundary multiplicity degree+1, so the D basis functions form a
partition of unity on the pooled time range.  Evaluation outside the range
clamps the argument to the nearest boundary knot: test points may fall just
outside an individual curve's observed span, and clamping avoids unbounded
polynomial extrapolation there.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import BSpline

from .exceptions import ValidationError

EQUAL_SPACED = "equal-spaced"
QUANTILE = "quantile"

DEGREE = 3


@dataclass(frozen=True, eq=False)
class SplineBasis:
    """Cubic B-spline basis defined by a full (clamped) knot vector."""

    knots: np.ndarray
    degree: int = DEGREE

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=float)
        if knots.ndim != 1 or knots.size < 2 * (self.degree + 1):
            raise ValidationError("knot vector too short for the degree")
        if not np.all(np.isfinite(knots)) or np.any(np.diff(knots) < 0):
            raise ValidationError("knots must be finite and non-decreasing")
        object.__setattr__(self, "knots", knots)

    def __eq__(self, other):
        if not isinstance(other, SplineBasis):
            return NotImplemented
        return self.degree == other.degree and np.array_equal(self.knots, other.knots)

    def __hash__(self):
        return hash((self.degree, self.knots.tobytes()))

    @property
    def size(self) -> int:
        """Number of basis functions D."""
        return self.knots.size - self.degree - 1

    @property
    def t_min(self) -> float:
        return float(self.knots[self.degree])

    @property
    def t_max(self) -> float:
        return float(self.knots[-self.degree - 1])


def place_knots(times_all, size: int, method: str = EQUAL_SPACED) -> SplineBasis:
    """Build a cubic basis with ``size`` functions from pooled time points.

    ``equal-spaced`` puts the size-4 interior knots on an even grid over
    [min t, max t]; ``quantile`` puts them at the equally spaced sample
    quantiles of the pooled times.
    """
    t = np.asarray(times_all, dtype=float).ravel()
    if t.size == 0 or not np.all(np.isfinite(t)):
        raise ValidationError("need a non-empty finite time vector")
    if size < DEGREE + 1:
        raise ValidationError(f"basis size must be >= {DEGREE + 1}")
    lo, hi = float(np.min(t)), float(np.max(t))
    if lo == hi:
        raise ValidationError("all time points identical")
    n_int = size - (DEGREE + 1)
    if method == EQUAL_SPACED:
        interior = np.linspace(lo, hi, n_int + 2)[1:-1]
    elif method == QUANTILE:
        levels = np.arange(1, n_int + 1) / (n_int + 1)
        interior = np.quantile(t, levels)
    else:
        raise ValidationError(f"unknown knot method {method!r}")
    knots = np.concatenate((np.full(DEGREE + 1, lo), interior, np.full(DEGREE + 1, hi)))
    return SplineBasis(knots)


def design_matrix(basis: SplineBasis, times) -> np.ndarray:
    """N x D matrix of basis values at the given times (clamped to the domain)."""
    t = np.clip(np.asarray(times, dtype=float).ravel(), basis.t_min, basis.t_max)
    return BSpline.design_matrix(t, basis.knots, basis.degree).toarray()


def basis_row(basis: SplineBasis, t: float) -> np.ndarray:
    """Basis values at a single time point; non-negative and summing to 1."""
    return design_matrix(basis, [t])[0]
