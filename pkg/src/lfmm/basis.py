"""Linear B-spline (hat function) basis on a uniform knot grid.

With knots placed at the observation times, basis function ``k`` equals one
at grid time ``t_k`` and zero at every other grid time, so a curve's value at
``t_k`` is exactly its ``k``-th coefficient.
"""
from dataclasses import dataclass
import math

import numpy as np

from .exceptions import InvalidArgumentError, OutOfDomainError

__all__ = ["KnotGrid", "build_grid", "eval_basis", "eval_curve", "design_matrix"]


@dataclass(frozen=True)
class KnotGrid:
    """Uniform grid of ``num_points`` knots spanning ``[lower, upper]``."""

    lower: float
    upper: float
    num_points: int

    @property
    def num_intervals(self):
        return self.num_points - 1

    @property
    def spacing(self):
        return (self.upper - self.lower) / (self.num_points - 1)

    @property
    def knots(self):
        return self.lower + self.spacing * np.arange(self.num_points)


def build_grid(lower, upper, num_points):
    """Build the knot grid with ``num_points`` basis functions.

    Raises
    ------
    InvalidArgumentError
        For non-finite bounds, ``upper <= lower`` or fewer than two points.
    """
    lower = float(lower)
    upper = float(upper)
    if not (math.isfinite(lower) and math.isfinite(upper)):
        raise InvalidArgumentError("grid bounds must be finite")
    if upper <= lower:
        raise InvalidArgumentError(f"upper ({upper}) must exceed lower ({lower})")
    if int(num_points) != num_points or num_points < 2:
        raise InvalidArgumentError(f"num_points must be an integer >= 2, got {num_points}")
    return KnotGrid(lower, upper, int(num_points))


def _locate(grid, t):
    t = np.asarray(t, dtype=float)
    if np.any(~np.isfinite(t)) or np.any(t < grid.lower) or np.any(t > grid.upper):
        raise OutOfDomainError(f"t must lie in [{grid.lower}, {grid.upper}]")
    u = (t - grid.lower) / grid.spacing
    left = np.minimum(np.floor(u).astype(np.intp), grid.num_points - 2)
    frac = u - left
    return t, left, frac


def eval_basis(grid, t):
    """Basis weights at ``t``.

    Scalar ``t`` gives a length-K vector; an array of shape ``(n,)`` gives an
    ``(n, K)`` matrix. At most two weights are nonzero and they sum to one.
    """
    t, left, frac = _locate(grid, t)
    scalar = t.ndim == 0
    left = np.atleast_1d(left)
    frac = np.atleast_1d(frac)
    out = np.zeros((left.size, grid.num_points))
    rows = np.arange(left.size)
    out[rows, left] = 1.0 - frac
    out[rows, left + 1] += frac
    return out[0] if scalar else out


def design_matrix(grid, times):
    return eval_basis(grid, np.asarray(times, dtype=float).reshape(-1))


def eval_curve(grid, coefficients, t):
    """Evaluate ``sum_k coefficients[k] * b_k(t)``."""
    coefficients = np.asarray(coefficients, dtype=float)
    if coefficients.shape != (grid.num_points,):
        raise InvalidArgumentError(
            f"expected {grid.num_points} coefficients, got shape {coefficients.shape}"
        )
    t, left, frac = _locate(grid, t)
    # exact at knots: frac == 0 picks the left coefficient untouched
    value = coefficients[left] * (1.0 - frac) + np.where(
        frac > 0, coefficients[np.minimum(left + 1, grid.num_points - 1)] * frac, 0.0
    )
    return float(value) if np.ndim(value) == 0 else value
