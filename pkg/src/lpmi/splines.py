"""B-spline basis construction over followup time.

Knots are placed at quantiles of the pooled observed times so that every
patient shares one basis. Default is six interior knots at the
(1, 15, 20, 50, 75, 90) percent quantiles with cubic pieces, giving nine
basis columns once the global intercept is excluded (the intercept lives in
the fixed-effect design).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import BSpline

from .errors import ConfigurationError

DEFAULT_KNOT_QUANTILES = (0.01, 0.15, 0.20, 0.50, 0.75, 0.90)


@dataclass(frozen=True)
class SplineBasisSpec:
    """Recipe for the shared time basis."""

    knot_quantiles: tuple[float, ...] = DEFAULT_KNOT_QUANTILES
    degree: int = 3
    include_intercept_in_basis: bool = False

    def __post_init__(self):
        q = np.asarray(self.knot_quantiles, dtype=float)
        if q.size and (np.any(q <= 0.0) or np.any(q >= 1.0)):
            raise ConfigurationError("knot quantiles must lie strictly inside (0, 1)")
        if q.size > 1 and np.any(np.diff(q) <= 0.0):
            raise ConfigurationError("knot quantiles must be strictly increasing")
        if self.degree < 0:
            raise ConfigurationError("spline degree must be >= 0")

    @property
    def n_columns(self) -> int:
        k = len(self.knot_quantiles) + self.degree + 1
        return k if self.include_intercept_in_basis else k - 1


@dataclass(frozen=True)
class SplineKnots:
    """Resolved knot locations: interior knots plus boundary range."""

    interior: tuple[float, ...]
    lo: float
    hi: float

    def full_vector(self, degree: int) -> np.ndarray:
        return np.concatenate([
            np.full(degree + 1, self.lo),
            np.asarray(self.interior, dtype=float),
            np.full(degree + 1, self.hi),
        ])


def knots_from_times(pooled_times, spec: SplineBasisSpec) -> SplineKnots:
    """Quantile knot locations from the pooled observed times.

    The left boundary knot sits at the time origin (0) when all times are
    positive, since followup time is measured since the baseline period;
    otherwise at the data minimum. The right boundary is the data maximum.
    """
    t = np.asarray(pooled_times, dtype=float)
    t = t[np.isfinite(t)]
    distinct = np.unique(t)
    needed = spec.degree + 1 + len(spec.knot_quantiles)
    if distinct.size < needed:
        raise ConfigurationError(
            f"need at least {needed} distinct pooled times for degree "
            f"{spec.degree} with {len(spec.knot_quantiles)} knots, got {distinct.size}"
        )
    lo, hi = min(0.0, float(distinct[0])), float(distinct[-1])
    interior = np.quantile(t, spec.knot_quantiles)
    knots = np.unique(interior)
    if knots.size != interior.size or knots[0] <= lo or knots[-1] >= hi:
        raise ConfigurationError(
            "knot quantiles produce duplicate or boundary-coincident knots; "
            "use fewer knots or supply more distinct times"
        )
    return SplineKnots(tuple(float(k) for k in interior), lo, hi)


def spline_basis(times, spec: SplineBasisSpec, knots_from) -> np.ndarray:
    """Evaluate the shared B-spline basis at the given times.

    ``knots_from`` is either the pooled observed times (knots are placed at
    the spec quantiles) or an already-resolved SplineKnots. Times outside the
    boundary-knot range are clamped to the nearest boundary rather than
    extrapolated, so imputation beyond the observed range stays bounded.
    """
    knots = knots_from if isinstance(knots_from, SplineKnots) else knots_from_times(knots_from, spec)
    x = np.clip(np.asarray(times, dtype=float), knots.lo, knots.hi)
    tvec = knots.full_vector(spec.degree)
    basis = BSpline.design_matrix(x, tvec, spec.degree).toarray()
    if not spec.include_intercept_in_basis:
        basis = basis[:, 1:]
    return basis
