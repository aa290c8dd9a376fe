"""Design-matrix assembly and the stacked array layout used by the samplers.

Per patient there are three followup design matrices: fixed-effect columns
(intercept plus time-varying covariates), profile-specific columns (the
shared spline basis by default), and random-effect columns (an intercept by
default). The allocation model uses a separate baseline design. Patients are
then stacked into (n, T_max, .) arrays padded with zero rows, with validity
and presence masks, so every Gibbs block reduces to masked einsums.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError
from .panel import Panel
from .splines import SplineBasisSpec, SplineKnots, knots_from_times, spline_basis

INTERCEPT = "1"
TIME = "time"
SPLINE = "spline"


@dataclass(frozen=True)
class DesignSpec:
    """Column selections for the outcome (or presence) model.

    ``fixed``, ``profile`` and ``random`` pick followup columns from:
    "1" (intercept), "time" (years since baseline), "spline" (the shared
    basis block), or any time-varying covariate name. ``allocation`` picks
    baseline columns from "1", "baseline_outcome", or any baseline covariate
    name; None means intercept + baseline outcome + all baseline covariates.
    """

    fixed: tuple[str, ...] = (INTERCEPT,)
    profile: tuple[str, ...] = (SPLINE,)
    random: tuple[str, ...] = (INTERCEPT,)
    allocation: tuple[str, ...] | None = None
    spline: SplineBasisSpec = field(default_factory=SplineBasisSpec)


@dataclass
class DesignMatrices:
    """Per-patient followup designs: fixed (T x p), profile (T x q), random (T x r)."""

    fixed: np.ndarray
    profile: np.ndarray
    random: np.ndarray


@dataclass
class Designs:
    """Assembled designs for every patient, sharing one spline basis."""

    per_patient: list[DesignMatrices]
    fixed_names: tuple[str, ...]
    profile_names: tuple[str, ...]
    random_names: tuple[str, ...]
    allocation_names: tuple[str, ...]
    x0: np.ndarray  # (n, d) baseline design
    knots: SplineKnots | None
    spec: DesignSpec

    @property
    def p(self) -> int:
        return len(self.fixed_names)

    @property
    def q(self) -> int:
        return len(self.profile_names)

    @property
    def r(self) -> int:
        return len(self.random_names)

    @property
    def d(self) -> int:
        return self.x0.shape[1]


def _quarter_times(patient) -> np.ndarray:
    # followup time in years: quarter index over four quarters per year
    return np.array([r.quarter_index for r in patient.followup], dtype=float) / 4.0


def _expand_columns(selection, panel: Panel, times, basis, patient) -> tuple[np.ndarray, list[str]]:
    cols = []
    names = []
    available = [INTERCEPT, TIME, SPLINE] + list(panel.time_varying_names)
    for name in selection:
        if name == INTERCEPT:
            cols.append(np.ones_like(times))
            names.append(INTERCEPT)
        elif name == TIME:
            cols.append(times)
            names.append(TIME)
        elif name == SPLINE:
            for k in range(basis.shape[1]):
                cols.append(basis[:, k])
                names.append(f"spline{k + 1}")
        elif name in panel.time_varying_names:
            cols.append(np.array([r.time_varying[name] for r in patient.followup]))
            names.append(name)
        else:
            raise ConfigurationError(
                f"unknown design column '{name}'; available: {available}")
    return np.column_stack(cols), names


def assemble_designs(panel: Panel, spec: DesignSpec) -> Designs:
    """Build per-patient design matrices plus the baseline allocation design.

    Spline knots come from the quantiles of the pooled observed-quarter
    times, so all patients share one basis.
    """
    if not spec.profile:
        raise ConfigurationError(
            "profile column selection may not be empty: the mixture would be unidentified")
    if not spec.fixed or not spec.random:
        raise ConfigurationError("fixed and random selections may not be empty")

    needs_spline = SPLINE in spec.fixed + spec.profile + spec.random
    knots = None
    if needs_spline:
        pooled = np.concatenate([
            _quarter_times(p)[[r.observed for r in p.followup]] for p in panel.patients
        ]) if panel.n else np.array([])
        knots = knots_from_times(pooled, spec.spline)

    per_patient = []
    fixed_names = profile_names = random_names = None
    for patient in panel.patients:
        times = _quarter_times(patient)
        basis = (spline_basis(times, spec.spline, knots)
                 if needs_spline else np.zeros((times.size, 0)))
        fixed, fixed_names = _expand_columns(spec.fixed, panel, times, basis, patient)
        profile, profile_names = _expand_columns(spec.profile, panel, times, basis, patient)
        random, random_names = _expand_columns(spec.random, panel, times, basis, patient)
        per_patient.append(DesignMatrices(fixed, profile, random))

    alloc_sel = spec.allocation
    if alloc_sel is None:
        alloc_sel = (INTERCEPT, "baseline_outcome") + tuple(panel.baseline_covariate_names)
    alloc_cols = []
    for name in alloc_sel:
        if name == INTERCEPT:
            alloc_cols.append(np.ones(panel.n))
        elif name == "baseline_outcome":
            alloc_cols.append(np.array([p.baseline_outcome for p in panel.patients]))
        elif name in panel.baseline_covariate_names:
            alloc_cols.append(np.array([p.baseline_covariates[name] for p in panel.patients]))
        else:
            raise ConfigurationError(
                f"unknown allocation column '{name}'; available: "
                f"{['1', 'baseline_outcome'] + list(panel.baseline_covariate_names)}")
    x0 = np.column_stack(alloc_cols) if panel.n else np.zeros((0, len(alloc_sel)))

    designs = Designs(per_patient, tuple(fixed_names or ()), tuple(profile_names or ()),
                      tuple(random_names or ()), tuple(alloc_sel), x0, knots, spec)
    _check_no_zero_columns(designs)
    return designs


def _check_no_zero_columns(designs: Designs) -> None:
    if not designs.per_patient:
        return
    for attr, names in (("fixed", designs.fixed_names), ("profile", designs.profile_names),
                        ("random", designs.random_names)):
        stacked = np.concatenate([getattr(d, attr) for d in designs.per_patient], axis=0)
        dead = np.flatnonzero(~np.any(stacked != 0.0, axis=0))
        if dead.size:
            raise ConfigurationError(
                f"all-zero {attr} design column(s): {[names[i] for i in dead]}")


class Grams:
    """Masked cross-products of the stacked designs, fixed for a given mask."""

    def __init__(self, D, Ds, Dr, mask):
        m = mask.astype(float)[:, :, None]
        self.Dm = D * m
        self.Dsm = Ds * m
        self.Drm = Dr * m
        self.DD = np.einsum("ntp,ntq->npq", self.Dm, D)
        self.DS = np.einsum("ntp,ntq->npq", self.Dm, Ds)
        self.DR = np.einsum("ntp,ntq->npq", self.Dm, Dr)
        self.SS = np.einsum("ntp,ntq->npq", self.Dsm, Ds)
        self.SR = np.einsum("ntp,ntq->npq", self.Dsm, Dr)
        self.RR = np.einsum("ntp,ntq->npq", self.Drm, Dr)
        self.counts = mask.sum(axis=1).astype(float)

    def dy(self, y):
        return np.einsum("ntp,nt->np", self.Dm, y)

    def sy(self, y):
        return np.einsum("ntp,nt->np", self.Dsm, y)

    def ry(self, y):
        return np.einsum("ntp,nt->np", self.Drm, y)


class StackedData:
    """Padded array view of a panel plus designs.

    Outcome values are stored as (n, T_max) with NaN at missing or padded
    cells; ``valid`` marks real followup quarters, ``obs`` marks quarters
    with an observed outcome.
    """

    def __init__(self, panel: Panel, designs: Designs, presence: Designs | None = None):
        self.panel = panel
        self.designs = designs
        self.presence_designs = presence
        n = panel.n
        self.n = n
        self.T = np.array([p.T for p in panel.patients], dtype=int)
        tmax = int(self.T.max()) if n else 0
        self.Tmax = tmax
        self.X0 = designs.x0
        self.Y = np.full((n, tmax), np.nan)
        self.valid = np.zeros((n, tmax), dtype=bool)
        self.obs = np.zeros((n, tmax), dtype=bool)
        self.event = np.zeros((n, tmax), dtype=int)
        p, q, r = designs.p, designs.q, designs.r
        self.D = np.zeros((n, tmax, p))
        self.Ds = np.zeros((n, tmax, q))
        self.Dr = np.zeros((n, tmax, r))
        for i, (patient, mats) in enumerate(zip(panel.patients, designs.per_patient)):
            ti = patient.T
            self.valid[i, :ti] = True
            self.D[i, :ti] = mats.fixed
            self.Ds[i, :ti] = mats.profile
            self.Dr[i, :ti] = mats.random
            for j, rec in enumerate(patient.followup):
                self.event[i, j] = rec.event
                if rec.observed:
                    self.obs[i, j] = True
                    self.Y[i, j] = rec.outcome
        if presence is not None:
            pp, pq, pr = presence.p, presence.q, presence.r
            self.Dp = np.zeros((n, tmax, pp))
            self.Dps = np.zeros((n, tmax, pq))
            self.Dpr = np.zeros((n, tmax, pr))
            for i, (patient, mats) in enumerate(zip(panel.patients, presence.per_patient)):
                ti = patient.T
                self.Dp[i, :ti] = mats.fixed
                self.Dps[i, :ti] = mats.profile
                self.Dpr[i, :ti] = mats.random
        self._grams: dict[str, Grams] = {}

    def grams(self, mode: str) -> Grams:
        """Outcome-side Gram products; mode 'observed' or 'all' (valid cells)."""
        if mode not in self._grams:
            mask = self.obs if mode == "observed" else self.valid
            self._grams[mode] = Grams(self.D, self.Ds, self.Dr, mask)
        return self._grams[mode]

    def presence_grams(self) -> Grams:
        if "presence" not in self._grams:
            self._grams["presence"] = Grams(self.Dp, self.Dps, self.Dpr, self.valid)
        return self._grams["presence"]

    def masked_y(self, mode: str, current: np.ndarray | None = None) -> np.ndarray:
        """Outcome matrix with zeros off-mask; ``current`` supplies imputations."""
        y = self.Y if current is None else current
        mask = self.obs if mode == "observed" else self.valid
        return np.where(mask, np.nan_to_num(y), 0.0)
