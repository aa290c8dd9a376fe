"""Ground-truth cohort generation from the model family.

The generator first lays out a fully observed skeleton (covariates, followup
lengths, baseline outcomes), assembles the requested designs on it, then
draws class labels, random effects and outcomes from the mixture model, and
finally applies one of three missingness mechanisms: MCAR (coin flips), MAR
(logistic in the time-varying design only), or LATENT (class-dependent
presence model with its own random intercepts, the nonignorable case).
Events are generated from the true outcome values so that downstream
event-model analyses have a known target.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .design import Designs, DesignSpec, StackedData, assemble_designs
from .errors import ConfigurationError
from .panel import Panel, Patient, Record
from .rng import RngStream, as_stream
from .splines import SplineBasisSpec


@dataclass(frozen=True)
class Mechanism:
    """Missingness mechanism: 'mcar', 'mar', or 'latent'."""

    kind: str = "mcar"
    p: float = 0.0                      # mcar masking probability
    mar_coef: tuple[float, ...] = ()    # logit coefficients on the presence fixed design
    nu: tuple[float, ...] = ()          # latent: presence fixed effects
    gamma: np.ndarray | None = None     # latent: (L, q2) class effects, row 0 zero
    e_var: float = 1e-12                # latent: presence random-intercept variance

    def __post_init__(self):
        if self.kind not in ("mcar", "mar", "latent"):
            raise ConfigurationError(f"unknown mechanism kind '{self.kind}'")
        if self.kind == "mcar" and not 0.0 <= self.p <= 1.0:
            raise ConfigurationError("mcar masking probability must be in [0, 1]")


@dataclass(frozen=True)
class EventModel:
    """Adverse-event generator: logistic in the true outcome value.

    kind 'category' uses one logit per A1c category; kind 'quadratic' uses
    intercept + linear + quadratic terms in the value itself.
    """

    kind: str = "category"
    category_logits: tuple[float, ...] = (-2.2, -2.6, -2.8, -2.6, -2.2, -1.8, -1.2)
    quadratic: tuple[float, float, float] = (0.0, 0.0, 0.0)


@dataclass(frozen=True)
class GeneratorConfig:
    n: int = 500
    L: int = 3
    T: tuple[int, int] = (8, 40)        # inclusive followup-length range
    n_baseline_normal: int = 1
    n_baseline_binary: int = 1
    n_time_varying: int = 0
    baseline_outcome_mean: float = 7.0
    baseline_outcome_sd: float = 1.0
    eta: np.ndarray | None = None       # (L, d); row 0 zero
    beta: np.ndarray | None = None      # (p,)
    beta_star: np.ndarray | None = None  # (L, q); row 0 zero
    sigma2: np.ndarray | None = None    # (L,)
    Sigma_r: np.ndarray | None = None   # (r, r)
    design: DesignSpec = field(default_factory=DesignSpec)
    presence_design: DesignSpec | None = None
    mechanism: Mechanism = field(default_factory=Mechanism)
    events: EventModel = field(default_factory=EventModel)
    seed: int = 0


@dataclass
class GroundTruth:
    labels: np.ndarray
    eta: np.ndarray
    beta: np.ndarray
    beta_star: np.ndarray
    sigma2: np.ndarray
    Sigma_r: np.ndarray
    b: np.ndarray
    full_outcomes: np.ndarray  # (n, Tmax), NaN beyond each T_i
    observed: np.ndarray       # (n, Tmax) mask after the mechanism
    valid: np.ndarray
    events: np.ndarray
    presence_nu: np.ndarray | None = None
    presence_gamma: np.ndarray | None = None
    presence_e: np.ndarray | None = None
    panel_full: Panel | None = None

    def to_json_dict(self) -> dict:
        out = {
            "labels": self.labels.tolist(),
            "eta": self.eta.tolist(),
            "beta": self.beta.tolist(),
            "beta_star": self.beta_star.tolist(),
            "sigma2": self.sigma2.tolist(),
            "Sigma_r": self.Sigma_r.tolist(),
        }
        if self.presence_nu is not None:
            out["presence_nu"] = self.presence_nu.tolist()
            out["presence_gamma"] = self.presence_gamma.tolist()
        return out


def _skeleton_panel(config: GeneratorConfig, rng: np.random.Generator):
    """Fully observed placeholder panel carrying covariates and lengths."""
    lo, hi = config.T
    if lo < 1 or hi < lo:
        raise ConfigurationError(f"invalid followup range {config.T}")
    lengths = rng.integers(lo, hi + 1, size=config.n)
    base_out = rng.normal(config.baseline_outcome_mean, config.baseline_outcome_sd,
                          size=config.n)
    covs = {}
    for k in range(config.n_baseline_normal):
        covs[f"x_norm{k + 1}"] = rng.standard_normal(config.n)
    for k in range(config.n_baseline_binary):
        covs[f"x_bin{k + 1}"] = rng.integers(0, 2, size=config.n).astype(float)
    tv_names = tuple(f"tv{k + 1}" for k in range(config.n_time_varying))
    patients = []
    tv_values = {}
    for i in range(config.n):
        ti = int(lengths[i])
        tv_values[i] = {name: rng.standard_normal(ti) for name in tv_names}
        followup = [Record(j + 1, 0.0, 0, {name: float(tv_values[i][name][j])
                                           for name in tv_names})
                    for j in range(ti)]
        patients.append(Patient(f"p{i + 1:05d}",
                                {name: float(covs[name][i]) for name in covs},
                                float(base_out[i]), followup))
    return Panel(patients, tv_names, tuple(covs.keys())), lengths


def _truth_params(config: GeneratorConfig, designs: Designs, presence: Designs | None):
    L = config.L
    eta = config.eta if config.eta is not None else np.zeros((L, designs.d))
    eta = np.asarray(eta, dtype=float)
    if eta.shape != (L, designs.d):
        raise ConfigurationError(f"eta must have shape {(L, designs.d)}, got {eta.shape}")
    if np.any(eta[0] != 0.0):
        raise ConfigurationError("eta row 1 must be zero (reference class)")
    beta = np.asarray(config.beta, dtype=float) if config.beta is not None \
        else np.zeros(designs.p)
    beta_star = np.asarray(config.beta_star, dtype=float) if config.beta_star is not None \
        else np.zeros((L, designs.q))
    if np.any(beta_star[0] != 0.0):
        raise ConfigurationError("beta_star row 1 must be zero (reference class)")
    sigma2 = np.asarray(config.sigma2, dtype=float) if config.sigma2 is not None \
        else np.full(L, 0.25)
    Sigma_r = np.atleast_2d(np.asarray(config.Sigma_r, dtype=float)) \
        if config.Sigma_r is not None else 0.09 * np.eye(designs.r)
    if np.any(sigma2 <= 0):
        raise ConfigurationError("sigma2 must be positive")
    return eta, beta, beta_star, sigma2, Sigma_r


def generate(config: GeneratorConfig, rng: RngStream | int | None = None
             ) -> tuple[Panel, GroundTruth]:
    """Draw a masked panel plus the full ground truth."""
    stream = as_stream(config.seed if rng is None else rng)
    g = stream.substream(0).generator()
    skeleton, lengths = _skeleton_panel(config, g)
    designs = assemble_designs(skeleton, config.design)
    presence_designs = assemble_designs(skeleton, config.presence_design) \
        if config.presence_design is not None else None
    data = StackedData(skeleton, designs, presence_designs)
    eta, beta, beta_star, sigma2, Sigma_r = _truth_params(config, designs, presence_designs)

    # class labels and outcomes
    z = data.X0 @ eta.T
    z -= z.max(axis=1, keepdims=True)
    probs = np.exp(z)
    probs /= probs.sum(axis=1, keepdims=True)
    labels = (g.random(config.n)[:, None] > np.cumsum(probs, axis=1)).sum(axis=1)
    labels = np.minimum(labels, config.L - 1)
    chol_r = np.linalg.cholesky(Sigma_r)
    b = g.standard_normal((config.n, designs.r)) @ chol_r.T
    mu = np.einsum("ntp,p->nt", data.D, beta) \
        + np.einsum("ntq,nq->nt", data.Ds, beta_star[labels]) \
        + np.einsum("ntr,nr->nt", data.Dr, b)
    noise = g.standard_normal(mu.shape) * np.sqrt(sigma2[labels])[:, None]
    y_full = np.where(data.valid, mu + noise, np.nan)

    # missingness
    mech = config.mechanism
    presence_nu = presence_gamma = presence_e = None
    if mech.kind == "mcar":
        observed = data.valid & (g.random(y_full.shape) >= mech.p)
    elif mech.kind == "mar":
        if presence_designs is None:
            raise ConfigurationError("mar mechanism requires a presence_design")
        coef = np.asarray(mech.mar_coef, dtype=float)
        if coef.shape != (presence_designs.p,):
            raise ConfigurationError(
                f"mar_coef must have shape {(presence_designs.p,)}, got {coef.shape}")
        lp = np.einsum("ntp,p->nt", data.Dp, coef)
        observed = data.valid & (g.random(lp.shape) < 1.0 / (1.0 + np.exp(-lp)))
        presence_nu = coef
    else:  # latent, class-dependent presence
        if presence_designs is None:
            raise ConfigurationError("latent mechanism requires a presence_design")
        nu = np.asarray(mech.nu, dtype=float)
        gamma = np.asarray(mech.gamma, dtype=float) if mech.gamma is not None \
            else np.zeros((config.L, presence_designs.q))
        if nu.shape != (presence_designs.p,):
            raise ConfigurationError(
                f"nu must have shape {(presence_designs.p,)}, got {nu.shape}")
        if np.any(gamma[0] != 0.0):
            raise ConfigurationError("presence gamma row 1 must be zero")
        e = g.standard_normal((config.n, presence_designs.r)) * np.sqrt(mech.e_var)
        lp = np.einsum("ntp,p->nt", data.Dp, nu) \
            + np.einsum("ntq,nq->nt", data.Dps, gamma[labels]) \
            + np.einsum("ntr,nr->nt", data.Dpr, e)
        observed = data.valid & (g.random(lp.shape) < 1.0 / (1.0 + np.exp(-lp)))
        presence_nu, presence_gamma, presence_e = nu, gamma, e

    # adverse events from the true outcome values
    ev = config.events
    if ev.kind == "category":
        from .analysis import categorize_a1c_index
        cat = categorize_a1c_index(np.where(data.valid, np.abs(y_full) + 1e-9, 1.0))
        logit = np.asarray(ev.category_logits, dtype=float)[cat]
    else:
        a0, a1, a2 = ev.quadratic
        logit = a0 + a1 * y_full + a2 * y_full ** 2
    p_event = 1.0 / (1.0 + np.exp(-np.nan_to_num(logit)))
    events = (g.random(p_event.shape) < p_event) & data.valid

    # inclusion rule: patients need at least one observed followup outcome
    keep = observed.any(axis=1)
    if not keep.all():
        skeleton = Panel([p for i, p in enumerate(skeleton.patients) if keep[i]],
                         skeleton.time_varying_names, skeleton.baseline_covariate_names,
                         skeleton.baseline_quarters)
        labels, b = labels[keep], b[keep]
        y_full, observed = y_full[keep], observed[keep]
        events = events[keep]
        valid = data.valid[keep]
        if presence_e is not None:
            presence_e = presence_e[keep]
    else:
        valid = data.valid

    masked_panel = _panel_from_arrays(skeleton, y_full, observed, events)
    full_panel = _panel_from_arrays(skeleton, y_full, valid, events)
    truth = GroundTruth(labels=labels, eta=eta, beta=beta, beta_star=beta_star,
                        sigma2=sigma2, Sigma_r=Sigma_r, b=b, full_outcomes=y_full,
                        observed=observed, valid=valid, events=events.astype(int),
                        presence_nu=presence_nu, presence_gamma=presence_gamma,
                        presence_e=presence_e, panel_full=full_panel)
    return masked_panel, truth


def _panel_from_arrays(skeleton: Panel, y: np.ndarray, observed: np.ndarray,
                       events: np.ndarray) -> Panel:
    patients = []
    for i, pat in enumerate(skeleton.patients):
        followup = [
            Record(rec.quarter_index,
                   float(y[i, j]) if observed[i, j] else None,
                   int(events[i, j]),
                   dict(rec.time_varying))
            for j, rec in enumerate(pat.followup)
        ]
        patients.append(Patient(pat.patient_id, dict(pat.baseline_covariates),
                                pat.baseline_outcome, followup))
    return Panel(patients, skeleton.time_varying_names,
                 skeleton.baseline_covariate_names, skeleton.baseline_quarters)


def _project_curve(targets, spec: SplineBasisSpec, t_grid: np.ndarray) -> np.ndarray:
    """Least-squares coefficients reproducing a target curve in the basis."""
    from .splines import knots_from_times, spline_basis
    knots = knots_from_times(t_grid, spec)
    basis = spline_basis(t_grid, spec, knots)
    coef, *_ = np.linalg.lstsq(basis, targets, rcond=None)
    return coef


def paper_like_config(n: int = 500, seed: int = 0, mechanism: Mechanism | None = None,
                      t_range: tuple[int, int] = (8, 40)) -> GeneratorConfig:
    """Three-class preset: flat, rising, and U-shaped trajectory contrasts on
    the default six-knot cubic basis, distinct noise scales, roughly half the
    cells missing under the default mechanism. All numbers are testing
    conveniences."""
    spec = SplineBasisSpec()
    t_grid = np.arange(1, t_range[1] + 1) / 4.0
    tmax = t_grid[-1]
    rising = 1.8 * (t_grid / tmax)
    u_shape = 2.4 * (4.0 * (t_grid / tmax - 0.5) ** 2 - 0.4)
    q = spec.n_columns
    beta_star = np.zeros((3, q))
    beta_star[1] = _project_curve(rising, spec, t_grid)
    beta_star[2] = _project_curve(u_shape, spec, t_grid)
    eta = np.array([
        [0.0, 0.0, 0.0, 0.0],
        [-2.8, 0.4, 0.3, -0.2],
        [-4.2, 0.6, -0.2, 0.4],
    ])
    design = DesignSpec(fixed=("1",), profile=("spline",), random=("1",), spline=spec)
    return GeneratorConfig(
        n=n, L=3, T=t_range,
        eta=eta,
        beta=np.array([7.0]),
        beta_star=beta_star,
        sigma2=np.array([0.16, 0.25, 0.36]),
        Sigma_r=np.array([[0.09]]),
        design=design,
        presence_design=DesignSpec(fixed=("1", "time"), profile=("spline",),
                                   random=("1",), spline=spec),
        mechanism=mechanism if mechanism is not None else Mechanism(kind="mcar", p=0.5),
        events=EventModel(),
        seed=seed,
    )


def write_truth_json(truth: GroundTruth, path) -> None:
    with open(path, "w") as fh:
        json.dump(truth.to_json_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
