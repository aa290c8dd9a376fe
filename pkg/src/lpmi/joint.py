"""Joint-profiling Gibbs sampler: outcomes and presence indicators modeled
together, with imputation nested in the loop.

Each iteration draws class labels from allocation x outcome x presence
weights (outcomes over all quarters using the current imputations), runs the
outcome-side blocks of the marginal sampler in joint mode, then the
PG-augmented presence block (fixed effects, profile-specific effects, random
effects, their covariance), and finally redraws the missing outcomes from
the outcome model alone; the presence indicators never enter the imputation
draw, which is exactly the conditional-MAR factorization."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .archive import PosteriorArchive, select_spaced
from .design import Designs, StackedData
from .errors import ConfigurationError, NumericalError
from .marginal import (B_B, B_BETA, B_BETA_STAR, B_CLASS, B_E, B_EE, B_ETA, B_GAMMA,
                       B_IMPUTE, B_INIT, B_NU, B_PG_PRESENCE, B_SIGMA2, B_SIGMA_R,
                       MarginalFitConfig, _archive_meta, _DrawStore, _load_checkpoint,
                       _save_checkpoint, init_state, update_b, update_beta,
                       update_beta_star, update_eta, update_sigma2, update_sigma_r)
from .model import ChainState, PresenceParams, PriorSpec, draw_classes, observed_data_loglik
from .panel import Panel
from .rng import RngStream
from .samplers import sample_invwishart, sample_mvn, sample_pg

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class JointFitConfig(MarginalFitConfig):
    """Joint-mode chain settings; M completed panels are captured at equally
    spaced retained iterations chosen before the run starts."""

    M: int = 100

    def __post_init__(self):
        super().__post_init__()
        if self.M < 1:
            raise ConfigurationError("M must be >= 1")
        if self.M > self.n_retained:
            raise ConfigurationError(
                f"M={self.M} exceeds the {self.n_retained} retained draws")


def presence_linear_predictor(data: StackedData, state: ChainState) -> np.ndarray:
    pres = state.presence
    return np.einsum("ntp,p->nt", data.Dp, pres.nu) \
        + np.einsum("ntq,nq->nt", data.Dps, pres.gamma[state.allocation]) \
        + np.einsum("ntr,nr->nt", data.Dpr, pres.e)


def draw_pg_presence(state: ChainState, data: StackedData, rng: np.random.Generator) -> None:
    """PG auxiliaries for every valid patient-quarter, given current params."""
    lp = presence_linear_predictor(data, state)
    w = np.full(lp.shape, 0.25)
    w[data.valid] = sample_pg(lp[data.valid], rng)
    state.pg_presence = w


def _kappa(data: StackedData) -> np.ndarray:
    # R_ij - 1/2 on valid cells, zero elsewhere
    return np.where(data.valid, data.obs.astype(float) - 0.5, 0.0)


def nu_conditional(state: ChainState, data: StackedData, priors: PriorSpec):
    """Normal conditional (mean, cov) of the presence fixed effects given the
    PG auxiliaries; the offset rows subtract the profile and random-effect
    contributions weighted by w*."""
    pres = state.presence
    w = np.where(data.valid, state.pg_presence, 0.0)
    kv = _kappa(data) - w * (
        np.einsum("ntq,nq->nt", data.Dps, pres.gamma[state.allocation])
        + np.einsum("ntr,nr->nt", data.Dpr, pres.e))
    prec = np.linalg.inv(priors.Sigma_nu) \
        + np.einsum("ntp,nt,ntq->pq", data.Dp, w, data.Dp)
    cov = np.linalg.inv(prec)
    mean = cov @ np.einsum("ntp,nt->p", data.Dp, kv)
    return mean, cov


def update_nu(state: ChainState, data: StackedData, priors: PriorSpec,
              rng: np.random.Generator) -> None:
    mean, cov = nu_conditional(state, data, priors)
    state.presence.nu = sample_mvn(mean, cov, rng)


def gamma_conditional(state: ChainState, data: StackedData, priors: PriorSpec, l: int):
    """Normal conditional (mean, cov) of presence profile row l on class-l
    rows; the prior when the class is empty."""
    pres = state.presence
    members = state.allocation == l
    if not members.any():
        return np.zeros(pres.gamma.shape[1]), priors.Sigma_gamma
    w = np.where(data.valid, state.pg_presence, 0.0)
    base = np.einsum("ntp,p->nt", data.Dp, pres.nu) \
        + np.einsum("ntr,nr->nt", data.Dpr, pres.e)
    kg = _kappa(data) - w * base
    prec = np.linalg.inv(priors.Sigma_gamma) \
        + np.einsum("ntq,nt,ntk->qk", data.Dps[members], w[members], data.Dps[members])
    cov = np.linalg.inv(prec)
    mean = cov @ np.einsum("ntq,nt->q", data.Dps[members], kg[members])
    return mean, cov


def update_gamma(state: ChainState, data: StackedData, priors: PriorSpec,
                 rng: np.random.Generator) -> None:
    """Profile-specific presence effects on each class's rows (rows 2..L)."""
    for l in range(1, state.L):
        if not (state.allocation == l).any():
            logger.warning("class %d empty: drawing presence effects from the prior", l + 1)
        mean, cov = gamma_conditional(state, data, priors, l)
        state.presence.gamma[l] = sample_mvn(mean, cov, rng)


def e_conditional(state: ChainState, data: StackedData, priors: PriorSpec):
    """Normal conditionals of the presence random effects: (means, covs)."""
    pres = state.presence
    w = np.where(data.valid, state.pg_presence, 0.0)
    ke = _kappa(data) - w * (
        np.einsum("ntp,p->nt", data.Dp, pres.nu)
        + np.einsum("ntq,nq->nt", data.Dps, pres.gamma[state.allocation]))
    e_inv = np.linalg.inv(pres.E)
    prec = e_inv[None, :, :] + np.einsum("ntr,nt,ntk->nrk", data.Dpr, w, data.Dpr)
    cov = np.linalg.inv(prec)
    mean = np.einsum("nrk,nk->nr", cov, np.einsum("ntr,nt->nr", data.Dpr, ke))
    return mean, cov


def update_e(state: ChainState, data: StackedData, priors: PriorSpec,
             rng: np.random.Generator) -> None:
    """Presence random effects, batched across patients."""
    pres = state.presence
    mean, cov = e_conditional(state, data, priors)
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        chol = np.linalg.cholesky(cov + 1e-12 * np.eye(cov.shape[1])[None, :, :])
    pres.e = mean + np.einsum("nrk,nk->nr", chol, rng.standard_normal(pres.e.shape))


def E_conditional(state: ChainState, data: StackedData, priors: PriorSpec):
    pres = state.presence
    return data.n + priors.nu_e, pres.e.T @ pres.e + priors.Sigma_e


def update_E(state: ChainState, data: StackedData, priors: PriorSpec,
             rng: np.random.Generator) -> None:
    dof, scale = E_conditional(state, data, priors)
    state.presence.E = sample_invwishart(dof, scale, rng)


def update_presence_block(state: ChainState, data: StackedData, priors: PriorSpec,
                          rng: np.random.Generator) -> None:
    """Appendix presence steps in order: PG auxiliaries, fixed effects,
    profile effects, random effects, random-effect covariance."""
    draw_pg_presence(state, data, rng)
    update_nu(state, data, priors, rng)
    update_gamma(state, data, priors, rng)
    update_e(state, data, priors, rng)
    update_E(state, data, priors, rng)


def impute_step(state: ChainState, data: StackedData, rng: np.random.Generator) -> None:
    """Redraw missing outcomes from the outcome model at the current state;
    observed cells pass through untouched."""
    out = state.outcome
    mu = np.einsum("ntp,p->nt", data.D, out.beta) \
        + np.einsum("ntq,nq->nt", data.Ds, out.beta_star[state.allocation]) \
        + np.einsum("ntr,nr->nt", data.Dr, out.b)
    sigma = np.sqrt(out.sigma2[state.allocation])[:, None]
    missing = data.valid & ~data.obs
    y = np.where(data.obs, np.nan_to_num(data.Y), 0.0)
    state.imputed_Y = np.where(missing, mu + sigma * rng.standard_normal(mu.shape), y)


def _iterate_joint(state: ChainState, data: StackedData, priors: PriorSpec,
                   stream: RngStream, it: int) -> None:
    gen = lambda block: stream.substream(it, block).generator()
    state.allocation = draw_classes(data, state, "joint", gen(B_CLASS))
    update_beta_star(state, data, priors, gen(B_BETA_STAR), "joint")
    update_eta(state, data, priors, gen(B_ETA))
    update_beta(state, data, priors, gen(B_BETA), "joint")
    update_sigma2(state, data, priors, gen(B_SIGMA2), "joint")
    update_sigma_r(state, data, priors, gen(B_SIGMA_R))
    update_b(state, data, priors, gen(B_B), "joint")
    draw_pg_presence(state, data, gen(B_PG_PRESENCE))
    update_nu(state, data, priors, gen(B_NU))
    update_gamma(state, data, priors, gen(B_GAMMA))
    update_e(state, data, priors, gen(B_E))
    update_E(state, data, priors, gen(B_EE))
    impute_step(state, data, gen(B_IMPUTE))


def run_joint_chain(panel: Panel, outcome_designs: Designs, presence_designs: Designs,
                    config: JointFitConfig, priors: PriorSpec | None = None,
                    checkpoint_dir=None, checkpoint_every: int | None = None,
                    resume_from=None) -> PosteriorArchive:
    """Run the joint sampler; the archive carries parameter draws, the joint
    per-patient likelihood trace, and the M completed outcome matrices
    captured at precomputed retained iterations."""
    data = StackedData(panel, outcome_designs, presence_designs)
    if presence_designs.q < 1:
        raise ConfigurationError("presence design needs profile columns")
    if priors is None:
        priors = PriorSpec.default(outcome_designs.p, outcome_designs.q, outcome_designs.r,
                                   outcome_designs.d, config.L,
                                   p2=presence_designs.p, q2=presence_designs.q,
                                   r2=presence_designs.r)
    for name, mat in (("fixed", data.Dp), ("profile", data.Dps)):
        flat = mat[data.valid]
        if flat.size and np.linalg.matrix_rank(flat) < flat.shape[1]:
            logger.warning("presence %s design is rank-deficient", name)
    stream = RngStream(config.seed, config.stream_id)
    k_total = config.n_retained
    capture_slots = select_spaced(k_total, config.M)

    if resume_from is not None:
        state, store, start_it = _load_checkpoint(resume_from, data, config)
        imputed = store.extra["imputed"]
    else:
        state = init_state(data, config, priors, stream.substream(0, B_INIT).generator(),
                           joint=True)
        store = _DrawStore(k_total, state, data)
        imputed = np.zeros((config.M, data.n, data.Tmax))
        store.extra = {"imputed": imputed}
        start_it = 0

    slot_lookup = {int(s): m for m, s in enumerate(capture_slots)}
    for it in range(start_it + 1, config.iterations + 1):
        _iterate_joint(state, data, priors, stream, it)
        try:
            state.check_finite(f"iteration {it}")
        except NumericalError as err:
            raise NumericalError(f"joint chain halted: {err}") from err
        if it > config.burn_in and (it - config.burn_in) % config.thin == 0:
            slot = store.cursor
            store.add(it, state, observed_data_loglik(data, state, "joint"))
            if slot in slot_lookup:
                imputed[slot_lookup[slot]] = state.imputed_Y
        if checkpoint_every and checkpoint_dir and it % checkpoint_every == 0:
            _save_checkpoint(checkpoint_dir, state, store, it, config)

    meta = _archive_meta("joint", config, outcome_designs, data, store)
    meta["M"] = config.M
    meta["presence_fixed_columns"] = list(presence_designs.fixed_names)
    meta["presence_profile_columns"] = list(presence_designs.profile_names)
    meta["presence_random_columns"] = list(presence_designs.random_names)
    return PosteriorArchive(mode="joint", draws=store.draws, loglik=store.loglik,
                            meta=meta, imputed=imputed,
                            imputed_indices=capture_slots)


def extract_imputations_joint(archive: PosteriorArchive, M: int) -> list[np.ndarray]:
    """M equally spaced completed outcome matrices from the archive."""
    if archive.imputed is None:
        raise ConfigurationError("archive holds no nested imputations (marginal mode?)")
    stored = archive.imputed.shape[0]
    idx = select_spaced(stored, M)
    return [archive.imputed[int(i)] for i in idx]
