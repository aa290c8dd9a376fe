"""Marginal-profiling Gibbs sampler over observed outcomes.

One iteration follows the block order: class labels, profile-specific
effects, allocation coefficients (PG-augmented), fixed effects (random
effects integrated out, a partially collapsed step), noise variances,
random-effect covariance, random effects. Missing outcomes never enter the
likelihood; imputation happens after the chain from retained draws.

Every block derives its generator from (seed, stream_id, iteration, block),
so chains are reproducible and checkpoint/resume is exact.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import logsumexp

from .archive import PosteriorArchive, load_arrays, save_arrays, select_spaced
from .design import Designs, StackedData
from .errors import ConfigurationError, NumericalError
from .model import (AllocationParams, ChainState, OutcomeParams, PriorSpec,
                    draw_classes, observed_data_loglik)
from .panel import Panel
from .rng import RngStream
from .samplers import sample_categorical, sample_invgamma, sample_invwishart, sample_mvn, sample_pg

logger = logging.getLogger(__name__)

# substream block ids; joint-only blocks continue the numbering
B_INIT, B_CLASS, B_BETA_STAR, B_ETA, B_BETA, B_SIGMA2, B_SIGMA_R, B_B = range(8)
B_NU, B_GAMMA, B_E, B_EE, B_IMPUTE, B_PG_PRESENCE = range(8, 14)


@dataclass(frozen=True)
class MarginalFitConfig:
    """Chain length and initialization policy for a marginal fit."""

    L: int
    iterations: int = 12000
    burn_in: int = 2000
    thin: int = 10
    seed: int = 0
    stream_id: int = 0

    def __post_init__(self):
        if self.L < 1:
            raise ConfigurationError("L must be >= 1")
        if self.burn_in >= self.iterations:
            raise ConfigurationError("burn_in must be smaller than iterations")
        if self.thin < 1:
            raise ConfigurationError("thin must be >= 1")

    @property
    def n_retained(self) -> int:
        return (self.iterations - self.burn_in) // self.thin


def _active(data: StackedData, state: ChainState, mode: str):
    if mode == "marginal":
        return data.obs, data.masked_y("observed"), data.grams("observed")
    return data.valid, np.where(data.valid, np.nan_to_num(state.imputed_Y), 0.0), \
        data.grams("all")


def init_state(data: StackedData, config, priors: PriorSpec, rng: np.random.Generator,
               joint: bool = False) -> ChainState:
    """Starting state: pooled OLS for the fixed effects, zero profile
    contrasts, zero allocation coefficients, scale parameters at 0.1,
    random effects from N(0, 0.1), uniform class labels."""
    p, q, r = data.D.shape[2], data.Ds.shape[2], data.Dr.shape[2]
    n, L = data.n, config.L
    mask = data.obs
    rows = np.where(mask.reshape(-1))[0]
    X = np.concatenate([data.D.reshape(-1, p), data.Ds.reshape(-1, q)], axis=1)[rows]
    y = np.nan_to_num(data.Y).reshape(-1)[rows]
    if X.shape[0] >= X.shape[1]:
        coef, _, rank, _ = np.linalg.lstsq(X, y, rcond=None)
        if rank < X.shape[1]:
            logger.warning("OLS initialization rank-deficient (rank %d < %d); "
                           "falling back to ridge with penalty 1e-6", rank, X.shape[1])
            coef = np.linalg.solve(X.T @ X + 1e-6 * np.eye(X.shape[1]), X.T @ y)
    else:
        logger.warning("fewer observed cells than design columns; ridge initialization")
        coef = np.linalg.solve(X.T @ X + 1e-6 * np.eye(X.shape[1]), X.T @ y)
    beta = coef[:p]
    # profile contrasts start at zero: identical across classes and consistent
    # with the pinned reference row
    beta_star = np.zeros((L, q))
    sigma2 = np.full(L, 0.1)
    Sigma_r = 0.1 * np.eye(r)
    b = rng.normal(0.0, np.sqrt(0.1), size=(n, r))
    allocation = rng.integers(0, L, size=n)
    state = ChainState(
        allocation=allocation,
        alloc=AllocationParams(eta=np.zeros((L, data.X0.shape[1]))),
        outcome=OutcomeParams(beta=beta, beta_star=beta_star, sigma2=sigma2,
                              Sigma_r=Sigma_r, b=b),
        pg_alloc=np.full((n, L), 0.25),
    )
    if joint:
        from .model import PresenceParams
        p2, q2, r2 = data.Dp.shape[2], data.Dps.shape[2], data.Dpr.shape[2]
        state.presence = PresenceParams(
            nu=np.zeros(p2), gamma=np.zeros((L, q2)),
            e=rng.normal(0.0, np.sqrt(0.1), size=(n, r2)), E=0.1 * np.eye(r2))
        state.pg_presence = np.full((n, data.Tmax), 0.25)
        imputed = np.nan_to_num(data.Y).copy()
        miss = data.valid & ~data.obs
        mu0 = float(y.mean()) if y.size else 0.0
        imputed[miss] = mu0 + rng.normal(0.0, np.sqrt(0.1), size=int(miss.sum()))
        state.imputed_Y = imputed
    return state


def beta_star_conditional(state: ChainState, data: StackedData, priors: PriorSpec,
                          l: int, mode: str = "marginal"):
    """Normal conditional (mean, cov) of profile row l; the prior when the
    class is empty."""
    mask, ym, grams = _active(data, state, mode)
    out = state.outcome
    members = state.allocation == l
    if not members.any():
        return np.zeros(out.beta_star.shape[1]), priors.Sigma_alpha
    sy = grams.sy(ym)
    resid = sy - np.einsum("npq,p->nq", grams.DS, out.beta) \
        - np.einsum("nqr,nr->nq", grams.SR, out.b)
    prec = np.linalg.inv(priors.Sigma_alpha) + grams.SS[members].sum(axis=0) / out.sigma2[l]
    cov = np.linalg.inv(prec)
    mean = cov @ (resid[members].sum(axis=0) / out.sigma2[l])
    return mean, cov


def update_beta_star(state: ChainState, data: StackedData, priors: PriorSpec,
                     rng: np.random.Generator, mode: str = "marginal") -> None:
    """Profile-specific coefficient rows 2..L from their normal conditionals."""
    out = state.outcome
    for l in range(1, state.L):
        if not (state.allocation == l).any():
            logger.warning("class %d empty: drawing profile effects from the prior", l + 1)
        mean, cov = beta_star_conditional(state, data, priors, l, mode)
        out.beta_star[l] = sample_mvn(mean, cov, rng)


def eta_tilt(state: ChainState, data: StackedData, l: int):
    """One-vs-rest PG tilt r_il and the log-sum offset A_il for class l."""
    z = data.X0 @ state.alloc.eta.T
    others = [k for k in range(state.L) if k != l]
    a_l = logsumexp(z[:, others], axis=1)
    return z[:, l] - a_l, a_l


def eta_conditional(state: ChainState, data: StackedData, priors: PriorSpec,
                    l: int, w: np.ndarray):
    """Normal conditional (mean, cov) of allocation row l given PG draws w."""
    X0 = data.X0
    prior_prec = np.linalg.inv(priors.alloc_cov)
    _, a_l = eta_tilt(state, data, l)
    c_l = (state.allocation == l).astype(float)
    prec = (X0 * w[:, None]).T @ X0 + prior_prec
    cov = np.linalg.inv(prec)
    mvec = c_l - 0.5 + w * a_l
    mean = cov @ (prior_prec @ priors.alloc_mean[l] + X0.T @ mvec)
    return mean, cov


def update_eta(state: ChainState, data: StackedData, priors: PriorSpec,
               rng: np.random.Generator) -> None:
    """PG-augmented one-vs-rest update of allocation coefficient rows 2..L."""
    for l in range(1, state.L):
        tilt, _ = eta_tilt(state, data, l)
        w = sample_pg(tilt, rng)
        state.pg_alloc[:, l] = w
        mean, cov = eta_conditional(state, data, priors, l, w)
        state.alloc.eta[l] = sample_mvn(mean, cov, rng)


def _re_posterior_prec_inv(grams, Sigma_r_inv, sigma2_by_patient):
    # (n, r, r) inverse of (Sigma_r^-1 + Dr'Dr / sigma2_i)
    prec = Sigma_r_inv[None, :, :] + grams.RR / sigma2_by_patient[:, None, None]
    return np.linalg.inv(prec)


def beta_conditional(state: ChainState, data: StackedData, priors: PriorSpec,
                     mode: str = "marginal"):
    """Collapsed conditional (mean, cov) of the fixed effects: each patient
    contributes through cov_i = Dr Sigma_r Dr' + sigma2_i I with the random
    effects integrated out (Woodbury on the precomputed Gram blocks)."""
    mask, ym, grams = _active(data, state, mode)
    out = state.outcome
    s2c = out.sigma2[state.allocation]
    alc = out.beta_star[state.allocation]
    sig_inv = np.linalg.inv(out.Sigma_r)
    m = _re_posterior_prec_inv(grams, sig_inv, s2c)
    dv = grams.dy(ym) - np.einsum("npq,nq->np", grams.DS, alc)
    rv = grams.ry(ym) - np.einsum("nqr,nq->nr", grams.SR, alc)
    s2 = s2c[:, None, None]
    a_mats = grams.DD / s2 - np.einsum("npr,nrk,nqk->npq", grams.DR, m, grams.DR) / s2 ** 2
    u_vecs = dv / s2c[:, None] - np.einsum("npr,nrk,nk->np", grams.DR, m, rv) / s2c[:, None] ** 2
    prec = np.linalg.inv(priors.Sigma_beta) + a_mats.sum(axis=0)
    cov = np.linalg.inv(prec)
    mean = cov @ u_vecs.sum(axis=0)
    return mean, cov


def update_beta(state: ChainState, data: StackedData, priors: PriorSpec,
                rng: np.random.Generator, mode: str = "marginal") -> None:
    """Fixed effects from the collapsed conditional with random effects
    integrated out of each patient's covariance."""
    mean, cov = beta_conditional(state, data, priors, mode)
    state.outcome.beta = sample_mvn(mean, cov, rng)


def sigma2_conditional(state: ChainState, data: StackedData, priors: PriorSpec,
                       l: int, mode: str = "marginal"):
    """Inverse-gamma conditional (shape, rate) of class l's noise variance;
    the prior when the class is empty. The shape counts observed quarters in
    marginal mode and all quarters in joint mode."""
    members = state.allocation == l
    if not members.any():
        return priors.a, priors.b
    mask, ym, grams = _active(data, state, mode)
    out = state.outcome
    mu = np.einsum("ntp,p->nt", data.D, out.beta) \
        + np.einsum("ntq,nq->nt", data.Ds, out.beta_star[state.allocation]) \
        + np.einsum("ntr,nr->nt", data.Dr, out.b)
    resid = np.where(mask, ym - mu, 0.0)
    ss = np.einsum("nt,nt->n", resid, resid)
    counts = mask.sum(axis=1)
    shape = counts[members].sum() / 2.0 + priors.a
    rate = ss[members].sum() / 2.0 + priors.b
    return float(shape), float(rate)


def update_sigma2(state: ChainState, data: StackedData, priors: PriorSpec,
                  rng: np.random.Generator, mode: str = "marginal") -> None:
    out = state.outcome
    for l in range(state.L):
        if not (state.allocation == l).any():
            logger.warning("class %d empty: drawing noise variance from the prior", l + 1)
        shape, rate = sigma2_conditional(state, data, priors, l, mode)
        out.sigma2[l] = sample_invgamma(shape, rate, rng)


def sigma_r_conditional(state: ChainState, data: StackedData, priors: PriorSpec):
    """Inverse-Wishart conditional (dof, scale) of the random-effect covariance."""
    out = state.outcome
    return data.n + priors.nu_b, out.b.T @ out.b + priors.Sigma_b


def update_sigma_r(state: ChainState, data: StackedData, priors: PriorSpec,
                   rng: np.random.Generator) -> None:
    dof, scale = sigma_r_conditional(state, data, priors)
    state.outcome.Sigma_r = sample_invwishart(dof, scale, rng)


def b_conditional(state: ChainState, data: StackedData, priors: PriorSpec,
                  mode: str = "marginal"):
    """Normal conditionals of all random effects: means (n, r), covs (n, r, r)."""
    mask, ym, grams = _active(data, state, mode)
    out = state.outcome
    s2c = out.sigma2[state.allocation]
    alc = out.beta_star[state.allocation]
    sig_inv = np.linalg.inv(out.Sigma_r)
    cov = _re_posterior_prec_inv(grams, sig_inv, s2c)
    target = grams.ry(ym) - np.einsum("npr,p->nr", grams.DR, out.beta) \
        - np.einsum("nqr,nq->nr", grams.SR, alc)
    mean = np.einsum("nrk,nk->nr", cov, target / s2c[:, None])
    return mean, cov


def update_b(state: ChainState, data: StackedData, priors: PriorSpec,
             rng: np.random.Generator, mode: str = "marginal") -> None:
    """Random effects from their exact normal conditionals, batched."""
    mean, cov = b_conditional(state, data, priors, mode)
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        chol = np.linalg.cholesky(cov + 1e-12 * np.eye(cov.shape[1])[None, :, :])
    z = rng.standard_normal(state.outcome.b.shape)
    state.outcome.b = mean + np.einsum("nrk,nk->nr", chol, z)


def update_outcome_params(state: ChainState, data: StackedData, priors: PriorSpec,
                          rng: np.random.Generator, mode: str = "marginal") -> None:
    """Outcome-side blocks in appendix order (profile effects, fixed effects,
    variances, random-effect covariance, random effects). The chain driver
    interleaves the allocation-coefficient update between the first two."""
    update_beta_star(state, data, priors, rng, mode)
    update_beta(state, data, priors, rng, mode)
    update_sigma2(state, data, priors, rng, mode)
    update_sigma_r(state, data, priors, rng)
    update_b(state, data, priors, rng, mode)


def _iterate(state: ChainState, data: StackedData, priors: PriorSpec,
             stream: RngStream, it: int) -> None:
    gen = lambda block: stream.substream(it, block).generator()
    state.allocation = draw_classes(data, state, "marginal", gen(B_CLASS))
    update_beta_star(state, data, priors, gen(B_BETA_STAR), "marginal")
    update_eta(state, data, priors, gen(B_ETA))
    update_beta(state, data, priors, gen(B_BETA), "marginal")
    update_sigma2(state, data, priors, gen(B_SIGMA2), "marginal")
    update_sigma_r(state, data, priors, gen(B_SIGMA_R))
    update_b(state, data, priors, gen(B_B), "marginal")


def _state_arrays(state: ChainState) -> dict[str, np.ndarray]:
    arrays = {
        "allocation": state.allocation,
        "eta": state.alloc.eta,
        "beta": state.outcome.beta,
        "beta_star": state.outcome.beta_star,
        "sigma2": state.outcome.sigma2,
        "Sigma_r": state.outcome.Sigma_r,
        "b": state.outcome.b,
        "pg_alloc": state.pg_alloc,
    }
    if state.presence is not None:
        arrays.update({"nu": state.presence.nu, "gamma": state.presence.gamma,
                       "e": state.presence.e, "E": state.presence.E,
                       "pg_presence": state.pg_presence,
                       "imputed_Y": state.imputed_Y})
    return arrays


def _state_from_arrays(arrays: dict[str, np.ndarray]) -> ChainState:
    state = ChainState(
        allocation=arrays["allocation"],
        alloc=AllocationParams(eta=arrays["eta"]),
        outcome=OutcomeParams(beta=arrays["beta"], beta_star=arrays["beta_star"],
                              sigma2=arrays["sigma2"], Sigma_r=arrays["Sigma_r"],
                              b=arrays["b"]),
        pg_alloc=arrays["pg_alloc"],
    )
    if "nu" in arrays:
        from .model import PresenceParams
        state.presence = PresenceParams(nu=arrays["nu"], gamma=arrays["gamma"],
                                        e=arrays["e"], E=arrays["E"])
        state.pg_presence = arrays["pg_presence"]
        state.imputed_Y = arrays["imputed_Y"]
    return state


class _DrawStore:
    """Preallocated storage for retained draws."""

    def __init__(self, k: int, state: ChainState, data: StackedData, store_imputed: int = 0):
        self.k = k
        self.cursor = 0
        self.draws = {name: np.zeros((k,) + np.asarray(arr).shape,
                                     dtype=np.int64 if name == "allocation" else np.float64)
                      for name, arr in _state_arrays(state).items()
                      if name not in ("pg_alloc", "pg_presence", "imputed_Y")}
        self.loglik = np.zeros((k, data.n))
        self.retained_iterations = np.zeros(k, dtype=np.int64)
        self.extra: dict[str, np.ndarray] = {}

    def add(self, it: int, state: ChainState, loglik_row: np.ndarray) -> None:
        c = self.cursor
        for name, arr in _state_arrays(state).items():
            if name in self.draws:
                self.draws[name][c] = arr
        self.loglik[c] = loglik_row
        self.retained_iterations[c] = it
        self.cursor += 1


def run_chain(panel: Panel, designs: Designs, config: MarginalFitConfig,
              priors: PriorSpec | None = None, checkpoint_dir=None,
              checkpoint_every: int | None = None, resume_from=None) -> PosteriorArchive:
    """Run the marginal-profiling Gibbs sampler and return the archive.

    The archive stores thinned post-burn-in draws of every parameter block,
    the allocation labels, and the per-patient observed-data log likelihood
    (random effects integrated analytically, classes summed) used for LPML.
    """
    data = StackedData(panel, designs)
    if priors is None:
        priors = PriorSpec.default(designs.p, designs.q, designs.r, designs.d, config.L)
    stream = RngStream(config.seed, config.stream_id)
    k_total = config.n_retained
    if k_total < 1:
        raise ConfigurationError("no retained draws: increase iterations or reduce thinning")

    if resume_from is not None:
        state, store, start_it = _load_checkpoint(resume_from, data, config)
    else:
        state = init_state(data, config, priors, stream.substream(0, B_INIT).generator())
        store = _DrawStore(k_total, state, data)
        start_it = 0

    for it in range(start_it + 1, config.iterations + 1):
        _iterate(state, data, priors, stream, it)
        try:
            state.check_finite(f"iteration {it}")
        except NumericalError as err:
            raise NumericalError(f"marginal chain halted: {err}") from err
        if it > config.burn_in and (it - config.burn_in) % config.thin == 0:
            store.add(it, state, observed_data_loglik(data, state, "marginal"))
        if checkpoint_every and checkpoint_dir and it % checkpoint_every == 0:
            _save_checkpoint(checkpoint_dir, state, store, it, config)

    meta = _archive_meta("marginal", config, designs, data, store)
    return PosteriorArchive(mode="marginal", draws=store.draws, loglik=store.loglik,
                            meta=meta)


def _archive_meta(mode: str, config, designs: Designs, data: StackedData,
                  store: _DrawStore) -> dict:
    return {
        "L": config.L,
        "iterations": config.iterations,
        "burn_in": config.burn_in,
        "thin": config.thin,
        "seed": config.seed,
        "stream_id": config.stream_id,
        "n_patients": data.n,
        "retained_iterations": store.retained_iterations.tolist(),
        "fixed_columns": list(designs.fixed_names),
        "profile_columns": list(designs.profile_names),
        "random_columns": list(designs.random_names),
        "allocation_columns": list(designs.allocation_names),
    }


def _save_checkpoint(directory, state: ChainState, store: _DrawStore, it: int,
                     config) -> None:
    arrays = {f"state_{k}": v for k, v in _state_arrays(state).items()}
    for name, arr in store.draws.items():
        arrays[f"store_{name}"] = arr[:store.cursor]
    arrays["store_loglik"] = store.loglik[:store.cursor]
    arrays["store_iterations"] = store.retained_iterations[:store.cursor]
    for name, arr in store.extra.items():
        arrays[f"extra_{name}"] = arr
    save_arrays(directory, arrays, {"iteration": it, "role": "checkpoint",
                                    "L": config.L, "iterations": config.iterations,
                                    "burn_in": config.burn_in, "thin": config.thin,
                                    "seed": config.seed, "stream_id": config.stream_id})


def _load_checkpoint(directory, data: StackedData, config):
    arrays, meta = load_arrays(directory)
    for key in ("L", "iterations", "burn_in", "thin", "seed", "stream_id"):
        if meta.get(key) != getattr(config, key):
            raise ConfigurationError(
                f"checkpoint {key}={meta.get(key)} does not match config "
                f"{key}={getattr(config, key)}")
    state = _state_from_arrays({k[len("state_"):]: v for k, v in arrays.items()
                                if k.startswith("state_")})
    store = _DrawStore(config.n_retained, state, data)
    cursor = int(arrays["store_iterations"].shape[0])
    for name in store.draws:
        store.draws[name][:cursor] = arrays[f"store_{name}"]
    store.loglik[:cursor] = arrays["store_loglik"]
    store.retained_iterations[:cursor] = arrays["store_iterations"]
    store.cursor = cursor
    store.extra = {k[len("extra_"):]: v for k, v in arrays.items()
                   if k.startswith("extra_")}
    return state, store, int(meta["iteration"])


def imputation_means(data: StackedData, draws: dict[str, np.ndarray], k: int) -> np.ndarray:
    """Fitted outcome mean matrix (n, Tmax) for retained draw k."""
    beta = draws["beta"][k]
    beta_star = draws["beta_star"][k]
    alloc = draws["allocation"][k]
    b = draws["b"][k]
    return np.einsum("ntp,p->nt", data.D, beta) \
        + np.einsum("ntq,nq->nt", data.Ds, beta_star[alloc]) \
        + np.einsum("ntr,nr->nt", data.Dr, b)


def impute_marginal(archive: PosteriorArchive, panel: Panel, designs: Designs,
                    M: int, rng: RngStream) -> list[np.ndarray]:
    """Draw M completed outcome matrices from equally spaced retained draws.

    Missing cells are drawn from the fitted outcome model at that draw's
    class labels and random effects; observed cells pass through untouched.
    Returns (n, Tmax) matrices aligned with the stacked panel layout.
    """
    data = StackedData(panel, designs)
    idx = select_spaced(archive.n_retained, M)
    missing = data.valid & ~data.obs
    completed = []
    for m, k in enumerate(idx):
        gen = rng.substream(B_IMPUTE, m).generator()
        mu = imputation_means(data, archive.draws, int(k))
        sigma = np.sqrt(archive.draws["sigma2"][k][archive.draws["allocation"][k]])
        y = np.where(data.obs, np.nan_to_num(data.Y), 0.0)
        noise = gen.standard_normal(mu.shape)
        y = np.where(missing, mu + sigma[:, None] * noise, y)
        y[~data.valid] = np.nan
        completed.append(y)
    return completed
