"""Shared model state for marginal and joint profiling.

Class labels are 0-based internally; class 0 is the reference profile whose
allocation coefficients and profile-specific effects are pinned at zero for
identification. All mixture weights are computed in log space with
max-subtraction; per-quarter likelihood terms are exactly additive.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .design import StackedData
from .errors import NumericalError
from .samplers import categorical_rows

logger = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class AllocationParams:
    """Multinomial-logistic allocation coefficients, row 0 pinned at zero."""

    eta: np.ndarray  # (L, d)

    @property
    def L(self) -> int:
        return self.eta.shape[0]


@dataclass
class OutcomeParams:
    beta: np.ndarray       # (p,) fixed effects
    beta_star: np.ndarray  # (L, q) profile effects, row 0 pinned at zero
    sigma2: np.ndarray     # (L,) profile noise variances
    Sigma_r: np.ndarray    # (r, r) random-effect covariance
    b: np.ndarray          # (n, r) random effects


@dataclass
class PresenceParams:
    nu: np.ndarray     # (p2,) fixed effects
    gamma: np.ndarray  # (L, q2) profile effects, row 0 pinned at zero
    e: np.ndarray      # (n, r2) random effects
    E: np.ndarray      # (r2, r2) random-effect covariance


@dataclass
class PriorSpec:
    """Conjugate prior hyperparameters.

    Defaults are weakly informative: identity covariances, unit inverse-gamma
    shape/rate, and inverse-Wishart degrees of freedom dim + 2 so the prior
    is proper with identity mean.
    """

    Sigma_beta: np.ndarray
    Sigma_alpha: np.ndarray
    a: float
    b: float
    nu_b: float
    Sigma_b: np.ndarray
    alloc_mean: np.ndarray  # (L, d) prior means for eta rows
    alloc_cov: np.ndarray   # (d, d) prior covariance for each eta row
    Sigma_nu: np.ndarray | None = None
    Sigma_gamma: np.ndarray | None = None
    nu_e: float | None = None
    Sigma_e: np.ndarray | None = None

    @classmethod
    def default(cls, p: int, q: int, r: int, d: int, L: int,
                p2: int | None = None, q2: int | None = None, r2: int | None = None
                ) -> "PriorSpec":
        return cls(
            Sigma_beta=np.eye(p),
            Sigma_alpha=np.eye(q),
            a=1.0,
            b=1.0,
            nu_b=r + 2.0,
            Sigma_b=np.eye(r),
            alloc_mean=np.zeros((L, d)),
            alloc_cov=np.eye(d),
            Sigma_nu=np.eye(p2) if p2 else None,
            Sigma_gamma=np.eye(q2) if q2 else None,
            nu_e=(r2 + 2.0) if r2 else None,
            Sigma_e=np.eye(r2) if r2 else None,
        )


@dataclass
class ChainState:
    """Full Gibbs state for one chain."""

    allocation: np.ndarray  # (n,) labels in 0..L-1
    alloc: AllocationParams
    outcome: OutcomeParams
    presence: PresenceParams | None = None
    pg_alloc: np.ndarray | None = None      # (n, L); column 0 unused placeholder
    pg_presence: np.ndarray | None = None   # (n, Tmax) PG draws on valid cells
    imputed_Y: np.ndarray | None = None     # (n, Tmax) completed outcomes (joint)

    @property
    def L(self) -> int:
        return self.alloc.L

    def validate(self) -> None:
        L = self.L
        if self.allocation.min() < 0 or self.allocation.max() >= L:
            raise NumericalError("class labels out of range")
        if np.any(self.outcome.sigma2 <= 0):
            raise NumericalError("nonpositive noise variance")
        if self.pg_alloc is not None and np.any(self.pg_alloc <= 0):
            raise NumericalError("nonpositive PG auxiliary")

    def check_finite(self, where: str) -> None:
        blocks = {
            "eta": self.alloc.eta,
            "beta": self.outcome.beta,
            "beta_star": self.outcome.beta_star,
            "sigma2": self.outcome.sigma2,
            "Sigma_r": self.outcome.Sigma_r,
            "b": self.outcome.b,
        }
        if self.presence is not None:
            blocks.update({"nu": self.presence.nu, "gamma": self.presence.gamma,
                           "e": self.presence.e, "E": self.presence.E})
        for name, arr in blocks.items():
            if not np.all(np.isfinite(arr)):
                raise NumericalError(f"non-finite values in block '{name}' at {where}")


def allocation_probs(x0: np.ndarray, eta: np.ndarray) -> np.ndarray:
    """Class membership probabilities for one baseline covariate vector."""
    z = eta @ np.asarray(x0, dtype=float)
    if not np.all(np.isfinite(z)):
        raise NumericalError("non-finite allocation linear predictor")
    z = z - z.max()
    w = np.exp(z)
    return w / w.sum()


def allocation_logprob_matrix(X0: np.ndarray, eta: np.ndarray) -> np.ndarray:
    """Row-wise log allocation probabilities, (n, L)."""
    z = X0 @ eta.T
    if not np.all(np.isfinite(z)):
        raise NumericalError("non-finite allocation linear predictor")
    zmax = z.max(axis=1, keepdims=True)
    z = z - zmax
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def outcome_loglik_matrix(data: StackedData, params: OutcomeParams, y: np.ndarray,
                          mask: np.ndarray) -> np.ndarray:
    """Per-patient Gaussian log likelihood for each candidate class, (n, L).

    Conditions on the current random effects; sums over cells where ``mask``
    is set (observed cells for marginal profiling, all valid cells with
    imputations for joint profiling).
    """
    base = np.einsum("ntp,p->nt", data.D, params.beta) \
        + np.einsum("ntr,nr->nt", data.Dr, params.b)
    counts = mask.sum(axis=1).astype(float)
    L = params.beta_star.shape[0]
    out = np.empty((data.n, L))
    ym = np.where(mask, np.nan_to_num(y), 0.0)
    for l in range(L):
        mu = base + np.einsum("ntq,q->nt", data.Ds, params.beta_star[l])
        resid = np.where(mask, ym - mu, 0.0)
        ss = np.einsum("nt,nt->n", resid, resid)
        out[:, l] = -0.5 * (ss / params.sigma2[l] + counts * (LOG_2PI + np.log(params.sigma2[l])))
    return out


def outcome_loglik(data: StackedData, i: int, l: int, params: OutcomeParams,
                   mode: str = "marginal", y: np.ndarray | None = None) -> float:
    """Log likelihood of patient ``i``'s outcomes under class ``l``."""
    mask = data.obs if mode == "marginal" else data.valid
    yy = data.Y if y is None else y
    return float(outcome_loglik_matrix(data, params, yy, mask)[i, l])


def presence_logit_matrix(data: StackedData, params: PresenceParams) -> np.ndarray:
    """Linear predictors of the presence model per class, (L, n, Tmax)."""
    base = np.einsum("ntp,p->nt", data.Dp, params.nu) \
        + np.einsum("ntr,nr->nt", data.Dpr, params.e)
    L = params.gamma.shape[0]
    return base[None, :, :] + np.einsum("ntq,lq->lnt", data.Dps, params.gamma)


def presence_loglik_matrix(data: StackedData, params: PresenceParams) -> np.ndarray:
    """Per-patient Bernoulli log likelihood of the presence mask, (n, L)."""
    lp = presence_logit_matrix(data, params)
    r = data.obs.astype(float)
    # log sigmoid(x) = -log(1 + exp(-x)), computed stably
    log_p = -np.logaddexp(0.0, -lp)
    log_1mp = -np.logaddexp(0.0, lp)
    terms = np.where(data.valid[None, :, :], r[None, :, :] * log_p
                     + (1.0 - r[None, :, :]) * log_1mp, 0.0)
    return terms.sum(axis=2).T


def presence_loglik(data: StackedData, i: int, l: int, params: PresenceParams) -> float:
    return float(presence_loglik_matrix(data, params)[i, l])


def class_logweights(data: StackedData, state: ChainState, mode: str) -> np.ndarray:
    """Unnormalized log multinomial weights for the class draw, (n, L)."""
    logpi = allocation_logprob_matrix(data.X0, state.alloc.eta)
    if mode == "marginal":
        ll = outcome_loglik_matrix(data, state.outcome, data.Y, data.obs)
        return logpi + ll
    if state.imputed_Y is None or state.presence is None:
        raise NumericalError("joint class draw requires imputations and presence parameters")
    ll = outcome_loglik_matrix(data, state.outcome, state.imputed_Y, data.valid)
    lr = presence_loglik_matrix(data, state.presence)
    return logpi + ll + lr


def draw_classes(data: StackedData, state: ChainState, mode: str,
                 rng: np.random.Generator) -> np.ndarray:
    """Gibbs draw of every patient's class label (0-based)."""
    logw = class_logweights(data, state, mode)
    if np.any(np.isnan(logw)):
        raise NumericalError("NaN class weights")
    logw = logw - logw.max(axis=1, keepdims=True)
    w = np.exp(logw)
    probs = w / w.sum(axis=1, keepdims=True)
    return categorical_rows(probs, rng)


def draw_class(data: StackedData, i: int, state: ChainState, mode: str,
               rng: np.random.Generator) -> int:
    """Class draw for a single patient (0-based label)."""
    logw = class_logweights(data, state, mode)[i]
    if np.any(np.isnan(logw)):
        raise NumericalError("NaN class weights")
    logw = logw - logw.max()
    w = np.exp(logw)
    return int(categorical_rows((w / w.sum())[None, :], rng)[0])


def observed_data_loglik(data: StackedData, state: ChainState, mode: str) -> np.ndarray:
    """Per-patient log f(Y_i^obs | theta), or log f(Y_i^obs, R_i | theta) in
    joint mode, with random intercepts integrated analytically and classes
    summed out; the presence part conditions on the current presence random
    effects (no closed form exists for their integral).
    """
    grams = data.grams("observed")
    logpi = allocation_logprob_matrix(data.X0, state.alloc.eta)
    out = state.outcome
    L = state.L
    n = data.n
    r = out.Sigma_r.shape[0]
    counts = grams.counts
    ym = data.masked_y("observed")
    dy = grams.dy(ym)
    sy = grams.sy(ym)
    ry = grams.ry(ym)
    yy = np.einsum("nt,nt->n", ym, ym)
    sigr_inv = np.linalg.inv(out.Sigma_r)
    loglik = np.empty((n, L))
    for l in range(L):
        s2 = out.sigma2[l]
        al = out.beta_star[l]
        # residual cross-products with random effects integrated out
        u = ry - np.einsum("npr,p->nr", grams.DR, out.beta) \
            - np.einsum("nqr,q->nr", grams.SR, al)
        rr = (yy - 2.0 * dy @ out.beta - 2.0 * sy @ al
              + np.einsum("p,npq,q->n", out.beta, grams.DD, out.beta)
              + 2.0 * np.einsum("p,npq,q->n", out.beta, grams.DS, al)
              + np.einsum("q,nqk,k->n", al, grams.SS, al))
        # Woodbury quadratic form and determinant lemma for
        # cov = s2 I + Dr Sigma_r Dr'
        m = np.linalg.inv(sigr_inv[None, :, :] + grams.RR / s2)
        quad = rr / s2 - np.einsum("nr,nrk,nk->n", u, m, u) / s2 ** 2
        inner = np.eye(r)[None, :, :] + np.einsum("rk,nkj->nrj", out.Sigma_r, grams.RR) / s2
        _, logdet_inner = np.linalg.slogdet(inner)
        logdet = counts * np.log(s2) + logdet_inner
        loglik[:, l] = -0.5 * (counts * LOG_2PI + logdet + quad)
    logw = logpi + loglik
    if mode == "joint":
        if state.presence is None:
            raise NumericalError("joint likelihood requires presence parameters")
        logw = logw + presence_loglik_matrix(data, state.presence)
    wmax = logw.max(axis=1, keepdims=True)
    return (wmax + np.log(np.exp(logw - wmax).sum(axis=1, keepdims=True)))[:, 0]
