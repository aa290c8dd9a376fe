"""Random-variate kernels for the Gibbs blocks.

Pólya-Gamma draws use the exact alternating-series accept/reject scheme for
shape 1, which is the only shape either sampler needs. The remaining kernels
(multivariate normal, inverse-gamma, inverse-Wishart, categorical) are thin,
deterministic wrappers around numpy primitives so that every draw is fully
reproducible from an RngStream.
"""

from __future__ import annotations

import math

import numba
import numpy as np

from .errors import NumericalError

__all__ = [
    "sample_pg",
    "sample_mvn",
    "sample_invgamma",
    "sample_invwishart",
    "sample_categorical",
    "jittered_cholesky",
    "pg_mean",
]

# Truncation point of the two-piece proposal; 0.64 is near-optimal for the
# alternating series bounds.
_TRUNC = 0.64
_SQRT2 = math.sqrt(2.0)
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


@numba.njit(cache=True)
def _log_ndtr(x):
    # log of the standard normal CDF, stable far into the lower tail
    if x > -20.0:
        return math.log(0.5 * math.erfc(-x / _SQRT2))
    z = -x
    # asymptotic lower-tail expansion
    corr = math.log1p(-1.0 / (z * z) + 3.0 / (z ** 4) - 15.0 / (z ** 6))
    return -0.5 * z * z - math.log(z) - _LOG_SQRT_2PI + corr


@numba.njit(cache=True)
def _series_coef(n, x):
    # n-th coefficient of the alternating series bounding the J*(1,.) density
    dn = n + 0.5
    if x > _TRUNC:
        return math.pi * dn * math.exp(-0.5 * dn * dn * math.pi * math.pi * x)
    return (2.0 / (math.pi * x)) ** 1.5 * math.pi * dn * math.exp(-2.0 * dn * dn / x)


@numba.njit(cache=True)
def _right_mass(z, fz):
    # probability that the proposal draws from the truncated-exponential piece
    t = _TRUNC
    b = math.sqrt(1.0 / t) * (t * z - 1.0)
    a = -math.sqrt(1.0 / t) * (t * z + 1.0)
    x0 = math.log(fz) + fz * t
    xb = x0 - z + _log_ndtr(b)
    xa = x0 + z + _log_ndtr(a)
    qdivp = 4.0 / math.pi * (math.exp(xb) + math.exp(xa))
    return 1.0 / (1.0 + qdivp)


@numba.njit(cache=True)
def _rtigauss(z, rng):
    # inverse-Gaussian(mu=1/z, lambda=1) truncated to (0, TRUNC]
    t = _TRUNC
    x = t + 1.0
    if 1.0 / t < z:
        mu = 1.0 / z
        while x > t:
            y = rng.standard_normal() ** 2
            muy = mu * y
            x = mu + 0.5 * mu * muy - 0.5 * mu * math.sqrt(4.0 * muy + muy * muy)
            if rng.random() > mu / (mu + x):
                x = mu * mu / x
    else:
        # mean beyond the truncation point: rejection from the scaled chi path
        alpha = 0.0
        while rng.random() > alpha:
            e1 = rng.standard_exponential()
            e2 = rng.standard_exponential()
            while e1 * e1 > 2.0 * e2 / t:
                e1 = rng.standard_exponential()
                e2 = rng.standard_exponential()
            x = t / ((1.0 + t * e1) * (1.0 + t * e1))
            alpha = math.exp(-0.5 * z * z * x)
    return x


@numba.njit(cache=True)
def _pg1_batch(c, out, rng):
    # exact PG(1, c_i) draws; J*(1, |c|/2)/4 by alternating-series rejection
    for i in range(c.shape[0]):
        z = abs(c[i]) * 0.5
        fz = 0.125 * math.pi * math.pi + 0.5 * z * z
        p_right = _right_mass(z, fz)
        while True:
            if rng.random() < p_right:
                x = _TRUNC + rng.standard_exponential() / fz
            else:
                x = _rtigauss(z, rng)
            s = _series_coef(0, x)
            y = rng.random() * s
            n = 0
            done = 0
            while done == 0:
                n += 1
                coef = _series_coef(n, x)
                if n % 2 == 1:
                    s -= coef
                    if y <= s:
                        done = 1  # accept
                else:
                    s += coef
                    if y > s:
                        done = -1  # reject, retry proposal
            if done == 1:
                out[i] = 0.25 * x
                break


def pg_mean(c):
    """Analytic mean of PG(1, c): tanh(c/2)/(2c), with limit 1/4 at c=0."""
    c = np.asarray(c, dtype=float)
    out = np.full(c.shape, 0.25)
    nz = c != 0.0
    out[nz] = np.tanh(c[nz] / 2.0) / (2.0 * c[nz])
    if out.ndim == 0:
        return float(out)
    return out


def sample_pg(c, rng: np.random.Generator, b: int = 1):
    """Draw Pólya-Gamma PG(1, c) variates.

    Parameters
    ----------
    c : float or array
        Tilting parameter(s); must be finite.
    rng : numpy Generator
    b : int
        Shape parameter; only b=1 is supported (all Gibbs blocks here use
        shape 1).

    Returns
    -------
    float or ndarray matching the shape of ``c``; every draw is positive.
    """
    if b != 1:
        raise ValueError(f"only PG(1, c) is supported, got b={b}")
    arr = np.asarray(c, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("PG tilt must be finite")
    flat = np.ascontiguousarray(arr.reshape(-1))
    out = np.empty(flat.shape[0])
    _pg1_batch(flat, out, rng)
    if arr.ndim == 0:
        return float(out[0])
    return out.reshape(arr.shape)


def jittered_cholesky(cov: np.ndarray, max_tries: int = 3):
    """Lower Cholesky factor, adding escalating diagonal jitter if needed.

    Jitter starts at 1e-10 times the mean diagonal and grows tenfold, at most
    ``max_tries`` additions, before raising NumericalError with condition
    diagnostics. Conditionals can be near-singular when a profile is sparse,
    so the first rungs of the ladder are routinely exercised.
    """
    cov = np.asarray(cov, dtype=float)
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    base = 1e-10 * float(np.mean(np.diag(cov)))
    if base <= 0.0 or not np.isfinite(base):
        base = 1e-10
    eye = np.eye(cov.shape[0])
    for k in range(max_tries):
        try:
            return np.linalg.cholesky(cov + base * 10.0 ** k * eye)
        except np.linalg.LinAlgError:
            continue
    cond = float(np.linalg.cond(cov)) if np.all(np.isfinite(cov)) else np.inf
    raise NumericalError(
        f"covariance not positive definite after {max_tries} jitter attempts "
        f"(dim={cov.shape[0]}, cond={cond:.3e})"
    )


def sample_mvn(mean, cov, rng: np.random.Generator) -> np.ndarray:
    """Multivariate normal draw via Cholesky with the PD jitter ladder."""
    mean = np.asarray(mean, dtype=float)
    chol = jittered_cholesky(cov)
    return mean + chol @ rng.standard_normal(mean.shape[0])


def sample_invgamma(a: float, b: float, rng: np.random.Generator) -> float:
    """Inverse-gamma draw with density proportional to x^-(a+1) exp(-b/x)."""
    if a <= 0.0 or b <= 0.0:
        raise ValueError(f"inverse-gamma requires a, b > 0, got a={a}, b={b}")
    return float(b / rng.gamma(shape=a))


def sample_invwishart(dof: float, scale: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Inverse-Wishart draw via the Bartlett decomposition.

    Requires dof > dim - 1 and a symmetric positive-definite scale. The mean
    is scale / (dof - dim - 1) when dof > dim + 1.
    """
    scale = np.atleast_2d(np.asarray(scale, dtype=float))
    d = scale.shape[0]
    if dof <= d - 1:
        raise ValueError(f"inverse-Wishart requires dof > dim - 1, got dof={dof}, dim={d}")
    if not np.allclose(scale, scale.T):
        raise ValueError("inverse-Wishart scale must be symmetric")
    chol_scale = jittered_cholesky(scale)
    # Bartlett factor of Wishart(dof, I)
    a = np.zeros((d, d))
    for i in range(d):
        a[i, i] = math.sqrt(rng.chisquare(dof - i))
        for j in range(i):
            a[i, j] = rng.standard_normal()
    # draw = (A^-1 C')' (A^-1 C') with C the scale factor
    m = np.linalg.solve(a, chol_scale.T)  # A lower triangular
    draw = m.T @ m
    return 0.5 * (draw + draw.T)


def sample_categorical(weights, rng: np.random.Generator) -> int:
    """Index draw proportional to nonnegative weights (0-based)."""
    w = np.asarray(weights, dtype=float)
    if w.ndim != 1 or w.size == 0:
        raise ValueError("weights must be a nonempty 1-d vector")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and nonnegative")
    total = w.sum()
    if total <= 0.0:
        raise ValueError("weights must have positive sum")
    cdf = np.cumsum(w)
    return int(np.searchsorted(cdf, rng.random() * total, side="right").clip(0, w.size - 1))


def categorical_rows(prob_rows: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Vectorized categorical draw per row of a probability matrix."""
    cdf = np.cumsum(prob_rows, axis=1)
    u = rng.random(prob_rows.shape[0]) * cdf[:, -1]
    idx = (u[:, None] > cdf).sum(axis=1)
    return np.minimum(idx, prob_rows.shape[1] - 1)
