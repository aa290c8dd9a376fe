"""Small regression helpers: OLS with t tests and IRLS logistic with Wald
tests. Used by the covariate screens and as the starting point of the GEE
fit; not a general-purpose GLM layer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats


@dataclass
class FitResult:
    coef: np.ndarray
    cov: np.ndarray
    se: np.ndarray
    stat: np.ndarray
    pvalues: np.ndarray
    converged: bool = True
    separated: np.ndarray | None = None  # per-column separation flags (logistic)


def ols_fit(X: np.ndarray, y: np.ndarray) -> FitResult:
    """Ordinary least squares with classical t-based p-values."""
    n, k = X.shape
    coef, _, rank, _ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    dof = max(n - k, 1)
    s2 = float(resid @ resid) / dof
    xtx_inv = np.linalg.pinv(X.T @ X)
    cov = s2 * xtx_inv
    se = np.sqrt(np.maximum(np.diag(cov), 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(se > 0, coef / se, np.inf * np.sign(coef))
    p = 2.0 * stats.t.sf(np.abs(t), dof)
    return FitResult(coef, cov, se, t, p)


def logistic_irls(X: np.ndarray, y: np.ndarray, max_iter: int = 100,
                  tol: float = 1e-10, separation_bound: float = 15.0) -> FitResult:
    """Logistic regression by iteratively reweighted least squares.

    Columns whose standardized coefficients (log-odds per column SD, so the
    flag is invariant to affine rescaling) run away beyond
    ``separation_bound`` are flagged as (quasi-)separated; callers decide
    whether to drop them.
    """
    n, k = X.shape
    coef = np.zeros(k)
    converged = False
    for _ in range(max_iter):
        lp = np.clip(X @ coef, -30.0, 30.0)
        mu = 1.0 / (1.0 + np.exp(-lp))
        w = np.maximum(mu * (1.0 - mu), 1e-10)
        z = lp + (y - mu) / w
        xtwx = X.T @ (X * w[:, None])
        new = np.linalg.solve(xtwx + 1e-12 * np.eye(k), X.T @ (w * z))
        step = np.max(np.abs(new - coef))
        coef = new
        if step < tol:
            converged = True
            break
    lp = np.clip(X @ coef, -30.0, 30.0)
    mu = 1.0 / (1.0 + np.exp(-lp))
    w = np.maximum(mu * (1.0 - mu), 1e-10)
    cov = np.linalg.pinv(X.T @ (X * w[:, None]))
    se = np.sqrt(np.maximum(np.diag(cov), 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        zstat = np.where(se > 0, coef / se, np.inf * np.sign(coef))
    p = 2.0 * stats.norm.sf(np.abs(zstat))
    scale = X.std(axis=0)
    scale[scale == 0.0] = 1.0  # intercept-like columns judged on raw size
    separated = np.abs(coef) * scale > separation_bound
    return FitResult(coef, cov, se, zstat, p, converged, separated)


def drop_collinear(X: np.ndarray, names: list[str], tol: float = 1e-9):
    """Indices of a maximal linearly independent column subset (greedy QR)."""
    keep: list[int] = []
    basis = np.zeros((X.shape[0], 0))
    for j in range(X.shape[1]):
        col = X[:, j]
        if basis.shape[1]:
            proj = basis @ np.linalg.lstsq(basis, col, rcond=None)[0]
            resid = col - proj
        else:
            resid = col
        scale = np.linalg.norm(col)
        if scale > 0 and np.linalg.norm(resid) > tol * max(scale, 1.0):
            keep.append(j)
            q = resid / np.linalg.norm(resid)
            basis = np.column_stack([basis, q])
    return keep
