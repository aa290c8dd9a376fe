"""Downstream inference on completed datasets.

The event model is a marginal logistic regression of the per-quarter adverse
event indicator on seven A1c categories (reference "<6"), fit by GEE with an
exchangeable working correlation and a sandwich covariance clustered by
patient. Per-dataset estimates are combined across the M imputations with
the classic small-M combining rules; the complete-case fit uses quarters
with an observed outcome only.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .design import StackedData
from .errors import ConfigurationError, DataError, PoolingError
from .glm import logistic_irls
from .panel import Panel

logger = logging.getLogger(__name__)

A1C_EDGES = (6.0, 6.5, 7.0, 7.5, 8.0, 9.0)
A1C_LABELS = ("<6", "6-6.5", "6.5-7", "7-7.5", "7.5-8", "8-9", ">=9")
REFERENCE_CATEGORY = "<6"

DF_CAP = 1e12


def categorize_a1c_index(value):
    """0-based category index; intervals are left-closed [lower, upper)."""
    v = np.asarray(value, dtype=float)
    return np.searchsorted(np.asarray(A1C_EDGES), v, side="right")


def categorize_a1c(value: float) -> str:
    """Seven-category A1c label for a positive, finite percent value."""
    if not np.isfinite(value) or value <= 0.0:
        raise DataError(f"A1c value must be positive and finite, got {value}")
    return A1C_LABELS[int(categorize_a1c_index(value))]


@dataclass
class GeeResult:
    coef: np.ndarray
    cov: np.ndarray  # robust sandwich, clustered by patient
    names: list[str]
    rho: float
    converged: bool
    n_iter: int
    n_obs: int
    n_clusters: int
    dropped: list[str]

    def se(self) -> np.ndarray:
        return np.sqrt(np.maximum(np.diag(self.cov), 0.0))


def _exchangeable_solve(v: np.ndarray, rho: float) -> np.ndarray:
    """R(rho)^-1 v for an exchangeable correlation, column-wise."""
    n = v.shape[0]
    denom = 1.0 + (n - 1) * rho
    return (v - (rho / denom) * v.sum(axis=0, keepdims=True)) / (1.0 - rho)


def fit_gee_logistic(X: np.ndarray, y: np.ndarray, clusters: np.ndarray,
                     names: list[str] | None = None, correlation: str = "exchangeable",
                     max_iter: int = 100, tol: float = 1e-8) -> GeeResult:
    """Marginal logistic model by GEE.

    ``correlation`` is 'exchangeable' (moment-estimated rho, refit until the
    coefficients settle) or 'independence' (the IRLS solution with a sandwich
    covariance).
    """
    if correlation not in ("exchangeable", "independence"):
        raise ConfigurationError(f"unknown working correlation '{correlation}'")
    names = names or [f"x{j}" for j in range(X.shape[1])]
    order = np.argsort(clusters, kind="stable")
    X = X[order]
    y = y[order]
    clusters = clusters[order]
    _, starts = np.unique(clusters, return_index=True)
    bounds = np.append(starts, len(y))
    k = X.shape[1]

    init = logistic_irls(X, y)
    coef = init.coef.copy()
    rho = 0.0
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        lp = np.clip(X @ coef, -30.0, 30.0)
        mu = 1.0 / (1.0 + np.exp(-lp))
        a = np.maximum(mu * (1.0 - mu), 1e-10)
        pearson = (y - mu) / np.sqrt(a)
        phi = float(pearson @ pearson) / max(len(y) - k, 1)
        if correlation == "exchangeable":
            cross = 0.0
            pairs = 0.0
            for s, e in zip(bounds[:-1], bounds[1:]):
                r = pearson[s:e]
                cross += (r.sum() ** 2 - (r ** 2).sum()) / 2.0
                m = e - s
                pairs += m * (m - 1) / 2.0
            rho = cross / max(phi * max(pairs - k, 1.0), 1e-12)
            nmax = int(np.max(np.diff(bounds)))
            lo = -1.0 / max(nmax - 1, 1) + 1e-6
            rho = float(np.clip(rho, lo, 0.99))
        h = np.zeros((k, k))
        u = np.zeros(k)
        for s, e in zip(bounds[:-1], bounds[1:]):
            s_mat = X[s:e] * np.sqrt(a[s:e])[:, None]
            rinv_s = _exchangeable_solve(s_mat, rho)
            h += s_mat.T @ rinv_s
            u += rinv_s.T @ pearson[s:e]
        step = np.linalg.solve(h + 1e-12 * np.eye(k), u)
        coef = coef + step
        if np.max(np.abs(step)) < tol:
            converged = True
            break
    if not converged:
        logger.warning("GEE did not converge in %d iterations; reporting last iterate",
                       max_iter)
    # sandwich covariance at the final iterate
    lp = np.clip(X @ coef, -30.0, 30.0)
    mu = 1.0 / (1.0 + np.exp(-lp))
    a = np.maximum(mu * (1.0 - mu), 1e-10)
    pearson = (y - mu) / np.sqrt(a)
    h = np.zeros((k, k))
    meat = np.zeros((k, k))
    for s, e in zip(bounds[:-1], bounds[1:]):
        s_mat = X[s:e] * np.sqrt(a[s:e])[:, None]
        rinv_s = _exchangeable_solve(s_mat, rho)
        h += s_mat.T @ rinv_s
        g = rinv_s.T @ pearson[s:e]
        meat += np.outer(g, g)
    h_inv = np.linalg.pinv(h)
    cov = h_inv @ meat @ h_inv
    return GeeResult(coef, cov, names, rho, converged, it, len(y), len(starts), [])


def event_model_rows(panel: Panel, y_matrix: np.ndarray | None = None,
                     mask: np.ndarray | None = None, adjusters: tuple[str, ...] = ()):
    """Design rows for the event model: intercept + category dummies + adjusters.

    ``y_matrix`` supplies outcomes in stacked (n, Tmax) layout (e.g. one
    completed dataset); default uses the panel's own outcomes. ``mask``
    restricts the rows (complete-case analysis passes the observed mask).
    """
    from .design import DesignSpec, assemble_designs
    spec = DesignSpec(fixed=("1",), profile=("1",), random=("1",))
    data = StackedData(panel, assemble_designs(panel, spec))
    y = data.Y if y_matrix is None else y_matrix
    use = data.valid if mask is None else (data.valid & mask)
    if y_matrix is None:
        has = ~np.isnan(np.where(use, y, np.nan))
        if np.any(use & ~has):
            raise DataError("event model requires outcomes at every included quarter; "
                            "pass a completed dataset or restrict the mask")
    rows = np.where(use.reshape(-1))[0]
    values = np.nan_to_num(y).reshape(-1)[rows]
    if np.any(values <= 0):
        raise DataError("A1c values must be positive for categorization")
    cat = categorize_a1c_index(values)
    events = data.event.reshape(-1)[rows]
    clusters = np.repeat(np.arange(data.n), data.Tmax)[rows]
    cols = [np.ones(len(rows))]
    names = ["intercept"]
    dropped = []
    for idx in range(1, len(A1C_LABELS)):
        dummy = (cat == idx).astype(float)
        if dummy.sum() == 0:
            dropped.append(A1C_LABELS[idx])
            continue
        cols.append(dummy)
        names.append(f"a1c[{A1C_LABELS[idx]}]")
    if dropped:
        logger.warning("empty A1c categories dropped from the event model: %s", dropped)
    for name in adjusters:
        if name not in panel.time_varying_names:
            raise ConfigurationError(
                f"unknown adjuster '{name}'; available: {list(panel.time_varying_names)}")
        col = np.zeros((data.n, data.Tmax))
        for i, pat in enumerate(panel.patients):
            col[i, :pat.T] = [r.time_varying[name] for r in pat.followup]
        cols.append(col.reshape(-1)[rows])
        names.append(name)
    return np.column_stack(cols), events.astype(float), clusters, names, dropped


def fit_event_model(panel: Panel, y_matrix: np.ndarray | None = None,
                    adjusters: tuple[str, ...] = (),
                    correlation: str = "exchangeable") -> GeeResult:
    """GEE logistic fit of events on A1c categories over a completed dataset."""
    X, y, clusters, names, dropped = event_model_rows(panel, y_matrix,
                                                      adjusters=adjusters)
    res = fit_gee_logistic(X, y, clusters, names, correlation)
    res.dropped = dropped
    return res


def cca_analysis(panel: Panel, adjusters: tuple[str, ...] = (),
                 correlation: str = "exchangeable") -> GeeResult:
    """Complete-case fit: quarters with an observed outcome only."""
    from .design import DesignSpec, assemble_designs
    spec = DesignSpec(fixed=("1",), profile=("1",), random=("1",))
    data = StackedData(panel, assemble_designs(panel, spec))
    X, y, clusters, names, dropped = event_model_rows(panel, mask=data.obs,
                                                      adjusters=adjusters)
    res = fit_gee_logistic(X, y, clusters, names, correlation)
    res.dropped = dropped
    return res


@dataclass
class PooledEstimate:
    """Rubin-combined inference for one coefficient."""

    name: str
    estimate: float      # pooled point (mean over imputations)
    within: float        # mean of the per-dataset variances
    between: float       # sample variance of the estimates
    total: float         # within + (1 + 1/M) between
    df: float
    lo95: float
    hi95: float
    M: int


def pool(estimates, covariances, names: list[str] | None = None) -> list[PooledEstimate]:
    """Combine M per-dataset estimates with the classic combining rules.

    total = within + (1 + 1/M) between, and
    df = (M - 1)(1 + within / ((1 + 1/M) between))^2, capped when between is
    zero (identical estimates).
    """
    est = np.asarray(estimates, dtype=float)
    if est.ndim != 2 or est.shape[0] < 2:
        raise PoolingError("pooling requires at least M=2 imputed-data estimates")
    m, k = est.shape
    covs = np.asarray(covariances, dtype=float)
    if covs.shape != (m, k, k):
        raise PoolingError(f"covariances must have shape {(m, k, k)}, got {covs.shape}")
    names = names or [f"x{j}" for j in range(k)]
    qbar = est.mean(axis=0)
    ubar = np.mean(np.diagonal(covs, axis1=1, axis2=2), axis=0)
    bvar = est.var(axis=0, ddof=1)
    total = ubar + (1.0 + 1.0 / m) * bvar
    out = []
    for j in range(k):
        if bvar[j] > 0:
            df = (m - 1) * (1.0 + ubar[j] / ((1.0 + 1.0 / m) * bvar[j])) ** 2
            df = min(df, DF_CAP)
        else:
            df = DF_CAP
        half = stats.t.ppf(0.975, df) * np.sqrt(total[j])
        out.append(PooledEstimate(names[j], float(qbar[j]), float(ubar[j]),
                                  float(bvar[j]), float(total[j]), float(df),
                                  float(qbar[j] - half), float(qbar[j] + half), m))
    return out


def pool_gee(results: list[GeeResult]) -> list[PooledEstimate]:
    names = results[0].names
    for r in results:
        if r.names != names:
            raise PoolingError("per-dataset fits have mismatched coefficient names")
    est = np.stack([r.coef for r in results])
    covs = np.stack([r.cov for r in results])
    return pool(est, covs, names)


def _category_order(term: str) -> tuple:
    # intercept first, categories by lower bound, then adjusters
    if term == "intercept":
        return (0, 0.0, term)
    if term.startswith("a1c["):
        label = term[4:-1]
        return (1, float(A1C_LABELS.index(label)), term)
    return (2, 0.0, term)


def compare_report(pooled: list[PooledEstimate], cca: GeeResult) -> list[dict]:
    """Side-by-side rows (term, source, estimate, lo95, hi95) for plotting."""
    cca_se = cca.se()
    zcrit = stats.norm.ppf(0.975)
    rows = []
    for est in pooled:
        rows.append({"term": est.name, "source": "pooled-mi", "estimate": est.estimate,
                     "lo95": est.lo95, "hi95": est.hi95,
                     "reference": REFERENCE_CATEGORY if est.name.startswith("a1c[") else ""})
    for j, name in enumerate(cca.names):
        rows.append({"term": name, "source": "cca", "estimate": float(cca.coef[j]),
                     "lo95": float(cca.coef[j] - zcrit * cca_se[j]),
                     "hi95": float(cca.coef[j] + zcrit * cca_se[j]),
                     "reference": REFERENCE_CATEGORY if name.startswith("a1c[") else ""})
    rows.sort(key=lambda row: (_category_order(row["term"]), row["source"]))
    return rows
