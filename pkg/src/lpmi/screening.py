"""Covariate screening: an OLS screen on the observed outcomes pooled across
patient-quarters (ignoring within-patient correlation) and a logistic screen
on the presence indicator pooled the same way. A candidate survives if it is
significant in either fit; the union preserves the candidate order."""

from __future__ import annotations

import logging

import numpy as np

from .errors import ConfigurationError
from .glm import drop_collinear, logistic_irls, ols_fit
from .panel import Panel

logger = logging.getLogger(__name__)


def _candidate_matrix(panel: Panel, candidates, per_quarter: bool):
    """Rows are patient-quarters; baseline covariates repeat per quarter."""
    cols = []
    for name in candidates:
        rows = []
        for p in panel.patients:
            if name in panel.baseline_covariate_names:
                rows.extend([p.baseline_covariates[name]] * p.T)
            elif name == "baseline_outcome":
                rows.extend([p.baseline_outcome] * p.T)
            elif name in panel.time_varying_names:
                rows.extend([r.time_varying[name] for r in p.followup])
            else:
                raise ConfigurationError(
                    f"unknown candidate covariate '{name}'; available: "
                    f"{list(panel.baseline_covariate_names) + list(panel.time_varying_names)}")
        cols.append(np.asarray(rows, dtype=float))
    return np.column_stack(cols) if cols else np.zeros((panel.n_quarters, 0))


def screen_covariates(panel: Panel, alpha: float = 0.05,
                      candidates: list[str] | None = None) -> list[str]:
    """Names significant in the outcome OLS or the presence logistic screen.

    Zero-variance candidates are rejected up front with a warning; perfectly
    collinear candidates are dropped from both screens; candidates that
    separate the logistic fit are excluded from the logistic screen only.
    """
    if panel.n == 0:
        raise ConfigurationError("cannot screen an empty panel")
    if candidates is None:
        candidates = list(panel.baseline_covariate_names) + list(panel.time_varying_names)
    X_all = _candidate_matrix(panel, candidates, per_quarter=True)

    keep = []
    for j, name in enumerate(candidates):
        if np.var(X_all[:, j]) == 0.0:
            logger.warning("candidate '%s' has zero variance: rejected", name)
            continue
        keep.append(j)
    names = [candidates[j] for j in keep]
    X_all = X_all[:, keep]

    indep = drop_collinear(X_all, names)
    if len(indep) < len(names):
        dropped = [names[j] for j in range(len(names)) if j not in indep]
        logger.warning("collinear candidates dropped: %s", dropped)
        names = [names[j] for j in indep]
        X_all = X_all[:, indep]
    if not names:
        return []

    observed = np.concatenate([[r.observed for r in p.followup] for p in panel.patients])
    y = np.concatenate([[r.outcome if r.observed else np.nan for r in p.followup]
                        for p in panel.patients]).astype(float)

    design = np.column_stack([np.ones(X_all.shape[0]), X_all])
    ols = ols_fit(design[observed], y[observed])
    selected_ols = {names[j] for j in range(len(names)) if ols.pvalues[j + 1] < alpha}

    logit = logistic_irls(design, observed.astype(float))
    separated = [names[j] for j in range(len(names)) if logit.separated[j + 1]]
    if separated:
        logger.warning("separation in the presence screen; excluding: %s", separated)
        keep_l = [0] + [j + 1 for j in range(len(names)) if names[j] not in separated]
        logit = logistic_irls(design[:, keep_l], observed.astype(float))
        logit_names = [names[j] for j in range(len(names)) if names[j] not in separated]
    else:
        logit_names = list(names)
    selected_logit = {logit_names[j] for j in range(len(logit_names))
                      if logit.pvalues[j + 1] < alpha}

    return [name for name in candidates
            if name in selected_ols or name in selected_logit]
