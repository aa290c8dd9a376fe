"""Model selection and posterior predictive checking.

BIC evaluates the likelihood at posterior-mean parameters conditional on the
modal class allocation; its sample-size convention (observed cells for
marginal fits, patient-quarters for joint fits) is recorded in the report so
comparisons stay within one mode. LPML is the sum of log conditional
predictive ordinates, computed stably in log space from the per-patient
likelihood trace. Posterior predictive checks simulate replicated datasets
at the observed cells and summarize two-sided predictive probabilities per
patient and predictive intervals per quarter.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .archive import PosteriorArchive, select_spaced
from .design import Designs, StackedData
from .errors import ConfigurationError
from .panel import Panel
from .rng import RngStream

logger = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))
CPO_STABILITY_RANGE = 30.0


# ---------------------------------------------------------------------------
# model selection


@dataclass
class BicReport:
    bic: float
    loglik: float
    n_parameters: int
    sample_size: int
    sample_size_convention: str
    mode: str

    def to_json_dict(self) -> dict:
        return {"bic": self.bic, "loglik": self.loglik,
                "n_parameters": self.n_parameters, "sample_size": self.sample_size,
                "sample_size_convention": self.sample_size_convention, "mode": self.mode}


def _conditional_loglik(data: StackedData, means: dict, alloc: np.ndarray,
                        mode: str) -> float:
    """Log likelihood at given parameter values conditional on an allocation,
    with outcome random effects integrated analytically."""
    grams = data.grams("observed")
    beta = means["beta"]
    beta_star = means["beta_star"]
    sigma2 = means["sigma2"]
    Sigma_r = np.atleast_2d(means["Sigma_r"])
    r = Sigma_r.shape[0]
    ym = data.masked_y("observed")
    counts = grams.counts
    al = beta_star[alloc]
    s2 = sigma2[alloc]
    u = grams.ry(ym) - np.einsum("npr,p->nr", grams.DR, beta) \
        - np.einsum("nqr,nq->nr", grams.SR, al)
    rr = (np.einsum("nt,nt->n", ym, ym)
          - 2.0 * grams.dy(ym) @ beta
          - 2.0 * np.einsum("nq,nq->n", grams.sy(ym), al)
          + np.einsum("p,npq,q->n", beta, grams.DD, beta)
          + 2.0 * np.einsum("p,npq,nq->n", beta, grams.DS, al)
          + np.einsum("nq,nqk,nk->n", al, grams.SS, al))
    sig_inv = np.linalg.inv(Sigma_r)
    m = np.linalg.inv(sig_inv[None, :, :] + grams.RR / s2[:, None, None])
    quad = rr / s2 - np.einsum("nr,nrk,nk->n", u, m, u) / s2 ** 2
    inner = np.eye(r)[None, :, :] + np.einsum("rk,nkj->nrj", Sigma_r, grams.RR) / s2[:, None, None]
    _, logdet_inner = np.linalg.slogdet(inner)
    ll = -0.5 * (counts * LOG_2PI + counts * np.log(s2) + logdet_inner + quad)
    total = float(ll.sum())
    if mode == "joint":
        lp = np.einsum("ntp,p->nt", data.Dp, means["nu"]) \
            + np.einsum("ntq,nq->nt", data.Dps, means["gamma"][alloc]) \
            + np.einsum("ntr,nr->nt", data.Dpr, means["e"])
        robs = data.obs.astype(float)
        terms = np.where(data.valid, -(robs * np.logaddexp(0.0, -lp)
                                       + (1.0 - robs) * np.logaddexp(0.0, lp)), 0.0)
        total += float(terms.sum())
    return total


def count_parameters(archive: PosteriorArchive) -> int:
    """Free parameters: fixed effects, L-1 profile contrasts, L variances,
    the random-effect covariance, L-1 allocation rows; presence side added in
    joint mode. Random effects are latent, not counted."""
    d = archive.draws
    L = int(archive.meta["L"])
    p = d["beta"].shape[1]
    q = d["beta_star"].shape[2]
    r = d["Sigma_r"].shape[1]
    dd = d["eta"].shape[2]
    k = p + (L - 1) * q + L + r * (r + 1) // 2 + (L - 1) * dd
    if archive.mode == "joint":
        p2 = d["nu"].shape[1]
        q2 = d["gamma"].shape[2]
        r2 = d["E"].shape[1]
        k += p2 + (L - 1) * q2 + r2 * (r2 + 1) // 2
    return k


def bic_value(loglik: float, n_parameters: int, sample_size: float) -> float:
    """-2 loglik + k log N."""
    return -2.0 * loglik + n_parameters * float(np.log(sample_size))


def bic(archive: PosteriorArchive, panel: Panel, designs: Designs,
        presence_designs: Designs | None = None) -> BicReport:
    """BIC at posterior means conditional on the modal allocation."""
    data = StackedData(panel, designs, presence_designs)
    means = archive.posterior_means()
    alloc = archive.modal_allocation()
    loglik = _conditional_loglik(data, means, alloc, archive.mode)
    k = count_parameters(archive)
    if archive.mode == "joint":
        n_eff = int(data.valid.sum())
        convention = "patient-quarters"
    else:
        n_eff = int(data.obs.sum())
        convention = "observed outcome cells"
    return BicReport(bic_value(loglik, k, n_eff), loglik, k, n_eff, convention,
                     archive.mode)


@dataclass
class LpmlResult:
    lpml: float
    log_cpo: np.ndarray
    excluded: list[int] = field(default_factory=list)   # zero-likelihood patients
    unstable: list[int] = field(default_factory=list)   # harmonic mean unreliable


def lpml(loglik_trace: np.ndarray) -> LpmlResult:
    """Sum of log conditional predictive ordinates.

    CPO_i is the harmonic mean of the per-iteration likelihoods, computed in
    log space; patients whose likelihood hits zero at some iteration are
    excluded with a warning, and patients whose log-likelihood range exceeds
    30 are flagged as unstable.
    """
    trace = np.asarray(loglik_trace, dtype=float)
    if trace.ndim != 2 or trace.shape[0] < 1:
        raise ConfigurationError("likelihood trace must be (iterations, patients)")
    t_count, n = trace.shape
    log_cpo = np.log(t_count) - logsumexp(-trace, axis=0)
    excluded = [int(i) for i in np.flatnonzero(np.isneginf(trace).any(axis=0))]
    if excluded:
        logger.warning("%d patient(s) with zero likelihood excluded from LPML: %s",
                       len(excluded), excluded[:10])
        log_cpo[excluded] = np.nan
    spread = trace.max(axis=0) - trace.min(axis=0)
    unstable = [int(i) for i in np.flatnonzero(spread > CPO_STABILITY_RANGE)
                if i not in excluded]
    value = float(np.nansum(log_cpo)) if excluded else float(log_cpo.sum())
    return LpmlResult(value, log_cpo, excluded, unstable)


@dataclass
class SweepRow:
    L: int
    bic: float
    lpml: float
    best_bic: bool = False
    best_lpml: bool = False


def model_comparison_table(entries: list[tuple[int, float, float]]) -> list[SweepRow]:
    """Rows (L, BIC, LPML) with the minimum-BIC and maximum-LPML rows marked."""
    rows = [SweepRow(L, b, l) for L, b, l in entries]
    if rows:
        min_bic = min(r.bic for r in rows)
        max_lpml = max(r.lpml for r in rows)
        for r in rows:
            r.best_bic = r.bic == min_bic
            r.best_lpml = r.lpml == max_lpml
    return rows


# ---------------------------------------------------------------------------
# posterior predictive checking


def replicate_datasets(archive: PosteriorArchive, panel: Panel, designs: Designs,
                       T0: int, rng: RngStream) -> np.ndarray:
    """(T0, n, Tmax) replicated outcomes at the observed cells.

    Each replicate simulates every observed cell from the fitted outcome
    model at one retained draw's parameters, class labels and random
    effects; the presence mask is preserved exactly (cells that were missing
    stay NaN)."""
    data = StackedData(panel, designs)
    idx = select_spaced(archive.n_retained, T0)
    draws = archive.draws
    reps = np.full((T0, data.n, data.Tmax), np.nan)
    for t, k in enumerate(idx):
        gen = rng.substream(t).generator()
        beta = draws["beta"][k]
        alloc = draws["allocation"][k]
        mu = np.einsum("ntp,p->nt", data.D, beta) \
            + np.einsum("ntq,nq->nt", data.Ds, draws["beta_star"][k][alloc]) \
            + np.einsum("ntr,nr->nt", data.Dr, draws["b"][k])
        sigma = np.sqrt(draws["sigma2"][k][alloc])[:, None]
        y = mu + sigma * gen.standard_normal(mu.shape)
        reps[t] = np.where(data.obs, y, np.nan)
    return reps


def ppp(observed_stat: float, replicate_stats) -> float:
    """Two-sided posterior predictive probability; ties count in neither sum."""
    reps = np.asarray(replicate_stats, dtype=float)
    if reps.size == 0:
        raise ConfigurationError("replicate statistics may not be empty")
    above = int(np.sum(reps - observed_stat > 0))
    below = int(np.sum(reps - observed_stat < 0))
    return 2.0 / reps.size * min(above, below)


PATIENT_STATISTICS = ("mean", "p2.5", "p97.5")


def _cell_stats(values: np.ndarray) -> dict[str, float]:
    out = {"mean": float(values.mean())}
    if values.size >= 2:
        out["p2.5"] = float(np.percentile(values, 2.5))
        out["p97.5"] = float(np.percentile(values, 97.5))
    return out


@dataclass
class PppReport:
    """Patient-level ppp values and quarter-level predictive summaries."""

    patient_ppp: dict[str, np.ndarray]          # statistic -> (n,) ppp (NaN = skipped)
    skipped_patients: list[int]                  # too few observed cells for percentiles
    counts_below: dict[str, dict[str, int]]      # statistic -> {"1%": k, "5%": k}
    quarter_rows: list[dict]                     # plot-ready per-quarter rows

    def to_json_dict(self) -> dict:
        return {
            "patient_ppp": {k: [None if np.isnan(x) else float(x) for x in v]
                            for k, v in self.patient_ppp.items()},
            "skipped_patients": self.skipped_patients,
            "counts_below": self.counts_below,
            "quarter_rows": self.quarter_rows,
        }


def ppp_suite(archive: PosteriorArchive, panel: Panel, designs: Designs, T0: int,
              rng: RngStream) -> PppReport:
    """Patient-level ppp for the mean and 2.5/97.5 percentiles, plus
    quarter-level observed vs predictive means with 95% intervals."""
    data = StackedData(panel, designs)
    reps = replicate_datasets(archive, panel, designs, T0, rng)
    n = data.n
    patient_ppp = {name: np.full(n, np.nan) for name in PATIENT_STATISTICS}
    skipped = []
    for i in range(n):
        cells = data.obs[i]
        if not cells.any():
            skipped.append(i)
            continue
        observed_vals = data.Y[i, cells]
        obs_stats = _cell_stats(observed_vals)
        if observed_vals.size < 2:
            skipped.append(i)
        rep_vals = reps[:, i, :][:, cells]
        for name in PATIENT_STATISTICS:
            if name not in obs_stats:
                continue
            if name == "mean":
                rep_stat = rep_vals.mean(axis=1)
            else:
                qq = 2.5 if name == "p2.5" else 97.5
                rep_stat = np.percentile(rep_vals, qq, axis=1)
            patient_ppp[name][i] = ppp(obs_stats[name], rep_stat)
    counts = {}
    for name, vals in patient_ppp.items():
        ok = vals[~np.isnan(vals)]
        counts[name] = {"1%": int(np.sum(ok < 0.01)), "5%": int(np.sum(ok < 0.05)),
                        "evaluated": int(ok.size)}

    quarter_rows = []
    for j in range(data.Tmax):
        cells = data.obs[:, j]
        if not cells.any():
            continue
        observed_mean = float(data.Y[cells, j].mean())
        rep_means = reps[:, cells, j].mean(axis=1)
        quarter_rows.append({
            "quarter": j + 1,
            "n_observed": int(cells.sum()),
            "observed_mean": observed_mean,
            "predictive_mean": float(rep_means.mean()),
            "predictive_lo95": float(np.percentile(rep_means, 2.5)),
            "predictive_hi95": float(np.percentile(rep_means, 97.5)),
        })
    return PppReport(patient_ppp, skipped, counts, quarter_rows)


# ---------------------------------------------------------------------------
# convergence


def split_rhat(chains: list[np.ndarray]) -> float:
    """Split-chain potential scale reduction; NaN when within-variance is 0."""
    halves = []
    for c in chains:
        c = np.asarray(c, dtype=float)
        half = len(c) // 2
        if half < 2:
            raise ConfigurationError("chains too short for split-Rhat")
        halves.extend([c[:half], c[half:2 * half]])
    length = min(len(h) for h in halves)
    seqs = np.stack([h[:length] for h in halves])
    w = seqs.var(axis=1, ddof=1).mean()
    if w == 0.0:
        return float("nan")
    b = length * seqs.mean(axis=1).var(ddof=1)
    var_plus = (length - 1) / length * w + b / length
    return float(np.sqrt(var_plus / w))


def effective_sample_size(chains: list[np.ndarray]) -> float:
    """Multi-chain ESS with Geyer initial positive-sequence truncation."""
    seqs = [np.asarray(c, dtype=float) for c in chains]
    length = min(len(c) for c in seqs)
    seqs = np.stack([c[:length] for c in seqs])
    m = seqs.shape[0]
    w = seqs.var(axis=1, ddof=1).mean()
    if w == 0.0:
        return float("nan")
    if m > 1:
        b = length * seqs.mean(axis=1).var(ddof=1)
        var_plus = (length - 1) / length * w + b / length
    else:
        var_plus = (length - 1) / length * w
    # FFT autocovariances averaged over chains
    acov = np.zeros((m, length))
    for i in range(m):
        x = seqs[i] - seqs[i].mean()
        size = int(2 ** np.ceil(np.log2(2 * length)))
        f = np.fft.rfft(x, size)
        ac = np.fft.irfft(f * np.conjugate(f), size)[:length].real
        acov[i] = ac / length
    mean_acov = acov.mean(axis=0)
    rho = 1.0 - (w - mean_acov) / var_plus
    rho[0] = 1.0
    total = 0.0
    t = 1
    while t + 1 < length:
        pair = rho[t] + rho[t + 1]
        if pair <= 0.0:
            break
        total += pair
        t += 2
    ess = m * length / (1.0 + 2.0 * total)
    return float(min(ess, m * length))


def convergence_report(archives: list[PosteriorArchive] | PosteriorArchive) -> dict:
    """Split-Rhat and ESS for the scalar parameters (fixed effects, noise
    variances, allocation coefficients). A single archive is split in half."""
    if isinstance(archives, PosteriorArchive):
        archives = [archives]
    if not archives:
        raise ConfigurationError("need at least one archive")
    rows = {}
    first = archives[0]
    scalars: dict[str, list[np.ndarray]] = {}

    def add(name: str, getter):
        scalars[name] = [getter(a) for a in archives]

    p = first.draws["beta"].shape[1]
    for j in range(p):
        add(f"beta[{j + 1}]", lambda a, j=j: a.draws["beta"][:, j])
    L = int(first.meta["L"])
    for l in range(L):
        add(f"sigma2[{l + 1}]", lambda a, l=l: a.draws["sigma2"][:, l])
    d = first.draws["eta"].shape[2]
    for l in range(1, L):
        for j in range(d):
            add(f"eta[{l + 1},{j + 1}]", lambda a, l=l, j=j: a.draws["eta"][:, l, j])
    for name, chains in scalars.items():
        rows[name] = {"rhat": split_rhat(chains), "ess": effective_sample_size(chains),
                      "mean": float(np.mean([c.mean() for c in chains]))}
    return {
        "parameters": rows,
        "n_chains": len(archives),
        "retained_per_chain": [a.n_retained for a in archives],
        "thin": int(first.meta.get("thin", 1)),
    }


def relabel_by_trajectory(archive: PosteriorArchive, panel: Panel,
                          designs: Designs) -> PosteriorArchive:
    """Reporting aid: per retained draw, reorder class labels by ascending
    mean fitted trajectory level. Imputations are invariant to labels, so
    this never feeds back into the sampler; note the pinned-zero reference
    row moves with its class."""
    data = StackedData(panel, designs)
    draws = {k: v.copy() for k, v in archive.draws.items()}
    k_total = archive.n_retained
    ds_mean = data.Ds[data.valid].mean(axis=0)  # average profile-design row
    class_keys = [k for k in ("beta_star", "sigma2", "eta", "gamma") if k in draws]
    for t in range(k_total):
        level = draws["beta_star"][t] @ ds_mean
        order = np.argsort(level, kind="stable")
        if np.all(order == np.arange(len(order))):
            continue
        for key in class_keys:
            draws[key][t] = draws[key][t][order]
        remap = np.empty_like(order)
        remap[order] = np.arange(len(order))
        draws["allocation"][t] = remap[draws["allocation"][t]]
    meta = dict(archive.meta)
    meta["relabeled"] = "ascending mean fitted trajectory level"
    return PosteriorArchive(mode=archive.mode, draws=draws, loglik=archive.loglik.copy(),
                            meta=meta, imputed=archive.imputed,
                            imputed_indices=archive.imputed_indices)
