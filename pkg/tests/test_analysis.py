import numpy as np
import pytest
from hypothesis import given, strategies as st

from lpmi.analysis import (A1C_LABELS, categorize_a1c, categorize_a1c_index,
                           cca_analysis, compare_report, fit_event_model,
                           fit_gee_logistic, pool, pool_gee)
from lpmi.errors import DataError, PoolingError

from conftest import TIME_DESIGN, small_cohort


# ---------------------------------------------------------------------------
# A1c categories


@pytest.mark.parametrize("value,label", [
    (5.9, "<6"), (9.4, ">=9"), (6.5, "6.5-7"), (6.0, "6-6.5"), (9.0, ">=9"),
    (7.49, "7-7.5"), (8.5, "8-9"), (0.1, "<6"),
])
def test_categorize_values(value, label):
    assert categorize_a1c(value) == label


def test_categorize_errors():
    for bad in (0.0, -1.0, np.nan, np.inf):
        with pytest.raises(DataError):
            categorize_a1c(bad)


@given(st.floats(min_value=0.01, max_value=20.0),
       st.floats(min_value=0.01, max_value=20.0))
def test_categorize_monotone(a, b):
    ia, ib = categorize_a1c_index(a), categorize_a1c_index(b)
    if a < b:
        assert ia <= ib


def test_category_indices_partition():
    values = np.linspace(0.01, 15.0, 4007)
    idx = categorize_a1c_index(values)
    assert idx.min() >= 0 and idx.max() <= 6
    assert len(A1C_LABELS) == 7


# ---------------------------------------------------------------------------
# GEE


def logistic_data(n_clusters=500, cluster_size=1, coef=(-1.0, 0.8), re_sd=0.0, seed=0):
    rng = np.random.default_rng(seed)
    rows = n_clusters * cluster_size
    x = rng.standard_normal(rows)
    clusters = np.repeat(np.arange(n_clusters), cluster_size)
    re = np.repeat(rng.normal(0.0, re_sd, n_clusters), cluster_size)
    lp = coef[0] + coef[1] * x + re
    y = (rng.random(rows) < 1.0 / (1.0 + np.exp(-lp))).astype(float)
    X = np.column_stack([np.ones(rows), x])
    return X, y, clusters


def test_single_quarter_clusters_match_ml_logistic():
    X, y, clusters = logistic_data(n_clusters=800, cluster_size=1, seed=1)
    exch = fit_gee_logistic(X, y, clusters, correlation="exchangeable")
    indep = fit_gee_logistic(X, y, clusters, correlation="independence")
    import statsmodels.api as sm
    ml = sm.GLM(y, X, family=sm.families.Binomial()).fit()
    assert np.allclose(exch.coef, indep.coef, atol=1e-8)
    assert np.allclose(exch.coef, ml.params, atol=1e-6)


def test_gee_recovers_known_coefficients():
    X, y, clusters = logistic_data(n_clusters=2000, cluster_size=4,
                                   coef=(-0.7, 0.9), re_sd=0.7, seed=2)
    res = fit_gee_logistic(X, y, clusters)
    se = res.se()
    # marginal (population-averaged) coefficients are attenuated relative to
    # the conditional ones; compare against the statsmodels GEE fit instead
    import statsmodels.api as sm
    from statsmodels.genmod.cov_struct import Exchangeable
    oracle = sm.GEE(y, X, groups=clusters, family=sm.families.Binomial(),
                    cov_struct=Exchangeable()).fit()
    assert np.allclose(res.coef, oracle.params, atol=5e-3)
    assert np.allclose(se, oracle.bse, rtol=0.08)
    assert res.converged


def test_gee_marginal_simulation_recovery():
    # independence truth: marginal = conditional, GEE recovers it
    X, y, clusters = logistic_data(n_clusters=2000, cluster_size=3,
                                   coef=(-0.5, 0.6), re_sd=0.0, seed=3)
    res = fit_gee_logistic(X, y, clusters)
    assert np.all(np.abs(res.coef - np.array([-0.5, 0.6])) < 3.0 * res.se())
    assert abs(res.rho) < 0.02


def test_event_model_on_cohort():
    panel, truth = small_cohort(n=150, seed=4, p_miss=0.0, T=(6, 10),
                                beta=np.array([7.5]))
    res = fit_event_model(panel)
    assert res.names[0] == "intercept"
    assert any(name.startswith("a1c[") for name in res.names)
    assert res.n_clusters == panel.n


def test_cca_equals_full_fit_when_fully_observed():
    panel, truth = small_cohort(n=120, seed=5, p_miss=0.0, beta=np.array([7.5]))
    full = fit_event_model(panel)
    cca = cca_analysis(panel)
    assert full.names == cca.names
    assert np.allclose(full.coef, cca.coef, atol=1e-10)


def test_cca_unbiased_under_mcar():
    panel, truth = small_cohort(n=400, seed=6, p_miss=0.5, T=(8, 14),
                                beta=np.array([7.5]))
    full = fit_event_model(truth.panel_full)
    cca = cca_analysis(panel)
    shared = [n for n in full.names if n in cca.names]
    for name in shared:
        i, j = full.names.index(name), cca.names.index(name)
        se = np.sqrt(full.cov[i, i] + cca.cov[j, j])
        assert abs(full.coef[i] - cca.coef[j]) < 4.0 * se + 0.05


# ---------------------------------------------------------------------------
# Rubin pooling


def test_pool_hand_case_m2():
    est = np.array([[0.0], [2.0]])
    cov = np.ones((2, 1, 1))
    [p] = pool(est, cov, ["x"])
    assert p.estimate == pytest.approx(1.0, abs=1e-12)
    assert p.within == pytest.approx(1.0, abs=1e-12)
    assert p.between == pytest.approx(2.0, abs=1e-12)
    assert p.total == pytest.approx(4.0, abs=1e-12)


def test_pool_hand_case_m3():
    est = np.array([[1.0], [2.0], [3.0]])
    cov = np.ones((3, 1, 1))
    [p] = pool(est, cov)
    assert p.between == pytest.approx(1.0, abs=1e-12)
    assert p.total == pytest.approx(1.0 + (4.0 / 3.0), abs=1e-12)
    expected_df = 2.0 * (1.0 + 1.0 / ((1 + 1 / 3) * 1.0)) ** 2
    assert p.df == pytest.approx(expected_df, abs=1e-9)


def test_pool_identical_estimates():
    est = np.full((5, 2), 1.5)
    cov = np.tile(np.eye(2) * 0.3, (5, 1, 1))
    pooled = pool(est, cov)
    for p in pooled:
        assert p.between == 0.0
        assert p.total == pytest.approx(p.within, abs=1e-12)
        assert p.df == 1e12  # capped "infinite" degrees of freedom


def test_pool_order_invariant():
    rng = np.random.default_rng(7)
    est = rng.standard_normal((6, 3))
    cov = np.stack([np.diag(rng.uniform(0.1, 1.0, 3)) for _ in range(6)])
    base = pool(est, cov)
    perm = rng.permutation(6)
    shuffled = pool(est[perm], cov[perm])
    for a, b in zip(base, shuffled):
        assert a.estimate == pytest.approx(b.estimate, abs=1e-12)
        assert a.total == pytest.approx(b.total, abs=1e-12)
        assert a.df == pytest.approx(b.df, abs=1e-9)


def test_pool_total_at_least_within():
    rng = np.random.default_rng(8)
    est = rng.standard_normal((10, 4))
    cov = np.stack([np.diag(rng.uniform(0.1, 1.0, 4)) for _ in range(10)])
    for p in pool(est, cov):
        assert p.total >= p.within


def test_pool_requires_m_at_least_two():
    with pytest.raises(PoolingError):
        pool(np.array([[1.0]]), np.ones((1, 1, 1)))


# ---------------------------------------------------------------------------
# comparison report


def test_compare_report_rows():
    panel, truth = small_cohort(n=150, seed=9, p_miss=0.3, T=(6, 10),
                                beta=np.array([7.5]))
    fits = [cca_analysis(panel), cca_analysis(panel)]
    pooled = pool_gee(fits)
    rows = compare_report(pooled, cca_analysis(panel))
    terms = [r["term"] for r in rows]
    assert terms[0] == "intercept"
    a1c_terms = [t for t in terms if t.startswith("a1c[")]
    # category rows ordered by lower bound, each term twice (pooled + cca)
    assert a1c_terms == sorted(a1c_terms, key=lambda t: A1C_LABELS.index(t[4:-1]))
    srcs = {r["source"] for r in rows}
    assert srcs == {"pooled-mi", "cca"}
    for r in rows:
        if r["term"].startswith("a1c["):
            assert r["reference"] == "<6"
    # identical inputs: pooled point equals cca point
    for term in a1c_terms[:2]:
        vals = [r["estimate"] for r in rows if r["term"] == term]
        assert vals[0] == pytest.approx(vals[1], abs=1e-10)
