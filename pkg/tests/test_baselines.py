import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spatialvr.baselines import (
    RIDGE_GRID,
    SaturatedFitWarning,
    fit_bsc,
    fit_bvr,
    fit_ols,
    fit_ridge,
    fit_sc,
    ridge_fit,
    simplex_kkt_violation,
    simplex_lstsq,
)
from spatialvr.effects import rmspe
from spatialvr.sampler import FitConfig

from conftest import make_panel

SMALL = FitConfig(chains=2, iterations=1000, warmup=500, seed=3)


def panel_from(treated, controls, t0):
    treated = np.atleast_2d(treated)
    return make_panel(np.vstack([treated, controls]), treated.shape[0], t0)


# -- synthetic control ---------------------------------------------------------


def test_sc_copy_of_control():
    C = np.random.default_rng(0).standard_normal((4, 8))
    est = fit_sc(panel_from(C[1], C, 6))
    np.testing.assert_allclose(est.weights[0], [0, 1, 0, 0], atol=1e-10)
    assert np.abs(est.fitted_pre[0, 0] - C[1, :6]).max() < 1e-10
    np.testing.assert_allclose(est.point[0], C[1, 6:], atol=1e-10)


def test_sc_half_half():
    C = np.random.default_rng(1).standard_normal((3, 7))
    est = fit_sc(panel_from(0.5 * C[0] + 0.5 * C[1], C, 5))
    np.testing.assert_allclose(est.weights[0], [0.5, 0.5, 0.0], atol=1e-6)


def test_sc_clipped_vertex():
    C = np.array([[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]])
    est = fit_sc(panel_from([2.0, 4.0, 6.0], C, 2))
    np.testing.assert_allclose(est.weights[0], [1.0, 0.0], atol=1e-6)


def simplex_grid_oracle(X, y, steps=200):
    best, arg = np.inf, None
    for a in np.linspace(0, 1, steps + 1):
        for b in np.linspace(0, 1 - a, max(int(round((1 - a) * steps)), 0) + 1):
            w = np.array([a, b, 1 - a - b])
            v = ((y - X @ w) ** 2).sum()
            if v < best:
                best, arg = v, w
    return best, arg


def test_sc_against_grid_oracle():
    rng = np.random.default_rng(2)
    X, y = rng.standard_normal((8, 3)), rng.standard_normal(8)
    w = simplex_lstsq(X, y)
    best, _ = simplex_grid_oracle(X, y)
    assert ((y - X @ w) ** 2).sum() <= best + 1e-9


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31), T=st.integers(1, 12), K=st.integers(1, 8))
def test_sc_optimality_properties(seed, T, K):
    rng = np.random.default_rng(seed)
    X, y = rng.standard_normal((T, K)), rng.standard_normal(T)
    w = simplex_lstsq(X, y)
    assert np.all(w >= 0) and abs(w.sum() - 1) < 1e-8
    assert simplex_kkt_violation(X, y, w) < 1e-6
    obj = ((y - X @ w) ** 2).sum()
    vertex = min(((y - X[:, c]) ** 2).sum() for c in range(K))
    assert obj <= vertex + 1e-9


def test_sc_permutation_invariance():
    rng = np.random.default_rng(3)
    C = rng.standard_normal((5, 12))
    y = rng.standard_normal(12)
    perm = rng.permutation(5)
    a = fit_sc(panel_from(y, C, 9))
    b = fit_sc(panel_from(y, C[perm], 9))
    np.testing.assert_allclose(b.weights[0], a.weights[0][perm], atol=1e-8)
    np.testing.assert_allclose(a.point, b.point, atol=1e-8)


# -- OLS -------------------------------------------------------------------------


def test_ols_exact_recovery():
    C = np.random.default_rng(4).standard_normal((3, 20))
    y = 2 * C[0] - C[1] + 3
    est = fit_ols(panel_from(y, C, 15))
    np.testing.assert_allclose(est.weights[0], [2, -1, 0], atol=1e-10)
    assert est.intercept[0] == pytest.approx(3.0, abs=1e-10)
    np.testing.assert_allclose(est.fitted_pre[0, 0], y[:15], atol=1e-10)
    np.testing.assert_allclose(est.point[0], y[15:], atol=1e-10)


def test_ols_intervals_bracket_and_cover():
    rng = np.random.default_rng(5)
    hits = n = 0
    for _ in range(200):
        C = rng.standard_normal((2, 31))
        y = C[0] + rng.standard_normal(31)
        est = fit_ols(panel_from(y, C, 30))
        assert np.all(est.lo <= est.point) and np.all(est.point <= est.hi)
        hits += int(est.lo[0, 0] <= y[30] <= est.hi[0, 0])
        n += 1
    assert 0.9 <= hits / n <= 0.99


def test_ols_saturated(dgp_small):
    from spatialvr.simulation import DgpConfig, generate_realization

    data = generate_realization(DgpConfig(t0=10, t_post=5), 0).data
    with pytest.warns(SaturatedFitWarning):
        est = fit_ols(data)
    assert np.all(rmspe(data.treated[:, :10], est.fitted_pre) == 0.0)
    np.testing.assert_array_equal(est.lo, est.point)
    np.testing.assert_array_equal(est.hi, est.point)


# -- ridge -------------------------------------------------------------------------


def test_ridge_small_lambda_matches_ols():
    rng = np.random.default_rng(6)
    C = rng.standard_normal((3, 25))
    y = C.T @ [0.5, -0.2, 0.1] + 0.3 * rng.standard_normal(25)
    data = panel_from(y, C, 20)
    np.testing.assert_allclose(fit_ridge(data, lam=1e-8).point, fit_ols(data).point, atol=1e-6)


def test_ridge_huge_lambda_shrinks_to_mean():
    rng = np.random.default_rng(7)
    C = rng.standard_normal((3, 25))
    y = C.T @ [0.5, -0.2, 0.1] + 1.0
    est = fit_ridge(panel_from(y, C, 20), lam=1e9)
    assert np.abs(est.weights).max() < 1e-6
    np.testing.assert_allclose(est.point[0], y[:20].mean(), atol=1e-5)


def test_ridge_gcv_on_exact_linear_data():
    rng = np.random.default_rng(8)
    X = rng.standard_normal((30, 4))
    beta = np.array([1.0, -2.0, 0.5, 0.0])
    beta_hat, b0, lam = ridge_fit(X, X @ beta + 2.0)
    assert lam <= 1e-2
    np.testing.assert_allclose(beta_hat, beta, atol=0.05 * np.abs(beta).max())


def test_ridge_continuous_along_grid():
    rng = np.random.default_rng(9)
    X = rng.standard_normal((20, 5))
    y = X @ rng.standard_normal(5) + rng.standard_normal(20)
    x_new = rng.standard_normal(5)
    preds = []
    for lam in RIDGE_GRID:
        b, b0, _ = ridge_fit(X, y, lam=lam)
        preds.append(b0 + x_new @ b)
    preds = np.array(preds)
    scale = np.abs(preds).max()
    assert np.abs(np.diff(preds)).max() <= 0.1 * scale


def test_ridge_has_no_intervals():
    C = np.random.default_rng(10).standard_normal((3, 12))
    est = fit_ridge(panel_from(C[0] + C[1], C, 10))
    assert not est.has_intervals


# -- Bayesian baselines --------------------------------------------------------------


def test_bvr_recovers_weights():
    rng = np.random.default_rng(11)
    C = rng.standard_normal((3, 45))
    y = C.T @ [0.6, -0.3, 0.2] + 0.1 + 0.05 * rng.standard_normal(45)
    est = fit_bvr(panel_from(y, C, 40), SMALL)
    np.testing.assert_allclose(est.weights[0], [0.6, -0.3, 0.2], atol=0.05)
    assert est.draws.shape == (1000, 1, 5)
    assert np.all(est.lo <= est.point) and np.all(est.point <= est.hi)


def test_bvr_prior_dominates_without_data():
    rng = np.random.default_rng(12)
    C = rng.standard_normal((3, 3))
    est = fit_bvr(panel_from(rng.standard_normal(3), C, 1), FitConfig(chains=2, iterations=3000, warmup=1000, seed=1))
    cols = est.archive.columns
    W = est.archive.values[:, [cols.index(f"unit0.w[{k}]") for k in range(3)]]
    np.testing.assert_allclose(W.std(axis=0), 1.0, rtol=0.2)


def test_bsc_finds_copied_control():
    rng = np.random.default_rng(13)
    C = rng.standard_normal((4, 25))
    y = C[1] + 0.01 * rng.standard_normal(25)
    est = fit_bsc(panel_from(y, C, 20), SMALL)
    assert est.weights[0, 1] > 0.9
    assert est.intercept is None
    cols = est.archive.columns
    W = est.archive.values[:, [cols.index(f"unit0.w[{k}]") for k in range(4)]]
    np.testing.assert_allclose(W.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(W >= 0)


def test_sc_and_bsc_fit_alike_on_strong_signal():
    rng = np.random.default_rng(14)
    C = rng.standard_normal((3, 25))
    y = C.T @ [0.7, 0.3, 0.0] + 0.02 * rng.standard_normal(25)
    data = panel_from(y, C, 20)
    sc = fit_sc(data)
    bsc = fit_bsc(data, SMALL)
    err_sc = np.sqrt(((sc.fitted_pre[0, 0] - y[:20]) ** 2).mean())
    err_bsc = np.sqrt(((bsc.fitted_pre.mean(axis=0)[0] - y[:20]) ** 2).mean())
    assert abs(err_sc - err_bsc) < 0.02


def test_bayes_fits_are_deterministic():
    rng = np.random.default_rng(15)
    C = rng.standard_normal((2, 12))
    data = panel_from(C[0] + 0.1 * rng.standard_normal(12), C, 10)
    cfg = FitConfig(chains=2, iterations=200, warmup=100, seed=5)
    np.testing.assert_array_equal(fit_bvr(data, cfg).draws, fit_bvr(data, cfg).draws)
