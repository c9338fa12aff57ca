import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spatialvr.baselines import Estimate
from spatialvr.effects import (
    EFFECT_COLUMNS,
    compute_effect_draws,
    effects_rows,
    phase_average,
    post_windows,
    quantile_summary,
    rmspe,
    summarize_estimate,
    summary_dict,
)
from spatialvr.fit import prepare
from spatialvr.model import SvrModel, impute_counterfactuals
from spatialvr.panel import ScalingRecord, detrend, panel_to_original, standardize
from spatialvr.sampler import FitConfig, nuts_fit

from conftest import make_panel


def test_zero_effect_when_imputation_matches():
    obs = np.arange(6.0).reshape(2, 3)
    assert np.all(compute_effect_draws(obs, np.repeat(obs[None], 4, axis=0)) == 0)


def test_hand_case():
    d = compute_effect_draws(np.array([[10.0]]), np.array([7.0, 8.0, 9.0])[:, None, None])
    np.testing.assert_array_equal(d[:, 0, 0], [3.0, 2.0, 1.0])
    assert quantile_summary(d)[0][0, 0] == 2.0


def test_shape_mismatch():
    with pytest.raises(ValueError):
        compute_effect_draws(np.zeros((2, 3)), np.zeros((5, 2, 4)))


def test_standardized_effect_scales_by_sd(dgp_small):
    z, sc = standardize(dgp_small.data)
    z, sc = detrend(z, sc)
    t0, T = z.t0, z.n_times
    rng = np.random.default_rng(0)
    cf_model = z.treated[:, t0:][None] + rng.normal(0, 0.3, (50, 5, T - t0))
    delta = compute_effect_draws(dgp_small.data.treated[:, t0:], cf_model, sc, np.arange(5), np.arange(t0, T))
    delta_model = z.treated[:, t0:][None] - cf_model
    np.testing.assert_allclose(delta, delta_model * sc.sd[:5, None], atol=1e-10)


def test_scale_record_mismatch():
    sc = ScalingRecord.identity(2, 3)
    with pytest.raises(ValueError):
        compute_effect_draws(np.zeros((2, 2)), np.zeros((3, 2, 2)), sc, np.arange(2), np.arange(2, 4))


def test_phase_average_constant():
    out = phase_average(np.full((20, 2, 4), 1.5), {"a": [0, 1], "b": [2, 3]})
    for med, lo, hi in out.values():
        np.testing.assert_array_equal(med, 1.5)
        np.testing.assert_array_equal(hi - lo, 0.0)


def test_phase_average_is_median_of_draw_averages():
    rng = np.random.default_rng(1)
    delta = rng.standard_normal((101, 1, 3)) ** 3
    med = phase_average(delta, {"all": [0, 1, 2]})["all"][0][0]
    brute = sorted(delta[s, 0].mean() for s in range(101))[50]
    assert med == pytest.approx(brute, abs=1e-12)
    avg_of_medians = np.median(delta[:, 0], axis=0).mean()
    assert med != pytest.approx(avg_of_medians)


@pytest.mark.parametrize("windows", [{"a": []}, {"a": [0, 5]}])
def test_phase_window_errors(windows):
    with pytest.raises(ValueError):
        phase_average(np.zeros((3, 1, 4)), windows)


def test_rmspe_cases():
    obs = np.array([[1.0, 2.0]])
    assert rmspe(obs, obs[None])[0] == 0.0
    assert rmspe(np.array([[3.0, 4.0]]), np.zeros((1, 1, 2)))[0] == pytest.approx(math.sqrt(12.5))
    assert math.sqrt(12.5) == pytest.approx(3.5355, abs=1e-4)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), k=st.floats(-50, 50))
def test_equivariance_and_ordering(seed, k):
    rng = np.random.default_rng(seed)
    obs = rng.standard_normal((2, 3))
    cf = rng.standard_normal((40, 2, 3))
    a = quantile_summary(compute_effect_draws(obs, cf))
    b = quantile_summary(compute_effect_draws(obs + k, cf))
    for x, y in zip(a, b):
        np.testing.assert_allclose(y, x + k, atol=1e-9)
    med, lo, hi = a
    assert np.all(lo <= med) and np.all(med <= hi)


def point_estimate(obs_post, fitted):
    return Estimate("sc", np.zeros((1, 1)), None, obs_post - 1.0, fitted)


def test_summarize_point_method():
    obs = np.array([[1.0, 2.0, 4.0, 6.0]])
    est = point_estimate(obs[:, 2:], obs[None, :, :2])
    s = summarize_estimate(est, obs, 2, {"post": [0, 1]})
    np.testing.assert_array_equal(s.median, [[1.0, 1.0]])
    assert np.isnan(s.lo).all() and s.rmspe[0] == 0.0
    assert s.phases["post"][0][0] == 1.0


def test_post_windows_warn_on_gap():
    data = make_panel(np.random.default_rng(2).standard_normal((2, 6)), 1, 2)
    data = type(data)(**{**data.__dict__, "phases": {"a": (2, 3)}})
    with pytest.warns(UserWarning):
        wins = post_windows(data)
    np.testing.assert_array_equal(wins["a"], [0, 1])
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert list(post_windows(make_panel(np.ones((2, 4)) + np.arange(4), 1, 2))) == ["post"]


def test_effects_rows_schema(dgp_small):
    data = dgp_small.data
    H = data.n_times - data.t0
    cf = np.repeat(data.treated[:, data.t0 :][None], 3, axis=0)
    est = Estimate("svr", np.zeros((5, 10)), None, cf[0], data.treated[None, :, : data.t0], cf[0], cf[0], draws=cf)
    wins = post_windows(data)
    s = summarize_estimate(est, data.treated, data.t0, wins)
    rows = effects_rows(s, data, wins)
    assert len(rows) == 5 * H and all(len(r) == len(EFFECT_COLUMNS) for r in rows)
    d = summary_dict(s, data)
    assert set(d["rmspe"]) == set(data.unit_ids[:5])
    assert d["phases"]["post"]["T1"]["median"] == 0.0


def test_pre_period_effects_centre_on_zero(dgp_small):
    z, sc, D = prepare(dgp_small.data, detrend_series=False)
    model = SvrModel(z, D)
    chains = nuts_fit(model.target(), model.dim, FitConfig(chains=2, iterations=800, warmup=400, seed=4))
    draws = model.constrain_many(np.vstack([c.draws for c in chains]))
    pre = np.arange(z.t0)
    pred = impute_counterfactuals(draws, z, D, np.random.default_rng(0), times=pre)
    pred = panel_to_original(pred, sc, np.arange(5), pre)
    delta = compute_effect_draws(dgp_small.data.treated[:, : z.t0], pred)
    ok = np.abs(np.median(delta, axis=0)) <= 2 * delta.std(axis=0)
    assert ok.mean() >= 0.9
