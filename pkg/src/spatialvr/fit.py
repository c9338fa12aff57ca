"""Fitting pipeline shared by the CLI and the simulation study.

``prepare`` moves a raw panel into model space (standardize, optionally
detrend, rescale distances); ``fit_method`` dispatches on the method
registry; ``to_original`` maps an estimate back to outcome units.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .baselines import DrawArchive, Estimate, fit_bsc, fit_bvr, fit_ols, fit_ridge, fit_sc
from .diagnostics import max_rhat, summarize
from .linalg import distance_matrix
from .model import SvrHyperPriors, SvrModel, fitted_means, impute_counterfactuals
from .panel import PanelDataset, ScalingRecord, detrend, panel_to_original, rescale_distances, standardize
from .sampler import FitConfig, derive_seed, nuts_fit

METHODS = ("svr", "sc", "sr", "ols", "bvr", "bsc")
BAYESIAN = frozenset({"svr", "bvr", "bsc"})


def prepare(data: PanelDataset, detrend_series: bool = True):
    """Returns ``(model_data, scaling, D)`` with ``D`` the rescaled distance matrix."""
    z, scaling = standardize(data)
    if detrend_series:
        z, scaling = detrend(z, scaling)
    D = distance_matrix(rescale_distances(data.treated_distances))
    return z, scaling, D


def fit_svr(data: PanelDataset, D: np.ndarray, fitcfg: FitConfig | None = None,
            priors: SvrHyperPriors | None = None, workers: int = 1) -> Estimate:
    cfg = fitcfg or FitConfig()
    model = SvrModel(data, D, priors)
    chains = nuts_fit(model.target(), model.dim, cfg, workers=workers)
    draws = model.constrain_many(np.vstack([c.draws for c in chains]))
    names, flat = draws.flat_columns()
    summary = summarize(names, flat.reshape(len(chains), -1, flat.shape[1]))
    rng = np.random.default_rng(derive_seed(cfg.seed, 3))
    pred = impute_counterfactuals(draws, data, D, rng)
    lo, med, hi = np.quantile(pred, [0.025, 0.5, 0.975], axis=0)
    return Estimate(
        "svr",
        draws.B.mean(axis=0),
        draws.beta0.mean(axis=0),
        med,
        fitted_means(draws, data.controls[:, : data.t0]),
        lo,
        hi,
        draws=pred,
        diagnostics={"max_rhat": max_rhat(summary), "divergences": int(sum(c.divergent.sum() for c in chains))},
        archive=DrawArchive.from_chains(names, flat, chains, summary),
    )


def fit_method(method: str, data: PanelDataset, D: np.ndarray, fitcfg: FitConfig | None = None,
               priors: SvrHyperPriors | None = None, workers: int = 1) -> Estimate:
    """Fit one registered method on model-space data."""
    if method == "svr":
        return fit_svr(data, D, fitcfg, priors, workers)
    if method == "sc":
        return fit_sc(data)
    if method == "sr":
        return fit_ridge(data)
    if method == "ols":
        return fit_ols(data)
    if method == "bvr":
        return fit_bvr(data, fitcfg, workers)
    if method == "bsc":
        return fit_bsc(data, fitcfg, workers)
    raise ValueError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")


def method_config(fitcfg: FitConfig, method: str) -> FitConfig:
    """Independent sampler seeds per method so adding a method leaves others unchanged."""
    return replace(fitcfg, seed=derive_seed(fitcfg.seed, METHODS.index(method)))


def to_original(est: Estimate, scaling: ScalingRecord, n_treated: int, t0: int, n_times: int) -> Estimate:
    """Map imputations, intervals, predictive draws and pre-period fits to outcome units."""
    units = np.arange(n_treated)
    post = np.arange(t0, n_times)
    pre = np.arange(t0)

    def back(x, times):
        return None if x is None else panel_to_original(x, scaling, units, times)

    return replace(
        est,
        point=back(est.point, post),
        lo=back(est.lo, post),
        hi=back(est.hi, post),
        draws=back(est.draws, post),
        fitted_pre=back(est.fitted_pre, pre),
    )
