"""Causal effects from imputations: per-cell curves, phase averages and RMSPE.

Everything here works on the original outcome scale. Point summaries are
posterior medians and intervals are equal-tailed 2.5/97.5% quantiles.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .panel import ScalingRecord, panel_to_original

QUANTILES = (0.025, 0.5, 0.975)
EFFECT_COLUMNS = ("method", "unit", "distance", "time", "delta_median", "delta_lo", "delta_hi", "phase")


def compute_effect_draws(observed, counterfactual_draws, scaling: ScalingRecord | None = None,
                         units=None, times=None) -> np.ndarray:
    """``observed - counterfactual`` per draw, shaped like the draws ``(S, N1, H)``.

    With ``scaling`` the draws are taken to be in model space and are mapped
    to the original scale for the given unit and time indices first.
    """
    obs = np.asarray(observed, dtype=float)
    cf = np.asarray(counterfactual_draws, dtype=float)
    if cf.ndim == obs.ndim:
        cf = cf[None]
    if cf.shape[1:] != obs.shape:
        raise ValueError(f"observed {obs.shape} and counterfactual draws {cf.shape[1:]} differ in shape")
    if scaling is not None:
        units = np.arange(obs.shape[0]) if units is None else np.asarray(units)
        times = np.asarray(times)
        if len(units) != obs.shape[0] or len(times) != obs.shape[1]:
            raise ValueError("scale record indices do not match the effect cells")
        if units.max(initial=0) >= scaling.sd.shape[0] or times.max(initial=0) >= scaling.trend.shape[0]:
            raise ValueError("scale record does not cover the requested units/times")
        cf = panel_to_original(cf, scaling, units, times)
    return obs[None] - cf


def quantile_summary(draws: np.ndarray, axis: int = 0):
    lo, med, hi = np.quantile(draws, QUANTILES, axis=axis)
    return med, lo, hi


def _check_windows(windows: dict, horizon: int) -> None:
    for name, idx in windows.items():
        idx = np.asarray(idx)
        if idx.size == 0:
            raise ValueError(f"phase window {name!r} is empty")
        if idx.min() < 0 or idx.max() >= horizon:
            raise ValueError(f"phase window {name!r} falls outside the post period")


def phase_average(delta_draws: np.ndarray, windows: dict) -> dict:
    """Per window: median and interval of the per-draw average effect, per unit.

    ``windows`` maps a name to post-period offsets (0 = first post period).
    Returns ``{name: (median, lo, hi)}`` with arrays of length ``N1``.
    """
    delta_draws = np.asarray(delta_draws, dtype=float)
    _check_windows(windows, delta_draws.shape[-1])
    out = {}
    for name, idx in windows.items():
        avg = delta_draws[..., np.asarray(idx)].mean(axis=-1)  # (S, N1)
        out[name] = quantile_summary(avg)
    return out


def rmspe_draws(observed_pre, fitted_draws) -> np.ndarray:
    """Per-draw, per-unit root mean squared pre-period error ``(S, N1)``."""
    obs = np.asarray(observed_pre, dtype=float)
    fit = np.asarray(fitted_draws, dtype=float)
    if fit.ndim == obs.ndim:
        fit = fit[None]
    return np.sqrt(((obs[None] - fit) ** 2).mean(axis=-1))


def rmspe(observed_pre, fitted_draws) -> np.ndarray:
    """Posterior median pre-period RMSPE per unit."""
    return np.median(rmspe_draws(observed_pre, fitted_draws), axis=0)


@dataclass
class EffectSummary:
    method: str
    median: np.ndarray  # (N1, H)
    lo: np.ndarray
    hi: np.ndarray
    phases: dict  # name -> (median, lo, hi) per unit
    rmspe: np.ndarray
    diagnostics: dict = field(default_factory=dict)


def summarize_estimate(est, observed: np.ndarray, t0: int, windows: dict) -> EffectSummary:
    """Effect summary of an original-scale estimate against the observed panel rows.

    ``observed`` holds the treated units' full series ``(N1, T)``. Methods
    without predictive draws get point effects; their intervals come from the
    imputation intervals when present and are ``nan`` otherwise.
    """
    post = observed[:, t0:]
    if est.draws is not None:
        delta = compute_effect_draws(post, est.draws)
        med, lo, hi = quantile_summary(delta)
        phases = phase_average(delta, windows)
    else:
        med = post - est.point
        if est.lo is not None:
            lo, hi = post - est.hi, post - est.lo
        else:
            lo = hi = np.full_like(med, math.nan)
        _check_windows(windows, med.shape[-1])
        nan = np.full(med.shape[0], math.nan)
        phases = {name: (med[:, np.asarray(idx)].mean(axis=-1), nan, nan) for name, idx in windows.items()}
    return EffectSummary(est.method, med, lo, hi, phases, rmspe(observed[:, :t0], est.fitted_pre), dict(est.diagnostics))


def post_windows(data) -> dict:
    """Phase windows as post-period offsets; warns if they do not partition the post period."""
    from .panel import phase_windows

    wins = {k: np.asarray(v) - data.t0 for k, v in phase_windows(data).items()}
    covered = np.sort(np.concatenate(list(wins.values()))) if wins else np.array([], dtype=int)
    if not np.array_equal(covered, np.arange(data.n_times - data.t0)):
        warnings.warn("phase windows do not partition the post period", UserWarning, stacklevel=2)
    return wins


def _fmt(v) -> str:
    v = float(v)
    return "" if math.isnan(v) else repr(v)


def effects_rows(summary: EffectSummary, data, windows: dict) -> list[list[str]]:
    """Rows of the effects CSV for one method, unit-major then time."""
    phase_of = {}
    for name, idx in windows.items():
        for j in np.asarray(idx):
            phase_of.setdefault(int(j), name)
    rows = []
    for i in range(data.n_treated):
        for h in range(summary.median.shape[1]):
            rows.append([
                summary.method,
                data.unit_ids[i],
                repr(float(data.treated_distances[i])),
                str(data.time_labels[data.t0 + h]),
                _fmt(summary.median[i, h]),
                _fmt(summary.lo[i, h]),
                _fmt(summary.hi[i, h]),
                phase_of.get(h, ""),
            ])
    return rows


def summary_dict(summary: EffectSummary, data) -> dict:
    def num(x):
        x = float(x)
        return None if math.isnan(x) else x

    units = data.unit_ids[: data.n_treated]
    return {
        "phases": {
            name: {u: {"median": num(m[i]), "lo": num(lo[i]), "hi": num(hi[i]),
                       "distance": float(data.treated_distances[i])}
                   for i, u in enumerate(units)}
            for name, (m, lo, hi) in summary.phases.items()
        },
        "rmspe": {u: num(summary.rmspe[i]) for i, u in enumerate(units)},
        "diagnostics": {k: (num(v) if isinstance(v, float) else v) for k, v in summary.diagnostics.items()
                        if isinstance(v, (int, float, str))},
    }
