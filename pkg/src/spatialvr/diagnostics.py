"""Convergence diagnostics: split R-hat and autocorrelation-based ESS."""

from __future__ import annotations

import math
import warnings

import numpy as np


def _as_chains(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise ValueError("expected draws shaped (chains, draws) or (draws,)")
    return x


def split_chains(x) -> np.ndarray:
    x = _as_chains(x)
    half = x.shape[1] // 2
    # odd lengths drop the middle draw
    return np.vstack([x[:, :half], x[:, x.shape[1] - half :]])


def rhat(chains) -> float:
    """Split potential scale reduction for one scalar, chains shaped ``(m, n)``.

    Returns ``nan`` with a warning when every split chain is constant.
    """
    x = _as_chains(chains)
    if x.shape[0] < 2 or x.shape[1] < 4:
        raise ValueError("rhat needs at least 2 chains of 4 draws")
    s = split_chains(x)
    n = s.shape[1]
    W = s.var(axis=1, ddof=1).mean()
    if not W > 0:
        warnings.warn("R-hat undefined: zero within-chain variance", RuntimeWarning, stacklevel=2)
        return math.nan
    B = n * s.mean(axis=1).var(ddof=1)
    var_plus = (n - 1) / n * W + B / n
    return math.sqrt(var_plus / W)


def _autocov(x: np.ndarray) -> np.ndarray:
    """Biased autocovariance of each row via FFT."""
    n = x.shape[-1]
    x = x - x.mean(axis=-1, keepdims=True)
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, size)
    return np.fft.irfft(f * np.conj(f), size)[..., :n] / n


def ess(draws, cap: float = 10.0) -> float:
    """Effective sample size with Geyer's initial monotone sequence.

    ``draws`` is one sequence or ``(chains, draws)``. The result is capped at
    ``cap`` times the total draw count (antithetic chains can exceed it).
    """
    x = _as_chains(draws)
    m, n = x.shape
    if n < 8:
        raise ValueError("ess needs at least 8 draws")
    acov = _autocov(x)
    chain_var = acov[:, 0] * n / (n - 1)
    mean_var = chain_var.mean()
    if not mean_var > 0:
        warnings.warn("ESS of a constant sequence is 0", RuntimeWarning, stacklevel=2)
        return 0.0
    var_plus = mean_var * (n - 1) / n
    if m > 1:
        var_plus += x.mean(axis=1).var(ddof=1)
    acov_mean = acov.mean(axis=0)

    rho = np.zeros(n)
    rho_even = 1.0
    rho[0] = rho_even
    rho_odd = 1.0 - (mean_var - acov_mean[1]) / var_plus
    rho[1] = rho_odd
    t = 1
    while t < n - 3 and rho_even + rho_odd > 0.0:
        rho_even = 1.0 - (mean_var - acov_mean[t + 1]) / var_plus
        rho_odd = 1.0 - (mean_var - acov_mean[t + 2]) / var_plus
        if rho_even + rho_odd >= 0:
            rho[t + 1] = rho_even
            rho[t + 2] = rho_odd
        t += 2
    max_t = t - 2
    if rho_even > 0:
        rho[max_t + 1] = rho_even
    t = 1
    while t <= max_t - 2:
        if rho[t + 1] + rho[t + 2] > rho[t - 1] + rho[t]:
            rho[t + 1] = rho[t + 2] = (rho[t - 1] + rho[t]) / 2.0
        t += 2
    total = m * n
    tau = -1.0 + 2.0 * rho[: max_t + 1].sum() + rho[max_t + 1 : max_t + 2].sum()
    tau = max(tau, 1.0 / math.log10(total))
    return float(min(total / tau, cap * total))


def summarize(names, chains: np.ndarray) -> dict:
    """Per-parameter R-hat and ESS for draws shaped ``(chains, draws, params)``."""
    out = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for k, name in enumerate(names):
            col = chains[:, :, k]
            r = rhat(col) if chains.shape[0] >= 2 and chains.shape[1] >= 4 else math.nan
            e = ess(col) if chains.shape[1] >= 8 else math.nan
            out[name] = {"rhat": r, "ess": e}
    return out


def max_rhat(summary: dict) -> float:
    vals = [v["rhat"] for v in summary.values() if not math.isnan(v["rhat"])]
    return max(vals) if vals else math.nan
