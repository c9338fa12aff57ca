"""Per-unit comparison estimators: SC, OLS, ridge (SR), BVR and BSC.

All fitters take a (usually standardized) :class:`PanelDataset` and return an
:class:`Estimate` in the same space; callers map back to the original scale.
Each treated unit is fitted on the pre-period only, against the controls.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats

from ._kernels import bsc_target, bvr_target, pack_regression
from .diagnostics import max_rhat, summarize
from .sampler import CompiledTarget, FitConfig, derive_seed, nuts_fit

logger = logging.getLogger(__name__)


class SaturatedFitWarning(UserWarning):
    """OLS with at least as many coefficients as pre-period observations."""


@dataclass
class Estimate:
    """Imputations of the treated units' untreated post-period outcomes.

    ``point``/``lo``/``hi`` are ``(N1, H)``. ``draws`` holds posterior
    predictive draws ``(S, N1, H)`` for Bayesian methods. ``fitted_pre`` holds
    pre-period fitted means ``(S, N1, T0)`` (``S = 1`` for point estimators).
    """

    method: str
    weights: np.ndarray
    intercept: np.ndarray | None
    point: np.ndarray
    fitted_pre: np.ndarray
    lo: np.ndarray | None = None
    hi: np.ndarray | None = None
    draws: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)
    archive: "DrawArchive | None" = None

    def __post_init__(self):
        if self.lo is not None and not (np.all(self.lo <= self.point) and np.all(self.point <= self.hi)):
            raise ValueError(f"{self.method}: interval does not bracket the point estimate")

    @property
    def has_intervals(self) -> bool:
        return self.lo is not None


BaselineEstimate = Estimate


@dataclass
class DrawArchive:
    """Constrained parameter draws with per-draw sampler diagnostics."""

    columns: list[str]
    values: np.ndarray  # (S, P)
    chain: np.ndarray
    accept_stat: np.ndarray
    divergent: np.ndarray
    tree_depth: np.ndarray
    summary: dict

    @classmethod
    def from_chains(cls, columns, values, chains, summary) -> "DrawArchive":
        return cls(
            list(columns),
            values,
            np.concatenate([np.full(len(c.draws), c.chain) for c in chains]),
            np.concatenate([c.accept_stat for c in chains]),
            np.concatenate([c.divergent for c in chains]),
            np.concatenate([c.tree_depth for c in chains]),
            summary,
        )

    @classmethod
    def hstack(cls, parts: list["DrawArchive"], prefixes: list[str]) -> "DrawArchive":
        """Side-by-side archive of independent fits with equal draw counts."""
        first = parts[0]
        return cls(
            [f"{p}{c}" for a, p in zip(parts, prefixes) for c in a.columns],
            np.hstack([a.values for a in parts]),
            first.chain,
            np.column_stack([a.accept_stat for a in parts]).mean(axis=1),
            np.column_stack([a.divergent for a in parts]).any(axis=1),
            np.column_stack([a.tree_depth for a in parts]).max(axis=1),
            {f"{p}{k}": v for a, p in zip(parts, prefixes) for k, v in a.summary.items()},
        )


def _split(data):
    t0 = data.t0
    X_pre = data.controls[:, :t0].T  # (T0, N0)
    X_post = data.controls[:, t0:].T
    return X_pre, X_post, data.treated[:, :t0]


# -- synthetic control ---------------------------------------------------


def simplex_kkt_violation(X: np.ndarray, y: np.ndarray, w: np.ndarray) -> float:
    """Largest violation of the KKT conditions of ``min ||y - Xw||^2`` on the simplex."""
    g = X.T @ (X @ w - y)
    free = w > 0
    nu = -g[free].mean() if free.any() else -g.min()
    mu = g + nu
    stationarity = np.abs(mu[free]).max(initial=0.0)
    dual = max(0.0, -mu[~free].min(initial=0.0))
    primal = max(abs(w.sum() - 1.0), max(0.0, -w.min()))
    return float(max(stationarity, dual, primal))


def simplex_lstsq(X: np.ndarray, y: np.ndarray, tol: float = 1e-9, max_iter: int | None = None) -> np.ndarray:
    """Exact least squares over the probability simplex by a primal active-set method."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    K = X.shape[1]
    Q = X.T @ X
    c = X.T @ y
    scale = max(1.0, np.abs(c).max(), np.abs(Q).max())
    max_iter = max_iter or 50 * K + 100
    k0 = int(np.argmin(((X - y[:, None]) ** 2).sum(axis=0)))
    w = np.zeros(K)
    w[k0] = 1.0
    free = [k0]
    for _ in range(max_iter):
        F = np.array(sorted(free))
        m = len(F)
        A = np.zeros((m + 1, m + 1))
        A[:m, :m] = Q[np.ix_(F, F)]
        A[:m, m] = A[m, :m] = 1.0
        rhs = np.append(c[F], 1.0)
        sol = np.linalg.lstsq(A, rhs, rcond=None)[0]
        p = sol[:m] - w[F]
        if np.abs(p).max() <= 1e-14 * max(1.0, np.abs(w).max()):
            g = Q @ w - c
            nu = -g[F].mean()
            mu = g + nu
            mu[F] = 0.0
            j = int(np.argmin(mu))
            if mu[j] >= -tol * scale:
                break
            free.append(j)
            continue
        alpha, block = 1.0, None
        for idx, j in enumerate(F):
            if p[idx] < 0:
                ratio = -w[j] / p[idx]
                if ratio < alpha:
                    alpha, block = ratio, j
        w[F] = w[F] + alpha * p
        if block is not None:
            w[block] = 0.0
            free.remove(block)
        w[F] = np.where(np.abs(w[F]) < 1e-15, 0.0, w[F])
        for j in list(free):
            if w[j] <= 0.0 and len(free) > 1:
                w[j] = 0.0
                free.remove(j)
    else:
        logger.warning("simplex_lstsq hit the iteration limit")
    w = np.maximum(w, 0.0)
    w /= w.sum()
    viol = simplex_kkt_violation(X, y, w)
    if viol > tol * scale:
        logger.warning("simplex_lstsq: KKT violation %.3g above tolerance", viol)
    return w


def fit_sc(data) -> Estimate:
    X_pre, X_post, Y1 = _split(data)
    W = np.array([simplex_lstsq(X_pre, y) for y in Y1])
    point = W @ X_post.T
    fitted = (W @ X_pre.T)[None]
    return Estimate("sc", W, None, point, fitted)


# -- vertical regression: OLS and ridge -----------------------------------


def fit_ols(data, alpha: float = 0.05) -> Estimate:
    """OLS of each treated series on the controls plus an intercept.

    With ``T0 <= N0 + 1`` the fit interpolates: the minimum-norm solution is
    used, residuals are zero and the intervals collapse onto the point.
    """
    X_pre, X_post, Y1 = _split(data)
    T0, N0 = X_pre.shape
    Xd = np.column_stack([np.ones(T0), X_pre])
    Xp = np.column_stack([np.ones(X_post.shape[0]), X_post])
    coef = np.linalg.lstsq(Xd, Y1.T, rcond=None)[0].T  # (N1, N0 + 1)
    point = coef @ Xp.T
    fitted = coef @ Xd.T
    df = T0 - N0 - 1
    if df <= 0:
        warnings.warn(
            f"OLS saturated: {N0 + 1} coefficients for {T0} pre-period observations; intervals have zero width",
            SaturatedFitWarning,
            stacklevel=2,
        )
        resid = Y1 - fitted
        if np.abs(resid).max() <= 1e-8 * max(1.0, np.abs(Y1).max()):
            fitted = Y1.copy()
        lo, hi = point.copy(), point.copy()
    else:
        rss = ((Y1 - fitted) ** 2).sum(axis=1)
        s2 = rss / df
        G = np.linalg.pinv(Xd.T @ Xd)
        lev = np.einsum("ij,jk,ik->i", Xp, G, Xp)
        se = np.sqrt(s2[:, None] * (1.0 + lev[None, :]))
        q = stats.t.ppf(1 - alpha / 2, df)
        lo, hi = point - q * se, point + q * se
    return Estimate("ols", coef[:, 1:], coef[:, 0], point, fitted[None], lo, hi, diagnostics={"df": df})


RIDGE_GRID = np.logspace(-4, 3, 57)


def _ridge_path(X: np.ndarray, y: np.ndarray, lambdas):
    xm, ym = X.mean(axis=0), y.mean()
    Xc, yc = X - xm, y - ym
    U, s, Vt = np.linalg.svd(Xc, full_matrices=False)
    uty = U.T @ yc
    n = X.shape[0]
    out = []
    for lam in lambdas:
        shrink = s / (s**2 + lam)
        beta = Vt.T @ (shrink * uty)
        rss = float(((yc - Xc @ beta) ** 2).sum())
        dof = float((s**2 / (s**2 + lam)).sum()) + 1.0
        gcv = n * rss / (n - dof) ** 2 if n - dof > 1e-12 else math.inf
        out.append((gcv, beta, ym - xm @ beta))
    return out


def ridge_fit(X: np.ndarray, y: np.ndarray, lam: float | None = None, lambdas=RIDGE_GRID):
    """Ridge with an unpenalised intercept; ``lam=None`` selects the penalty by GCV.

    Returns ``(beta, intercept, lam)``.
    """
    if lam is not None:
        _, beta, b0 = _ridge_path(X, y, [lam])[0]
        return beta, b0, float(lam)
    path = _ridge_path(X, y, lambdas)
    k = int(np.argmin([g for g, _, _ in path]))
    return path[k][1], path[k][2], float(lambdas[k])


def fit_ridge(data, lam: float | None = None) -> Estimate:
    X_pre, X_post, Y1 = _split(data)
    fits = [ridge_fit(X_pre, y, lam) for y in Y1]
    W = np.array([f[0] for f in fits])
    b0 = np.array([f[1] for f in fits])
    point = b0[:, None] + W @ X_post.T
    fitted = b0[:, None] + W @ X_pre.T
    return Estimate("sr", W, b0, point, fitted[None], diagnostics={"lambda": [f[2] for f in fits]})


# -- Bayesian per-unit regressions ----------------------------------------


def _summaries(pred: np.ndarray):
    lo, med, hi = np.quantile(pred, [0.025, 0.5, 0.975], axis=0)
    return med, lo, hi


def _chain_stack(chains, transform):
    """Constrained draws shaped ``(chains, draws, params)``."""
    return np.stack([transform(c.draws) for c in chains])


def _fit_bayes_unit(kind, X_pre, X_post, y, cfg: FitConfig, workers: int, sigma_scale: float, prior_sd: float):
    K = X_pre.shape[1]
    Xt = X_pre.T
    if kind == "bvr":
        target = CompiledTarget(bvr_target, pack_regression(y, Xt, prior_sd, sigma_scale))
        dim = K + 2

        def transform(U):
            return np.column_stack([U[:, : K + 1], np.exp(U[:, K + 1])])
    else:
        target = CompiledTarget(bsc_target, pack_regression(y, Xt, sigma_scale))
        dim = K

        def transform(U):
            logits = np.column_stack([U[:, : K - 1], np.zeros(len(U))])
            x = np.exp(logits - logits.max(axis=1, keepdims=True))
            x /= x.sum(axis=1, keepdims=True)
            return np.column_stack([np.zeros(len(U)), x, np.exp(U[:, K - 1])])

    chains = nuts_fit(target, dim, cfg, workers=workers)
    C = _chain_stack(chains, transform)  # (m, n, 1 + K + 1): intercept, weights, sigma
    names = (["intercept"] if kind == "bvr" else []) + [f"w[{k}]" for k in range(K)] + ["sigma"]
    cols = C if kind == "bvr" else C[:, :, 1:]
    diag = summarize(names, cols)
    P = C.reshape(-1, C.shape[-1])
    archive = DrawArchive.from_chains(names, cols.reshape(-1, cols.shape[-1]), chains, diag)
    return P, archive, sum(int(c.divergent.sum()) for c in chains)


def _fit_bayes(kind, data, cfg: FitConfig, workers: int = 1, sigma_scale: float = 0.5, prior_sd: float = 1.0) -> Estimate:
    X_pre, X_post, Y1 = _split(data)
    K = X_pre.shape[1]
    n1 = Y1.shape[0]
    H = X_post.shape[0]
    draws, fitted, W, b0 = [], [], [], []
    rhats, divergences, archives = [], 0, []
    for i in range(n1):
        cfg_i = replace(cfg, seed=derive_seed(cfg.seed, 1, i))
        P, archive, ndiv = _fit_bayes_unit(kind, X_pre, X_post, Y1[i], cfg_i, workers, sigma_scale, prior_sd)
        archives.append(archive)
        alpha, w, sigma = P[:, 0], P[:, 1 : K + 1], P[:, K + 1]
        rng = np.random.default_rng(derive_seed(cfg.seed, 2, i))
        mu = alpha[:, None] + w @ X_post.T
        draws.append(mu + sigma[:, None] * rng.standard_normal((len(P), H)))
        fitted.append(alpha[:, None] + w @ X_pre.T)
        W.append(w.mean(axis=0))
        b0.append(alpha.mean())
        rhats.append(max_rhat(archive.summary))
        divergences += ndiv
    pred = np.stack(draws, axis=1)  # (S, N1, H)
    med, lo, hi = _summaries(pred)
    return Estimate(
        kind,
        np.array(W),
        np.array(b0) if kind == "bvr" else None,
        med,
        np.stack(fitted, axis=1),
        lo,
        hi,
        draws=pred,
        diagnostics={"max_rhat": _nanmax(rhats), "divergences": divergences},
        archive=DrawArchive.hstack(archives, [f"unit{i}." for i in range(n1)]),
    )


def _nanmax(values) -> float:
    vals = [v for v in values if not math.isnan(v)]
    return max(vals) if vals else math.nan


def fit_bvr(data, fitcfg: FitConfig | None = None, workers: int = 1) -> Estimate:
    """Per-unit Bayesian vertical regression (normal priors, half-normal noise sd)."""
    return _fit_bayes("bvr", data, fitcfg or FitConfig(), workers)


def fit_bsc(data, fitcfg: FitConfig | None = None, workers: int = 1) -> Estimate:
    """Per-unit Bayesian synthetic control with simplex weights, no intercept."""
    return _fit_bayes("bsc", data, fitcfg or FitConfig(), workers)
