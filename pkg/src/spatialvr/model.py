"""Spatial vertical regression: priors, likelihood and posterior-predictive imputation.

Each treated unit's untreated outcome is an intercept plus a weighted sum of
control outcomes. The weights a control unit receives across the treated
units follow a Gaussian process over the treated units' (rescaled) distances,
and the residuals mix a spatial kernel with independent noise.

The sampler works on an unconstrained vector laid out as::

    [beta0 (N1) | b (N0) | z (N1*N0, row-major N1 x N0) |
     log sigma_beta | log rho2_beta | log sigma_e | log rho2_e | logit w]

with weights ``B = 1 b^T + sigma_beta * L_beta @ Z`` (non-centred GP).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.special import betaln, erf, expit, gammainc, gammaln

from ._kernels import pack_svr, svr_logp_grad, svr_target
from .sampler import CompiledTarget
from .linalg import LOG_2PI, build_error_cov, chol_with_jitter, mvn_logpdf, sq_exp_correlation

# Added to the GP correlation matrix so its factor exists when rho2_beta is large.
KERNEL_NUGGET = 1e-8
HYPER_NAMES = ("sigma_beta", "rho2_beta", "sigma_e", "rho2_e", "w")


@dataclass(frozen=True)
class SvrHyperPriors:
    lambda_b: float = 0.1
    mu_0: float = 0.0
    sigma2_0: float = 1.0
    eta_beta: float = 0.35
    a_rho_beta: float = 0.5
    eta_rho_beta: float = 2.0
    eta_e: float = 0.5
    a_rho_e: float = 0.5
    eta_rho_e: float = 1.5
    a_w: float = 2.0
    b_w: float = 2.0

    def __post_init__(self):
        for f in fields(self):
            if f.name == "mu_0":
                continue
            if not getattr(self, f.name) > 0:
                raise ValueError(f"hyperprior {f.name} must be positive")

    @classmethod
    def from_json(cls, source) -> "SvrHyperPriors":
        """Build from a JSON file path or mapping; unknown keys are rejected."""
        if isinstance(source, (str, Path)):
            source = json.loads(Path(source).read_text())
        known = {f.name for f in fields(cls)}
        unknown = set(source) - known
        if unknown:
            raise ValueError(f"unknown hyperprior keys: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in source.items()})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SvrParams:
    beta0: np.ndarray
    b: np.ndarray
    B: np.ndarray
    sigma_beta: float
    rho2_beta: float
    sigma_e: float
    rho2_e: float
    w: float

    def __post_init__(self):
        for name in ("sigma_beta", "rho2_beta", "sigma_e", "rho2_e"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.w <= 1.0:
            raise ValueError("w must lie in [0, 1]")


@dataclass(frozen=True)
class SvrDraws:
    """Constrained parameter draws stacked along a leading draw axis."""

    beta0: np.ndarray  # (S, N1)
    b: np.ndarray  # (S, N0)
    B: np.ndarray  # (S, N1, N0)
    sigma_beta: np.ndarray  # (S,)
    rho2_beta: np.ndarray
    sigma_e: np.ndarray
    rho2_e: np.ndarray
    w: np.ndarray

    def __len__(self) -> int:
        return self.beta0.shape[0]

    def __getitem__(self, s: int) -> SvrParams:
        return SvrParams(
            self.beta0[s], self.b[s], self.B[s],
            float(self.sigma_beta[s]), float(self.rho2_beta[s]),
            float(self.sigma_e[s]), float(self.rho2_e[s]), float(self.w[s]),
        )

    def flat_columns(self) -> tuple[list[str], np.ndarray]:
        """Column names and an ``(S, k)`` matrix for draw archives."""
        S, n1, n0 = self.B.shape
        names = [f"beta0[{i}]" for i in range(n1)] + [f"b[{c}]" for c in range(n0)]
        names += [f"B[{i},{c}]" for i in range(n1) for c in range(n0)]
        names += list(HYPER_NAMES)
        mat = np.column_stack(
            [self.beta0, self.b, self.B.reshape(S, -1)]
            + [getattr(self, n)[:, None] for n in HYPER_NAMES]
        )
        return names, mat


def _halfnormal_logpdf(x, scale):
    return math.log(2.0) - 0.5 * math.log(2 * math.pi * scale**2) - x * x / (2 * scale**2)


def _gamma_logpdf(x, shape, rate):
    return shape * math.log(rate) - gammaln(shape) + (shape - 1) * math.log(x) - rate * x


def _beta_logpdf(x, a, b):
    return (a - 1) * math.log(x) + (b - 1) * math.log1p(-x) - betaln(a, b)


def gp_correlation(D: np.ndarray, rho2: float) -> np.ndarray:
    return sq_exp_correlation(D, rho2) + KERNEL_NUGGET * np.eye(D.shape[0])


def log_prior(p: SvrParams, priors: SvrHyperPriors, D: np.ndarray) -> float:
    """Log prior density in the constrained space (weights under their GP prior)."""
    pr = priors
    n1 = p.beta0.shape[0]
    lp = float(np.sum(-math.log(2 * pr.lambda_b) - np.abs(p.b) / pr.lambda_b))
    lp += float(np.sum(-0.5 * math.log(2 * math.pi * pr.sigma2_0) - (p.beta0 - pr.mu_0) ** 2 / (2 * pr.sigma2_0)))
    lp += _halfnormal_logpdf(p.sigma_beta, pr.eta_beta)
    lp += _gamma_logpdf(p.rho2_beta, pr.a_rho_beta, pr.eta_rho_beta)
    lp += _halfnormal_logpdf(p.sigma_e, pr.eta_e)
    lp += _gamma_logpdf(p.rho2_e, pr.a_rho_e, pr.eta_rho_e)
    lp += _beta_logpdf(p.w, pr.a_w, pr.b_w)
    chol = chol_with_jitter(p.sigma_beta**2 * gp_correlation(D, p.rho2_beta))
    ones = np.ones(n1)
    for c in range(p.b.shape[0]):
        lp += mvn_logpdf(p.B[:, c], p.b[c] * ones, chol)
    return lp


def log_likelihood(p: SvrParams, data, D: np.ndarray) -> float:
    """Gaussian log-likelihood of the pre-period treated outcomes (standardized data)."""
    Y1 = data.treated[:, : data.t0]
    Y0 = data.controls[:, : data.t0]
    n1, n0 = p.B.shape
    if Y1.shape[0] != n1 or Y0.shape[0] != n0:
        raise ValueError(f"parameter shapes {p.B.shape} do not match data ({Y1.shape[0]}, {Y0.shape[0]})")
    R = Y1 - p.beta0[:, None] - p.B @ Y0
    chol = chol_with_jitter(build_error_cov(D, p.sigma_e**2, p.rho2_e, p.w))
    Z = solve_triangular(chol.lower, R, lower=True)
    T0 = R.shape[1]
    return -0.5 * (T0 * (n1 * LOG_2PI + chol.logdet()) + float(np.sum(Z * Z)))


def _chol_backward(L: np.ndarray, L_bar: np.ndarray) -> np.ndarray:
    """Symmetric adjoint of ``A`` given the adjoint of ``L = chol(A)``."""
    P = np.tril(L.T @ np.tril(L_bar))
    P[np.diag_indices_from(P)] *= 0.5
    X = solve_triangular(L, P, lower=True, trans="T")  # L^{-T} P
    S = solve_triangular(L, X.T, lower=True, trans="T").T  # L^{-T} P L^{-1}
    return 0.5 * (S + S.T)


class SvrModel:
    """Posterior of the spatial vertical regression on a standardized panel."""

    def __init__(self, data, D: np.ndarray, priors: SvrHyperPriors | None = None):
        self.data = data
        self.D = np.asarray(D, dtype=float)
        self.priors = priors or SvrHyperPriors()
        self.n1 = data.n_treated
        self.n0 = data.n_control
        if self.D.shape != (self.n1, self.n1):
            raise ValueError(f"distance matrix must be {self.n1}x{self.n1}")
        self.Y1 = np.ascontiguousarray(data.treated[:, : data.t0])
        self.Y0 = np.ascontiguousarray(data.controls[:, : data.t0])
        self.T0 = data.t0
        self.D2 = self.D**2
        n1, n0 = self.n1, self.n0
        self._i_b = n1
        self._i_z = n1 + n0
        self._i_h = n1 + n0 + n1 * n0
        self.dim = self._i_h + 5
        self._prior_vec = np.array([getattr(self.priors, f.name) for f in fields(SvrHyperPriors)])

    # -- parameter maps -------------------------------------------------
    def unpack(self, u: np.ndarray):
        n1, n0 = self.n1, self.n0
        beta0 = u[:n1]
        b = u[self._i_b : self._i_z]
        Z = u[self._i_z : self._i_h].reshape(n1, n0)
        h = u[self._i_h :]
        return beta0, b, Z, h

    def constrain(self, u: np.ndarray) -> SvrParams:
        beta0, b, Z, h = self.unpack(np.asarray(u, dtype=float))
        sb, rb, se, re = np.exp(h[:4])
        L = np.linalg.cholesky(gp_correlation(self.D, rb))
        B = b[None, :] + sb * (L @ Z)
        return SvrParams(beta0.copy(), b.copy(), B, float(sb), float(rb), float(se), float(re), float(expit(h[4])))

    def constrain_many(self, U: np.ndarray) -> SvrDraws:
        U = np.atleast_2d(U)
        n1, n0 = self.n1, self.n0
        beta0 = U[:, :n1]
        b = U[:, self._i_b : self._i_z]
        Z = U[:, self._i_z : self._i_h].reshape(-1, n1, n0)
        H = U[:, self._i_h :]
        sb, rb, se, re = (np.exp(H[:, k]) for k in range(4))
        K = np.exp(-self.D2[None] / (2 * rb[:, None, None])) + KERNEL_NUGGET * np.eye(n1)
        L = np.linalg.cholesky(K)
        B = b[:, None, :] + sb[:, None, None] * (L @ Z)
        return SvrDraws(beta0.copy(), b.copy(), B, sb, rb, se, re, expit(H[:, 4]))

    def unconstrain(self, p: SvrParams) -> np.ndarray:
        L = np.linalg.cholesky(gp_correlation(self.D, p.rho2_beta))
        Z = solve_triangular(L, p.B - p.b[None, :], lower=True) / p.sigma_beta
        w = min(max(p.w, 1e-300), 1 - 1e-16)
        h = [math.log(p.sigma_beta), math.log(p.rho2_beta), math.log(p.sigma_e), math.log(p.rho2_e), math.log(w / (1 - w))]
        return np.concatenate([p.beta0, p.b, Z.ravel(), h])

    def log_jacobian(self, u: np.ndarray) -> float:
        """log |d constrained hyperparameters / d u| for the five scalar transforms."""
        h = u[self._i_h :]
        w = expit(h[4])
        return float(h[0] + h[1] + h[2] + h[3] + math.log(w) + math.log1p(-w))

    # -- density ----------------------------------------------------------
    def log_density(self, u: np.ndarray) -> float:
        return self.logp_and_grad(u)[0]

    def target(self) -> CompiledTarget:
        """The log posterior in the form the compiled sampler consumes."""
        return CompiledTarget(svr_target, pack_svr(self.Y1, self.Y0, self.D2, self._prior_vec, KERNEL_NUGGET))

    def logp_and_grad(self, u: np.ndarray):
        """Unnormalised log posterior on the unconstrained space and its gradient.

        Returns ``(-inf, zeros)`` when an intermediate is non-finite so the
        sampler can treat the point as a divergence.
        """
        u = np.ascontiguousarray(u, dtype=float)
        grad = np.empty_like(u)
        value = svr_logp_grad(u, self.Y1, self.Y0, self.D2, self._prior_vec, KERNEL_NUGGET, grad)
        if not math.isfinite(value):
            return -np.inf, np.zeros_like(u)
        return value, grad

    def logp_and_grad_reference(self, u: np.ndarray):
        """Plain numpy version of :meth:`logp_and_grad` (slow; used as a check)."""
        u = np.asarray(u, dtype=float)
        pr = self.priors
        n1, T0 = self.n1, self.T0
        beta0, b, Z, h = self.unpack(u)
        if not np.all(np.isfinite(u)) or np.any(np.abs(h) > 700):
            return -np.inf, np.zeros_like(u)
        sb, rb, se, re = np.exp(h[:4])
        w = float(expit(h[4]))
        try:
            Kb = np.exp(-self.D2 / (2 * rb))
            Lb = np.linalg.cholesky(Kb + KERNEL_NUGGET * np.eye(n1))
            LZ = Lb @ Z
            B = b[None, :] + sb * LZ
            R = self.Y1 - beta0[:, None] - B @ self.Y0
            Ke = np.exp(-self.D2 / (2 * re))
            C = w * Ke + (1.0 - w) * np.eye(n1)
            Sig = (se * se) * C
            Le = np.linalg.cholesky(Sig)
        except (np.linalg.LinAlgError, FloatingPointError):
            return -np.inf, np.zeros_like(u)

        A = cho_solve((Le, True), R)
        logdet = 2.0 * np.sum(np.log(np.diag(Le)))
        ll = -0.5 * (T0 * (n1 * LOG_2PI + logdet) + np.sum(R * A))

        Sig_inv = cho_solve((Le, True), np.eye(n1))
        Sig_bar = 0.5 * (A @ A.T) - 0.5 * T0 * Sig_inv
        gB = A @ self.Y0.T
        g_beta0 = A.sum(axis=1)
        g_b = gB.sum(axis=0)
        g_Z = sb * (Lb.T @ gB)
        g_lsb = sb * np.sum(gB * LZ)
        K_bar = _chol_backward(Lb, sb * (gB @ Z.T))
        g_lrb = np.sum(K_bar * Kb * self.D2) / (2 * rb)
        g_lse = 2.0 * np.sum(Sig_bar * Sig)
        g_w = (se * se) * np.sum(Sig_bar * (Ke - np.eye(n1)))
        g_lre = (se * se) * w * np.sum(Sig_bar * Ke * self.D2) / (2 * re)

        # priors with log-Jacobian terms for the scalar transforms
        lp = np.sum(-math.log(2 * pr.lambda_b) - np.abs(b) / pr.lambda_b)
        g_b = g_b - np.sign(b) / pr.lambda_b
        d0 = beta0 - pr.mu_0
        lp += np.sum(-0.5 * math.log(2 * math.pi * pr.sigma2_0) - d0 * d0 / (2 * pr.sigma2_0))
        g_beta0 = g_beta0 - d0 / pr.sigma2_0
        lp += -0.5 * np.sum(Z * Z) - 0.5 * Z.size * LOG_2PI
        g_Z = g_Z - Z
        lp += _halfnormal_logpdf(sb, pr.eta_beta) + h[0]
        g_lsb += 1.0 - sb * sb / pr.eta_beta**2
        lp += _gamma_logpdf(rb, pr.a_rho_beta, pr.eta_rho_beta) + h[1]
        g_lrb += pr.a_rho_beta - pr.eta_rho_beta * rb
        lp += _halfnormal_logpdf(se, pr.eta_e) + h[2]
        g_lse += 1.0 - se * se / pr.eta_e**2
        lp += _gamma_logpdf(re, pr.a_rho_e, pr.eta_rho_e) + h[3]
        g_lre += pr.a_rho_e - pr.eta_rho_e * re
        lp += (pr.a_w - 1) * math.log(w) + (pr.b_w - 1) * math.log1p(-w) - betaln(pr.a_w, pr.b_w)
        lp += math.log(w) + math.log1p(-w)
        g_lw = g_w * w * (1 - w) + pr.a_w * (1 - w) - pr.b_w * w

        value = float(ll + lp)
        grad = np.concatenate([g_beta0, g_b, g_Z.ravel(), [g_lsb, g_lrb, g_lse, g_lre, g_lw]])
        if not (math.isfinite(value) and np.all(np.isfinite(grad))):
            return -np.inf, np.zeros_like(u)
        return value, grad


def log_posterior_unconstrained(model: SvrModel, u: np.ndarray):
    """Log posterior and gradient on the unconstrained space (compiled kernel)."""
    return model.logp_and_grad(u)


TAIL_THRESHOLDS = (0.1, 0.3, 0.5, 1.0)


def gamma_cdf(x, shape: float, rate: float):
    return gammainc(shape, rate * np.asarray(x, dtype=float))


def halfnormal_variance_cdf(v, scale: float):
    """``P(sigma^2 < v)`` when ``sigma`` is half-normal with the given scale."""
    return erf(np.sqrt(np.asarray(v, dtype=float)) / (scale * math.sqrt(2.0)))


def prior_tail_probabilities(priors: SvrHyperPriors | None = None, thresholds=TAIL_THRESHOLDS) -> dict:
    """Prior mass below each threshold for the lengthscales and the variances."""
    pr = priors or SvrHyperPriors()
    t = np.asarray(thresholds, dtype=float)
    return {
        "rho2_beta": gamma_cdf(t, pr.a_rho_beta, pr.eta_rho_beta),
        "rho2_e": gamma_cdf(t, pr.a_rho_e, pr.eta_rho_e),
        "sigma2_e": halfnormal_variance_cdf(t, pr.eta_e),
        "sigma2_beta": halfnormal_variance_cdf(t, pr.eta_beta),
    }


def fitted_means(draws: SvrDraws, controls: np.ndarray) -> np.ndarray:
    """``mu_it = beta0_i + sum_c B_ic Y_ct`` for every draw: ``(S, N1, T)``."""
    return draws.beta0[:, :, None] + draws.B @ np.asarray(controls, dtype=float)


def impute_counterfactuals(draws: SvrDraws, data, D: np.ndarray, rng: np.random.Generator, times=None) -> np.ndarray:
    """Posterior-predictive draws of the treated units' untreated outcomes.

    Returns ``(S, N1, H)`` for the post period (or the given time indices),
    one multivariate normal draw per parameter draw and time.
    """
    if times is None:
        times = np.arange(data.t0, data.n_times)
    Y0 = data.controls[:, times]
    mu = fitted_means(draws, Y0)
    S, n1, H = mu.shape
    if D.shape != (n1, n1):
        raise ValueError("distance matrix does not match the number of treated units")
    Ke = np.exp(-(D**2)[None] / (2 * draws.rho2_e[:, None, None]))
    w = draws.w[:, None, None]
    Sig = (draws.sigma_e**2)[:, None, None] * (w * Ke + (1 - w) * np.eye(n1))
    L = np.linalg.cholesky(Sig + 1e-12 * np.eye(n1))
    eps = rng.standard_normal((S, n1, H))
    return mu + L @ eps
