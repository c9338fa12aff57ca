"""Dense linear algebra for the Gaussian-process pieces of the model.

Everything here is a pure function of its inputs. Random draws take an
explicit ``numpy.random.Generator`` owned by the caller.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

LOG_2PI = math.log(2.0 * math.pi)
DEFAULT_MAX_JITTER = 1e-4


class ParameterDomainError(ValueError):
    """A kernel or covariance parameter lies outside its domain."""


class FactorizationError(np.linalg.LinAlgError):
    """Cholesky failed even after the maximum diagonal jitter."""

    def __init__(self, message: str, min_eigenvalue: float):
        super().__init__(message)
        self.min_eigenvalue = min_eigenvalue


@dataclass(frozen=True)
class CholFactor:
    lower: np.ndarray
    jitter_applied: float = 0.0

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.lower))))


def distance_matrix(d) -> np.ndarray:
    """Pairwise absolute differences ``|d_i - d_j|`` of a 1-D coordinate vector."""
    d = np.asarray(d, dtype=float).ravel()
    return np.abs(d[:, None] - d[None, :])


def sq_exp_correlation(D: np.ndarray, lengthscale_sq: float) -> np.ndarray:
    if not lengthscale_sq > 0:
        raise ParameterDomainError(f"lengthscale_sq must be > 0, got {lengthscale_sq!r}")
    D = np.asarray(D, dtype=float)
    return np.exp(-(D * D) / (2.0 * lengthscale_sq))


def build_sq_exp_kernel(D: np.ndarray, variance: float, lengthscale_sq: float) -> np.ndarray:
    """Squared-exponential kernel ``variance * exp(-D**2 / (2 * lengthscale_sq))``."""
    if not variance > 0:
        raise ParameterDomainError(f"variance must be > 0, got {variance!r}")
    return variance * sq_exp_correlation(D, lengthscale_sq)


def build_error_cov(D: np.ndarray, sigma_e_sq: float, rho_e_sq: float, w: float) -> np.ndarray:
    """Residual covariance mixing a spatial kernel with independent noise.

    ``sigma_e_sq * (w * K(D, rho_e_sq) + (1 - w) * I)``; the diagonal is
    exactly ``sigma_e_sq`` for every ``w`` in [0, 1].
    """
    if not 0.0 <= w <= 1.0:
        raise ParameterDomainError(f"w must lie in [0, 1], got {w!r}")
    if not sigma_e_sq > 0:
        raise ParameterDomainError(f"sigma_e_sq must be > 0, got {sigma_e_sq!r}")
    K = sq_exp_correlation(D, rho_e_sq)
    n = K.shape[0]
    cov = sigma_e_sq * (w * K + (1.0 - w) * np.eye(n))
    np.fill_diagonal(cov, sigma_e_sq)
    return cov


def chol_with_jitter(A: np.ndarray, max_jitter: float = DEFAULT_MAX_JITTER) -> CholFactor:
    """Cholesky factor of ``A``, adding diagonal jitter 1e-10, 1e-9, ... on failure."""
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {A.shape}")
    try:
        return CholFactor(np.linalg.cholesky(A), 0.0)
    except np.linalg.LinAlgError:
        pass
    eye = np.eye(A.shape[0])
    jitter = 1e-10
    while jitter <= max_jitter * (1 + 1e-12):
        try:
            return CholFactor(np.linalg.cholesky(A + jitter * eye), jitter)
        except np.linalg.LinAlgError:
            jitter *= 10.0
    min_eig = float(np.linalg.eigvalsh(0.5 * (A + A.T))[0])
    raise FactorizationError(
        f"Cholesky failed with jitter up to {max_jitter:g}; smallest eigenvalue ~ {min_eig:.3e}",
        min_eig,
    )


def mvn_logpdf(x, mean, chol: CholFactor) -> float:
    x = np.asarray(x, dtype=float)
    mean = np.asarray(mean, dtype=float)
    n = chol.dim
    if x.shape != (n,) or mean.shape != (n,):
        raise ValueError(f"dimension mismatch: x {x.shape}, mean {mean.shape}, factor {n}")
    z = solve_triangular(chol.lower, x - mean, lower=True)
    return -0.5 * (n * LOG_2PI + chol.logdet() + float(z @ z))


def mvn_sample(mean, chol: CholFactor, rng: np.random.Generator) -> np.ndarray:
    mean = np.asarray(mean, dtype=float)
    if mean.shape != (chol.dim,):
        raise ValueError(f"dimension mismatch: mean {mean.shape}, factor {chol.dim}")
    return mean + chol.lower @ rng.standard_normal(chol.dim)


def implied_weights(joint_cov: np.ndarray, n_treated: int) -> np.ndarray:
    """Regression matrix ``Sigma_10 @ inv(Sigma_00)`` of treated on control outcomes.

    ``joint_cov`` is ordered treated-first. Computed by a direct (LU) solve;
    :func:`implied_weights_block_cholesky` gives the factor-based expression.
    """
    S = np.asarray(joint_cov, dtype=float)
    S10 = S[:n_treated, n_treated:]
    S00 = S[n_treated:, n_treated:]
    if np.linalg.cond(S00) > 1e14:
        raise np.linalg.LinAlgError("control block of joint covariance is singular")
    return np.linalg.solve(S00, S10.T).T


def implied_weights_block_cholesky(joint_cov: np.ndarray, n_treated: int) -> np.ndarray:
    """``L11 L01^T L00^{-T} L00^{-1}`` with ``L11 L01^T = Sigma_10``.

    ``L11 = chol(Sigma_11)``, ``L01 = Sigma_01 L11^{-T}`` and ``L00`` factors the
    control block, ``L00 L00^T = Sigma_00``.
    """
    S = np.asarray(joint_cov, dtype=float)
    n1 = n_treated
    L11 = np.linalg.cholesky(S[:n1, :n1])
    L01 = solve_triangular(L11, S[:n1, n1:], lower=True).T
    L00 = np.linalg.cholesky(S[n1:, n1:])
    L00_inv = solve_triangular(L00, np.eye(L00.shape[0]), lower=True)
    return L11 @ L01.T @ L00_inv.T @ L00_inv
