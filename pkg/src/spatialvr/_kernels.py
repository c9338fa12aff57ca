"""Compiled log-density kernels for the samplers' inner loop.

Matrices here are tiny (a handful of treated units), so explicit loops in
numba beat LAPACK call overhead by more than an order of magnitude. Each
kernel mirrors a readable numpy implementation that the tests compare against.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

from ._nuts import TARGET_SIG

LOG_2PI = math.log(2.0 * math.pi)
LOG_2 = math.log(2.0)


@njit(cache=True)
def _chol(A, L):
    """In-place lower Cholesky of ``A`` into ``L``; returns False if not PD."""
    n = A.shape[0]
    for j in range(n):
        s = A[j, j]
        for k in range(j):
            s -= L[j, k] * L[j, k]
        if not s > 0.0:
            return False
        d = math.sqrt(s)
        L[j, j] = d
        for i in range(j + 1, n):
            s = A[i, j]
            for k in range(j):
                s -= L[i, k] * L[j, k]
            L[i, j] = s / d
        for i in range(j):
            L[i, j] = 0.0
    return True


@njit(cache=True)
def _inv_lower(L, out):
    n = L.shape[0]
    for j in range(n):
        for i in range(n):
            out[i, j] = 0.0
        out[j, j] = 1.0 / L[j, j]
        for i in range(j + 1, n):
            s = 0.0
            for k in range(j, i):
                s -= L[i, k] * out[k, j]
            out[i, j] = s / L[i, i]


@njit(cache=True)
def _halfnormal_lp(x, scale):
    return LOG_2 - 0.5 * math.log(2.0 * math.pi * scale * scale) - x * x / (2.0 * scale * scale)


@njit(cache=True)
def svr_logp_grad(u, Y1, Y0, D2, pri, nugget, grad):
    """Unconstrained SVR log posterior; writes the gradient into ``grad``.

    ``pri`` packs the hyperpriors in the order of ``SvrHyperPriors`` fields.
    Returns ``-inf`` on numerical failure.
    """
    n1 = Y1.shape[0]
    T0 = Y1.shape[1]
    n0 = Y0.shape[0]
    lam_b, mu0, s20, eta_b, a_rb, r_rb, eta_e, a_re, r_re, a_w, b_w = (
        pri[0], pri[1], pri[2], pri[3], pri[4], pri[5], pri[6], pri[7], pri[8], pri[9], pri[10]
    )
    ih = n1 + n0 + n1 * n0
    for k in range(u.shape[0]):
        if not math.isfinite(u[k]):
            return -np.inf
    for k in range(5):
        if abs(u[ih + k]) > 700.0:
            return -np.inf
    sb = math.exp(u[ih])
    rb = math.exp(u[ih + 1])
    se = math.exp(u[ih + 2])
    re = math.exp(u[ih + 3])
    w = 1.0 / (1.0 + math.exp(-u[ih + 4]))
    if not (w > 0.0 and w < 1.0):
        return -np.inf

    Kb = np.empty((n1, n1))
    Ke = np.empty((n1, n1))
    Sig = np.empty((n1, n1))
    for i in range(n1):
        for j in range(n1):
            Kb[i, j] = math.exp(-D2[i, j] / (2.0 * rb))
            Ke[i, j] = math.exp(-D2[i, j] / (2.0 * re))
            Sig[i, j] = se * se * w * Ke[i, j]
        Kb[i, i] += nugget
        Sig[i, i] = se * se
    Lb = np.empty((n1, n1))
    Le = np.empty((n1, n1))
    if not _chol(Kb, Lb):
        return -np.inf
    if not _chol(Sig, Le):
        return -np.inf
    for i in range(n1):
        Kb[i, i] -= nugget

    # B = 1 b^T + sb * Lb @ Z
    zoff = n1 + n0
    LZ = np.zeros((n1, n0))
    B = np.empty((n1, n0))
    for i in range(n1):
        for c in range(n0):
            s = 0.0
            for k in range(i + 1):
                s += Lb[i, k] * u[zoff + k * n0 + c]
            LZ[i, c] = s
            B[i, c] = u[n1 + c] + sb * s

    # residuals R = Y1 - beta0 - B @ Y0
    R = np.empty((n1, T0))
    for i in range(n1):
        for t in range(T0):
            s = Y1[i, t] - u[i]
            for c in range(n0):
                s -= B[i, c] * Y0[c, t]
            R[i, t] = s

    Li = np.empty((n1, n1))
    _inv_lower(Le, Li)
    Sinv = np.zeros((n1, n1))
    for i in range(n1):
        for j in range(i + 1):
            s = 0.0
            for k in range(i, n1):
                s += Li[k, i] * Li[k, j]
            Sinv[i, j] = s
            Sinv[j, i] = s
    A = np.empty((n1, T0))
    quad = 0.0
    for i in range(n1):
        for t in range(T0):
            s = 0.0
            for j in range(n1):
                s += Sinv[i, j] * R[j, t]
            A[i, t] = s
            quad += R[i, t] * s
    logdet = 0.0
    for i in range(n1):
        logdet += 2.0 * math.log(Le[i, i])
    lp = -0.5 * (T0 * (n1 * LOG_2PI + logdet) + quad)

    for k in range(grad.shape[0]):
        grad[k] = 0.0
    gB = np.empty((n1, n0))
    for i in range(n1):
        s = 0.0
        for t in range(T0):
            s += A[i, t]
        grad[i] = s
        for c in range(n0):
            s = 0.0
            for t in range(T0):
                s += A[i, t] * Y0[c, t]
            gB[i, c] = s
    g_lsb = 0.0
    for c in range(n0):
        s = 0.0
        for i in range(n1):
            s += gB[i, c]
            g_lsb += gB[i, c] * LZ[i, c]
        grad[n1 + c] = s
    g_lsb *= sb
    for k in range(n1):
        for c in range(n0):
            s = 0.0
            for i in range(k, n1):
                s += Lb[i, k] * gB[i, c]
            grad[zoff + k * n0 + c] = sb * s

    # adjoint of Lb: Lbar = sb * gB @ Z^T (lower part), then back through chol
    P = np.zeros((n1, n1))
    Lbar = np.zeros((n1, n1))
    for i in range(n1):
        for k in range(i + 1):
            s = 0.0
            for c in range(n0):
                s += gB[i, c] * u[zoff + k * n0 + c]
            Lbar[i, k] = sb * s
    for i in range(n1):
        for j in range(i + 1):
            s = 0.0
            for k in range(i, n1):
                s += Lb[k, i] * Lbar[k, j]
            P[i, j] = s
        P[i, i] *= 0.5
    Lbi = np.empty((n1, n1))
    _inv_lower(Lb, Lbi)
    # S = Lbi^T P Lbi
    X = np.zeros((n1, n1))
    for i in range(n1):
        for j in range(n1):
            s = 0.0
            for k in range(i, n1):
                s += Lbi[k, i] * P[k, j]
            X[i, j] = s
    g_lrb = 0.0
    for i in range(n1):
        for j in range(n1):
            s = 0.0
            for k in range(j, n1):
                s += X[i, k] * Lbi[k, j]
            # symmetrisation is implicit: D2 and Kb are symmetric
            g_lrb += s * Kb[i, j] * D2[i, j]
    g_lrb /= 2.0 * rb

    g_lse = 0.0
    g_w = 0.0
    g_lre = 0.0
    for i in range(n1):
        for j in range(n1):
            s = 0.0
            for t in range(T0):
                s += A[i, t] * A[j, t]
            sbar = 0.5 * s - 0.5 * T0 * Sinv[i, j]
            if i == j:
                g_lse += sbar * 2.0 * se * se
                g_w += sbar * se * se * (Ke[i, j] - 1.0)
            else:
                g_lse += sbar * 2.0 * se * se * w * Ke[i, j]
                g_w += sbar * se * se * Ke[i, j]
                g_lre += sbar * se * se * w * Ke[i, j] * D2[i, j]
    g_lre /= 2.0 * re

    # priors and log-Jacobians
    for c in range(n0):
        bc = u[n1 + c]
        lp += -math.log(2.0 * lam_b) - abs(bc) / lam_b
        if bc > 0:
            grad[n1 + c] -= 1.0 / lam_b
        elif bc < 0:
            grad[n1 + c] += 1.0 / lam_b
    for i in range(n1):
        d0 = u[i] - mu0
        lp += -0.5 * math.log(2.0 * math.pi * s20) - d0 * d0 / (2.0 * s20)
        grad[i] -= d0 / s20
    for k in range(n1 * n0):
        z = u[zoff + k]
        lp += -0.5 * z * z - 0.5 * LOG_2PI
        grad[zoff + k] -= z
    lp += _halfnormal_lp(sb, eta_b) + u[ih]
    lp += a_rb * math.log(r_rb) - math.lgamma(a_rb) + (a_rb - 1.0) * math.log(rb) - r_rb * rb + u[ih + 1]
    lp += _halfnormal_lp(se, eta_e) + u[ih + 2]
    lp += a_re * math.log(r_re) - math.lgamma(a_re) + (a_re - 1.0) * math.log(re) - r_re * re + u[ih + 3]
    lbeta = math.lgamma(a_w) + math.lgamma(b_w) - math.lgamma(a_w + b_w)
    lp += (a_w - 1.0) * math.log(w) + (b_w - 1.0) * math.log1p(-w) - lbeta + math.log(w) + math.log1p(-w)
    grad[ih] = g_lsb + 1.0 - sb * sb / (eta_b * eta_b)
    grad[ih + 1] = g_lrb + a_rb - r_rb * rb
    grad[ih + 2] = g_lse + 1.0 - se * se / (eta_e * eta_e)
    grad[ih + 3] = g_lre + a_re - r_re * re
    grad[ih + 4] = g_w * w * (1.0 - w) + a_w * (1.0 - w) - b_w * w

    if not math.isfinite(lp):
        return -np.inf
    for k in range(grad.shape[0]):
        if not math.isfinite(grad[k]):
            return -np.inf
    return lp


N_PRIOR = 11


def pack_svr(Y1, Y0, D2, pri, nugget) -> np.ndarray:
    n1, T0 = Y1.shape
    n0 = Y0.shape[0]
    return np.concatenate([[n1, n0, T0, nugget], pri, np.ravel(Y1), np.ravel(Y0), np.ravel(D2)]).astype(float)


@njit(TARGET_SIG, cache=True)
def svr_target(u, data, grad):
    """Flat-data adapter over :func:`svr_logp_grad` (layout in :func:`pack_svr`)."""
    n1, n0, T0 = int(data[0]), int(data[1]), int(data[2])
    nugget = data[3]
    o = 4
    pri = data[o : o + N_PRIOR]
    o += N_PRIOR
    Y1 = data[o : o + n1 * T0].reshape((n1, T0))
    o += n1 * T0
    Y0 = data[o : o + n0 * T0].reshape((n0, T0))
    o += n0 * T0
    D2 = data[o : o + n1 * n1].reshape((n1, n1))
    return svr_logp_grad(u, Y1, Y0, D2, pri, nugget, grad)


def pack_regression(y, X, *scalars) -> np.ndarray:
    """``[K, T0, *scalars, y, X]`` with ``X`` shaped ``(K, T0)``."""
    K, T0 = X.shape
    return np.concatenate([[K, T0], scalars, np.ravel(y), np.ravel(X)]).astype(float)


@njit(TARGET_SIG, cache=True)
def bvr_target(u, data, grad):
    """Bayesian vertical regression for one treated series.

    ``u = [alpha, w_1..w_K, log sigma]``; ``data`` packs
    ``(y, X, prior_sd, sigma_scale)`` via :func:`pack_regression`. Normal
    priors on alpha and w, half-normal on sigma.
    """
    K, T0 = int(data[0]), int(data[1])
    psd, eta = data[2], data[3]
    y = data[4 : 4 + T0]
    X = data[4 + T0 : 4 + T0 + K * T0].reshape((K, T0))
    ls = u[K + 1]
    if not math.isfinite(ls) or abs(ls) > 700.0:
        return -np.inf
    sigma = math.exp(ls)
    inv_s2 = 1.0 / (sigma * sigma)
    for k in range(K + 2):
        grad[k] = 0.0
    ss = 0.0
    for t in range(T0):
        r = y[t] - u[0]
        for k in range(K):
            r -= u[1 + k] * X[k, t]
        ss += r * r
        grad[0] += r * inv_s2
        for k in range(K):
            grad[1 + k] += r * X[k, t] * inv_s2
    lp = -0.5 * T0 * LOG_2PI - T0 * ls - 0.5 * ss * inv_s2
    g_ls = -T0 + ss * inv_s2
    pv = psd * psd
    for k in range(K + 1):
        lp += -0.5 * LOG_2PI - math.log(psd) - 0.5 * u[k] * u[k] / pv
        grad[k] -= u[k] / pv
    lp += _halfnormal_lp(sigma, eta) + ls
    grad[K + 1] = g_ls - sigma * sigma / (eta * eta) + 1.0
    if not math.isfinite(lp):
        return -np.inf
    return lp


@njit(TARGET_SIG, cache=True)
def bsc_target(u, data, grad):
    """Bayesian simplex synthetic control for one treated series.

    ``u = [y_1..y_{K-1}, log sigma]``; weights are ``softmax([y, 0])`` under a
    flat Dirichlet prior; ``data`` packs ``(y, X, sigma_scale)``; no intercept.
    """
    K, T0 = int(data[0]), int(data[1])
    eta = data[2]
    yobs = data[3 : 3 + T0]
    X = data[3 + T0 : 3 + T0 + K * T0].reshape((K, T0))
    ls = u[K - 1]
    if not math.isfinite(ls) or abs(ls) > 700.0:
        return -np.inf
    m = 0.0
    for k in range(K - 1):
        if not math.isfinite(u[k]):
            return -np.inf
        if u[k] > m:
            m = u[k]
    x = np.empty(K)
    z = 0.0
    for k in range(K):
        x[k] = math.exp((u[k] if k < K - 1 else 0.0) - m)
        z += x[k]
    for k in range(K):
        x[k] /= z
    sigma = math.exp(ls)
    inv_s2 = 1.0 / (sigma * sigma)
    gx = np.zeros(K)
    ss = 0.0
    for t in range(T0):
        r = yobs[t]
        for k in range(K):
            r -= x[k] * X[k, t]
        ss += r * r
        for k in range(K):
            gx[k] += r * X[k, t] * inv_s2
    lp = -0.5 * T0 * LOG_2PI - T0 * ls - 0.5 * ss * inv_s2
    # flat Dirichlet density Gamma(K) and log-Jacobian sum(log x)
    lp += math.lgamma(K)
    xg = 0.0
    for k in range(K):
        if not x[k] > 0.0:
            return -np.inf
        lp += math.log(x[k])
        xg += x[k] * gx[k]
    for j in range(K - 1):
        grad[j] = x[j] * (gx[j] - xg) + 1.0 - K * x[j]
    lp += _halfnormal_lp(sigma, eta) + ls
    grad[K - 1] = -T0 + ss * inv_s2 - sigma * sigma / (eta * eta) + 1.0
    if not math.isfinite(lp):
        return -np.inf
    return lp
