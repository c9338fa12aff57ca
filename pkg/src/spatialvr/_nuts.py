"""Compiled NUTS, a line-for-line port of the Python kernel in ``sampler``.

The target is a jitted function with signature :data:`TARGET_SIG`,
``fn(q, data, grad_out) -> logp``, where ``data`` is one flat float vector
the target knows how to unpack; a non-finite return marks a point outside
the support. Explicit signatures keep everything in the on-disk cache. The
trajectory and adaptation arithmetic match the Python kernel, so both consume
the generator identically.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit, types

TARGET_SIG = types.float64(types.float64[::1], types.float64[::1], types.float64[::1])
TARGET_TYPE = types.FunctionType(TARGET_SIG)
_RNG = types.NumPyRandomGeneratorType("NumPyRandomGeneratorType")

MAX_DELTA_H = 1000.0


@njit(cache=True)
def _logaddexp(a, b):
    if a == -np.inf:
        return b
    if b == -np.inf:
        return a
    if a > b:
        return a + math.log1p(math.exp(b - a))
    return b + math.log1p(math.exp(a - b))


@njit(cache=True)
def _kinetic(p, inv_mass):
    s = 0.0
    for i in range(p.shape[0]):
        s += p[i] * inv_mass[i] * p[i]
    return 0.5 * s


@njit(cache=True)
def _dot(a, b):
    s = 0.0
    for i in range(a.shape[0]):
        s += a[i] * b[i]
    return s


@njit(cache=True)
def _uturn_ok(ps_minus, ps_plus, rho):
    return _dot(ps_plus, rho) > 0.0 and _dot(ps_minus, rho) > 0.0


@njit(cache=True)
def _leapfrog(fn, data, q, p, g, eps, inv_mass):
    """In place; returns the new log density (``-inf`` if outside the support)."""
    n = q.shape[0]
    for i in range(n):
        p[i] += 0.5 * eps * g[i]
    for i in range(n):
        q[i] += eps * inv_mass[i] * p[i]
    lp = fn(q, data, g)
    if not math.isfinite(lp):
        return -np.inf
    for i in range(n):
        p[i] += 0.5 * eps * g[i]
    return lp


@njit(cache=True)
def _build_tree(depth, fn, data, zq, zp, zg, zlp, prop_q, prop_g, prop_lp,
                ps_beg, ps_end, rho, p_beg, p_end, H0, eps, inv_mass, lsw, stats, rng):
    n = zq.shape[0]
    if depth == 0:
        lp = _leapfrog(fn, data, zq, zp, zg, eps, inv_mass)
        zlp[0] = lp
        stats[0] += 1.0
        H = -lp + _kinetic(zp, inv_mass) if math.isfinite(lp) else np.inf
        if not math.isfinite(H) or H - H0 > MAX_DELTA_H:
            stats[2] = 1.0
            return False
        stats[1] += 1.0 if H0 - H > 0 else math.exp(H0 - H)
        lsw[0] = _logaddexp(lsw[0], H0 - H)
        prop_q[:] = zq
        prop_g[:] = zg
        prop_lp[0] = lp
        for i in range(n):
            ps = inv_mass[i] * zp[i]
            ps_beg[i] = ps
            ps_end[i] = ps
            rho[i] += zp[i]
            p_beg[i] = zp[i]
            p_end[i] = zp[i]
        return True

    ps_init_end = np.empty(n)
    p_init_end = np.empty(n)
    rho_init = np.zeros(n)
    lsw_init = np.full(1, -np.inf)
    if not _build_tree(depth - 1, fn, data, zq, zp, zg, zlp, prop_q, prop_g, prop_lp,
                       ps_beg, ps_init_end, rho_init, p_beg, p_init_end, H0, eps, inv_mass, lsw_init, stats, rng):
        return False

    fq = np.empty(n)
    fg = np.empty(n)
    flp = np.empty(1)
    ps_final_beg = np.empty(n)
    p_final_beg = np.empty(n)
    rho_final = np.zeros(n)
    lsw_final = np.full(1, -np.inf)
    if not _build_tree(depth - 1, fn, data, zq, zp, zg, zlp, fq, fg, flp,
                       ps_final_beg, ps_end, rho_final, p_final_beg, p_end, H0, eps, inv_mass, lsw_final, stats, rng):
        return False

    lsw_sub = _logaddexp(lsw_init[0], lsw_final[0])
    lsw[0] = _logaddexp(lsw[0], lsw_sub)
    if math.log(rng.random()) < lsw_final[0] - lsw_sub:
        prop_q[:] = fq
        prop_g[:] = fg
        prop_lp[0] = flp[0]
    rho_sub = rho_init + rho_final
    for i in range(n):
        rho[i] += rho_sub[i]
    if not _uturn_ok(ps_beg, ps_end, rho_sub):
        return False
    if not _uturn_ok(ps_beg, ps_final_beg, rho_init + p_final_beg):
        return False
    return _uturn_ok(ps_init_end, ps_end, rho_final + p_init_end)


@njit(cache=True)
def nuts_transition(fn, data, q, lp, g, inv_mass, eps, max_depth, rng):
    """One NUTS iteration. Returns ``(q, lp, g, accept_stat, divergent, depth, n_leapfrog)``."""
    n = q.shape[0]
    z = rng.standard_normal(n)
    p0 = np.empty(n)
    for i in range(n):
        p0[i] = z[i] * (1.0 / math.sqrt(inv_mass[i]))
    H0 = -lp + _kinetic(p0, inv_mass)
    ps0 = inv_mass * p0

    # forward and backward edge states
    fq, fp, fg, flp = q.copy(), p0.copy(), g.copy(), np.full(1, lp)
    bq, bp, bg, blp = q.copy(), p0.copy(), g.copy(), np.full(1, lp)
    p_bck_bck, p_bck_fwd, p_fwd_bck, p_fwd_fwd = p0.copy(), p0.copy(), p0.copy(), p0.copy()
    ps_bck_bck, ps_bck_fwd, ps_fwd_bck, ps_fwd_fwd = ps0.copy(), ps0.copy(), ps0.copy(), ps0.copy()
    rho = p0.copy()
    rho_fwd = np.zeros(n)
    rho_bck = np.zeros(n)
    log_w = np.zeros(1)
    sq, sg, slp = q.copy(), g.copy(), lp
    prop_q = np.empty(n)
    prop_g = np.empty(n)
    prop_lp = np.empty(1)
    stats = np.zeros(3)  # n_leapfrog, sum_metro, divergent
    depth = 0
    while depth < max_depth:
        lsw_sub = np.full(1, -np.inf)
        if rng.random() > 0.5:
            rho_bck[:] = rho
            p_bck_fwd[:] = p_fwd_fwd
            ps_bck_fwd[:] = ps_fwd_fwd
            rho_fwd[:] = 0.0
            valid = _build_tree(depth, fn, data, fq, fp, fg, flp, prop_q, prop_g, prop_lp,
                                ps_fwd_bck, ps_fwd_fwd, rho_fwd, p_fwd_bck, p_fwd_fwd, H0, eps, inv_mass,
                                lsw_sub, stats, rng)
        else:
            rho_fwd[:] = rho
            p_fwd_bck[:] = p_bck_bck
            ps_fwd_bck[:] = ps_bck_bck
            rho_bck[:] = 0.0
            valid = _build_tree(depth, fn, data, bq, bp, bg, blp, prop_q, prop_g, prop_lp,
                                ps_bck_fwd, ps_bck_bck, rho_bck, p_bck_fwd, p_bck_bck, H0, -eps, inv_mass,
                                lsw_sub, stats, rng)
        if not valid:
            break
        depth += 1
        if lsw_sub[0] > log_w[0] or rng.random() < math.exp(lsw_sub[0] - log_w[0]):
            sq[:] = prop_q
            sg[:] = prop_g
            slp = prop_lp[0]
        log_w[0] = _logaddexp(log_w[0], lsw_sub[0])

        for i in range(n):
            rho[i] = rho_bck[i] + rho_fwd[i]
        if not _uturn_ok(ps_bck_bck, ps_fwd_fwd, rho):
            break
        if not _uturn_ok(ps_bck_bck, ps_fwd_bck, rho_bck + p_fwd_bck):
            break
        if not _uturn_ok(ps_bck_fwd, ps_fwd_fwd, rho_fwd + p_bck_fwd):
            break
    n_leap = max(stats[0], 1.0)
    return sq, slp, sg, stats[1] / n_leap, stats[2] > 0, depth, int(stats[0])


DA_GAMMA = 0.05
DA_T0 = 10.0
DA_KAPPA = 0.75


@njit(cache=True)
def dual_averaging_update(da, accept_stat, target):
    """``da = [mu, h_bar, log_eps_bar, count]``, updated in place; returns the new step."""
    da[3] += 1.0
    count = da[3]
    eta = 1.0 / (count + DA_T0)
    da[1] = (1 - eta) * da[1] + eta * (target - accept_stat)
    log_eps = da[0] - math.sqrt(count) / DA_GAMMA * da[1]
    x = count ** (-DA_KAPPA)
    da[2] = x * log_eps + (1 - x) * da[2]
    return math.exp(log_eps)


@njit(
    types.float64(
        TARGET_TYPE, types.float64[::1], types.float64[::1], types.float64[::1], types.float64[::1],
        types.float64[::1], types.float64, types.float64[::1], types.boolean, types.float64, types.int64,
        types.int64, _RNG, types.float64[:, ::1], types.float64[:, ::1],
    ),
    cache=True,
)
def run_segment(fn, data, q, g, lp, inv_mass, eps, da, adapt, target, max_depth, n_iter, rng, draws_out, stats_out):
    """Run ``n_iter`` transitions from ``(q, g, lp)``, updating them in place.

    With ``adapt`` the step size follows dual averaging. Rows of ``stats_out``
    are ``(accept_stat, divergent, depth, n_leapfrog)``. Returns the step size.
    """
    for it in range(n_iter):
        nq, nlp, ng, acc, div, depth, nleap = nuts_transition(fn, data, q, lp[0], g, inv_mass, eps, max_depth, rng)
        q[:] = nq
        g[:] = ng
        lp[0] = nlp
        draws_out[it, :] = nq
        stats_out[it, 0] = acc
        stats_out[it, 1] = 1.0 if div else 0.0
        stats_out[it, 2] = depth
        stats_out[it, 3] = nleap
        if adapt:
            eps = dual_averaging_update(da, acc, target)
    return eps
