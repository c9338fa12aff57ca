"""No-U-Turn Hamiltonian Monte Carlo with warmup adaptation.

Multinomial trajectory sampling with the generalised no-U-turn criterion
(including the checks across merged subtrees), a diagonal Euclidean metric,
dual-averaging step-size adaptation and windowed variance estimation for the
metric. The target is any callable ``logp_and_grad(q) -> (float, ndarray)``;
a non-finite value marks the point as outside the support. A
:class:`CompiledTarget` additionally runs whole transitions in compiled code
(see ``_nuts``), which is what makes the simulation study affordable.

Each chain draws from its own ``numpy`` generator seeded by ``(seed, chain)``
so results do not depend on scheduling.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

from ._nuts import dual_averaging_update, run_segment

logger = logging.getLogger(__name__)

MAX_DELTA_H = 1000.0


class SamplerInitError(RuntimeError):
    """No usable starting point, or warmup never produced a non-divergent transition."""


class CompiledTarget:
    """A jitted target ``fn(q, data, grad_out) -> logp`` bound to its data vector.

    ``fn`` must be compiled with ``_nuts.TARGET_SIG``. Calling the object gives
    the ordinary ``(logp, grad)`` interface.
    """

    def __init__(self, fn, data: np.ndarray):
        self.fn = fn
        self.data = np.ascontiguousarray(data, dtype=float)

    def __call__(self, q):
        q = np.ascontiguousarray(q, dtype=float)
        g = np.empty_like(q)
        lp = self.fn(q, self.data, g)
        if not math.isfinite(lp):
            return -np.inf, np.zeros_like(q)
        return float(lp), g


@dataclass(frozen=True)
class FitConfig:
    chains: int = 3
    iterations: int = 10_000
    warmup: int = 5_000
    target_accept: float = 0.8
    max_tree_depth: int = 10
    seed: int = 20240101
    init_scale: float = 0.1

    def __post_init__(self):
        if self.chains < 1:
            raise ValueError("chains must be >= 1")
        if not 0 <= self.warmup < self.iterations:
            raise ValueError("warmup must be smaller than iterations")
        if not 0 < self.target_accept < 1:
            raise ValueError("target_accept must lie in (0, 1)")

    @classmethod
    def fast(cls, seed: int = 20240101) -> "FitConfig":
        return cls(chains=3, iterations=2000, warmup=1000, seed=seed)

    @property
    def n_draws(self) -> int:
        return self.iterations - self.warmup


@dataclass
class ChainDraws:
    chain: int
    draws: np.ndarray  # (iterations - warmup, dim), unconstrained
    accept_stat: np.ndarray
    divergent: np.ndarray
    tree_depth: np.ndarray
    n_leapfrog: np.ndarray
    step_size: float
    inv_mass: np.ndarray
    warmup_divergences: int = 0


@dataclass
class _State:
    q: np.ndarray
    p: np.ndarray
    logp: float
    grad: np.ndarray


@dataclass
class _Tree:
    """Summary of a subtree returned by the recursive builder."""

    rho: np.ndarray
    log_w: float
    sample: _State
    p_sharp_beg: np.ndarray
    p_sharp_end: np.ndarray
    p_beg: np.ndarray
    p_end: np.ndarray


class _DualAveraging:
    """Step-size adaptation state ``[mu, h_bar, log_eps_bar, count]``."""

    def __init__(self, mu: float):
        self.state = np.array([mu, 0.0, 0.0, 0.0])

    def update(self, accept_stat: float, target: float) -> float:
        return dual_averaging_update(self.state, accept_stat, target)

    @property
    def final_step(self) -> float:
        return math.exp(self.state[2])


def adaptation_windows(warmup: int, init_buffer: int = 75, term_buffer: int = 50, base_window: int = 25):
    """End indices (exclusive) of the metric-estimation windows.

    An initial buffer tunes only the step size, windows double in length, the
    last window stretches to the terminal buffer. With the default buffers the
    final window spans roughly the second half of warmup.
    """
    if warmup < 20:
        return []
    if init_buffer + term_buffer + base_window > warmup:
        init_buffer = int(0.15 * warmup)
        term_buffer = int(0.1 * warmup)
        base_window = warmup - init_buffer - term_buffer
    ends = []
    start, size = init_buffer, base_window
    last = warmup - term_buffer
    while start < last:
        end = start + size
        if end + 2 * size > last:
            end = last
        ends.append((start, end))
        start, size = end, 2 * size
    return ends


class NUTS:
    """One chain's transition kernel with mutable step size and metric."""

    def __init__(self, logp_and_grad: Callable, dim: int, rng: np.random.Generator, max_tree_depth: int = 10):
        self.f = logp_and_grad
        self.dim = dim
        self.rng = rng
        self.max_depth = max_tree_depth
        self.eps = 1.0
        self.inv_mass = np.ones(dim)
        self.sqrt_mass = np.ones(dim)

    def set_metric(self, inv_mass: np.ndarray) -> None:
        self.inv_mass = np.asarray(inv_mass, dtype=float)
        self.sqrt_mass = 1.0 / np.sqrt(self.inv_mass)

    def _eval(self, q):
        try:
            lp, g = self.f(q)
        except (FloatingPointError, np.linalg.LinAlgError, ValueError, OverflowError):
            return -np.inf, np.zeros_like(q)
        return float(lp), g

    def _kinetic(self, p):
        return 0.5 * float(np.dot(p * self.inv_mass, p))

    def _leapfrog(self, s: _State, eps: float) -> _State:
        p = s.p + 0.5 * eps * s.grad
        q = s.q + eps * self.inv_mass * p
        lp, g = self._eval(q)
        if not math.isfinite(lp):
            return _State(q, p, -np.inf, g)
        p = p + 0.5 * eps * g
        return _State(q, p, lp, g)

    def init_step_size(self, s: _State) -> None:
        """Double or halve the step until one leapfrog step crosses 80% acceptance."""
        p = self.rng.standard_normal(self.dim) * self.sqrt_mass
        s0 = _State(s.q, p, s.logp, s.grad)
        H0 = -s.logp + self._kinetic(p)
        eps = self.eps
        s1 = self._leapfrog(s0, eps)
        H1 = -s1.logp + self._kinetic(s1.p) if math.isfinite(s1.logp) else np.inf
        delta = H0 - H1
        direction = 1 if delta > math.log(0.8) else -1
        for _ in range(100):
            eps = eps * (2.0 if direction == 1 else 0.5)
            s1 = self._leapfrog(s0, eps)
            H1 = -s1.logp + self._kinetic(s1.p) if math.isfinite(s1.logp) else np.inf
            delta = H0 - H1
            if direction == 1 and not delta > math.log(0.8):
                break
            if direction == -1 and delta > math.log(0.8):
                break
            if eps > 1e7 or eps < 1e-10:
                break
        self.eps = eps

    def _uturn_ok(self, p_sharp_minus, p_sharp_plus, rho) -> bool:
        return float(np.dot(p_sharp_plus, rho)) > 0 and float(np.dot(p_sharp_minus, rho)) > 0

    def _build_tree(self, depth: int, s: _State, H0: float, eps: float, stats: dict):
        """Returns ``(tree, edge_state)`` or ``(None, edge_state)`` if invalid."""
        if depth == 0:
            s1 = self._leapfrog(s, eps)
            stats["n_leapfrog"] += 1
            H = -s1.logp + self._kinetic(s1.p) if math.isfinite(s1.logp) else np.inf
            if not math.isfinite(H) or H - H0 > MAX_DELTA_H:
                stats["divergent"] = True
                stats["sum_metro"] += 0.0
                return None, s1
            stats["sum_metro"] += 1.0 if H0 - H > 0 else math.exp(H0 - H)
            ps = self.inv_mass * s1.p
            return _Tree(s1.p.copy(), H0 - H, s1, ps, ps, s1.p, s1.p), s1

        first, s = self._build_tree(depth - 1, s, H0, eps, stats)
        if first is None:
            return None, s
        second, s = self._build_tree(depth - 1, s, H0, eps, stats)
        if second is None:
            return None, s
        log_w = np.logaddexp(first.log_w, second.log_w)
        if math.log(self.rng.random()) < second.log_w - log_w:
            sample = second.sample
        else:
            sample = first.sample
        rho = first.rho + second.rho
        ok = self._uturn_ok(first.p_sharp_beg, second.p_sharp_end, rho)
        ok = ok and self._uturn_ok(first.p_sharp_beg, second.p_sharp_beg, first.rho + second.p_beg)
        ok = ok and self._uturn_ok(first.p_sharp_end, second.p_sharp_end, second.rho + first.p_end)
        tree = _Tree(rho, log_w, sample, first.p_sharp_beg, second.p_sharp_end, first.p_beg, second.p_end)
        return (tree if ok else None), s

    def run(self, cur: _State, n_iter: int, da: _DualAveraging | None, target_accept: float = 0.8):
        """``n_iter`` transitions, adapting the step size when ``da`` is given.

        Returns ``(state, draws (n_iter, dim), stats (n_iter, 4))`` with stats
        columns ``accept_stat, divergent, depth, n_leapfrog``.
        """
        draws = np.empty((n_iter, self.dim))
        stats = np.empty((n_iter, 4))
        if isinstance(self.f, CompiledTarget):
            q, g, lp = cur.q.copy(), cur.grad.copy(), np.array([cur.logp])
            da_state = da.state if da is not None else np.zeros(4)
            self.eps = run_segment(
                self.f.fn, self.f.data, q, g, lp, self.inv_mass, self.eps, da_state, da is not None,
                target_accept, self.max_depth, n_iter, self.rng, draws, stats,
            )
            return _State(q, cur.p, float(lp[0]), g), draws, stats
        for it in range(n_iter):
            cur, acc, div, depth, n_leap = self.transition_reference(cur)
            draws[it] = cur.q
            stats[it] = (acc, float(div), depth, n_leap)
            if da is not None:
                self.eps = da.update(acc, target_accept)
        return cur, draws, stats

    def transition_reference(self, cur: _State):
        """One NUTS iteration in Python; ``_nuts`` mirrors it step for step."""
        p0 = self.rng.standard_normal(self.dim) * self.sqrt_mass
        start = _State(cur.q, p0, cur.logp, cur.grad)
        H0 = -cur.logp + self._kinetic(p0)
        ps0 = self.inv_mass * p0
        # edges: *_bck_bck outermost backward, *_bck_fwd innermost of the backward
        # part, likewise for the forward part
        z_bck = z_fwd = start
        p_bck_bck = p_bck_fwd = p_fwd_bck = p_fwd_fwd = p0
        ps_bck_bck = ps_bck_fwd = ps_fwd_bck = ps_fwd_fwd = ps0
        rho = p0.copy()
        log_w = 0.0
        sample = start
        stats = {"n_leapfrog": 0, "sum_metro": 0.0, "divergent": False}
        depth = 0
        while depth < self.max_depth:
            if self.rng.random() > 0.5:
                rho_bck, p_bck_fwd, ps_bck_fwd = rho, p_fwd_fwd, ps_fwd_fwd
                tree, z_fwd = self._build_tree(depth, z_fwd, H0, self.eps, stats)
                if tree is None:
                    break
                rho_fwd = tree.rho
                ps_fwd_bck, ps_fwd_fwd = tree.p_sharp_beg, tree.p_sharp_end
                p_fwd_bck, p_fwd_fwd = tree.p_beg, tree.p_end
            else:
                rho_fwd, p_fwd_bck, ps_fwd_bck = rho, p_bck_bck, ps_bck_bck
                tree, z_bck = self._build_tree(depth, z_bck, H0, -self.eps, stats)
                if tree is None:
                    break
                rho_bck = tree.rho
                ps_bck_fwd, ps_bck_bck = tree.p_sharp_beg, tree.p_sharp_end
                p_bck_fwd, p_bck_bck = tree.p_beg, tree.p_end
            depth += 1
            if tree.log_w > log_w or self.rng.random() < math.exp(tree.log_w - log_w):
                sample = tree.sample
            log_w = float(np.logaddexp(log_w, tree.log_w))

            rho = rho_bck + rho_fwd
            ok = self._uturn_ok(ps_bck_bck, ps_fwd_fwd, rho)
            ok = ok and self._uturn_ok(ps_bck_bck, ps_fwd_bck, rho_bck + p_fwd_bck)
            ok = ok and self._uturn_ok(ps_bck_fwd, ps_fwd_fwd, rho_fwd + p_bck_fwd)
            if not ok:
                break
        n = max(stats["n_leapfrog"], 1)
        return sample, stats["sum_metro"] / n, stats["divergent"], depth, stats["n_leapfrog"]


def _init_point(f, dim: int, rng: np.random.Generator, scale: float, tries: int = 100) -> _State:
    for _ in range(tries):
        q = rng.normal(0.0, scale, dim)
        try:
            lp, g = f(q)
        except (FloatingPointError, np.linalg.LinAlgError, ValueError, OverflowError):
            continue
        if math.isfinite(lp) and np.all(np.isfinite(g)):
            return _State(q, np.zeros(dim), float(lp), np.asarray(g, dtype=float))
    raise SamplerInitError(f"no finite log density found in {tries} initial draws (scale {scale})")


def derive_seed(seed: int, *keys: int) -> int:
    """A 64-bit seed for a sub-task, stable across platforms and runs."""
    words = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *map(int, keys)]).generate_state(2, np.uint32)
    return int(words[0]) | (int(words[1]) << 32)


def chain_rng(seed: int, chain: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, int(chain)]))


def _segments(warmup: int):
    """Warmup split into ``(start, end, is_metric_window)`` pieces."""
    pieces, pos = [], 0
    for start, end in adaptation_windows(warmup):
        if start > pos:
            pieces.append((pos, start, False))
        pieces.append((start, end, True))
        pos = end
    if pos < warmup:
        pieces.append((pos, warmup, False))
    return pieces


def regularized_variance(x: np.ndarray) -> np.ndarray:
    """Window variance shrunk towards 1e-3, as Stan does for the diagonal metric."""
    n = x.shape[0]
    var = x.var(axis=0, ddof=1) if n > 1 else np.ones(x.shape[1])
    return (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))


def run_chain(logp_and_grad: Callable, dim: int, config: FitConfig, chain: int = 0) -> ChainDraws:
    """Warm up and sample one chain; deterministic in ``(config.seed, chain)``."""
    rng = chain_rng(config.seed, chain)
    kernel = NUTS(logp_and_grad, dim, rng, config.max_tree_depth)
    state = _init_point(logp_and_grad, dim, rng, config.init_scale)
    kernel.init_step_size(state)
    da = _DualAveraging(mu=math.log(10 * kernel.eps))

    warm_div = 0
    for start, end, is_window in _segments(config.warmup):
        state, draws, stats = kernel.run(state, end - start, da, config.target_accept)
        warm_div += int(stats[:, 1].sum())
        if is_window:
            kernel.set_metric(regularized_variance(draws))
            kernel.init_step_size(state)
            da = _DualAveraging(mu=math.log(10 * kernel.eps))
    if config.warmup > 0:
        if warm_div == config.warmup:
            raise SamplerInitError(f"chain {chain}: every warmup transition diverged")
        kernel.eps = da.final_step

    state, draws, stats = kernel.run(state, config.n_draws, None)
    return ChainDraws(
        chain,
        draws,
        stats[:, 0].copy(),
        stats[:, 1] > 0,
        stats[:, 2].astype(int),
        stats[:, 3].astype(int),
        kernel.eps,
        kernel.inv_mass.copy(),
        warm_div,
    )


def nuts_fit(logp_and_grad: Callable, dim: int, config: FitConfig, workers: int = 1) -> list[ChainDraws]:
    """Run ``config.chains`` chains, optionally in worker processes.

    Results come back in chain order regardless of ``workers``; with
    ``workers > 1`` the target must be picklable.
    """
    if workers <= 1 or config.chains == 1:
        return [run_chain(logp_and_grad, dim, config, c) for c in range(config.chains)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(run_chain, logp_and_grad, dim, config, c) for c in range(config.chains)]
        return [f.result() for f in futures]
