"""Simulation study: data-generating process, scenario grid and metrics.

Random streams are keyed by ``(seed, replication)`` and split into
independent children for intercepts, weights, control series and errors, so
scenarios that differ only in ``rho2_s`` or the error mode share every other
draw (common random numbers).
"""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .files import atomic_write_text
from .linalg import build_error_cov, chol_with_jitter, distance_matrix, sq_exp_correlation
from .panel import PanelDataset

logger = logging.getLogger(__name__)

ERROR_MODES = {"IID": (0.0, 0.4), "Spatial40": (0.5, 0.4), "Spatial70": (0.5, 0.7)}
GRID_T0 = (10, 20, 40)
GRID_RHO2_S = (0.001**2, 0.2**2, 0.4**2, 0.6**2)


@dataclass(frozen=True)
class DgpConfig:
    t0: int = 20
    t_post: int = 5
    rho2_s: float = 0.4**2
    error_mode: str = "IID"
    n_treated: int = 5
    n_control: int = 10
    sigma2_s: float = 0.4
    control_mean_sd: float = 0.7
    sigma2_c: float = 0.3**2
    rho2_c: float = 0.05**2
    eta_c: float = 0.15**2
    w_error: float = 0.5
    rho2_e: float = 0.2**2
    seed: int = 20240101

    def __post_init__(self):
        if self.error_mode not in ERROR_MODES:
            raise ValueError(f"error_mode must be one of {sorted(ERROR_MODES)}, got {self.error_mode!r}")
        if self.t0 < 1 or self.t_post < 1:
            raise ValueError("t0 and t_post must be positive")
        if self.n_treated < 1 or self.n_control < 1:
            raise ValueError("need at least one treated and one control unit")
        for name in ("rho2_s", "sigma2_s", "sigma2_c", "rho2_c", "rho2_e"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @property
    def n_times(self) -> int:
        return self.t0 + self.t_post

    @property
    def scenario_id(self) -> str:
        return f"T0={self.t0}_post={self.t_post}_rho2s={self.rho2_s:.6g}_{self.error_mode}"

    @property
    def weight_fraction(self) -> tuple[float, float]:
        """``(w, noise fraction)`` of the error mode."""
        w, frac = ERROR_MODES[self.error_mode]
        return (self.w_error if w > 0 else 0.0), frac


@dataclass(frozen=True)
class DgpRealization:
    data: PanelDataset
    intercepts: np.ndarray
    weights: np.ndarray
    errors: np.ndarray
    sigma2_e: float
    config: DgpConfig
    replication: int
    weight_means: np.ndarray  # m_c, shared by a control's weights across treated units

    @property
    def truth_post(self) -> np.ndarray:
        """True untreated outcomes of the treated units after ``t0``."""
        return self.data.treated[:, self.data.t0 :]


def treated_distances(n: int) -> np.ndarray:
    return np.linspace(0.0, 1.0, n) if n > 1 else np.zeros(1)


def control_time_cov(cfg: DgpConfig) -> np.ndarray:
    # time rescaled to [0, 1] with squared gaps; raw integer gaps would make
    # the series white noise at rho2_c = 0.05^2
    T = cfg.n_times
    tt = np.linspace(0.0, 1.0, T) if T > 1 else np.zeros(1)
    K = sq_exp_correlation(distance_matrix(tt), cfg.rho2_c)
    return cfg.sigma2_c * K + cfg.eta_c * np.eye(T)


def replication_streams(seed: int, replication: int) -> list[np.random.Generator]:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(replication),))
    return [np.random.default_rng(c) for c in ss.spawn(4)]


def generate_realization(cfg: DgpConfig, replication: int) -> DgpRealization:
    n1, n0, T = cfg.n_treated, cfg.n_control, cfg.n_times
    r_int, r_w, r_ctl, r_err = replication_streams(cfg.seed, replication)

    intercepts = r_int.standard_normal(n1)

    d = treated_distances(n1)
    Kb = cfg.sigma2_s * sq_exp_correlation(distance_matrix(d), cfg.rho2_s)
    Lb = chol_with_jitter(Kb).lower
    m = r_w.standard_normal(n0)
    B = m[None, :] + Lb @ r_w.standard_normal((n1, n0))

    Lc = chol_with_jitter(control_time_cov(cfg)).lower
    levels = cfg.control_mean_sd * r_ctl.standard_normal(n0)
    Y0 = levels[:, None] + r_ctl.standard_normal((n0, T)) @ Lc.T

    signal = intercepts[:, None] + B @ Y0
    w, frac = cfg.weight_fraction
    sigma2_e = frac * float(np.mean(signal.var(axis=1, ddof=1))) if T > 1 else frac
    Se = build_error_cov(distance_matrix(d), sigma2_e, cfg.rho2_e, w)
    Le = chol_with_jitter(Se).lower
    eps = Le @ r_err.standard_normal((n1, T))
    Y1 = signal + eps

    data = PanelDataset(
        unit_ids=tuple(f"T{i + 1}" for i in range(n1)) + tuple(f"C{c + 1}" for c in range(n0)),
        outcomes=np.vstack([Y1, Y0]),
        n_treated=n1,
        t0=cfg.t0,
        time_labels=tuple(range(1, T + 1)),
        treated_distances=d + 1.0,
    )
    return DgpRealization(data, intercepts, B, eps, sigma2_e, cfg, replication, m)


# -- scenario grid ------------------------------------------------------------


def full_grid(seed: int = 20240101) -> list[DgpConfig]:
    """The full 7 x 4 x 3 design."""
    return expand_grid(GRID_T0, (5, 10, "t0/2"), GRID_RHO2_S, tuple(ERROR_MODES), seed=seed)


def expand_grid(t0s, t_posts, rho2s, error_modes, seed: int = 20240101, **overrides) -> list[DgpConfig]:
    """Cross product in ``t0, t_post, rho2_s, error_mode`` order.

    ``t_post`` entries may be integers or the string ``"t0/2"``; duplicate
    post lengths for a given ``t0`` are dropped.
    """
    out = []
    for t0 in t0s:
        posts = []
        for tp in t_posts:
            v = t0 // 2 if tp == "t0/2" else int(tp)
            if v not in posts:
                posts.append(v)
        for tp, rho2, mode in itertools.product(posts, rho2s, error_modes):
            out.append(DgpConfig(t0=int(t0), t_post=tp, rho2_s=float(rho2), error_mode=mode, seed=seed, **overrides))
    return out


def grid_from_json(defn: dict) -> tuple[list[DgpConfig], dict]:
    """Grid and run options (``L``, ``fitcfg``, ``methods``) from a grid definition."""
    known = {"t0", "t_post", "rho2_s", "error_mode", "L", "fitcfg", "seed", "methods", "dgp"}
    unknown = set(defn) - known
    if unknown:
        raise ValueError(f"unknown grid keys: {sorted(unknown)}")
    missing = [k for k in ("t0", "t_post", "rho2_s", "error_mode") if k not in defn]
    if missing:
        raise ValueError(f"grid definition missing keys: {missing}")
    seed = int(defn.get("seed", 20240101))
    grid = expand_grid(defn["t0"], defn["t_post"], defn["rho2_s"], defn["error_mode"], seed=seed, **defn.get("dgp", {}))
    opts = {k: defn[k] for k in ("L", "fitcfg", "methods") if k in defn}
    return grid, opts


# -- metrics ------------------------------------------------------------------


@dataclass
class CellTotals:
    """Sums over replications and cells for one method in one scenario."""

    err: float = 0.0
    sq: float = 0.0
    covered: int = 0
    cells: int = 0
    n_ok: int = 0
    n_failed: int = 0
    has_intervals: bool = False

    def add(self, point, truth, lo=None, hi=None) -> None:
        d = np.asarray(point) - truth
        self.err += float(d.sum())
        self.sq += float((d**2).sum())
        self.cells += d.size
        self.n_ok += 1
        if lo is not None:
            self.has_intervals = True
            self.covered += int(((lo <= truth) & (truth <= hi)).sum())

    @property
    def bias(self) -> float:
        return self.err / self.cells if self.cells else math.nan

    @property
    def mse(self) -> float:
        return self.sq / self.cells if self.cells else math.nan

    @property
    def acp(self) -> float:
        return self.covered / self.cells if self.cells and self.has_intervals else math.nan


METRIC_COLUMNS = ("method", "t0", "t_post", "rho2_s", "error_mode", "bias", "mse", "acp", "n_ok", "n_failed")
FAILURE_FLAG_RATE = 0.02
FIT_FAILURES = (np.linalg.LinAlgError, FloatingPointError, RuntimeError, ValueError)


def sampler_seed(grid_seed: int, scenario_id: str, replication: int) -> int:
    from .sampler import derive_seed

    key = int.from_bytes(hashlib.sha256(scenario_id.encode()).digest()[:4], "little")
    return derive_seed(grid_seed, key, replication)


def fit_realization(real: DgpRealization, method, fitcfg, workers: int = 1):
    """Impute the post period on the raw scale: ``(point, lo, hi)``.

    ``method`` is a registry name or a callable taking the realization.
    """
    if callable(method):
        return method(real)
    from .fit import fit_method, method_config, prepare, to_original

    data = real.data
    z, scaling, D = prepare(data, detrend_series=False)
    est = fit_method(method, z, D, method_config(fitcfg, method), workers=workers)
    est = to_original(est, scaling, data.n_treated, data.t0, data.n_times)
    return est.point, est.lo, est.hi


def _method_name(m) -> str:
    return m if isinstance(m, str) else getattr(m, "method_name", getattr(m, "__name__", "custom"))


def run_replication(cfg: DgpConfig, replication: int, methods, fitcfg, workers: int = 1) -> dict:
    """Per-method totals for one replication; failures are recorded, not raised."""
    from .sampler import FitConfig

    real = generate_realization(cfg, replication)
    seed = sampler_seed(cfg.seed, cfg.scenario_id, replication)
    fcfg = replace(fitcfg or FitConfig.fast(), seed=seed)
    out = {}
    for m in methods:
        tot = CellTotals()
        try:
            point, lo, hi = fit_realization(real, m, fcfg, workers)
        except FIT_FAILURES as exc:
            logger.warning("%s rep %d %s failed: %s", cfg.scenario_id, replication, _method_name(m), exc)
            tot.n_failed = 1
        else:
            tot.add(point, real.truth_post, lo, hi)
        out[_method_name(m)] = tot
    return out


def _merge(parts: list[dict], names) -> dict:
    total = {n: CellTotals() for n in names}
    for part in parts:  # replication order, so sums are reproducible
        for n, t in part.items():
            acc = total[n]
            acc.err += t.err
            acc.sq += t.sq
            acc.covered += t.covered
            acc.cells += t.cells
            acc.n_ok += t.n_ok
            acc.n_failed += t.n_failed
            acc.has_intervals |= t.has_intervals
    return total


def run_scenario(cfg: DgpConfig, methods, L: int = 200, fitcfg=None, workers: int = 1) -> list[dict]:
    """Metrics rows (one per method) for ``L`` replications of one scenario."""
    if not methods:
        raise ValueError("methods must be nonempty")
    names = [_method_name(m) for m in methods]
    if workers > 1 and L > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run_replication, [cfg] * L, range(L), [methods] * L, [fitcfg] * L))
    else:
        parts = [run_replication(cfg, ell, methods, fitcfg) for ell in range(L)]
    totals = _merge(parts, names)
    rows = []
    for n in names:
        t = totals[n]
        if t.n_failed >= FAILURE_FLAG_RATE * L and t.n_failed:
            logger.warning("%s: %s failed in %d of %d replications (flagged)", cfg.scenario_id, n, t.n_failed, L)
        rows.append({
            "method": n, "t0": cfg.t0, "t_post": cfg.t_post, "rho2_s": cfg.rho2_s, "error_mode": cfg.error_mode,
            "bias": t.bias, "mse": t.mse, "acp": t.acp, "n_ok": t.n_ok, "n_failed": t.n_failed,
            "flagged": bool(t.n_failed >= FAILURE_FLAG_RATE * L and t.n_failed),
        })
    return rows


def _checkpoint_path(out_dir: Path, index: int, cfg: DgpConfig) -> Path:
    return out_dir / "checkpoints" / f"{index:03d}_{cfg.scenario_id}.json"


def run_grid(grid: list[DgpConfig], methods, L: int = 200, fitcfg=None, out_dir=None, workers: int = 1,
             max_scenarios: int | None = None) -> list[dict]:
    """Every scenario in ``grid``; with ``out_dir`` finished scenarios are checkpointed
    and skipped on the next call. ``max_scenarios`` stops after that many new ones.
    """
    rows, done_now = [], 0
    out_dir = Path(out_dir) if out_dir is not None else None
    for k, cfg in enumerate(grid):
        ck = _checkpoint_path(out_dir, k, cfg) if out_dir is not None else None
        if ck is not None and ck.exists():
            try:
                payload = json.loads(ck.read_text())
            except (OSError, ValueError) as exc:
                raise OSError(f"scenario {cfg.scenario_id}: unreadable checkpoint {ck}: {exc}") from exc
            if payload.get("L") == L and payload.get("config") == asdict(cfg):
                rows.extend(payload["rows"])
                continue
        if max_scenarios is not None and done_now >= max_scenarios:
            break
        scen_rows = run_scenario(cfg, methods, L, fitcfg, workers)
        done_now += 1
        if ck is not None:
            try:
                atomic_write_text(ck, json.dumps({"config": asdict(cfg), "L": L, "rows": scen_rows}, indent=1))
            except OSError as exc:
                raise OSError(f"scenario {cfg.scenario_id}: cannot write checkpoint: {exc}") from exc
        rows.extend(scen_rows)
    return rows


def _fmt(v) -> str:
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def metrics_csv(rows: list[dict]) -> str:
    lines = [",".join(METRIC_COLUMNS)]
    for r in rows:
        lines.append(",".join(_fmt(r[c]) for c in METRIC_COLUMNS))
    return "\n".join(lines) + "\n"
