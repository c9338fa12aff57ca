"""Panel data container, CSV ingestion and the scale transforms used before fitting.

Outcomes are held as an ``N x T`` matrix with the treated units first, ordered
by increasing distance from the treatment sites, followed by the controls.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

REQUIRED_COLUMNS = ("unit_id", "time", "outcome", "role", "distance")


class PanelFormatError(ValueError):
    """Base class for malformed panel input."""


class MissingColumnsError(PanelFormatError):
    pass


class UnbalancedPanelError(PanelFormatError):
    pass


class DuplicateObservationError(PanelFormatError):
    pass


class InvalidDistanceError(PanelFormatError):
    pass


class PrePeriodError(PanelFormatError):
    """``t0`` is outside ``1 <= t0 < T``."""


class ZeroVarianceError(ValueError):
    def __init__(self, unit: str):
        super().__init__(f"unit {unit!r} has zero pre-period variance; cannot standardize")
        self.unit = unit


@dataclass(frozen=True)
class PanelDataset:
    unit_ids: tuple[str, ...]
    outcomes: np.ndarray
    n_treated: int
    t0: int
    time_labels: tuple
    treated_distances: np.ndarray
    phases: dict = field(default_factory=dict)

    def __post_init__(self):
        Y = np.asarray(self.outcomes, dtype=float)
        object.__setattr__(self, "outcomes", Y)
        object.__setattr__(self, "treated_distances", np.asarray(self.treated_distances, dtype=float))
        N, T = Y.shape
        if len(self.unit_ids) != N:
            raise PanelFormatError(f"{len(self.unit_ids)} unit ids for {N} outcome rows")
        if len(self.time_labels) != T:
            raise PanelFormatError(f"{len(self.time_labels)} time labels for {T} columns")
        if not 1 <= self.n_treated < N:
            raise PanelFormatError(f"need at least one treated and one control unit, got n_treated={self.n_treated}, N={N}")
        if not 1 <= self.t0 < T:
            raise PrePeriodError(f"t0 must satisfy 1 <= t0 < T={T}, got {self.t0}")
        if self.treated_distances.shape != (self.n_treated,):
            raise InvalidDistanceError("one distance per treated unit is required")
        if np.any(np.diff(self.treated_distances) <= 0):
            raise InvalidDistanceError("treated distances must be strictly increasing")
        if not np.all(np.isfinite(Y)):
            raise PanelFormatError("outcomes contain missing or non-finite entries")

    @property
    def n_units(self) -> int:
        return self.outcomes.shape[0]

    @property
    def n_control(self) -> int:
        return self.n_units - self.n_treated

    @property
    def n_times(self) -> int:
        return self.outcomes.shape[1]

    @property
    def treated(self) -> np.ndarray:
        return self.outcomes[: self.n_treated]

    @property
    def controls(self) -> np.ndarray:
        return self.outcomes[self.n_treated :]

    def with_outcomes(self, outcomes: np.ndarray) -> "PanelDataset":
        return replace(self, outcomes=np.asarray(outcomes, dtype=float))


@dataclass(frozen=True)
class ScalingRecord:
    """Per-unit pre-period means and standard deviations plus the per-time trend.

    Model-space values ``v`` map back to the original scale as
    ``(v + trend_t) * sd_i + mean_i``; the trend lives in standardized units.
    """

    mean: np.ndarray
    sd: np.ndarray
    trend: np.ndarray

    @classmethod
    def identity(cls, n_units: int, n_times: int) -> "ScalingRecord":
        return cls(np.zeros(n_units), np.ones(n_units), np.zeros(n_times))


def _parse_time(label: str):
    try:
        return int(label)
    except ValueError:
        return label


def load_panel_csv(path, t0: int | None = None, meta=None) -> PanelDataset:
    """Read a long-format panel CSV.

    ``t0`` may come from the argument or from ``meta`` (a dict or a path to a
    JSON sidecar holding ``t0`` and optional ``phases``).
    """
    path = Path(path)
    if isinstance(meta, (str, Path)):
        meta = json.loads(Path(meta).read_text())
    meta = dict(meta or {})
    if t0 is None:
        t0 = meta.get("t0")
    if t0 is None:
        raise PrePeriodError("t0 must be supplied either directly or in the metadata")

    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in REQUIRED_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise MissingColumnsError(f"{path}: missing columns {missing}")
        rows = list(reader)

    values: dict[str, dict] = {}
    roles: dict[str, str] = {}
    distances: dict[str, float] = {}
    order: list[str] = []
    times = set()
    for lineno, row in enumerate(rows, start=2):
        unit = row["unit_id"].strip()
        role = row["role"].strip().lower()
        if role not in ("treated", "control"):
            raise PanelFormatError(f"{path}:{lineno}: role must be 'treated' or 'control', got {role!r}")
        t = _parse_time(row["time"].strip())
        if unit not in values:
            values[unit] = {}
            roles[unit] = role
            order.append(unit)
        elif roles[unit] != role:
            raise PanelFormatError(f"{path}:{lineno}: unit {unit!r} has inconsistent roles")
        if t in values[unit]:
            raise DuplicateObservationError(f"{path}:{lineno}: duplicate observation for ({unit}, {t})")
        values[unit][t] = float(row["outcome"])
        dist = (row.get("distance") or "").strip()
        if role == "treated":
            if not dist:
                raise InvalidDistanceError(f"{path}:{lineno}: treated unit {unit!r} has no distance")
            d = float(dist)
            if not d > 0:
                raise InvalidDistanceError(f"{path}:{lineno}: distance must be positive, got {d}")
            if unit in distances and distances[unit] != d:
                raise InvalidDistanceError(f"{path}:{lineno}: unit {unit!r} has inconsistent distances")
            distances[unit] = d
        elif dist:
            raise InvalidDistanceError(f"{path}:{lineno}: control unit {unit!r} must not carry a distance")
        times.add(t)

    time_labels = tuple(sorted(times))
    for unit, series in values.items():
        if len(series) != len(time_labels):
            raise UnbalancedPanelError(
                f"{path}: unit {unit!r} has {len(series)} rows, expected {len(time_labels)}"
            )
    treated = sorted((u for u in order if roles[u] == "treated"), key=lambda u: distances[u])
    controls = [u for u in order if roles[u] == "control"]
    if not treated or not controls:
        raise PanelFormatError(f"{path}: need at least one treated and one control unit")
    if len(set(distances[u] for u in treated)) != len(treated):
        raise InvalidDistanceError(f"{path}: treated distances must be distinct")
    units = treated + controls
    Y = np.array([[values[u][t] for t in time_labels] for u in units])
    if not 1 <= int(t0) < len(time_labels):
        raise PrePeriodError(f"t0 must satisfy 1 <= t0 < T={len(time_labels)}, got {t0}")
    return PanelDataset(
        unit_ids=tuple(units),
        outcomes=Y,
        n_treated=len(treated),
        t0=int(t0),
        time_labels=time_labels,
        treated_distances=np.array([distances[u] for u in treated]),
        phases=dict(meta.get("phases") or {}),
    )


def write_panel_csv(data: PanelDataset, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REQUIRED_COLUMNS)
        for i, unit in enumerate(data.unit_ids):
            treated = i < data.n_treated
            dist = repr(float(data.treated_distances[i])) if treated else ""
            for j, t in enumerate(data.time_labels):
                writer.writerow([unit, t, repr(float(data.outcomes[i, j])), "treated" if treated else "control", dist])


def standardize(data: PanelDataset) -> tuple[PanelDataset, ScalingRecord]:
    """Centre and scale each series by its own pre-period mean and sample sd."""
    pre = data.outcomes[:, : data.t0]
    if data.t0 < 2:
        raise ZeroVarianceError(data.unit_ids[0])
    mean = pre.mean(axis=1)
    sd = pre.std(axis=1, ddof=1)
    for unit, s in zip(data.unit_ids, sd):
        if not s > 0:
            raise ZeroVarianceError(unit)
    Z = (data.outcomes - mean[:, None]) / sd[:, None]
    return data.with_outcomes(Z), ScalingRecord(mean, sd, np.zeros(data.n_times))


def detrend(data: PanelDataset, scaling: ScalingRecord | None = None) -> tuple[PanelDataset, ScalingRecord]:
    """Subtract the cross-sectional control mean at every time from all units.

    When ``scaling`` is given, the returned record extends it with the trend so
    that :func:`to_original_scale` inverts both steps.
    """
    trend = data.controls.mean(axis=0)
    out = data.with_outcomes(data.outcomes - trend[None, :])
    if scaling is None:
        scaling = ScalingRecord.identity(data.n_units, data.n_times)
    return out, ScalingRecord(scaling.mean, scaling.sd, scaling.trend + trend)


def rescale_distances(d) -> np.ndarray:
    d = np.asarray(d, dtype=float)
    if d.size == 1:
        logger.warning("a single treated unit leaves no spatial structure; distance set to 0")
        return np.zeros(1)
    if np.any(np.diff(d) <= 0):
        raise InvalidDistanceError("distances must be strictly increasing")
    return (d - d[0]) / (d[-1] - d[0])


def to_original_scale(values, scaling: ScalingRecord, unit, time):
    """Map model-space values back to outcome units.

    ``unit`` and ``time`` are integer indices (or index arrays broadcastable
    against ``values``).
    """
    unit = np.asarray(unit)
    time = np.asarray(time)
    n_units, n_times = scaling.mean.shape[0], scaling.trend.shape[0]
    if np.any((unit < 0) | (unit >= n_units)):
        raise IndexError(f"unit index out of range for {n_units} units")
    if np.any((time < 0) | (time >= n_times)):
        raise IndexError(f"time index out of range for {n_times} periods")
    out = (np.asarray(values, dtype=float) + scaling.trend[time]) * scaling.sd[unit] + scaling.mean[unit]
    return float(out) if np.ndim(out) == 0 else out


def panel_to_original(values: np.ndarray, scaling: ScalingRecord, units: slice | np.ndarray, times: slice | np.ndarray):
    """Vectorised back-transform of a ``(..., n_units_sel, n_times_sel)`` block."""
    sd = scaling.sd[units][:, None]
    mean = scaling.mean[units][:, None]
    trend = scaling.trend[times][None, :]
    return (np.asarray(values, dtype=float) + trend) * sd + mean


def phase_windows(data: PanelDataset) -> dict[str, np.ndarray]:
    """Post-period time indices per phase; one ``post`` window when none are declared."""
    post = np.arange(data.t0, data.n_times)
    if not data.phases:
        return {"post": post}
    labels = data.time_labels
    windows = {}
    for name, (start, end) in data.phases.items():
        idx = np.array([j for j in post if _le(start, labels[j]) and _le(labels[j], end)], dtype=int)
        windows[name] = idx
    return windows


def _le(a, b) -> bool:
    try:
        return float(a) <= float(b)
    except (TypeError, ValueError):
        return str(a) <= str(b)

