"""In-memory vs on-disk shuffle admission.

A task goes in-memory when its predicted runtime is at most a threshold
tau*.  tau* is the largest grid point of a historical profile curve whose
per-machine memory need fits the currently available memory.
"""

from __future__ import annotations

import bisect
import csv
import enum
import statistics
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .core import OperatorKind, ShuffleMode, StageSpec

CURVE_COLUMNS = ("tau_seconds", "y_ratio", "z_bytes")
DEFAULT_REFRESH_PERIOD_S = 30.0
DEFAULT_CURVE_PERIOD_S = 3600.0


class EstimateBasis(str, enum.Enum):
    HISTORY = "History"
    SIZE_MODEL = "SizeModel"
    DEFAULT = "Default"


@dataclass(frozen=True)
class TaskRecord:
    runtime_s: float
    shuffle_bytes: int
    peak_memory: int
    input_bytes: int = 0
    operator_kind: OperatorKind = OperatorKind.MAP


@dataclass(frozen=True)
class ProfileCurve:
    grid: tuple[float, ...]
    y: tuple[float, ...]
    z: tuple[float, ...]

    def __post_init__(self) -> None:
        if not (len(self.grid) == len(self.y) == len(self.z)) or not self.grid:
            raise ValueError("grid, y and z must be non-empty and equally long")
        if any(b <= a for a, b in zip(self.grid, self.grid[1:])):
            raise ValueError("grid must be strictly ascending")
        if any(b < a for a, b in zip(self.y, self.y[1:])) or any(b < a for a, b in zip(self.z, self.z[1:])):
            raise ValueError("y and z must be non-decreasing")
        if self.y[0] < 0 or self.y[-1] > 1 or self.z[0] < 0:
            raise ValueError("y must lie in [0, 1] and z must be non-negative")


@dataclass(frozen=True)
class TaskRuntimeEstimate:
    t_hat: float
    basis: EstimateBasis


def build_profile_curve(
    history: Sequence[TaskRecord],
    grid: int | Sequence[float],
    machine_count: int,
) -> ProfileCurve:
    """y(tau): shuffle-byte share of tasks finishing within tau.
    z(tau): summed peak memory of those tasks per machine (overlap ignored).

    ``grid`` is either explicit tau values or a resolution, in which case the
    grid spans [0, max runtime] evenly.
    """
    if not history:
        raise ValueError("no history")
    if machine_count < 1:
        raise ValueError("machine_count must be >= 1")
    for rec in history:
        if rec.runtime_s < 0 or rec.shuffle_bytes < 0 or rec.peak_memory < 0:
            raise ValueError("invalid record")
    if isinstance(grid, int):
        if grid < 2:
            raise ValueError("grid resolution must be >= 2")
        top = max(rec.runtime_s for rec in history) or 1.0
        taus = tuple(top * i / (grid - 1) for i in range(grid))
    else:
        taus = tuple(float(t) for t in grid)
        if len(taus) < 2:
            raise ValueError("grid resolution must be >= 2")

    ordered = sorted(history, key=lambda r: r.runtime_s)
    runtimes = [r.runtime_s for r in ordered]
    cum_shuffle = [0]
    cum_mem = [0]
    for rec in ordered:
        cum_shuffle.append(cum_shuffle[-1] + rec.shuffle_bytes)
        cum_mem.append(cum_mem[-1] + rec.peak_memory)
    total = cum_shuffle[-1]

    ys, zs = [], []
    for tau in taus:
        n = bisect.bisect_right(runtimes, tau)
        ys.append(cum_shuffle[n] / total if total else 0.0)
        zs.append(cum_mem[n] / machine_count)
    return ProfileCurve(taus, tuple(ys), tuple(zs))


def select_threshold(curve: ProfileCurve, z_available: float) -> float:
    """Largest grid tau with z(tau) <= budget; 0.0 (all on-disk) if none fits."""
    # z is non-decreasing, so the feasible set is a prefix of the grid
    n = bisect.bisect_right(curve.z, z_available)
    return curve.grid[n - 1] if n else 0.0


def estimate_runtime(
    stage: StageSpec | None,
    input_bytes: int,
    history: Sequence[TaskRecord],
    default_rate: float = 10e6,
) -> TaskRuntimeEstimate:
    if input_bytes < 0:
        raise ValueError("input bytes must be non-negative")
    kind = stage.operator_kind if stage is not None else None
    rates = [
        rec.runtime_s / rec.input_bytes
        for rec in history
        if rec.operator_kind == kind and rec.input_bytes > 0
    ]
    if rates:
        return TaskRuntimeEstimate(input_bytes * statistics.median(rates), EstimateBasis.HISTORY)
    return TaskRuntimeEstimate(input_bytes / default_rate, EstimateBasis.DEFAULT)


def choose_mode(t_hat: float, tau_star: float) -> ShuffleMode:
    if t_hat < 0 or tau_star < 0:
        raise ValueError("runtime and threshold must be non-negative")
    return ShuffleMode.IN_MEMORY if t_hat <= tau_star else ShuffleMode.ON_DISK


def refresh_threshold(curve: ProfileCurve, z_available: float) -> float:
    return select_threshold(curve, z_available)


class ThresholdDaemon:
    """Publishes tau* on a fixed period; the scheduler reads ``current``."""

    def __init__(
        self,
        curve: ProfileCurve,
        period_s: float = DEFAULT_REFRESH_PERIOD_S,
        curve_period_s: float = DEFAULT_CURVE_PERIOD_S,
    ):
        self.curve = curve
        self.period_s = period_s
        self.curve_period_s = curve_period_s
        self.current = 0.0
        self.published: list[tuple[float, float]] = []

    def tick(self, now: float, z_available: float) -> float:
        self.current = refresh_threshold(self.curve, z_available)
        self.published.append((now, self.current))
        return self.current

    def replace_curve(self, curve: ProfileCurve) -> None:
        self.curve = curve


def load_curve_csv(path: str | Path) -> ProfileCurve:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(CURVE_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"curve CSV missing columns: {sorted(missing)}")
        rows = [(float(r["tau_seconds"]), float(r["y_ratio"]), float(r["z_bytes"])) for r in reader]
    return ProfileCurve(tuple(r[0] for r in rows), tuple(r[1] for r in rows), tuple(r[2] for r in rows))


def dump_curve_csv(curve: ProfileCurve, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CURVE_COLUMNS)
        for row in zip(curve.grid, curve.y, curve.z):
            writer.writerow(row)
