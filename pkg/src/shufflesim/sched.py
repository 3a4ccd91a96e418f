"""Job manager policies: staged / gang / progressive reader launch, pre-read
polling, partition re-planning from skew statistics, and the per-writer
checksum manifest used by recovery."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .core import StageSpec, combine_checksums

DEFAULT_LAMBDA = 0.5
DEFAULT_LOW_PARALLELISM_CUTOFF = 10
SPLIT_FACTOR = 2.0
MERGE_FACTOR = 0.5


class SchedMode(str, enum.Enum):
    STAGED = "Staged"
    GANG = "Gang"
    PROGRESSIVE = "Progressive"


class ForcedReason(str, enum.Enum):
    NONE = "None"
    LOW_PARALLELISM = "LowParallelism"
    BARRIER_INPUT = "BarrierInput"


@dataclass(frozen=True)
class StageSchedulingPolicy:
    mode: SchedMode
    lam: float = DEFAULT_LAMBDA
    forced_reason: ForcedReason = ForcedReason.NONE

    def __post_init__(self) -> None:
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        if self.forced_reason is ForcedReason.BARRIER_INPUT and self.lam != 1.0:
            raise ValueError("barrier input forces lambda = 1.0")
        if self.forced_reason is ForcedReason.LOW_PARALLELISM and self.mode is not SchedMode.GANG:
            raise ValueError("low parallelism forces gang scheduling")


@dataclass(frozen=True)
class SchedConfig:
    mode: SchedMode | None = None  # None: adaptive
    lam: float = DEFAULT_LAMBDA
    low_parallelism_cutoff: int = DEFAULT_LOW_PARALLELISM_CUTOFF
    dispatch_latency_s: float = 0.5


def decide_policy(stage: StageSpec, config: SchedConfig = SchedConfig()) -> StageSchedulingPolicy:
    if config.mode is SchedMode.STAGED:
        return StageSchedulingPolicy(SchedMode.STAGED, 1.0)
    if config.mode is SchedMode.GANG:
        return StageSchedulingPolicy(SchedMode.GANG, 0.0)
    if config.mode is None and stage.parallelism < config.low_parallelism_cutoff:
        return StageSchedulingPolicy(SchedMode.GANG, 0.0, ForcedReason.LOW_PARALLELISM)
    if stage.barrier_input:
        return StageSchedulingPolicy(SchedMode.PROGRESSIVE, 1.0, ForcedReason.BARRIER_INPUT)
    return StageSchedulingPolicy(SchedMode.PROGRESSIVE, config.lam)


@dataclass(frozen=True)
class ProgressReport:
    writer_id: str
    produced_bytes: int
    estimated_total_bytes: int
    completed: bool = False

    @property
    def overshoot(self) -> bool:
        return self.produced_bytes > self.estimated_total_bytes


def upstream_progress(reports: Sequence[ProgressReport]) -> float:
    """Byte-weighted progress; task-count ratio when no estimates exist."""
    if not reports:
        raise ValueError("at least one report required")
    est = sum(r.estimated_total_bytes for r in reports)
    if est > 0:
        produced = sum(min(r.produced_bytes, r.estimated_total_bytes) for r in reports)
        return min(1.0, max(0.0, produced / est))
    return sum(1 for r in reports if r.completed) / len(reports)


def pre_start(
    readers: Sequence[str],
    launched: set[str],
    progress: float,
    policy: StageSchedulingPolicy,
    free_slots: int | None = None,
) -> list[str]:
    """Readers to launch now.  Idempotent: ``launched`` is updated in place.

    Readers that do not fit into ``free_slots`` stay unlaunched and are
    returned by a later call.
    """
    if policy.mode is SchedMode.GANG:
        eligible = True
    elif policy.mode is SchedMode.STAGED:
        eligible = progress >= 1.0
    else:
        eligible = progress >= policy.lam
    if not eligible:
        return []
    out = [r for r in readers if r not in launched]
    if free_slots is not None:
        out = out[: max(0, free_slots)]
    launched.update(out)
    return out


class ReadCursor:
    """Per-reader position in each agent's commit log."""

    def __init__(self) -> None:
        self._pos: dict[str, tuple[int, int]] = {}

    def poll(self, agent, job_id: str, partition_id: int) -> tuple[list, bool]:
        """Newly committed entries since the last poll, plus a health flag."""
        if not agent.alive:
            return [], False
        epoch, pos = self._pos.get(agent.node_id, (agent.epoch, 0))
        if epoch != agent.epoch:
            pos = 0
        new, end = agent.poll(job_id, partition_id, pos)
        self._pos[agent.node_id] = (agent.epoch, end)
        return new, True


def pre_read_poll(cursor: ReadCursor, agents: Iterable, job_id: str, partition_id: int) -> tuple[list, list[str]]:
    entries, unhealthy = [], []
    for agent in agents:
        new, healthy = cursor.poll(agent, job_id, partition_id)
        if healthy:
            entries.extend(new)
        else:
            unhealthy.append(agent.node_id)
    return entries, unhealthy


@dataclass(frozen=True)
class Piece:
    partition_id: int
    start: int
    end: int

    @property
    def size(self) -> int:
        return self.end - self.start


def dynamic_partition_insertion(partition_bytes: Sequence[int], target: float) -> list[tuple[Piece, ...]]:
    """Split partitions above 2x target, merge adjacent ones below 0.5x target.

    A merged run that ends short is folded into the preceding run when the
    two stay within 2x target, which keeps output sizes within a factor 2.

    Returns the new downstream partitions, each a tuple of byte ranges of the
    old ones.  Zero-byte partitions disappear.
    """
    if target <= 0:
        raise ValueError("target must be positive")
    plan: list[tuple[Piece, ...]] = []
    run: list[Piece] = []
    run_bytes = 0
    # index in plan of the previous merged run, while still adjacent to ``run``
    prev_merge: int | None = None

    def close_run() -> None:
        nonlocal run, run_bytes, prev_merge
        if run:
            prev = plan[prev_merge] if prev_merge is not None else None
            if prev is not None and run_bytes < MERGE_FACTOR * target and \
                    sum(x.size for x in prev) + run_bytes <= SPLIT_FACTOR * target:
                # a short leftover joins its neighbour instead of standing alone
                plan[prev_merge] = prev + tuple(run)
            else:
                plan.append(tuple(run))
                prev_merge = len(plan) - 1
        run, run_bytes = [], 0

    def close_all() -> None:
        nonlocal prev_merge
        close_run()
        prev_merge = None

    for p, nbytes in enumerate(partition_bytes):
        if nbytes <= 0:
            continue
        if nbytes > SPLIT_FACTOR * target:
            close_all()
            n = math.ceil(nbytes / target)
            bounds = [nbytes * i // n for i in range(n + 1)]
            plan.extend((Piece(p, bounds[i], bounds[i + 1]),) for i in range(n))
        elif nbytes < MERGE_FACTOR * target:
            if run_bytes + nbytes > target:
                close_run()
            run.append(Piece(p, 0, nbytes))
            run_bytes += nbytes
        else:
            close_all()
            plan.append((Piece(p, 0, nbytes),))
    close_run()
    return plan


@dataclass
class WriterManifest:
    writer_id: str
    retry_idx: int
    per_partition: dict[int, int] = field(default_factory=dict)
    block_count: dict[int, int] = field(default_factory=dict)

    @property
    def aggregate(self) -> int:
        return combine_checksums(self.per_partition.values())


class ManifestBook:
    """Checksums of committed blocks per writer attempt; an attempt's manifest
    becomes current when that attempt completes."""

    def __init__(self) -> None:
        self._attempts: dict[tuple[str, int], WriterManifest] = {}
        self.current: dict[str, WriterManifest] = {}

    def record(self, writer_id: str, retry_idx: int, partition_id: int, digest: int) -> None:
        m = self._attempts.setdefault((writer_id, retry_idx), WriterManifest(writer_id, retry_idx))
        m.per_partition[partition_id] = combine_checksums([digest], m.per_partition.get(partition_id, 0))
        m.block_count[partition_id] = m.block_count.get(partition_id, 0) + 1

    def complete(self, writer_id: str, retry_idx: int) -> WriterManifest:
        m = self._attempts.pop((writer_id, retry_idx), None) or WriterManifest(writer_id, retry_idx)
        prev = self.current.get(writer_id)
        if prev is None or prev.retry_idx <= retry_idx:
            self.current[writer_id] = m
        for key in [k for k in self._attempts if k[0] == writer_id and k[1] < retry_idx]:
            del self._attempts[key]
        return m

    def checksum_manifest(self) -> dict[str, tuple[int, int]]:
        return {w: (m.aggregate, m.retry_idx) for w, m in sorted(self.current.items())}

    def partition_digest(self, partition_id: int) -> int:
        return combine_checksums(m.per_partition.get(partition_id, 0) for m in self.current.values())
