"""Workload shapes: two-stage writer -> reader jobs."""

from __future__ import annotations

import enum
from dataclasses import dataclass

from ..core import JobSpec, OperatorKind, StageSpec


class Shape(str, enum.Enum):
    UNIFORM = "Uniform"
    SKEWED = "Skewed"
    MIXED_LARGE_SMALL = "MixedLargeSmall"
    TERASORT_LIKE = "TeraSortLike"


def split_even(total: int, n: int) -> list[int]:
    """``n`` integers summing to ``total``, differing by at most one."""
    base, extra = divmod(total, n)
    return [base + (1 if i < extra else 0) for i in range(n)]


def two_stage_job(
    job_id: str,
    matrix: list[list[int]],
    shuffle_ratio: float = 1.0,
    barrier: bool = False,
    priority: int = 0,
    submit_time: float = 0.0,
    shape: str = "job",
    writer_kind: OperatorKind = OperatorKind.MAP,
) -> JobSpec:
    """Job whose writers emit ``matrix[w][p]`` bytes to reader ``p``.

    Writer input is output / shuffle_ratio; reader input is the partition total.
    """
    if shuffle_ratio <= 0:
        raise ValueError("shuffle ratio must be positive")
    rows = tuple(tuple(r) for r in matrix)
    w, r = len(rows), len(rows[0])
    inputs = tuple(max(1, round(sum(row) / shuffle_ratio)) for row in rows)
    writers = StageSpec("w", w, inputs, rows, operator_kind=writer_kind,
                        declared_output=tuple(sum(row) for row in rows))
    reader_inputs = tuple(sum(row[p] for row in rows) for p in range(r))
    readers = StageSpec("r", r, reader_inputs, (), barrier_input=barrier,
                        operator_kind=OperatorKind.SORT if barrier else OperatorKind.REDUCE)
    return JobSpec(job_id, (writers, readers), (("w", "r"),), priority=priority,
                   submit_time=submit_time, shape=shape)


def uniform_matrix(writers: int, readers: int, total_bytes: int) -> list[list[int]]:
    per_writer = split_even(total_bytes, writers)
    return [split_even(b, readers) for b in per_writer]


def skewed_matrix(writers: int, readers: int, total_bytes: int, hot_fraction: float) -> list[list[int]]:
    """Partition 0 receives ``hot_fraction`` of all bytes; the rest share evenly."""
    if not 0 <= hot_fraction <= 1:
        raise ValueError("hot fraction must lie in [0, 1]")
    hot = round(total_bytes * hot_fraction)
    hot_rows = split_even(hot, writers)
    cold_rows = split_even(total_bytes - hot, writers)
    return [[h] + split_even(c, readers - 1) for h, c in zip(hot_rows, cold_rows)]


@dataclass(frozen=True)
class WorkloadParams:
    shape: Shape = Shape.UNIFORM
    writers: int = 64
    readers: int = 64
    # Uniform / Skewed / TeraSortLike: total shuffle bytes per job
    total_bytes: int = 64_000_000
    hot_fraction: float = 0.9
    shuffle_ratio: float = 1.0
    jobs: int = 1
    # MixedLargeSmall: one large and two small jobs per round
    rounds: int = 1
    small_writers: int = 32
    small_readers: int = 32
    small_total_bytes: int = 3_200_000
    priority: int = 0

    def __post_init__(self) -> None:
        if min(self.writers, self.readers, self.jobs, self.rounds) < 1 or self.total_bytes < 1:
            raise ValueError("workload sizes must be positive")


def generate_workload(params: WorkloadParams, scale: float = 1.0) -> list[JobSpec]:
    """Jobs in submission order; ``scale`` multiplies every byte volume."""
    if scale <= 0:
        raise ValueError("scale must be positive")
    total = max(1, round(params.total_bytes * scale))
    jobs: list[JobSpec] = []
    if params.shape is Shape.MIXED_LARGE_SMALL:
        small_total = max(1, round(params.small_total_bytes * scale))
        for rnd in range(params.rounds):
            jobs.append(two_stage_job(
                f"j{len(jobs):03d}", uniform_matrix(params.writers, params.readers, total),
                params.shuffle_ratio, priority=1, shape="large"))
            for _ in range(2):
                jobs.append(two_stage_job(
                    f"j{len(jobs):03d}", uniform_matrix(params.small_writers, params.small_readers, small_total),
                    params.shuffle_ratio, priority=0, shape="small"))
        return jobs
    for _ in range(params.jobs):
        jid = f"j{len(jobs):03d}"
        if params.shape is Shape.UNIFORM:
            m = uniform_matrix(params.writers, params.readers, total)
            jobs.append(two_stage_job(jid, m, params.shuffle_ratio, priority=params.priority, shape="uniform"))
        elif params.shape is Shape.SKEWED:
            m = skewed_matrix(params.writers, params.readers, total, params.hot_fraction)
            jobs.append(two_stage_job(jid, m, params.shuffle_ratio, priority=params.priority, shape="skewed"))
        else:
            m = uniform_matrix(params.writers, params.readers, total)
            jobs.append(two_stage_job(jid, m, params.shuffle_ratio, barrier=True,
                                      priority=params.priority, shape="terasort",
                                      writer_kind=OperatorKind.SORT))
    return jobs
