"""Shared domain types: identifiers, blocks, index records, checksums and job shapes.

The simulator moves byte *counts*, never byte contents.  Each block instead
carries a payload-identity token derived from the workload seed, and its
checksum is a digest of that identity.  Re-executing a writer reproduces the
same tokens, so regenerated blocks carry the same digests as the originals.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field
from typing import Iterable, Sequence

MASK64 = (1 << 64) - 1
ZERO_DIGEST = 0


class Source(str, enum.Enum):
    AGENT_FILE = "AgentFile"
    DEFAULT_BACKUP = "DefaultBackup"
    REMOTE_BACKUP = "RemoteBackup"
    BACKUP_ONLY = "BackupOnly"


# fallback order used by readers: lowest latency first
SOURCE_RANK = {
    Source.AGENT_FILE: 0,
    Source.DEFAULT_BACKUP: 1,
    Source.REMOTE_BACKUP: 1,
    Source.BACKUP_ONLY: 2,
}


class ShuffleMode(str, enum.Enum):
    IN_MEMORY = "InMemory"
    ON_DISK = "OnDisk"


class Route(str, enum.Enum):
    VIA_AGENT = "ViaAgent"
    BACKUP_ONLY = "BackupOnly"


class BackupKind(str, enum.Enum):
    NONE = "None"
    DEFAULT = "DefaultBackup"
    REMOTE = "RemoteBackup"


class OperatorKind(str, enum.Enum):
    MAP = "Map"
    REDUCE = "Reduce"
    SORT = "Sort"
    AGGREGATE = "Aggregate"
    JOIN = "Join"


@dataclass(frozen=True, slots=True)
class BlockKey:
    """Identifies one Primary Index stream."""

    job_id: str
    task_id: str
    access_point: str
    partition_id: int
    agent_ip: str

    def __post_init__(self) -> None:
        if not (self.job_id and self.task_id and self.access_point and self.agent_ip):
            raise ValueError(f"incomplete block key: {self!r}")
        if self.partition_id < 0:
            raise ValueError(f"negative partition id: {self.partition_id}")

    def as_tuple(self) -> tuple[str, str, str, int, str]:
        return (self.job_id, self.task_id, self.access_point, self.partition_id, self.agent_ip)


@dataclass(frozen=True, slots=True)
class DataBlock:
    key: BlockKey
    writer_id: str
    retry_idx: int
    backup_seq: int
    size_bytes: int
    priority: int
    checksum: int
    # global arrival order, used to break eviction ties
    arrival_seq: int = 0

    def __post_init__(self) -> None:
        if self.size_bytes <= 0:
            raise ValueError("block size must be positive")
        if self.retry_idx < 0 or self.backup_seq < 0:
            raise ValueError("retry_idx and backup_seq must be non-negative")

    @property
    def partition_id(self) -> int:
        return self.key.partition_id

    @property
    def job_id(self) -> str:
        return self.key.job_id

    def identity(self) -> tuple[str, int, int]:
        """(writer, partition, backup_seq): stable across retries."""
        return (self.writer_id, self.key.partition_id, self.backup_seq)


@dataclass(frozen=True, slots=True)
class IndexEntry:
    writer_id: str
    retry_idx: int
    backup_seq: int
    offset: int
    length: int
    source: Source

    def __post_init__(self) -> None:
        if self.length <= 0:
            raise ValueError("index entry length must be positive")
        if self.offset < 0:
            raise ValueError("index entry offset must be non-negative")


@dataclass(slots=True)
class PrimaryIndex:
    key: BlockKey
    entries: list[IndexEntry] = field(default_factory=list)

    def append(self, entry: IndexEntry) -> None:
        triple = (entry.writer_id, entry.retry_idx, entry.backup_seq)
        for existing in self.entries:
            if (existing.writer_id, existing.retry_idx, existing.backup_seq) == triple:
                raise ValueError(f"duplicate index triple {triple} in {self.key}")
        self.entries.append(entry)


@dataclass(slots=True)
class BackupIndex:
    writer_id: str
    retry_idx: int
    partitions: dict[int, list[IndexEntry]] = field(default_factory=dict)

    def add(self, partition_id: int, entry: IndexEntry) -> None:
        self.partitions.setdefault(partition_id, []).append(entry)


@dataclass(slots=True)
class LayoutDecision:
    writer_id: str
    routes: dict[int, Route] = field(default_factory=dict)
    backup_kind: BackupKind = BackupKind.NONE

    @property
    def backup_enabled(self) -> bool:
        return self.backup_kind is not BackupKind.NONE

    def route(self, partition_id: int) -> Route:
        return self.routes.get(partition_id, Route.VIA_AGENT)


@dataclass(frozen=True)
class StageSpec:
    stage_id: str
    parallelism: int
    task_input_bytes: tuple[int, ...]
    # task x partition shuffle output; empty rows for terminal stages
    output_bytes: tuple[tuple[int, ...], ...] = ()
    barrier_input: bool = False
    operator_kind: OperatorKind = OperatorKind.MAP
    declared_output: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        if self.parallelism < 1:
            raise ValueError(f"stage {self.stage_id}: parallelism must be >= 1")
        if len(self.task_input_bytes) != self.parallelism:
            raise ValueError(f"stage {self.stage_id}: one input size per task required")
        if self.output_bytes and len(self.output_bytes) != self.parallelism:
            raise ValueError(f"stage {self.stage_id}: output matrix needs one row per task")
        widths = {len(row) for row in self.output_bytes}
        if len(widths) > 1:
            raise ValueError(f"stage {self.stage_id}: ragged output matrix")
        if self.declared_output is not None:
            sums = tuple(sum(row) for row in self.output_bytes)
            if sums != tuple(self.declared_output):
                raise ValueError(f"stage {self.stage_id}: output rows do not match declared volumes")

    @property
    def num_partitions(self) -> int:
        return len(self.output_bytes[0]) if self.output_bytes else 0

    def task_output(self, task: int) -> int:
        return sum(self.output_bytes[task]) if self.output_bytes else 0

    def partition_total(self, partition: int) -> int:
        return sum(row[partition] for row in self.output_bytes)


@dataclass(frozen=True)
class JobSpec:
    job_id: str
    stages: tuple[StageSpec, ...]
    edges: tuple[tuple[str, str], ...]
    priority: int = 0
    sla_deadline: float | None = None
    submit_time: float = 0.0
    # history-lookup tag for mode selection; jobs of one shape share a tag
    shape: str = "job"

    def __post_init__(self) -> None:
        ids = [s.stage_id for s in self.stages]
        if len(set(ids)) != len(ids):
            raise ValueError(f"job {self.job_id}: duplicate stage ids")
        known = set(ids)
        seen_edges = set()
        for up, down in self.edges:
            if up not in known or down not in known:
                raise ValueError(f"job {self.job_id}: edge {up}->{down} references unknown stage")
            if up == down or (up, down) in seen_edges:
                raise ValueError(f"job {self.job_id}: invalid edge {up}->{down}")
            seen_edges.add((up, down))
        _check_acyclic(ids, self.edges, self.job_id)
        stages = {s.stage_id: s for s in self.stages}
        for up, down in self.edges:
            if stages[up].num_partitions != stages[down].parallelism:
                raise ValueError(
                    f"job {self.job_id}: {up} emits {stages[up].num_partitions} partitions "
                    f"but {down} has parallelism {stages[down].parallelism}"
                )

    def stage(self, stage_id: str) -> StageSpec:
        for s in self.stages:
            if s.stage_id == stage_id:
                return s
        raise KeyError(stage_id)

    def total_shuffle_bytes(self) -> int:
        return sum(sum(sum(row) for row in s.output_bytes) for s in self.stages)


def _check_acyclic(ids: Sequence[str], edges: Iterable[tuple[str, str]], job_id: str) -> None:
    indegree = {i: 0 for i in ids}
    out: dict[str, list[str]] = {i: [] for i in ids}
    for up, down in edges:
        indegree[down] += 1
        out[up].append(down)
    ready = [i for i in ids if indegree[i] == 0]
    visited = 0
    while ready:
        node = ready.pop()
        visited += 1
        for nxt in out[node]:
            indegree[nxt] -= 1
            if indegree[nxt] == 0:
                ready.append(nxt)
    if visited != len(ids):
        raise ValueError(f"job {job_id}: stage graph has a cycle")


def payload_token(seed: int, job_id: str, writer_id: str, partition_id: int, backup_seq: int) -> int:
    """Seed-derived identity of a block's payload; independent of the attempt."""
    return _digest(("payload", seed, job_id, writer_id, partition_id, backup_seq))


def checksum_of(writer_id: str, retry_idx: int, partition_id: int, payload_identity: int) -> int:
    """64-bit digest of a block.

    ``retry_idx`` is part of the signature but only the payload identity can
    make two versions differ: a deterministic re-execution that reproduces
    the payload yields the same digest.
    """
    del retry_idx
    return _digest(("block", writer_id, partition_id, payload_identity))


def combine_checksums(digests: Iterable[int], start: int = ZERO_DIGEST) -> int:
    """Order-independent aggregate (addition mod 2**64).

    A missing block subtracts its digest and a duplicated one adds it again,
    so both show up as a mismatch unless the digest is zero.
    """
    acc = start
    for d in digests:
        acc = (acc + d) & MASK64
    return acc


def _digest(parts: tuple) -> int:
    h = hashlib.blake2b(repr(parts).encode("utf-8"), digest_size=8)
    return int.from_bytes(h.digest(), "big")


# -- index text format ------------------------------------------------------
#
#   job_id,task_id,access_point,partition_id,agent_ip | writer retry seq offset length source
#
# one UTF-8 line per entry; ids must not contain ',', '|' or whitespace.


def format_index(index: PrimaryIndex) -> str:
    key = ",".join(str(part) for part in index.key.as_tuple())
    lines = [
        f"{key} | {e.writer_id} {e.retry_idx} {e.backup_seq} {e.offset} {e.length} {e.source.value}"
        for e in index.entries
    ]
    return "".join(line + "\n" for line in lines)


def parse_index(text: str) -> list[PrimaryIndex]:
    out: dict[BlockKey, PrimaryIndex] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            key_part, entry_part = line.split(" | ")
            job, task, ap, part, agent = key_part.split(",")
            writer, retry, seq, offset, length, source = entry_part.split()
            key = BlockKey(job, task, ap, int(part), agent)
            entry = IndexEntry(writer, int(retry), int(seq), int(offset), int(length), Source(source))
        except ValueError as exc:
            raise ValueError(f"line {lineno}: malformed index record: {line!r}") from exc
        out.setdefault(key, PrimaryIndex(key)).append(entry)
    return list(out.values())
