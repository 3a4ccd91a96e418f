"""Shuffle agent data plane.

Ingests blocks, keeps per-partition aggregate files with their primary
indexes, and manages shared node memory with two watermarks: above the
yellow line resident shuffle data is spilled to disk lowest-priority first,
above the red line lowest-priority data is discarded.
"""

from __future__ import annotations

import bisect
import enum
import json
from dataclasses import dataclass, field

from .core import BlockKey, DataBlock, IndexEntry, PrimaryIndex, ShuffleMode, Source

DEFAULT_YELLOW = 0.80
DEFAULT_RED = 0.90
DEFAULT_RECORD_BYTES = 100


class IngestStatus(str, enum.Enum):
    ACCEPTED = "Accepted"
    ACCEPTED_SPILLED = "AcceptedSpilled"
    REJECTED = "Rejected"


class Where(str, enum.Enum):
    MEMORY = "memory"
    DISK = "disk"


class ActionKind(str, enum.Enum):
    SPILL = "Spill"
    DISCARD = "Discard"


@dataclass(frozen=True)
class Action:
    kind: ActionKind
    block: DataBlock
    # a discarded block with a fallback copy stays readable from disk
    survives: bool = False


@dataclass(frozen=True)
class IngestResult:
    status: IngestStatus
    reason: str = ""
    actions: tuple[Action, ...] = ()

    @property
    def ok(self) -> bool:
        return self.status is not IngestStatus.REJECTED


class NothingToCommit(RuntimeError):
    pass


BlockId = tuple  # (job, writer, retry, partition, seq)


def block_id(block: DataBlock) -> BlockId:
    return (block.job_id, block.writer_id, block.retry_idx, block.partition_id, block.backup_seq)


def eviction_key(block: DataBlock) -> tuple:
    return (block.priority, block.job_id, block.arrival_seq)


@dataclass
class Stored:
    block: DataBlock
    where: Where
    backed_up: bool = False
    backup_pending: bool = False
    committed: bool = False
    bucket: str = "resident"


@dataclass
class AgentCounters:
    ingested: int = 0
    resident: int = 0
    on_disk: int = 0
    spilled: int = 0
    discarded_no_backup: int = 0
    discarded_with_backup: int = 0
    released: int = 0

    def conserved(self) -> bool:
        return self.ingested == (
            self.resident
            + self.on_disk
            + self.spilled
            + self.discarded_no_backup
            + self.discarded_with_backup
            + self.released
        )


class ShuffleAgent:
    def __init__(
        self,
        node_id: str,
        memory_capacity: int,
        yellow: float = DEFAULT_YELLOW,
        red: float = DEFAULT_RED,
        memory_management: bool = True,
        disk_capacity: int | None = None,
        record_bytes: int = DEFAULT_RECORD_BYTES,
    ):
        if memory_capacity <= 0:
            raise ValueError("memory capacity must be positive")
        if not 0 < yellow < red <= 1:
            raise ValueError("need 0 < yellow < red <= 1")
        self.node_id = node_id
        self.memory_capacity = memory_capacity
        self.yellow = yellow
        self.red = red
        self.memory_management = memory_management
        self.disk_capacity = disk_capacity
        self.record_bytes = record_bytes
        self.alive = True
        self.epoch = 0
        self.worker_resident = 0
        self._reset_state()

    def _reset_state(self) -> None:
        self.counters = AgentCounters()
        self.blocks: dict[BlockId, Stored] = {}
        # sorted eviction keys of in-memory blocks, with their ids
        self._mem_order: list[tuple[tuple, BlockId]] = []
        self._buffers: dict[tuple[str, int], list[DataBlock]] = {}
        self._file_len: dict[tuple[str, int], int] = {}
        self.indexes: dict[BlockKey, PrimaryIndex] = {}
        # commit log per (job, partition), polled by readers
        self.log: dict[tuple[str, int], list[tuple[BlockKey, IndexEntry]]] = {}
        self._stats: dict[str, dict[int, list[int]]] = {}
        self._cardinality: dict[str, dict[int, int]] = {}
        self.disk_used = 0
        # (discarded priority, lowest priority still in memory) per discard
        self.discard_log: list[tuple[int, int | None]] = []

    # -- usage -----------------------------------------------------------------

    @property
    def shuffle_resident(self) -> int:
        return self.counters.resident

    def usage(self, extra: int = 0) -> float:
        return (self.worker_resident + self.counters.resident + extra) / self.memory_capacity

    # -- memory order bookkeeping -----------------------------------------------

    def _mem_add(self, st: Stored) -> None:
        bisect.insort(self._mem_order, (eviction_key(st.block), block_id(st.block)))

    def _mem_remove(self, st: Stored) -> None:
        item = (eviction_key(st.block), block_id(st.block))
        i = bisect.bisect_left(self._mem_order, item)
        if i < len(self._mem_order) and self._mem_order[i] == item:
            del self._mem_order[i]

    def _move(self, st: Stored, bucket: str) -> None:
        size = st.block.size_bytes
        setattr(self.counters, st.bucket, getattr(self.counters, st.bucket) - size)
        setattr(self.counters, bucket, getattr(self.counters, bucket) + size)
        st.bucket = bucket

    def _spill(self, bid: BlockId) -> Action:
        st = self.blocks[bid]
        self._mem_remove(st)
        st.where = Where.DISK
        self._move(st, "spilled")
        self.disk_used += st.block.size_bytes
        return Action(ActionKind.SPILL, st.block, True)

    def _discard(self, bid: BlockId) -> Action:
        st = self.blocks[bid]
        self._mem_remove(st)
        lowest_kept = self._mem_order[0][0][0] if self._mem_order else None
        self.discard_log.append((st.block.priority, lowest_kept))
        if st.backed_up:
            st.where = Where.DISK
            self._move(st, "discarded_with_backup")
            return Action(ActionKind.DISCARD, st.block, True)
        self._move(st, "discarded_no_backup")
        del self.blocks[bid]
        return Action(ActionKind.DISCARD, st.block, False)

    def _spill_until_below_yellow(self) -> list[Action]:
        actions = []
        limit = self.yellow * self.memory_capacity
        while self._mem_order and self.worker_resident + self.counters.resident >= limit:
            actions.append(self._spill(self._mem_order[0][1]))
        return actions

    def _discard_until_below_red(self) -> list[Action]:
        actions = []
        limit = self.red * self.memory_capacity
        while self._mem_order and self.worker_resident + self.counters.resident >= limit:
            actions.append(self._discard(self._mem_order[0][1]))
        return actions

    # -- data path ---------------------------------------------------------------

    def ingest(self, block: DataBlock, mode: ShuffleMode, authorized: bool = True) -> IngestResult:
        if not self.alive:
            return IngestResult(IngestStatus.REJECTED, "down")
        if not authorized:
            return IngestResult(IngestStatus.REJECTED, "auth")
        bid = block_id(block)
        if bid in self.blocks:
            # resent after a lost acknowledgement; already stored
            return IngestResult(IngestStatus.ACCEPTED)
        size = block.size_bytes

        if mode is ShuffleMode.ON_DISK:
            if self.disk_capacity is not None and self.disk_used + size > self.disk_capacity:
                return IngestResult(IngestStatus.REJECTED, "disk")
            self._store(block, Where.DISK, "on_disk")
            return IngestResult(IngestStatus.ACCEPTED)

        if not self.memory_management:
            if self.worker_resident + self.counters.resident + size <= self.memory_capacity:
                self._store(block, Where.MEMORY, "resident")
                return IngestResult(IngestStatus.ACCEPTED)
            self._store(block, Where.DISK, "on_disk")
            return IngestResult(IngestStatus.ACCEPTED_SPILLED, "overflow")

        cap = self.memory_capacity
        after = self.worker_resident + self.counters.resident + size
        if after < self.yellow * cap:
            self._store(block, Where.MEMORY, "resident")
            return IngestResult(IngestStatus.ACCEPTED)
        if after < self.red * cap:
            self._store(block, Where.MEMORY, "resident")
            return IngestResult(IngestStatus.ACCEPTED_SPILLED, "yellow", tuple(self._spill_until_below_yellow()))

        # red line: only strictly lower-ranked residents may make room
        key = eviction_key(block)
        limit = self.red * cap
        need = after - limit  # bytes to free so that usage < red
        victims: list[BlockId] = []
        freed = 0
        for k, bid_v in self._mem_order:
            if freed > need:
                break
            if k >= key:
                break
            victims.append(bid_v)
            freed += self.blocks[bid_v].block.size_bytes
        if freed <= need:
            return IngestResult(IngestStatus.REJECTED, "memory")
        actions = [self._discard(v) for v in victims]
        self._store(block, Where.MEMORY, "resident")
        actions.extend(self._spill_until_below_yellow())
        return IngestResult(IngestStatus.ACCEPTED_SPILLED, "red", tuple(actions))

    def _store(self, block: DataBlock, where: Where, bucket: str) -> None:
        st = Stored(block, where, bucket=bucket)
        self.blocks[block_id(block)] = st
        self.counters.ingested += block.size_bytes
        setattr(self.counters, bucket, getattr(self.counters, bucket) + block.size_bytes)
        if where is Where.MEMORY:
            self._mem_add(st)
        else:
            self.disk_used += block.size_bytes
        self._buffers.setdefault((block.job_id, block.partition_id), []).append(block)
        stats = self._stats.setdefault(block.job_id, {}).setdefault(block.partition_id, [0, 0])
        stats[0] += block.size_bytes
        stats[1] += max(1, block.size_bytes // self.record_bytes)

    def memory_tick(self, worker_resident: int) -> list[Action]:
        self.worker_resident = worker_resident
        if not self.alive:
            return []
        if not self.memory_management:
            if self.worker_resident + self.counters.resident > self.memory_capacity:
                # out of memory: everything resident is lost
                return [self._discard(bid) for _, bid in list(self._mem_order)]
            return []
        actions: list[Action] = []
        if self.usage() >= self.red:
            actions.extend(self._discard_until_below_red())
        if self.usage() >= self.yellow:
            actions.extend(self._spill_until_below_yellow())
        return actions

    def commit(self, job_id: str, partition_id: int) -> list[tuple[BlockKey, IndexEntry]]:
        buf = self._buffers.pop((job_id, partition_id), None)
        if not buf:
            raise NothingToCommit(f"nothing to commit for {job_id}/{partition_id}")
        out = []
        fkey = (job_id, partition_id)
        offset = self._file_len.get(fkey, 0)
        log = self.log.setdefault(fkey, [])
        for block in buf:
            st = self.blocks.get(block_id(block))
            if st is None:
                # discarded before commit; nothing to index
                continue
            entry = IndexEntry(block.writer_id, block.retry_idx, block.backup_seq, offset, block.size_bytes, Source.AGENT_FILE)
            offset += block.size_bytes
            self.indexes.setdefault(block.key, PrimaryIndex(block.key)).append(entry)
            st.committed = True
            log.append((block.key, entry))
            out.append((block.key, entry))
        self._file_len[fkey] = offset
        return out

    def pending_partitions(self, job_id: str) -> list[int]:
        return sorted(p for (j, p) in self._buffers if j == job_id)

    # -- fallback backups --------------------------------------------------------

    def backup_candidates(self, threshold: int) -> list[DataBlock]:
        """In-memory blocks of partitions whose resident bytes exceed ``threshold``."""
        per_part: dict[tuple[str, int], int] = {}
        for _, bid in self._mem_order:
            st = self.blocks[bid]
            per_part[(bid[0], bid[3])] = per_part.get((bid[0], bid[3]), 0) + st.block.size_bytes
        out = []
        budget = None if self.disk_capacity is None else self.disk_capacity - self.disk_used
        for _, bid in self._mem_order:
            st = self.blocks[bid]
            if st.backed_up or st.backup_pending or per_part[(bid[0], bid[3])] <= threshold:
                continue
            if budget is not None:
                if st.block.size_bytes > budget:
                    continue  # disk full: deferred
                budget -= st.block.size_bytes
            st.backup_pending = True
            out.append(st.block)
        return out

    def mark_backed_up(self, blocks: list[DataBlock]) -> None:
        for b in blocks:
            st = self.blocks.get(block_id(b))
            if st is not None:
                st.backup_pending = False
                st.backed_up = True

    # -- lookup / lifecycle ----------------------------------------------------------

    def locate(self, job_id: str, writer_id: str, retry_idx: int, partition_id: int, seq: int) -> Where | None:
        if not self.alive:
            return None
        st = self.blocks.get((job_id, writer_id, retry_idx, partition_id, seq))
        return None if st is None else st.where

    def poll(self, job_id: str, partition_id: int, cursor: int) -> tuple[list[tuple[BlockKey, IndexEntry]], int]:
        log = self.log.get((job_id, partition_id), [])
        return log[cursor:], len(log)

    def withdraw(self, job_id: str, writer_id: str, retry_idx: int, partition_id: int) -> int:
        """Drop one writer attempt's blocks of a chunk (moved to backup-only)."""
        freed = 0
        for bid in [b for b in self.blocks if b[0] == job_id and b[1] == writer_id and b[2] == retry_idx and b[3] == partition_id]:
            freed += self._release(bid)
        return freed

    def release_job(self, job_id: str) -> int:
        freed = 0
        for bid in [b for b in self.blocks if b[0] == job_id]:
            freed += self._release(bid)
        for fkey in [k for k in self._buffers if k[0] == job_id]:
            del self._buffers[fkey]
        for fkey in [k for k in self.log if k[0] == job_id]:
            del self.log[fkey]
            self._file_len.pop(fkey, None)
        for key in [k for k in self.indexes if k.job_id == job_id]:
            del self.indexes[key]
        self._stats.pop(job_id, None)
        return freed

    def _release(self, bid: BlockId) -> int:
        st = self.blocks.pop(bid)
        if st.where is Where.MEMORY:
            self._mem_remove(st)
        elif st.bucket in ("on_disk", "spilled"):
            self.disk_used -= st.block.size_bytes
        self._move(st, "released")
        return st.block.size_bytes

    def fail(self) -> None:
        self.alive = False

    def recover(self) -> None:
        """Restart empty; readers notice the new epoch and reset cursors."""
        self.alive = True
        self.epoch += 1
        self._reset_state()

    # -- statistics / debugging --------------------------------------------------------

    def set_key_cardinality(self, job_id: str, per_partition: dict[int, int]) -> None:
        self._cardinality[job_id] = dict(per_partition)

    def partition_stats(self, job_id: str) -> dict[int, tuple[int, int, int]]:
        stats = self._stats.get(job_id, {})
        card = self._cardinality.get(job_id, {})
        return {p: (v[0], v[1], card.get(p, 0)) for p, v in sorted(stats.items())}

    def check_invariants(self) -> None:
        mem = sum(st.block.size_bytes for st in self.blocks.values() if st.where is Where.MEMORY)
        if mem != self.counters.resident:
            raise AssertionError(f"{self.node_id}: resident counter {self.counters.resident} != {mem}")
        if not self.counters.conserved():
            raise AssertionError(f"{self.node_id}: byte conservation violated: {self.counters}")
        if self.memory_management and self.alive:
            self.check_watermark()

    def check_watermark(self) -> None:
        if self.worker_resident >= self.red * self.memory_capacity:
            if self.counters.resident:
                raise AssertionError(f"{self.node_id}: worker above red but shuffle data resident")
        elif self.usage() >= self.red:
            raise AssertionError(f"{self.node_id}: usage {self.usage():.3f} >= red {self.red}")

    def snapshot(self) -> dict:
        return {
            "node_id": self.node_id,
            "alive": self.alive,
            "epoch": self.epoch,
            "memory_capacity": self.memory_capacity,
            "worker_resident": self.worker_resident,
            "shuffle_resident": self.counters.resident,
            "counters": vars(self.counters).copy(),
            "files": [
                {"job_id": j, "partition_id": p, "length": n}
                for (j, p), n in sorted(self._file_len.items())
            ],
        }

    def snapshot_json(self) -> str:
        return json.dumps(self.snapshot(), sort_keys=True)
