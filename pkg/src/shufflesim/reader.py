"""Reader side: index discovery, version deduplication, multi-source fallback
reads, and checksum-verified incremental recovery."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

from .core import SOURCE_RANK, IndexEntry, Source, combine_checksums

DEFAULT_RETRY_BUDGET = 3


@dataclass(frozen=True)
class Location:
    source: Source
    node_id: str
    # agent or disk epoch at write time; a restarted node loses older data
    epoch: int = 0


@dataclass(frozen=True)
class Located:
    entry: IndexEntry
    location: Location

    @property
    def ident(self) -> tuple[str, int]:
        return (self.entry.writer_id, self.entry.backup_seq)


class BackupCatalog:
    """Writer-side backup indexes, visible to every reader of the job."""

    def __init__(self) -> None:
        self._by_part: dict[tuple[str, int], list[Located]] = {}

    def add(self, job_id: str, partition_id: int, entry: IndexEntry, node_id: str, epoch: int = 0) -> None:
        loc = Location(entry.source, node_id, epoch)
        self._by_part.setdefault((job_id, partition_id), []).append(Located(entry, loc))

    def entries(self, job_id: str, partition_id: int, cursor: int = 0) -> tuple[list[Located], int]:
        items = self._by_part.get((job_id, partition_id), [])
        return items[cursor:], len(items)

    def drop_job(self, job_id: str) -> None:
        for key in [k for k in self._by_part if k[0] == job_id]:
            del self._by_part[key]


def discover(job_id: str, partition_id: int, agents: Iterable, catalog: BackupCatalog) -> tuple[list[Located], list[str]]:
    """Union of agent primary-index entries and backup entries for a partition.

    Returns the merged entries and the ids of agents that could not be reached.
    """
    merged: list[Located] = []
    unreachable: list[str] = []
    for agent in agents:
        if not agent.alive:
            unreachable.append(agent.node_id)
            continue
        entries, _ = agent.poll(job_id, partition_id, 0)
        merged.extend(Located(e, Location(Source.AGENT_FILE, agent.node_id, agent.epoch)) for _, e in entries)
    backups, _ = catalog.entries(job_id, partition_id)
    merged.extend(backups)
    return merged, unreachable


@dataclass
class Candidate:
    """Latest version of one (writer, backup_seq) with its ordered sources."""

    writer_id: str
    backup_seq: int
    retry_idx: int
    length: int
    chain: list[Location] = field(default_factory=list)

    @property
    def ident(self) -> tuple[str, int]:
        return (self.writer_id, self.backup_seq)


def _chain_key(loc: Location) -> tuple:
    return (SOURCE_RANK[loc.source], loc.node_id, loc.epoch)


def merge_located(known: dict[tuple[str, int], Candidate], entries: Iterable[Located]) -> list[tuple[str, int]]:
    """Fold entries into ``known`` in place; returns the idents that changed."""
    changed: dict[tuple[str, int], None] = {}
    for item in entries:
        e = item.entry
        cur = known.get(item.ident)
        if cur is None or e.retry_idx > cur.retry_idx:
            known[item.ident] = Candidate(e.writer_id, e.backup_seq, e.retry_idx, e.length, [item.location])
        elif e.retry_idx == cur.retry_idx and item.location not in cur.chain:
            cur.chain.append(item.location)
            cur.chain.sort(key=_chain_key)
        else:
            continue
        changed[item.ident] = None
    return list(changed)


def dedup_versions(entries: Iterable[Located]) -> dict[tuple[str, int], Candidate]:
    """Keep only the largest retry_idx per (writer, backup_seq); equal copies
    from different sources become an ordered fallback chain."""
    out: dict[tuple[str, int], Candidate] = {}
    merge_located(out, entries)
    return out


@dataclass
class ReadPlan:
    partition_id: int
    fetch: list[Candidate]
    missing: list[tuple[str, int]]

    def check(self) -> None:
        seen = [c.ident for c in self.fetch] + list(self.missing)
        if len(seen) != len(set(seen)):
            raise AssertionError("read plan lists an entry twice")


def build_read_plan(
    partition_id: int,
    entries: Iterable[Located],
    expected: Iterable[tuple[str, int]] = (),
) -> ReadPlan:
    """Fetch list from discovered entries; expected blocks never seen are missing."""
    cands = dedup_versions(entries)
    missing = sorted(set(expected) - set(cands))
    fetch = [cands[k] for k in sorted(cands)]
    plan = ReadPlan(partition_id, fetch, missing)
    plan.check()
    return plan


def fetch_with_fallback(
    plan: ReadPlan, available: Callable[[Candidate, Location], bool]
) -> tuple[list[tuple[Candidate, Location]], list[tuple[str, int]]]:
    """Try each source in chain order; an entry is missing only when all fail."""
    fetched: list[tuple[Candidate, Location]] = []
    missing = list(plan.missing)
    for cand in plan.fetch:
        for loc in cand.chain:
            if available(cand, loc):
                fetched.append((cand, loc))
                break
        else:
            missing.append(cand.ident)
    return fetched, sorted(missing)


class RecoveryState(str, enum.Enum):
    RUNNING = "Running"
    VERIFYING = "Verifying"
    COMPLETE = "Complete"
    ABORTED = "AbortedToFullRerun"


@dataclass
class RecoverySession:
    """Per-reader consumption ledger and recovery state machine.

    ``consumed`` maps (writer, backup_seq) to the (retry_idx, digest) that
    was processed.  A later version with the same digest counts as already
    consumed; one with a different digest cannot be reconciled.
    """

    partition_id: int
    retry_budget: int = DEFAULT_RETRY_BUDGET
    state: RecoveryState = RecoveryState.RUNNING
    consumed: dict[tuple[str, int], tuple[int, int]] = field(default_factory=dict)
    missing: set[str] = field(default_factory=set)
    attempts: dict[str, int] = field(default_factory=dict)
    # every digest ever consumed, duplicates included
    consumed_digests: list[int] = field(default_factory=list)
    abort_reason: str = ""

    @property
    def finished(self) -> bool:
        return self.state in (RecoveryState.COMPLETE, RecoveryState.ABORTED)

    def needs(self, ident: tuple[str, int], retry_idx: int, digest: int | None = None) -> bool:
        prev = self.consumed.get(ident)
        if prev is None:
            return True
        if prev[0] >= retry_idx:
            return False
        return digest is not None and digest != prev[1]

    def consume(self, ident: tuple[str, int], retry_idx: int, digest: int) -> bool:
        """Record a processed block; returns False if it was a stale no-op."""
        if self.finished:
            raise RuntimeError("session already finished")
        prev = self.consumed.get(ident)
        if prev is not None and prev[0] >= retry_idx and prev[1] == digest:
            return False
        if prev is not None and prev[1] != digest:
            self.abort(f"version conflict for {ident}")
            return False
        if prev is not None:
            # same payload regenerated: refresh the version, no new bytes
            self.consumed[ident] = (retry_idx, digest)
            return False
        self.consumed[ident] = (retry_idx, digest)
        self.consumed_digests.append(digest)
        self.missing.discard(ident[0])
        return True

    def deliver_duplicate(self, digest: int) -> None:
        """A block processed a second time (e.g. a replayed fetch)."""
        self.consumed_digests.append(digest)

    def report_missing(self, writers: Iterable[str], locatable: bool = True) -> list[str]:
        """Missing writers to regenerate; aborts when over budget or unlocatable."""
        if self.finished:
            return []
        if not locatable:
            self.abort("missing data cannot be regenerated")
            return []
        out = []
        for w in sorted(set(writers)):
            if w in self.missing:
                continue
            n = self.attempts.get(w, 0) + 1
            if n > self.retry_budget:
                self.abort(f"writer {w} exceeded retry budget")
                return []
            self.attempts[w] = n
            self.missing.add(w)
            out.append(w)
        return out

    def regeneration_failed(self, writer_id: str) -> bool:
        """The rerun for ``writer_id`` did not deliver; True if another try is allowed."""
        self.missing.discard(writer_id)
        return bool(self.report_missing([writer_id]))

    def verify(self, expected_digest: int) -> RecoveryState:
        if self.finished:
            return self.state
        self.state = RecoveryState.VERIFYING
        if combine_checksums(self.consumed_digests) == expected_digest:
            self.state = RecoveryState.COMPLETE
        else:
            self.abort("aggregate checksum mismatch")
        return self.state

    def abort(self, reason: str) -> None:
        self.state = RecoveryState.ABORTED
        self.abort_reason = reason

    def consumed_multiset(self) -> list[tuple[str, int, int]]:
        return sorted((w, seq, d) for (w, seq), (_, d) in self.consumed.items())


def incremental_recover(
    session: RecoverySession,
    missing_writers: Sequence[str],
    regenerate: Callable[[str, int], Iterable[tuple[tuple[str, int], int, int]] | None],
    expected_digest: int,
    locatable: bool = True,
) -> RecoveryState:
    """Synchronous driver: rerun each missing writer until it delivers.

    ``regenerate(writer, attempt)`` returns the regenerated blocks as
    ((writer, seq), retry_idx, digest) triples, or None on failure.
    """
    pending = session.report_missing(missing_writers, locatable)
    while pending and not session.finished:
        nxt = []
        for w in pending:
            blocks = regenerate(w, session.attempts[w])
            if blocks is None:
                if session.regeneration_failed(w):
                    nxt.append(w)
                continue
            for ident, retry, digest in blocks:
                if session.finished:
                    break
                if session.needs(ident, retry, digest):
                    session.consume(ident, retry, digest)
            session.missing.discard(w)
        pending = nxt
    return session.verify(expected_digest)


def expected_digest(per_writer: Mapping[str, int]) -> int:
    return combine_checksums(per_writer.values())


@dataclass
class ConsumeModel:
    """Downstream processing as a per-byte cost."""

    rate_bytes_per_s: float

    def busy_time(self, nbytes: int) -> float:
        if nbytes == 0:
            return 0.0
        return nbytes / self.rate_bytes_per_s


def consume(session: RecoverySession, blocks: Iterable[tuple[tuple[str, int], int, int, int]], model: ConsumeModel) -> float:
    """Process (ident, retry_idx, digest, length) blocks; returns busy seconds."""
    busy = 0.0
    for ident, retry, digest, length in blocks:
        if session.consume(ident, retry, digest):
            busy += model.busy_time(length)
    return busy
