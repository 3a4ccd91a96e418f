from __future__ import annotations

import random

import pytest
from hypothesis import given, strategies as st

from shufflesim.agent import ShuffleAgent
from shufflesim.core import BlockKey, DataBlock, ShuffleMode, StageSpec, combine_checksums
from shufflesim.sched import (
    ForcedReason,
    ManifestBook,
    ProgressReport,
    ReadCursor,
    SchedConfig,
    SchedMode,
    StageSchedulingPolicy,
    decide_policy,
    dynamic_partition_insertion,
    pre_read_poll,
    pre_start,
    upstream_progress,
)


def stage(n: int, barrier: bool = False) -> StageSpec:
    return StageSpec("r", n, tuple([1] * n), barrier_input=barrier)


def test_low_parallelism_is_gang():
    p = decide_policy(stage(8))
    assert p.mode is SchedMode.GANG and p.forced_reason is ForcedReason.LOW_PARALLELISM


def test_barrier_forces_full_progress():
    p = decide_policy(stage(100, barrier=True))
    assert (p.mode, p.lam, p.forced_reason) == (SchedMode.PROGRESSIVE, 1.0, ForcedReason.BARRIER_INPUT)


def test_default_progressive():
    p = decide_policy(stage(100))
    assert (p.mode, p.lam) == (SchedMode.PROGRESSIVE, 0.5)


def test_cutoff_boundary():
    assert decide_policy(stage(10)).mode is SchedMode.PROGRESSIVE
    assert decide_policy(stage(9)).mode is SchedMode.GANG


def test_forced_modes():
    assert decide_policy(stage(3), SchedConfig(mode=SchedMode.STAGED)).mode is SchedMode.STAGED
    assert decide_policy(stage(300), SchedConfig(mode=SchedMode.GANG)).mode is SchedMode.GANG


def test_policy_validation():
    with pytest.raises(ValueError):
        StageSchedulingPolicy(SchedMode.PROGRESSIVE, 0.5, ForcedReason.BARRIER_INPUT)
    with pytest.raises(ValueError):
        StageSchedulingPolicy(SchedMode.PROGRESSIVE, 0.5, ForcedReason.LOW_PARALLELISM)
    with pytest.raises(ValueError):
        StageSchedulingPolicy(SchedMode.PROGRESSIVE, 1.5)


def test_progress_examples():
    done = [ProgressReport("a", 10, 10, True), ProgressReport("b", 5, 5, True)]
    assert upstream_progress(done) == 1.0
    half = [ProgressReport("a", 5, 10), ProgressReport("b", 5, 10)]
    assert upstream_progress(half) == 0.5
    assert upstream_progress([ProgressReport("a", 0, 0, True), ProgressReport("b", 0, 0)]) == 0.5
    with pytest.raises(ValueError):
        upstream_progress([])


@given(st.lists(st.tuples(st.integers(0, 1000), st.integers(1, 1000)), min_size=1, max_size=30))
def test_progress_recompute(rows):
    reports = [ProgressReport(f"w{i}", p, e) for i, (p, e) in enumerate(rows)]
    oracle = sum(min(p, e) for p, e in rows) / sum(e for _, e in rows)
    assert upstream_progress(reports) == pytest.approx(oracle)
    assert 0.0 <= upstream_progress(reports) <= 1.0


def test_overshoot_flag():
    assert ProgressReport("w", 11, 10).overshoot


READERS = [f"r{i}" for i in range(4)]


def test_progressive_boundary():
    pol = StageSchedulingPolicy(SchedMode.PROGRESSIVE, 0.5)
    launched: set[str] = set()
    assert pre_start(READERS, launched, 0.49, pol) == []
    assert pre_start(READERS, launched, 0.5, pol) == READERS
    assert pre_start(READERS, launched, 0.9, pol) == []


def test_staged_waits_for_completion():
    pol = StageSchedulingPolicy(SchedMode.STAGED, 1.0)
    launched: set[str] = set()
    assert pre_start(READERS, launched, 0.99, pol) == []
    assert pre_start(READERS, launched, 1.0, pol) == READERS


def test_gang_launches_immediately():
    assert pre_start(READERS, set(), 0.0, StageSchedulingPolicy(SchedMode.GANG, 0.0)) == READERS


def test_slot_shortage_defers():
    pol = StageSchedulingPolicy(SchedMode.GANG, 0.0)
    launched: set[str] = set()
    assert pre_start(READERS, launched, 0.0, pol, free_slots=3) == READERS[:3]
    assert pre_start(READERS, launched, 0.0, pol, free_slots=0) == []
    assert pre_start(READERS, launched, 0.0, pol, free_slots=5) == READERS[3:]


@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
def test_raising_lambda_never_launches_earlier(lo, hi, progress):
    lo, hi = sorted((lo, hi))
    early = pre_start(READERS, set(), progress, StageSchedulingPolicy(SchedMode.PROGRESSIVE, lo))
    late = pre_start(READERS, set(), progress, StageSchedulingPolicy(SchedMode.PROGRESSIVE, hi))
    assert set(late) <= set(early)


def _block(agent_seq: int, part: int = 0) -> DataBlock:
    key = BlockKey("j", "w", "w.0", part, "a")
    return DataBlock(key, "w", 0, agent_seq, 1, 0, 0, agent_seq)


def test_poll_cursor_examples():
    a = ShuffleAgent("a", 10**6)
    cur = ReadCursor()
    for i in range(3):
        a.ingest(_block(i), ShuffleMode.ON_DISK)
    a.commit("j", 0)
    new, healthy = cur.poll(a, "j", 0)
    assert healthy and len(new) == 3
    assert cur.poll(a, "j", 0) == ([], True)


def test_unreachable_agent_is_flagged():
    a, b = ShuffleAgent("a", 100), ShuffleAgent("b", 100)
    b.fail()
    entries, unhealthy = pre_read_poll(ReadCursor(), [a, b], "j", 0)
    assert entries == [] and unhealthy == ["b"]


def test_cursor_resets_on_new_epoch():
    a = ShuffleAgent("a", 10**6)
    cur = ReadCursor()
    a.ingest(_block(0), ShuffleMode.ON_DISK)
    a.commit("j", 0)
    cur.poll(a, "j", 0)
    a.fail()
    a.recover()
    a.ingest(_block(1), ShuffleMode.ON_DISK)
    a.commit("j", 0)
    new, _ = cur.poll(a, "j", 0)
    assert len(new) == 1


def test_random_interleaving_sees_every_entry_once():
    rng = random.Random(4)
    for trial in range(50):
        agents = [ShuffleAgent(f"a{i}", 10**9) for i in range(3)]
        cur = ReadCursor()
        seen, committed, seq = [], [], 0
        for _ in range(60):
            if rng.random() < 0.6:
                ag = rng.choice(agents)
                for _ in range(rng.randint(1, 3)):
                    ag.ingest(_block(seq), ShuffleMode.ON_DISK)
                    seq += 1
                committed.extend(ag.commit("j", 0))
            else:
                entries, _ = pre_read_poll(cur, agents, "j", 0)
                seen.extend(entries)
        seen.extend(pre_read_poll(cur, agents, "j", 0)[0])
        assert len(seen) == len(set(seen)) == len(committed)
        assert set(seen) == set(committed)


def _covers(plan, sizes):
    by_part: dict[int, list[tuple[int, int]]] = {}
    for out in plan:
        for piece in out:
            assert piece.size > 0
            by_part.setdefault(piece.partition_id, []).append((piece.start, piece.end))
    for p, n in enumerate(sizes):
        ranges = sorted(by_part.get(p, []))
        if n <= 0:
            assert not ranges
            continue
        assert ranges[0][0] == 0 and ranges[-1][1] == n
        assert all(a[1] == b[0] for a, b in zip(ranges, ranges[1:]))


def test_identity_plan_at_target():
    plan = dynamic_partition_insertion([100] * 5, 100)
    assert [tuple((x.partition_id, x.start, x.end) for x in out) for out in plan] == [((p, 0, 100),) for p in range(5)]


def test_hot_partition_is_split():
    r = 20
    total = 20_000
    sizes = [int(total * 0.9)] + [int(total * 0.1 / (r - 1))] * (r - 1)
    plan = dynamic_partition_insertion(sizes, total / r)
    hot = [out for out in plan if out[0].partition_id == 0]
    assert len(hot) == 18
    _covers(plan, sizes)
    outs = [sum(x.size for x in out) for out in plan]
    assert max(outs) / min(outs) <= 2


def test_empty_partitions_vanish():
    plan = dynamic_partition_insertion([0, 0, 50, 0], 100)
    assert len(plan) == 1 and plan[0][0].partition_id == 2


def test_bad_target():
    with pytest.raises(ValueError):
        dynamic_partition_insertion([1], 0)


@given(st.lists(st.integers(0, 5000), max_size=30), st.integers(10, 1000))
def test_plan_covers_every_byte_once(sizes, target):
    plan = dynamic_partition_insertion(sizes, target)
    _covers(plan, sizes)
    assert sum(x.size for out in plan for x in out) == sum(sizes)
    for out in plan:
        assert sum(x.size for x in out) <= 2 * target


def test_manifest_without_retries():
    book = ManifestBook()
    book.record("w0", 0, 0, 5)
    book.record("w1", 0, 0, 7)
    book.complete("w0", 0)
    book.complete("w1", 0)
    assert {w: r for w, (_, r) in book.checksum_manifest().items()} == {"w0": 0, "w1": 0}


def test_manifest_tracks_latest_retry():
    book = ManifestBook()
    book.record("w", 0, 0, 5)
    book.complete("w", 0)
    book.record("w", 1, 0, 9)
    book.complete("w", 1)
    assert book.checksum_manifest()["w"] == (9, 1)
    # a late completion of a stale attempt does not win
    book.complete("w", 0)
    assert book.checksum_manifest()["w"] == (9, 1)


@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 2**64 - 1)), max_size=40))
def test_manifest_aggregate_fold(items):
    book = ManifestBook()
    for part, d in items:
        book.record("w", 0, part, d)
    m = book.complete("w", 0)
    assert m.aggregate == combine_checksums(d for _, d in items)
    for part in {p for p, _ in items}:
        assert book.partition_digest(part) == combine_checksums(d for p, d in items if p == part)
