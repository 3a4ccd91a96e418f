from __future__ import annotations

import random
from functools import reduce

import pytest
from hypothesis import given, strategies as st

from shufflesim.core import (
    MASK64,
    ZERO_DIGEST,
    BlockKey,
    DataBlock,
    IndexEntry,
    JobSpec,
    PrimaryIndex,
    Source,
    StageSpec,
    checksum_of,
    combine_checksums,
    format_index,
    parse_index,
    payload_token,
)

digests = st.integers(min_value=0, max_value=MASK64)


def key(p: int = 0) -> BlockKey:
    return BlockKey("j0", "j0.w1", "j0.w1.0", p, "s03")


def test_block_key_rejects_missing_fields():
    with pytest.raises(ValueError):
        BlockKey("j0", "", "ap", 0, "s0")
    with pytest.raises(ValueError):
        BlockKey("j0", "t", "ap", -1, "s0")


def test_data_block_size_must_be_positive():
    with pytest.raises(ValueError):
        DataBlock(key(), "w", 0, 0, 0, 0, 1)
    blk = DataBlock(key(4), "w", 2, 1, 10, 0, 1)
    assert blk.partition_id == 4
    assert blk.identity() == ("w", 4, 1)


def test_checksum_is_deterministic():
    tok = payload_token(1, "j0", "w", 3, 0)
    assert checksum_of("w", 0, 3, tok) == checksum_of("w", 0, 3, tok)


def test_reexecution_with_same_payload_keeps_digest():
    tok = payload_token(1, "j0", "w", 3, 0)
    assert checksum_of("w", 0, 3, tok) == checksum_of("w", 1, 3, tok)


def test_payload_change_changes_digest():
    a = checksum_of("w", 0, 3, payload_token(1, "j0", "w", 3, 0))
    b = checksum_of("w", 0, 3, payload_token(1, "j0", "w", 3, 1))
    assert a != b


def test_no_collisions_over_many_payloads():
    rng = random.Random(42)
    ids = set()
    while len(ids) < 100_000:
        ids.add(rng.getrandbits(64))
    seen = {checksum_of("w", 0, 0, i) for i in ids}
    assert len(seen) == len(ids)


def test_combine_empty_is_zero():
    assert combine_checksums([]) == ZERO_DIGEST


@given(digests, digests)
def test_combine_commutes(a, b):
    assert combine_checksums([a, b]) == combine_checksums([b, a])


@given(st.lists(digests, max_size=50), st.randoms())
def test_combine_permutation_invariant(ds, rnd):
    shuffled = list(ds)
    rnd.shuffle(shuffled)
    assert combine_checksums(ds) == combine_checksums(shuffled)


def test_combine_matches_sorted_fold():
    rng = random.Random(5)
    ds = [rng.getrandbits(64) for _ in range(100)]
    oracle = reduce(lambda acc, d: (acc + d) % 2**64, sorted(ds), 0)
    assert combine_checksums(ds) == oracle


@given(st.lists(digests, max_size=20), digests)
def test_combine_is_incremental(ds, d):
    assert combine_checksums([d], start=combine_checksums(ds)) == combine_checksums(ds + [d])


def test_primary_index_rejects_duplicate_triple():
    idx = PrimaryIndex(key())
    idx.append(IndexEntry("w", 0, 0, 0, 5, Source.AGENT_FILE))
    idx.append(IndexEntry("w", 1, 0, 5, 5, Source.AGENT_FILE))
    with pytest.raises(ValueError):
        idx.append(IndexEntry("w", 0, 0, 10, 5, Source.AGENT_FILE))


def test_index_entry_bounds():
    with pytest.raises(ValueError):
        IndexEntry("w", 0, 0, 0, 0, Source.AGENT_FILE)
    with pytest.raises(ValueError):
        IndexEntry("w", 0, 0, -1, 3, Source.AGENT_FILE)


def test_index_text_round_trip():
    a, b = PrimaryIndex(key(0)), PrimaryIndex(key(1))
    a.append(IndexEntry("w", 0, 0, 0, 7, Source.AGENT_FILE))
    a.append(IndexEntry("w", 0, 1, 7, 3, Source.AGENT_FILE))
    b.append(IndexEntry("v", 2, 0, 0, 9, Source.REMOTE_BACKUP))
    parsed = parse_index(format_index(a) + format_index(b))
    assert [(p.key, p.entries) for p in parsed] == [(a.key, a.entries), (b.key, b.entries)]


def test_parse_index_reports_line():
    with pytest.raises(ValueError, match="line 1"):
        parse_index("garbage\n")


def _stage(sid, n, parts=0):
    rows = tuple(tuple([1] * parts) for _ in range(n)) if parts else ()
    return StageSpec(sid, n, tuple([1] * n), rows)


def test_job_spec_rejects_cycle():
    a = _stage("a", 2, 2)
    b = StageSpec("b", 2, (1, 1), ((1, 1), (1, 1)))
    with pytest.raises(ValueError, match="cycle"):
        JobSpec("j", (a, b), (("a", "b"), ("b", "a")))


def test_job_spec_checks_partition_fanout():
    with pytest.raises(ValueError, match="partitions"):
        JobSpec("j", (_stage("a", 2, 3), _stage("b", 2)), (("a", "b"),))


def test_stage_declared_output_must_match_rows():
    with pytest.raises(ValueError):
        StageSpec("a", 1, (1,), ((2, 2),), declared_output=(5,))
