from __future__ import annotations

import itertools

import pytest
from hypothesis import given, strategies as st

from shufflesim.core import BlockKey, DataBlock
from shufflesim.proxy import ShuffleProxy

KB = 1000
_seq = itertools.count()


def pkt(size, part=0, writer="w", retry=0) -> DataBlock:
    s = next(_seq)
    key = BlockKey("j", writer, f"{writer}.{retry}", part, "a")
    return DataBlock(key, writer, retry, s, size, 0, 0, s)


def test_below_threshold_no_flush():
    p = ShuffleProxy("n", flush_bytes=4 * KB)
    assert p.submit("a", pkt(KB)) == []
    assert p.submit("a", pkt(KB)) == []
    assert p.pending == 2 * KB


def test_threshold_flushes_one_aggregate():
    p = ShuffleProxy("n", flush_bytes=4 * KB)
    p.submit("a", pkt(KB))
    p.submit("a", pkt(KB))
    out = p.submit("a", pkt(2 * KB))
    assert len(out) == 1 and out[0].size_bytes == 4 * KB
    assert p.pending == 0


def test_timer_flush():
    p = ShuffleProxy("n", flush_bytes=4 * KB, flush_interval_s=0.1)
    p.submit("a", pkt(KB), now=1.0)
    assert p.next_deadline() == pytest.approx(1.1)
    assert p.flush_due(1.05) == []
    out = p.flush_due(1.1)
    assert [t.size_bytes for t in out] == [KB]
    assert p.next_deadline() is None


def test_explicit_flush_and_empty_slot():
    p = ShuffleProxy("n")
    p.submit("a", pkt(5, part=3))
    assert p.flush("a", 3).partition_id == 3
    with pytest.raises(KeyError):
        p.flush("a", 3)


def test_aggregate_keeps_identities_in_order():
    p = ShuffleProxy("n", flush_bytes=10)
    blocks = [pkt(3), pkt(3), pkt(4)]
    for b in blocks[:-1]:
        p.submit("a", b)
    out = p.submit("a", blocks[-1])
    assert list(out[0].blocks) == blocks


def test_retarget_keeps_payload():
    p = ShuffleProxy("n", flush_bytes=1)
    t = p.submit("a", pkt(5))[0]
    moved = t.retarget("b")
    assert moved.target == "b" and moved.blocks == t.blocks


def test_disabled_proxy_forwards_each_packet():
    p = ShuffleProxy("n", enabled=False)
    assert len(p.submit("a", pkt(1))) == 1


def test_drop_writer():
    p = ShuffleProxy("n")
    p.submit("a", pkt(5, writer="x"))
    p.submit("a", pkt(7, writer="y"))
    assert p.drop_writer("x.0") == 5
    assert p.pending == 7
    assert p.drop_writer("y.0") == 7 and p.slots == {}


def test_flush_all_for_one_writer():
    p = ShuffleProxy("n")
    p.submit("a", pkt(5, part=0, writer="x"))
    p.submit("a", pkt(5, part=1, writer="y"))
    out = p.flush_all("x.0")
    assert [t.partition_id for t in out] == [0]
    assert len(p.flush_all()) == 1


packets = st.lists(st.tuples(st.integers(0, 3), st.integers(1, 900), st.sampled_from("xy"), st.booleans()), max_size=80)
# each (writer, partition) stream has one target agent
routes = st.fixed_dictionaries({(w, q): st.sampled_from("ab") for w in "xy" for q in range(4)})


@given(packets, routes, st.integers(100, 3000))
def test_conservation_and_order(ops, route, threshold):
    p = ShuffleProxy("n", flush_bytes=threshold)
    sent: dict[tuple[str, int], list[int]] = {}
    out = []
    submitted = 0
    for part, size, writer, tick in ops:
        target = route[(writer, part)]
        b = pkt(size, part, writer)
        sent.setdefault((writer, part), []).append(b.backup_seq)
        submitted += size
        out += p.submit(target, b, now=len(out))
        if tick:
            out += p.flush_due(len(out) + 1.0)
        assert p.submitted == submitted == p.forwarded + p.pending
        assert all(s.pending < threshold for s in p.slots.values())
    out += p.flush_all()
    assert p.pending == 0 and p.forwarded == submitted
    # per (writer, partition) stream, order survives aggregation
    seen: dict[tuple[str, int], list[int]] = {}
    for t in out:
        for b in t.blocks:
            seen.setdefault((b.writer_id, b.partition_id), []).append(b.backup_seq)
    assert seen == sent


def test_proxy_reduces_transfers():
    sizes = [50] * 400
    on, off = ShuffleProxy("n", flush_bytes=KB), ShuffleProxy("n", enabled=False)
    for s in sizes:
        on.submit("a", pkt(s))
        off.submit("a", pkt(s))
    on.flush_all()
    assert on.transfers < off.transfers
