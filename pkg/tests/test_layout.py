from __future__ import annotations

import math

import pytest
from hypothesis import given, strategies as st

from shufflesim.core import BackupKind, Route
from shufflesim.layout import (
    MB,
    LayoutThresholds,
    WriterProfile,
    layout_delta,
    plan_layout,
    replan_on_progress,
)

DEFAULT = LayoutThresholds()


def test_default_thresholds():
    assert (DEFAULT.alpha, DEFAULT.beta, DEFAULT.gamma) == (300.0, 500 * MB, 50 * MB)


def test_slow_writer_gets_default_backup():
    prof = WriterProfile("w", 360.0, {p: MB for p in range(100)})
    d = plan_layout(prof, DEFAULT)
    assert d.backup_kind is BackupKind.DEFAULT
    assert set(d.routes.values()) == {Route.VIA_AGENT}


def test_heavy_colocated_writer_gets_remote_backup():
    prof = WriterProfile("w", 60.0, {p: 6 * MB for p in range(100)}, colocated_with_agent=True)
    assert plan_layout(prof, DEFAULT).backup_kind is BackupKind.REMOTE


def test_large_chunk_goes_backup_only():
    prof = WriterProfile("w", 60.0, {0: 60 * MB, 1: 20 * MB, 2: 20 * MB})
    d = plan_layout(prof, DEFAULT)
    assert d.routes == {0: Route.BACKUP_ONLY, 1: Route.VIA_AGENT, 2: Route.VIA_AGENT}
    assert d.backup_kind is BackupKind.NONE


def test_empty_writer():
    d = plan_layout(WriterProfile("w"), DEFAULT)
    assert d.routes == {} and not d.backup_enabled


def test_thresholds_are_strict():
    at = WriterProfile("w", 300.0, {0: 50 * MB, 1: 450 * MB})
    d = plan_layout(at, DEFAULT)
    assert d.backup_kind is BackupKind.NONE
    assert d.routes[0] is Route.VIA_AGENT


def test_degenerate_modes():
    prof = WriterProfile("w", 0.0, {0: 10**12})
    none = plan_layout(prof, LayoutThresholds.no_backup())
    assert not none.backup_enabled and none.routes[0] is Route.VIA_AGENT
    assert plan_layout(WriterProfile("w", 0.0, {0: 1}), LayoutThresholds.all_backup()).backup_enabled


def test_negative_threshold_rejected():
    with pytest.raises(ValueError):
        LayoutThresholds(beta=0)


def decide(runtime, chunks, colocated, th):
    """Direct restatement of the decision table."""
    enabled = runtime > th.alpha or th.alpha == 0 or sum(chunks.values()) > th.beta
    kind = BackupKind.NONE if not enabled else (BackupKind.REMOTE if colocated else BackupKind.DEFAULT)
    routes = {p: Route.BACKUP_ONLY if b > th.gamma else Route.VIA_AGENT for p, b in chunks.items() if b > 0}
    return kind, routes


chunk_maps = st.dictionaries(st.integers(0, 30), st.integers(0, 200), max_size=10)


@given(st.floats(0, 100), chunk_maps, st.booleans(), st.floats(0, 100), st.integers(1, 400), st.integers(1, 200))
def test_plan_matches_table(runtime, chunks, colocated, alpha, beta, gamma):
    th = LayoutThresholds(alpha, beta, gamma)
    d = plan_layout(WriterProfile("w", runtime, chunks, colocated), th)
    assert (d.backup_kind, d.routes) == decide(runtime, chunks, colocated, th)


@given(st.lists(st.tuples(st.floats(0, 20), chunk_maps), min_size=1, max_size=8), st.booleans())
def test_replan_ratchets(steps, colocated):
    th = LayoutThresholds(40.0, 800, 60)
    prof = WriterProfile("w", 0.0, {}, colocated)
    prior = plan_layout(prof, th)
    for dt, grow in steps:
        prof.observed_runtime += dt
        for p, b in grow.items():
            prof.per_chunk_bytes[p] = prof.per_chunk_bytes.get(p, 0) + b
        cur = replan_on_progress(prof, prior, th)
        if prior.backup_enabled:
            assert cur.backup_kind is prior.backup_kind
        for p, r in prior.routes.items():
            if r is Route.BACKUP_ONLY:
                assert cur.routes[p] is Route.BACKUP_ONLY
        delta = layout_delta(prior, cur)
        assert delta.backup_enabled_now == (cur.backup_enabled and not prior.backup_enabled)
        assert all(prior.route(p) is Route.VIA_AGENT for p in delta.new_backup_only)
        prior = cur


def test_replan_without_crossing_is_idempotent():
    prof = WriterProfile("w", 10.0, {0: 5, 1: 7})
    d = plan_layout(prof, DEFAULT)
    again = replan_on_progress(prof, d, DEFAULT)
    assert again == d
    assert layout_delta(d, again).new_backup_only == ()


def test_crossing_alpha_mid_write_flags_migration():
    th = LayoutThresholds(100.0, math.inf, math.inf)
    prof = WriterProfile("w", 50.0, {0: 10})
    d0 = plan_layout(prof, th)
    prof.observed_runtime = 150.0
    d1 = replan_on_progress(prof, d0, th)
    assert layout_delta(d0, d1).backup_enabled_now


def test_chunk_crossing_gamma_is_migrated():
    th = LayoutThresholds(math.inf, math.inf, 100)
    prof = WriterProfile("w", 0.0, {3: 90})
    d0 = plan_layout(prof, th)
    prof.per_chunk_bytes[3] = 120
    d1 = replan_on_progress(prof, d0, th)
    assert layout_delta(d0, d1).new_backup_only == (3,)


def test_scaled_thresholds():
    s = DEFAULT.scaled(1e-3)
    assert (s.alpha, s.beta, s.gamma) == (300.0, 500_000, 50_000)
