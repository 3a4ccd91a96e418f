"""Canned desk-scale scenarios.

Each function builds its configuration, runs the simulator and returns raw
measurements.  Judging them (orderings, bands) is left to the caller so the
acceptance suite keeps its own arithmetic.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field, replace

from .config import SimConfig
from .sim.engine import RunResult, simulate
from .sim.events import trace_to_ndjson
from .sim.faults import FaultPlan, FaultSpec, Target, TargetKind, Trigger, TriggerKind
from .sim.metrics import Metrics
from .sim.workload import skewed_matrix, split_even, two_stage_job, uniform_matrix


def _with_fault(cfg: SimConfig, spec: FaultSpec) -> SimConfig:
    return replace(cfg, faults=FaultPlan((spec,)))


# -- determinism ------------------------------------------------------------------


def determinism_config(seed: int = 7) -> SimConfig:
    """Small run with a periodic fault so retries and failover are exercised."""
    cfg = SimConfig(seed=seed).with_(**{
        "workload.writers": 16, "workload.readers": 16, "workload.total_bytes": 3_200_000,
        "workload.jobs": 3, "workload.concurrency": 2,
    })
    return _with_fault(cfg, FaultSpec(Trigger(TriggerKind.PERIODIC, 5.0, 9.0), Target(TargetKind.RANDOM_ANY), 3.0))


def run_bytes(cfg: SimConfig) -> tuple[str, str]:
    """(trace NDJSON, metrics JSON) of one run."""
    res = simulate(cfg)
    return trace_to_ndjson(res.trace), json.dumps(res.metrics.to_dict(), sort_keys=True)


# -- scheduling -------------------------------------------------------------------

SCHED_MODES = ("Staged", "Gang", "Progressive")


def scheduling_tradeoff(seed: int = 0) -> dict[str, Metrics]:
    """One 64x64 non-blocking job under each forced scheduling mode."""
    base = SimConfig(seed=seed)
    return {mode: simulate(base.with_(**{"sched.mode": mode})).metrics for mode in SCHED_MODES}


# -- adaptive backup --------------------------------------------------------------

BACKUP_MODES = ("NoBackup", "AllBackup", "Adaptive")


def _barrier_job():
    # a few heavy writers over many light ones: only the heavy ones cross beta
    rows = [split_even(1_000_000, 32) for _ in range(8)] + [split_even(100_000, 32) for _ in range(472)]
    return [two_stage_job("j0", rows, shuffle_ratio=5.0, barrier=True)]


def backup_ablation(seed: int = 1) -> dict[tuple[str, str], float]:
    """E2E per (scenario, backup mode); scenario is "normal" or "exception"."""
    base = SimConfig(seed=seed).with_(**{
        "shuffle.mode_selection": False, "shuffle.fixed_mode": "OnDisk", "layout.backup_only": False,
        "cluster.compute_slots": 4,
    })
    fault = FaultSpec(Trigger(TriggerKind.AT_READ_PHASE, delay_s=1.0), Target(TargetKind.NODE, "s00"), 30.0)
    out = {}
    for scenario in ("normal", "exception"):
        for mode in BACKUP_MODES:
            cfg = base.with_(**{"layout.backup_mode": mode})
            if scenario == "exception":
                cfg = _with_fault(cfg, fault)
            out[(scenario, mode)] = simulate(cfg, _barrier_job()).metrics.e2e_runtime
    return out


# -- backup only on skew ----------------------------------------------------------


def backup_only_skew(seed: int = 0) -> dict[bool, Metrics]:
    """90% of 40 MB shuffled into one partition, BackupOnly off and on."""
    out = {}
    for bo in (False, True):
        cfg = SimConfig(seed=seed).with_(**{
            "shuffle.mode_selection": False, "shuffle.fixed_mode": "OnDisk", "layout.backup_only": bo,
        })
        job = two_stage_job("j0", skewed_matrix(20, 20, 40_000_000, 0.9), shuffle_ratio=10.0)
        out[bo] = simulate(cfg, [job]).metrics
    return out


# -- fault injection --------------------------------------------------------------


@dataclass
class FaultRun:
    metrics: Metrics
    large_reruns: int
    fired: bool


@dataclass
class FixedFaultResult:
    # keyed by ft flag, then by "none" / "write" / "read"
    runs: dict[bool, dict[str, FaultRun]] = field(default_factory=dict)


def _large_reruns(res: RunResult, job_id: str) -> int:
    return sum(1 for e in res.trace if e["ev"] == "task_end" and e["job"] == job_id and e["attempt"] > 0)


def fixed_fault_config(ft: bool, seed: int = 0) -> SimConfig:
    return SimConfig(seed=seed).with_(**{
        "workload.shape": "MixedLargeSmall", "workload.total_bytes": 192_000_000,
        "workload.small_total_bytes": 9_600_000, "shuffle.mode_selection": False,
        "shuffle.fixed_mode": "OnDisk", "task.reader_rate": 20_000.0, "ft.enabled": ft,
    })


def fixed_faults(seed: int = 0, node: str = "s00") -> FixedFaultResult:
    """One large and two small jobs; a 30 s disconnect in the write or read phase."""
    plans = {
        "none": None,
        "write": FaultSpec(Trigger(TriggerKind.AT_WRITE_PHASE, delay_s=60.0), Target(TargetKind.NODE, node), 30.0),
        "read": FaultSpec(Trigger(TriggerKind.AT_READ_PHASE, delay_s=5.0), Target(TargetKind.NODE, node), 30.0),
    }
    result = FixedFaultResult()
    for ft in (True, False):
        base = fixed_fault_config(ft, seed)
        result.runs[ft] = {}
        for name, spec in plans.items():
            res = simulate(base if spec is None else _with_fault(base, spec))
            result.runs[ft][name] = FaultRun(res.metrics, _large_reruns(res, "j000"), bool(res.faults))
    return result


def random_fault_config(ft: bool, faults: bool, seed: int = 0) -> SimConfig:
    # 12-15 min / 30 s scaled by 1/10 keeps the outage-to-interval ratio
    cfg = SimConfig(seed=seed).with_(**{
        "workload.writers": 32, "workload.readers": 32, "workload.total_bytes": 32_000_000,
        "workload.jobs": 50, "workload.concurrency": 5, "task.writer_rate": 100_000.0, "ft.enabled": ft,
    })
    if faults:
        cfg = _with_fault(cfg, FaultSpec(Trigger(TriggerKind.PERIODIC, 72.0, 90.0), Target(TargetKind.RANDOM_ANY), 3.0))
    return cfg


def random_faults(seed: int = 0) -> dict[tuple[bool, bool], RunResult]:
    """Keyed by (ft enabled, faults injected)."""
    return {(ft, f): simulate(random_fault_config(ft, f, seed)) for ft in (True, False) for f in (False, True)}


# -- exactly once -----------------------------------------------------------------


@dataclass
class OnceCase:
    seed: int
    fault: FaultSpec
    equal: bool
    fired: bool
    changed: bool
    reruns: int


def exactly_once_case(seed: int) -> OnceCase:
    """A fault-free run and the same run with one fault on a node it used."""
    rng = random.Random(seed)
    base = SimConfig(seed=seed).with_(**{
        "workload.writers": 8, "workload.readers": 8, "workload.total_bytes": 1_600_000,
        "layout.backup_mode": rng.choice(["AllBackup", "Adaptive"]), "ft.group_size": 2,
        "shuffle.mode_selection": False, "shuffle.fixed_mode": rng.choice(["InMemory", "OnDisk"]),
    })
    clean = simulate(base)
    used = sorted({aid for _, aid in clean.ingest_done} |
                  {e["node"] for e in clean.trace if e["ev"] == "task_start"})
    kind = rng.choice([TriggerKind.AT_WRITE_PHASE, TriggerKind.AT_READ_PHASE])
    delay = rng.uniform(0.0, 11.0) if kind is TriggerKind.AT_WRITE_PHASE else rng.uniform(0.0, 0.5)
    spec = FaultSpec(Trigger(kind, delay_s=delay), Target(TargetKind.NODE, rng.choice(used)), rng.uniform(1.0, 30.0))
    hit = simulate(_with_fault(base, spec))
    return OnceCase(seed, spec, hit.consumed == clean.consumed, bool(hit.faults),
                    hit.metrics.e2e_runtime != clean.metrics.e2e_runtime, hit.metrics.rerun_times)


# -- grouping ---------------------------------------------------------------------


def grouping_fanin(seed: int = 0, writers: int = 1000) -> dict[int, RunResult]:
    """One wide job grouped with k = 100 and with a single group."""
    out = {}
    for k in (100, writers):
        cfg = SimConfig(seed=seed).with_(**{
            "ft.group_size": k, "shuffle.mode_selection": False, "shuffle.fixed_mode": "OnDisk",
        })
        out[k] = simulate(cfg, [two_stage_job("j0", uniform_matrix(writers, 10, 10_000_000))])
    return out
