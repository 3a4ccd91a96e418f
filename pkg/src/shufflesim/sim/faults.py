"""Fault plans: node disconnects triggered by job phase or on a period."""

from __future__ import annotations

import enum
import random
import re
from dataclasses import dataclass


class TriggerKind(str, enum.Enum):
    AT_WRITE_PHASE = "AtWritePhase"
    AT_READ_PHASE = "AtReadPhase"
    PERIODIC = "Periodic"


class TargetKind(str, enum.Enum):
    RANDOM_COMPUTE = "RandomCompute"
    RANDOM_STORAGE = "RandomStorage"
    RANDOM_ANY = "RandomAny"
    NODE = "Node"


@dataclass(frozen=True)
class Trigger:
    kind: TriggerKind
    min_interval: float = 0.0
    max_interval: float = 0.0
    # phase triggers: which job (index in submission order) and extra delay
    job_index: int = 0
    delay_s: float = 0.0

    def __post_init__(self) -> None:
        if self.kind is TriggerKind.PERIODIC:
            if not 0 < self.min_interval <= self.max_interval:
                raise ValueError("periodic trigger needs 0 < min <= max")
        if self.delay_s < 0:
            raise ValueError("trigger delay must be non-negative")


@dataclass(frozen=True)
class Target:
    kind: TargetKind
    node_id: str = ""

    def __post_init__(self) -> None:
        if self.kind is TargetKind.NODE and not self.node_id:
            raise ValueError("Node target needs a node id")


@dataclass(frozen=True)
class FaultSpec:
    trigger: Trigger
    target: Target
    duration_s: float = 30.0

    def __post_init__(self) -> None:
        if self.duration_s <= 0:
            raise ValueError("fault duration must be positive")


@dataclass(frozen=True)
class FaultPlan:
    faults: tuple[FaultSpec, ...] = ()

    def __bool__(self) -> bool:
        return bool(self.faults)


_PERIODIC = re.compile(r"Periodic\(\s*([0-9.eE+-]+)\s*,\s*([0-9.eE+-]+)\s*\)$")
_NODE = re.compile(r"Node\(\s*([A-Za-z0-9_.-]+)\s*\)$")


def parse_trigger(text: str, job_index: int = 0, delay_s: float = 0.0) -> Trigger:
    text = text.strip()
    m = _PERIODIC.match(text)
    if m:
        return Trigger(TriggerKind.PERIODIC, float(m.group(1)), float(m.group(2)))
    return Trigger(TriggerKind(text), job_index=job_index, delay_s=delay_s)


def parse_target(text: str) -> Target:
    text = text.strip()
    m = _NODE.match(text)
    if m:
        return Target(TargetKind.NODE, m.group(1))
    return Target(TargetKind(text))


def periodic_times(trigger: Trigger, rng: random.Random, horizon: float, start: float = 0.0) -> list[float]:
    """Injection instants in [start, horizon): gaps uniform in [min, max]."""
    out = []
    t = start
    while True:
        t += rng.uniform(trigger.min_interval, trigger.max_interval)
        if t >= horizon:
            return out
        out.append(t)


def pick_target(target: Target, rng: random.Random, compute: list[str], storage: list[str]) -> str:
    if target.kind is TargetKind.NODE:
        return target.node_id
    if target.kind is TargetKind.RANDOM_COMPUTE:
        return rng.choice(compute)
    if target.kind is TargetKind.RANDOM_STORAGE:
        return rng.choice(storage)
    return rng.choice(compute + storage)
