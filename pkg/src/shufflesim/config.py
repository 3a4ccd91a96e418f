"""Experiment configuration: a flat ``key.path = value`` text format.

Every key maps onto one field of a section dataclass.  Unknown keys, bad
values and a missing or unsupported ``schema_version`` raise ConfigError
naming the offending key.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .core import ShuffleMode
from .layout import LayoutThresholds
from .sched import SchedConfig, SchedMode
from .sim.cluster import ClusterSpec
from .sim.faults import FaultPlan, FaultSpec, parse_target, parse_trigger
from .sim.workload import Shape, WorkloadParams

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class WorkloadSection:
    shape: str = "Uniform"
    writers: int = 64
    readers: int = 64
    total_bytes: int = 64_000_000
    hot_fraction: float = 0.9
    shuffle_ratio: float = 1.0
    jobs: int = 1
    rounds: int = 1
    small_writers: int = 32
    small_readers: int = 32
    small_total_bytes: int = 3_200_000
    # jobs in flight at once; 0 submits everything at time zero
    concurrency: int = 0
    scale: float = 1.0

    def params(self) -> WorkloadParams:
        return WorkloadParams(
            shape=Shape(self.shape), writers=self.writers, readers=self.readers,
            total_bytes=self.total_bytes, hot_fraction=self.hot_fraction,
            shuffle_ratio=self.shuffle_ratio, jobs=self.jobs, rounds=self.rounds,
            small_writers=self.small_writers, small_readers=self.small_readers,
            small_total_bytes=self.small_total_bytes,
        )


@dataclass(frozen=True)
class SchedSection:
    mode: str = "Adaptive"
    lam: float = 0.5
    low_parallelism_cutoff: int = 10

    def to_config(self, dispatch_latency_s: float) -> SchedConfig:
        mode = None if self.mode == "Adaptive" else SchedMode(self.mode)
        return SchedConfig(mode, self.lam, self.low_parallelism_cutoff, dispatch_latency_s)


@dataclass(frozen=True)
class LayoutSection:
    backup_mode: str = "Adaptive"  # Adaptive | NoBackup | AllBackup
    alpha_s: float = 300.0
    beta_bytes: float = 500_000.0
    gamma_bytes: float = 50_000.0
    backup_only: bool = True

    def thresholds(self) -> LayoutThresholds:
        gamma = self.gamma_bytes if self.backup_only else math.inf
        if self.backup_mode == "NoBackup":
            return LayoutThresholds(math.inf, math.inf, gamma)
        if self.backup_mode == "AllBackup":
            return LayoutThresholds.all_backup(gamma)
        return LayoutThresholds(self.alpha_s, self.beta_bytes, gamma)


@dataclass(frozen=True)
class ShuffleSection:
    mode_selection: bool = True
    fixed_mode: str = "OnDisk"
    memory_management: bool = True
    yellow: float = 0.8
    red: float = 0.9
    curve_grid: int = 32

    @property
    def fixed(self) -> ShuffleMode:
        return ShuffleMode(self.fixed_mode)


@dataclass(frozen=True)
class FtSection:
    enabled: bool = True
    group_size: int = 12
    replicas: int = 2
    retry_budget: int = 3


@dataclass(frozen=True)
class ProxySection:
    enabled: bool = True
    flush_bytes: int = 1_000_000
    flush_interval_s: float = 0.1


@dataclass(frozen=True)
class TaskSection:
    writer_rate: float = 20_000.0
    reader_rate: float = 100_000.0
    startup_s: float = 1.0
    dispatch_latency_s: float = 0.5
    jitter: float = 0.1
    batches: int = 4
    poll_interval_s: float = 1.0
    # bytes a reader may have in flight at once
    fetch_window: int = 1_000_000
    task_memory: int = 15_000_000


@dataclass(frozen=True)
class DebugSection:
    invariants: bool = True


@dataclass(frozen=True)
class SimConfig:
    seed: int = 0
    cluster: ClusterSpec = field(default_factory=ClusterSpec)
    workload: WorkloadSection = field(default_factory=WorkloadSection)
    sched: SchedSection = field(default_factory=SchedSection)
    layout: LayoutSection = field(default_factory=LayoutSection)
    shuffle: ShuffleSection = field(default_factory=ShuffleSection)
    ft: FtSection = field(default_factory=FtSection)
    proxy: ProxySection = field(default_factory=ProxySection)
    task: TaskSection = field(default_factory=TaskSection)
    debug: DebugSection = field(default_factory=DebugSection)
    faults: FaultPlan = field(default_factory=FaultPlan)

    def with_(self, **updates: Any) -> "SimConfig":
        """Copy with dotted-key overrides, e.g. ``with_(**{"ft.enabled": False})``."""
        cfg = self
        for key, value in updates.items():
            cfg = _set(cfg, key, value)
        return cfg


# public key -> field, for names that are Python keywords
_ALIASES = {"sched.lambda": "sched.lam"}
_PUBLIC = {v: k for k, v in _ALIASES.items()}

SECTIONS = ("cluster", "workload", "sched", "layout", "shuffle", "ft", "proxy", "task", "debug")
_ENUMS = {
    "workload.shape": [s.value for s in Shape],
    "sched.mode": ["Adaptive"] + [m.value for m in SchedMode],
    "layout.backup_mode": ["Adaptive", "NoBackup", "AllBackup"],
    "shuffle.fixed_mode": [m.value for m in ShuffleMode],
}


def _coerce(key: str, raw: Any, default: Any) -> Any:
    try:
        if isinstance(default, bool):
            if isinstance(raw, bool):
                return raw
            low = str(raw).strip().lower()
            if low in ("true", "on", "yes", "1"):
                return True
            if low in ("false", "off", "no", "0"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if isinstance(default, int):
            val = float(raw)
            if not val.is_integer():
                raise ValueError(f"not an integer: {raw!r}")
            return int(val)
        if isinstance(default, float):
            return float(raw)
        return str(raw).strip()
    except (TypeError, ValueError) as exc:
        raise ConfigError(key, str(exc)) from None


def _set(cfg: SimConfig, key: str, raw: Any) -> SimConfig:
    if key == "seed":
        return replace(cfg, seed=_coerce(key, raw, 0))
    if key in _PUBLIC:
        raise ConfigError(key, f"unknown key (did you mean {_PUBLIC[key]}?)")
    section, _, name = _ALIASES.get(key, key).partition(".")
    if section not in SECTIONS or not name or "." in name:
        raise ConfigError(key, "unknown key")
    sec = getattr(cfg, section)
    names = {f.name for f in fields(sec)}
    if name not in names:
        raise ConfigError(key, "unknown key")
    value = _coerce(key, raw, getattr(sec, name))
    if key in _ENUMS and value not in _ENUMS[key]:
        raise ConfigError(key, f"expected one of {_ENUMS[key]}, got {value!r}")
    try:
        return replace(cfg, **{section: replace(sec, **{name: value})})
    except ValueError as exc:
        raise ConfigError(key, str(exc)) from None


def _parse_faults(items: dict[str, dict[str, str]]) -> FaultPlan:
    specs = []
    for idx in sorted(items, key=int):
        d = items[idx]
        prefix = f"fault.{idx}"
        unknown = set(d) - {"trigger", "target", "duration_s", "job", "delay_s"}
        if unknown:
            raise ConfigError(f"{prefix}.{sorted(unknown)[0]}", "unknown key")
        for req in ("trigger", "target"):
            if req not in d:
                raise ConfigError(f"{prefix}.{req}", "required")
        try:
            trig = parse_trigger(d["trigger"], int(d.get("job", 0)), float(d.get("delay_s", 0.0)))
        except ValueError as exc:
            raise ConfigError(f"{prefix}.trigger", str(exc)) from None
        try:
            target = parse_target(d["target"])
        except ValueError as exc:
            raise ConfigError(f"{prefix}.target", str(exc)) from None
        try:
            specs.append(FaultSpec(trig, target, float(d.get("duration_s", 30.0))))
        except ValueError as exc:
            raise ConfigError(f"{prefix}.duration_s", str(exc)) from None
    return FaultPlan(tuple(specs))


def parse_config(text: str) -> SimConfig:
    cfg = SimConfig()
    version = None
    faults: dict[str, dict[str, str]] = {}
    seen: set[str] = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", "expected 'key = value'")
        key, _, value = (s.strip() for s in line.partition("="))
        if key in seen:
            raise ConfigError(key, "duplicate key")
        seen.add(key)
        if key == "schema_version":
            version = value
            continue
        if key.startswith("fault."):
            parts = key.split(".")
            if len(parts) != 3 or not parts[1].isdigit():
                raise ConfigError(key, "fault keys look like fault.<n>.<field>")
            faults.setdefault(parts[1], {})[parts[2]] = value
            continue
        cfg = _set(cfg, key, value)
    if version is None:
        raise ConfigError("schema_version", "required")
    if version != str(SCHEMA_VERSION):
        raise ConfigError("schema_version", f"unsupported version {version!r}")
    if cfg.shuffle.yellow >= cfg.shuffle.red:
        raise ConfigError("shuffle.yellow", "must be below shuffle.red")
    return replace(cfg, faults=_parse_faults(faults))


def load_config(path: str | Path) -> SimConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def _fmt(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(cfg: SimConfig) -> str:
    """Canonical text form; parse_config(dump_config(c)) == c."""
    lines = [f"schema_version = {SCHEMA_VERSION}", f"seed = {cfg.seed}"]
    for section in SECTIONS:
        sec = getattr(cfg, section)
        for f in fields(sec):
            key = f"{section}.{f.name}"
            lines.append(f"{_PUBLIC.get(key, key)} = {_fmt(getattr(sec, f.name))}")
    for i, spec in enumerate(cfg.faults.faults):
        trig = spec.trigger
        if trig.kind.value == "Periodic":
            ttext = f"Periodic({trig.min_interval!r}, {trig.max_interval!r})"
        else:
            ttext = trig.kind.value
        target = f"Node({spec.target.node_id})" if spec.target.kind.value == "Node" else spec.target.kind.value
        lines += [
            f"fault.{i}.trigger = {ttext}",
            f"fault.{i}.target = {target}",
            f"fault.{i}.duration_s = {spec.duration_s!r}",
            f"fault.{i}.job = {trig.job_index}",
            f"fault.{i}.delay_s = {trig.delay_s!r}",
        ]
    return "\n".join(lines) + "\n"


def config_hash(cfg: SimConfig) -> str:
    return hashlib.sha256(dump_config(cfg).encode("utf-8")).hexdigest()[:16]


def workload_identity(cfg: SimConfig) -> str:
    """Hash of the workload section only; runs are comparable when it matches."""
    text = "\n".join(f"{f.name}={_fmt(getattr(cfg.workload, f.name))}" for f in fields(cfg.workload))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


__all__ = [
    "ConfigError", "SimConfig", "SCHEMA_VERSION", "parse_config", "load_config", "dump_config",
    "config_hash", "workload_identity",
]
