"""Per-writer data layout planning (agent file, default/remote backup, backup-only)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

from .core import BackupKind, LayoutDecision, Route

MB = 1_000_000


@dataclass(frozen=True)
class LayoutThresholds:
    alpha: float = 300.0  # seconds of writer runtime
    beta: float = 500 * MB  # writer output bytes
    gamma: float = 50 * MB  # single chunk bytes

    def __post_init__(self) -> None:
        # alpha = 0 is the AllBackup degenerate case
        if self.alpha < 0 or self.beta <= 0 or self.gamma <= 0:
            raise ValueError("layout thresholds must be positive")

    @classmethod
    def no_backup(cls) -> "LayoutThresholds":
        return cls(math.inf, math.inf, math.inf)

    @classmethod
    def all_backup(cls, gamma: float = math.inf) -> "LayoutThresholds":
        return cls(0.0, math.inf, gamma)

    def scaled(self, byte_scale: float) -> "LayoutThresholds":
        return replace(self, beta=self.beta * byte_scale, gamma=self.gamma * byte_scale)


@dataclass
class WriterProfile:
    writer_id: str
    observed_runtime: float = 0.0
    per_chunk_bytes: dict[int, int] = field(default_factory=dict)
    colocated_with_agent: bool = False

    @property
    def total_partition_bytes(self) -> int:
        return sum(self.per_chunk_bytes.values())


def plan_layout(profile: WriterProfile, thresholds: LayoutThresholds) -> LayoutDecision:
    # alpha == 0 means "always back up", even before the writer has run at all
    slow = profile.observed_runtime > thresholds.alpha or thresholds.alpha == 0
    heavy = profile.total_partition_bytes > thresholds.beta
    if slow or heavy:
        kind = BackupKind.REMOTE if profile.colocated_with_agent else BackupKind.DEFAULT
    else:
        kind = BackupKind.NONE
    routes = {
        p: (Route.BACKUP_ONLY if nbytes > thresholds.gamma else Route.VIA_AGENT)
        for p, nbytes in sorted(profile.per_chunk_bytes.items())
        if nbytes > 0
    }
    return LayoutDecision(profile.writer_id, routes, kind)


def replan_on_progress(
    profile: WriterProfile, prior: LayoutDecision, thresholds: LayoutThresholds
) -> LayoutDecision:
    """Re-evaluate with fresh observations; enabled backups and backup-only
    routes never revert within one writer attempt."""
    fresh = plan_layout(profile, thresholds)
    kind = prior.backup_kind if prior.backup_enabled else fresh.backup_kind
    routes = dict(fresh.routes)
    for p, route in prior.routes.items():
        if route is Route.BACKUP_ONLY:
            routes[p] = Route.BACKUP_ONLY
        else:
            routes.setdefault(p, route)
    return LayoutDecision(profile.writer_id, dict(sorted(routes.items())), kind)


@dataclass(frozen=True)
class LayoutDelta:
    backup_enabled_now: bool
    new_backup_only: tuple[int, ...]


def layout_delta(prior: LayoutDecision, current: LayoutDecision) -> LayoutDelta:
    """What a replan asks the writer to migrate for already-produced bytes."""
    switched = tuple(
        p
        for p, route in current.routes.items()
        if route is Route.BACKUP_ONLY and prior.route(p) is not Route.BACKUP_ONLY
    )
    return LayoutDelta(current.backup_enabled and not prior.backup_enabled, switched)
