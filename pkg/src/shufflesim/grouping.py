"""Shuffle service manager: agent health, writer grouping, logical replicas,
failover order and job authorization."""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

DEFAULT_GROUP_SIZE = 100
DEFAULT_REPLICAS = 2
DEFAULT_HEARTBEAT_PERIOD_S = 1.0
# provisional load bump per assignment, overwritten by the next heartbeat
ASSIGNMENT_LOAD = 0.01
STANDBY_WEIGHT = 0.5


class NodeKind(str, enum.Enum):
    COMPUTE = "Compute"
    STORAGE = "Storage"


class RegistrationError(RuntimeError):
    pass


@dataclass
class AgentRecord:
    agent_id: str
    node_kind: NodeKind
    memory_capacity: int
    reported_load: float = 0.0
    last_heartbeat: float = 0.0
    alive: bool = True
    memory_used: int = 0


@dataclass
class AgentGroupPlan:
    job_id: str
    group_size: int
    writer_groups: list[list[str]]
    replicas: list[list[str]]  # index 0 is the initially active agent

    _writer_group: dict[str, int] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        self._writer_group = {w: g for g, ws in enumerate(self.writer_groups) for w in ws}

    def group_of(self, writer_id: str) -> int:
        return self._writer_group[writer_id]

    def agents_for(self, writer_id: str) -> list[str]:
        return self.replicas[self.group_of(writer_id)]

    def reader_group(self) -> list[str]:
        """Every agent that may hold data for a reader of this job."""
        seen: dict[str, None] = {}
        for reps in self.replicas:
            for a in reps:
                seen.setdefault(a, None)
        return list(seen)

    def to_json(self, authorized: Iterable[str] = ()) -> str:
        return json.dumps(
            {
                "job_id": self.job_id,
                "group_size": self.group_size,
                "writer_groups": self.writer_groups,
                "replicas": self.replicas,
                "authorized_agents": sorted(authorized),
            },
            indent=2,
            sort_keys=True,
        )


class ShuffleServiceManager:
    def __init__(
        self,
        heartbeat_period_s: float = DEFAULT_HEARTBEAT_PERIOD_S,
        liveness_timeout_s: float | None = None,
    ):
        self.heartbeat_period_s = heartbeat_period_s
        # a single dropped heartbeat must not kill an agent
        self.liveness_timeout_s = (
            liveness_timeout_s if liveness_timeout_s is not None else 3 * heartbeat_period_s
        )
        self.agents: dict[str, AgentRecord] = {}
        self.plans: dict[str, AgentGroupPlan] = {}
        self._authorized: dict[str, set[str]] = {}
        self._bumps: dict[str, list[tuple[str, float]]] = {}

    # -- health ---------------------------------------------------------------

    def register_agent(self, agent_id: str, node_kind: NodeKind, memory_capacity: int, now: float = 0.0) -> AgentRecord:
        rec = AgentRecord(agent_id, node_kind, memory_capacity, last_heartbeat=now)
        self.agents[agent_id] = rec
        return rec

    def heartbeat(self, agent_id: str, now: float, load: float, memory: int = 0) -> AgentRecord:
        try:
            rec = self.agents[agent_id]
        except KeyError:
            raise KeyError(f"unknown agent {agent_id}") from None
        rec.reported_load = load
        rec.memory_used = memory
        rec.last_heartbeat = now
        rec.alive = True
        return rec

    def sweep(self, now: float) -> list[str]:
        """Mark agents silent for longer than the timeout as dead."""
        died = []
        for rec in self.agents.values():
            if rec.alive and now - rec.last_heartbeat > self.liveness_timeout_s:
                rec.alive = False
                died.append(rec.agent_id)
        return died

    def mark_dead(self, agent_id: str) -> None:
        self.agents[agent_id].alive = False

    def is_alive(self, agent_id: str) -> bool:
        rec = self.agents.get(agent_id)
        return rec is not None and rec.alive

    # -- registration -----------------------------------------------------------

    def register_job(
        self,
        job_id: str,
        writer_ids: Sequence[str],
        group_size: int = DEFAULT_GROUP_SIZE,
        replicas: int = DEFAULT_REPLICAS,
        node_kind: NodeKind | None = None,
    ) -> AgentGroupPlan:
        if group_size < 1 or replicas < 1:
            raise RegistrationError("group size and replica count must be >= 1")
        pool = sorted(
            (a for a in self.agents.values() if a.alive and (node_kind is None or a.node_kind == node_kind)),
            key=lambda a: (a.reported_load, a.agent_id),
        )
        if len(pool) < replicas:
            raise RegistrationError(
                f"job {job_id}: need {replicas} alive agents, have {len(pool)}"
            )
        n_groups = max(1, math.ceil(len(writer_ids) / group_size))
        groups = [list(writer_ids[g * group_size:(g + 1) * group_size]) for g in range(n_groups)]
        # primaries take distinct agents first; standbys are the agents after them
        assignment = [[pool[(g + j) % len(pool)].agent_id for j in range(replicas)] for g in range(n_groups)]
        bumps = []
        for reps in assignment:
            # standbys carry no ingest until a failover, so they weigh less
            bumps.append((reps[0], ASSIGNMENT_LOAD))
            bumps.extend((a, ASSIGNMENT_LOAD * STANDBY_WEIGHT) for a in reps[1:])
        for a, amount in bumps:
            self.agents[a].reported_load += amount
        self._bumps[job_id] = bumps
        plan = AgentGroupPlan(job_id, group_size, groups, assignment)
        self.plans[job_id] = plan
        self._authorized[job_id] = {a for reps in assignment for a in reps}
        return plan

    def deregister_job(self, job_id: str) -> set[str]:
        """Returns the agents that should drop the job's retained data."""
        self.plans.pop(job_id, None)
        for a, amount in self._bumps.pop(job_id, ()):
            rec = self.agents[a]
            rec.reported_load = max(0.0, rec.reported_load - amount)
        return self._authorized.pop(job_id, set())

    def authorize(self, job_id: str, agent_id: str) -> bool:
        return agent_id in self._authorized.get(job_id, ())

    def dump_plan(self, job_id: str) -> str:
        return self.plans[job_id].to_json(self._authorized.get(job_id, ()))


def failover_target(replicas: Sequence[str], failed: str, is_alive) -> str | None:
    """First alive agent after ``failed`` in the replica order (wrapping)."""
    if failed in replicas:
        start = replicas.index(failed)
        order = list(replicas[start + 1:]) + list(replicas[:start])
    else:
        order = list(replicas)
    for agent in order:
        if is_alive(agent):
            return agent
    return None
