"""Cluster description and per-node runtime state."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, fields

KB = 1_000
MB = 1_000_000


class NodeRole(str, enum.Enum):
    COMPUTE = "compute"
    STORAGE = "storage"


@dataclass(frozen=True)
class ClusterSpec:
    """Desk-scale defaults: byte sizes and bandwidths are 1/1000 of a
    20 compute + 18 storage node production cell, so transfer times keep
    their real-world magnitude."""

    compute_nodes: int = 20
    compute_slots: int = 16
    compute_memory: int = 412 * MB
    compute_disk_bw: float = 0.3 * MB
    storage_nodes: int = 18
    storage_disk_bw: float = 1.5 * MB
    storage_memory: int = 64 * MB
    net_bw: float = 1.25 * MB
    latency_s: float = 0.001

    def __post_init__(self) -> None:
        for f in fields(self):
            if getattr(self, f.name) <= 0:
                raise ValueError(f"cluster.{f.name} must be positive")

    def compute_ids(self) -> list[str]:
        return [f"c{i:02d}" for i in range(self.compute_nodes)]

    def storage_ids(self) -> list[str]:
        return [f"s{i:02d}" for i in range(self.storage_nodes)]


@dataclass
class Node:
    node_id: str
    role: NodeRole
    slots: int
    memory: int
    disk_bw: float
    alive: bool = True
    free_slots: int = 0
    # bumped whenever the node restarts; backups written earlier are gone
    disk_epoch: int = 0
    tasks: set = field(default_factory=set)

    def __post_init__(self) -> None:
        self.free_slots = self.slots

    @property
    def disk(self) -> str:
        return f"disk:{self.node_id}"

    @property
    def net_in(self) -> str:
        return f"in:{self.node_id}"

    @property
    def net_out(self) -> str:
        return f"out:{self.node_id}"


def build_nodes(spec: ClusterSpec) -> dict[str, Node]:
    nodes = {}
    for nid in spec.compute_ids():
        nodes[nid] = Node(nid, NodeRole.COMPUTE, spec.compute_slots, spec.compute_memory, spec.compute_disk_bw)
    for nid in spec.storage_ids():
        nodes[nid] = Node(nid, NodeRole.STORAGE, 0, spec.storage_memory, spec.storage_disk_bw)
    return nodes
