"""Flow-level network: each resource splits its capacity equally among the
flows crossing it, and a flow runs at the minimum share over its resources."""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Callable

from .events import EventLoop

EPS_BYTES = 1e-6


class TransferFailed(RuntimeError):
    pass


@dataclass(eq=False)
class Flow:
    fid: int
    resources: tuple[str, ...]
    size: float
    remaining: float
    on_done: Callable[[], None]
    on_fail: Callable[[], None]
    nodes: tuple[str, ...]
    tag: str = ""
    rate: float = 0.0
    last: float = 0.0
    token: int = 0
    started: float = 0.0
    attached: bool = False
    # touches only one node's disk, so a network outage leaves it running
    local: bool = False


@dataclass
class ResourceStats:
    capacity: float
    peak_flows: int = 0
    peak_by_tag: dict[str, int] = field(default_factory=dict)


class FlowNetwork:
    """Completion times live in a private heap; the event loop only ever
    holds one wake-up, for the earliest of them."""

    def __init__(self, loop: EventLoop, latency_s: float = 0.001):
        self.loop = loop
        self.latency_s = latency_s
        self.capacity: dict[str, float] = {}
        self.flows_on: dict[str, set[Flow]] = {}
        self.share: dict[str, float] = {}
        self.by_node: dict[str, set[Flow]] = {}
        self.stats: dict[str, ResourceStats] = {}
        self._tag_count: dict[tuple[str, str], int] = {}
        self._next_id = 0
        self._due: list[tuple[float, int, int, Flow]] = []
        self._armed = math.inf
        self._wake_token = 0
        self._dirty: set[str] = set()
        self.completed = 0
        self.failed = 0

    def add_resource(self, name: str, capacity: float) -> None:
        if capacity <= 0:
            raise ValueError(f"resource {name} needs positive capacity")
        self.capacity[name] = capacity
        self.flows_on[name] = set()
        self.share[name] = capacity
        self.stats[name] = ResourceStats(capacity)

    def start(
        self,
        resources: tuple[str, ...],
        nbytes: float,
        on_done: Callable[[], None],
        on_fail: Callable[[], None],
        nodes: tuple[str, ...] = (),
        tag: str = "",
        local: bool = False,
    ) -> Flow:
        """Start a transfer; ``on_done`` fires at latency + bytes/rate."""
        self._next_id += 1
        flow = Flow(self._next_id, tuple(resources), float(nbytes), float(nbytes), on_done, on_fail,
                    tuple(nodes), tag, last=self.loop.now, started=self.loop.now, local=local)
        for n in flow.nodes:
            self.by_node.setdefault(n, set()).add(flow)
        if not flow.resources or nbytes <= 0:
            flow.token = -1
            self.loop.after(self.latency_s, self._finish, flow, -1)
            return flow
        flow.attached = True
        for r in flow.resources:
            flows = self.flows_on[r]
            flows.add(flow)
            self.share[r] = self.capacity[r] / len(flows)
            st = self.stats[r]
            if len(flows) > st.peak_flows:
                st.peak_flows = len(flows)
            if tag:
                key = (r, tag)
                c = self._tag_count.get(key, 0) + 1
                self._tag_count[key] = c
                if c > st.peak_by_tag.get(tag, 0):
                    st.peak_by_tag[tag] = c
        self._rebalance(flow.resources)
        return flow

    def _rebalance(self, resources: tuple[str, ...]) -> None:
        """Mark ``resources`` for a rate update later in the same instant.

        Many flows start or end at one timestamp (polls share a clock), so
        each resource is settled once per instant instead of once per flow.
        """
        if not self._dirty:
            self.loop.at(self.loop.now, self._settle)
        self._dirty.update(resources)

    def _settle(self) -> None:
        """Recompute rates of the flows on dirty resources.

        A flow that slowed down keeps its heap entry, which now fires early
        and is pushed back; only a flow that sped up needs a new entry.
        Entries are keyed by (time, fid), so visiting order does not matter.
        """
        if not self._dirty:
            return
        now = self.loop.now
        flows_on = self.flows_on
        touched = set().union(*(flows_on[r] for r in self._dirty))
        self._dirty.clear()
        share = self.share
        due = self._due
        for f in touched:
            rate = min([share[r] for r in f.resources])
            old = f.rate
            if old == rate:
                continue
            f.remaining -= old * (now - f.last)
            f.last = now
            f.rate = rate
            if rate > old:
                f.token += 1
                heapq.heappush(due, (now + max(0.0, f.remaining) / rate, f.fid, f.token, f))
        self._arm()

    def _arm(self) -> None:
        due = self._due
        while due and due[0][2] != due[0][3].token:
            heapq.heappop(due)
        if due and due[0][0] < self._armed:
            self._armed = due[0][0]
            self._wake_token += 1
            self.loop.at(self._armed, self._wake, self._wake_token)

    def _wake(self, token: int) -> None:
        if token != self._wake_token:
            return
        self._armed = math.inf
        now = self.loop.now
        due = self._due
        while due and due[0][0] <= now:
            _, _, tok, f = heapq.heappop(due)
            if tok != f.token:
                continue
            f.remaining -= f.rate * (now - f.last)
            f.last = now
            if f.remaining > EPS_BYTES:
                heapq.heappush(due, (now + f.remaining / f.rate, f.fid, f.token, f))
                continue
            f.token = -1
            f.remaining = 0.0
            self._detach(f)
            self._rebalance(f.resources)
            self.loop.after(self.latency_s, self._finish, f, -1)
        self._arm()

    def _detach(self, flow: Flow) -> None:
        if flow.attached:
            flow.attached = False
            for r in flow.resources:
                flows = self.flows_on[r]
                flows.discard(flow)
                self.share[r] = self.capacity[r] / len(flows) if flows else self.capacity[r]
                if flow.tag:
                    self._tag_count[(r, flow.tag)] -= 1
        for n in flow.nodes:
            self.by_node[n].discard(flow)

    def _finish(self, flow: Flow, token: int) -> None:
        if flow.token != token:
            return  # failed while in flight
        flow.token = -2
        for n in flow.nodes:
            self.by_node.get(n, set()).discard(flow)
        self.completed += 1
        flow.on_done()

    def fail_node(self, node_id: str, keep_local: bool = False) -> int:
        """Fail every transfer touching ``node_id``; returns how many.

        With ``keep_local`` the node is only cut off from the network and
        flows confined to it carry on.
        """
        victims = sorted((f for f in self.by_node.get(node_id, ()) if not (keep_local and f.local)),
                         key=lambda f: f.fid)
        affected: set[str] = set()
        for f in victims:
            if f.attached:
                affected.update(f.resources)
            self._detach(f)
            f.token = -3
        self.failed += len(victims)
        if affected:
            self._rebalance(tuple(sorted(affected)))
        for f in victims:
            f.on_fail()
        return len(victims)

    def check_capacity(self) -> None:
        self._settle()
        for r, flows in self.flows_on.items():
            total = sum(f.rate for f in flows)
            if total > self.capacity[r] * (1 + 1e-9):
                raise AssertionError(f"resource {r} oversubscribed: {total} > {self.capacity[r]}")
