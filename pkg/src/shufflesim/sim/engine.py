"""End-to-end execution of two-stage (writer -> reader) jobs.

Writers produce their output in a fixed number of batches.  Each batch is
routed per the writer's current layout decision: through the node proxy to
the writer group's active agent, to dual backup-only replicas on storage
nodes, and optionally to a fallback backup.  Readers are launched by the
scheduling policy, poll agents and the backup catalog for committed blocks,
fetch through the flow network and account processing time.
"""

from __future__ import annotations

import hashlib
import heapq
import math
import random
from dataclasses import dataclass, field, replace
from typing import Any

from ..agent import IngestStatus, NothingToCommit, ShuffleAgent, Where
from ..config import SimConfig
from ..core import (
    BackupKind,
    BlockKey,
    DataBlock,
    IndexEntry,
    JobSpec,
    LayoutDecision,
    Route,
    ShuffleMode,
    Source,
    checksum_of,
    payload_token,
)
from ..grouping import NodeKind, ShuffleServiceManager, failover_target
from ..layout import LayoutThresholds, WriterProfile, layout_delta, plan_layout, replan_on_progress
from ..mode_select import TaskRecord, ThresholdDaemon, build_profile_curve, choose_mode, estimate_runtime
from ..proxy import ShuffleProxy
from ..reader import BackupCatalog, Candidate, Located, Location, RecoverySession, RecoveryState, merge_located
from ..sched import ManifestBook, ReadCursor, StageSchedulingPolicy, decide_policy, pre_start
from .cluster import Node, NodeRole, build_nodes
from .events import EventLoop
from .faults import FaultSpec, TriggerKind, periodic_times, pick_target
from .metrics import Metrics, MetricsAccumulator
from .network import FlowNetwork
from .workload import generate_workload, split_even

STALL_LIMIT_S = 50_000.0
FULL_CHECK_EVERY = 5_000


class InvariantViolation(AssertionError):
    def __init__(self, step: int, time: float, message: str):
        super().__init__(f"step {step} t={time:.6f}: {message}")
        self.step = step
        self.time = time


class SimulationStuck(RuntimeError):
    pass


def rng_for(seed: int, *labels: Any) -> random.Random:
    h = hashlib.blake2b(repr((seed,) + labels).encode("utf-8"), digest_size=8)
    return random.Random(int.from_bytes(h.digest(), "big"))


# -- task state -----------------------------------------------------------------


@dataclass(eq=False)
class Task:
    job: "JobRun"
    idx: int
    task_id: str
    attempt: int = -1
    state: str = "pending"  # pending | queued | running | done
    token: int = 0
    node: str | None = None
    slot_start: float = 0.0
    run_start: float = 0.0


@dataclass(eq=False)
class WriterTask(Task):
    kind: str = "writer"
    outstanding: int = 0
    compute_done: bool = False
    produced: int = 0
    done_retry: int = -1
    layout: LayoutDecision | None = None
    via_agent: list[DataBlock] = field(default_factory=list)
    delivered: list[str] = field(default_factory=list)
    # one open stream per agent; batches produced meanwhile wait in ``queued``
    streaming: set[str] = field(default_factory=set)
    queued: dict[str, list[DataBlock]] = field(default_factory=dict)
    backup_offset: int = 0
    rerun: bool = False
    # bytes counted towards upstream progress (never decreases)
    credited: int = 0

    @property
    def access_point(self) -> str:
        return f"{self.task_id}.{self.attempt}"


@dataclass(eq=False)
class ReaderTask(Task):
    kind: str = "reader"
    session: RecoverySession | None = None
    cursor: ReadCursor = field(default_factory=ReadCursor)
    catalog_pos: int = 0
    known: dict[tuple[str, int], Candidate] = field(default_factory=dict)
    todo: dict[tuple[str, int], None] = field(default_factory=dict)
    remaining: set = field(default_factory=set)
    inflight: set = field(default_factory=set)
    inflight_bytes: int = 0
    busy_until: float = 0.0
    bytes_read: int = 0
    bytes_mem: int = 0
    noted: dict[str, int] = field(default_factory=dict)
    finish_at: float = -1.0


@dataclass(eq=False)
class JobRun:
    spec: JobSpec
    order: int
    mode: ShuffleMode = ShuffleMode.ON_DISK
    policy: StageSchedulingPolicy | None = None
    thresholds: LayoutThresholds | None = None
    replicas: list[list[str]] = field(default_factory=list)
    active: list[str] = field(default_factory=list)
    group_of: dict[str, int] = field(default_factory=dict)
    reader_agents: list[str] = field(default_factory=list)
    manifest: ManifestBook = field(default_factory=ManifestBook)
    writers: list[WriterTask] = field(default_factory=list)
    readers: list[ReaderTask] = field(default_factory=list)
    launched: set = field(default_factory=set)
    pieces: list[list[list[int]]] = field(default_factory=list)
    expected: list[list[tuple[str, int]]] = field(default_factory=list)
    digests: dict[tuple[str, int, int], int] = field(default_factory=dict)
    submitted_at: float = -1.0
    done_at: float = -1.0
    writers_done: int = 0
    readers_done: int = 0
    progress_num: int = 0
    progress_den: int = 0
    write_phase: bool = False
    read_phase: bool = False
    ingest_done: dict[str, float] = field(default_factory=dict)
    results: dict[int, list[tuple[str, int, int]]] = field(default_factory=dict)

    @property
    def job_id(self) -> str:
        return self.spec.job_id

    @property
    def wstage(self):
        return self.spec.stages[0]

    @property
    def rstage(self):
        return self.spec.stages[1]

    @property
    def progress(self) -> float:
        return self.progress_num / self.progress_den if self.progress_den else 1.0

    @property
    def finished(self) -> bool:
        return self.done_at >= 0


@dataclass
class RunResult:
    metrics: Metrics
    trace: list[dict[str, Any]]
    # (job, partition) -> sorted (writer, backup_seq, digest) of the completed reader
    consumed: dict[tuple[str, int], list[tuple[str, int, int]]]
    modes: dict[str, str]
    policies: dict[str, str]
    # (job, agent) -> peak concurrent ingest flows of that job into the agent
    peak_ingest_flows: dict[tuple[str, str], int]
    # (job, agent) -> time the last ingest transfer into the agent finished
    ingest_done: dict[tuple[str, str], float]
    transfers: int
    steps: int
    faults: list[tuple[float, str]]


# -- simulation -------------------------------------------------------------------


class Simulation:
    def __init__(self, cfg: SimConfig, jobs: list[JobSpec] | None = None):
        self.cfg = cfg
        specs = jobs if jobs is not None else generate_workload(cfg.workload.params(), cfg.workload.scale)
        for spec in specs:
            if len(spec.stages) != 2 or len(spec.edges) != 1:
                raise ValueError(f"job {spec.job_id}: only two-stage writer -> reader jobs are simulated")
        self.loop = EventLoop()
        self.net = FlowNetwork(self.loop, cfg.cluster.latency_s)
        self.nodes: dict[str, Node] = build_nodes(cfg.cluster)
        self.compute_ids = cfg.cluster.compute_ids()
        self.storage_ids = cfg.cluster.storage_ids()
        self.ssm = ShuffleServiceManager()
        self.agents: dict[str, ShuffleAgent] = {}
        self.proxies: dict[str, ShuffleProxy] = {}
        for nid, node in self.nodes.items():
            self.net.add_resource(node.net_in, cfg.cluster.net_bw)
            self.net.add_resource(node.net_out, cfg.cluster.net_bw)
            self.net.add_resource(node.disk, node.disk_bw)
            self.agents[nid] = ShuffleAgent(nid, node.memory, cfg.shuffle.yellow, cfg.shuffle.red,
                                            cfg.shuffle.memory_management)
            kind = NodeKind.COMPUTE if node.role is NodeRole.COMPUTE else NodeKind.STORAGE
            self.ssm.register_agent(nid, kind, node.memory)
            if node.role is NodeRole.COMPUTE:
                self.proxies[nid] = ShuffleProxy(nid, cfg.proxy.flush_bytes, cfg.proxy.flush_interval_s,
                                                 cfg.proxy.enabled)
        self.catalog = BackupCatalog()
        self.acc = MetricsAccumulator()
        self.jobs = [JobRun(spec, i) for i, spec in enumerate(specs)]
        self.pending_jobs = list(self.jobs)
        self.active_jobs: list[JobRun] = []
        self.queue: list[tuple[tuple, int, Task, int]] = []
        self._qseq = 0
        self.blocked: list[Task] = []
        self.parked_sends: list[tuple[WriterTask, int, int, list[DataBlock]]] = []
        # backup copies held by a writer whose own node is disconnected
        self.parked_copies: list[tuple[WriterTask, int, list[DataBlock], str, Source]] = []
        self._arrival = 0
        self._dirty: dict[str, ShuffleAgent] = {}
        self.last_progress = 0.0
        self.fault_log: list[tuple[float, str]] = []
        self._phase_faults: list[tuple[int, FaultSpec]] = []
        self.history: list[TaskRecord] = []
        self.sched_cfg = cfg.sched.to_config(cfg.task.dispatch_latency_s)
        self.daemon = self._build_daemon(specs)
        self._last_tick = -math.inf
        self.jobs_finished = 0

    # -- setup helpers ----------------------------------------------------------

    def _build_daemon(self, specs: list[JobSpec]) -> ThresholdDaemon | None:
        if not self.cfg.shuffle.mode_selection:
            return None
        t = self.cfg.task
        records = []
        for spec in specs:
            ws = spec.stages[0]
            for i in range(ws.parallelism):
                out = ws.task_output(i)
                records.append(TaskRecord(t.startup_s + ws.task_input_bytes[i] / t.writer_rate, out, out,
                                          ws.task_input_bytes[i], ws.operator_kind))
        curve = build_profile_curve(records, self.cfg.shuffle.curve_grid, len(self.compute_ids))
        return ThresholdDaemon(curve)

    def _z_available(self) -> float:
        total = 0.0
        for nid in self.compute_ids:
            a = self.agents[nid]
            if a.alive:
                total += max(0.0, a.yellow * a.memory_capacity - a.worker_resident - a.shuffle_resident)
        return total / len(self.compute_ids)

    # -- entry point --------------------------------------------------------------

    def run(self) -> RunResult:
        cfg = self.cfg
        conc = cfg.workload.concurrency
        first = self.pending_jobs if conc <= 0 else self.pending_jobs[:conc]
        for job in list(first):
            self.loop.at(job.spec.submit_time, self._submit, job)
        self.pending_jobs = [] if conc <= 0 else self.pending_jobs[conc:]
        for i, spec in enumerate(cfg.faults.faults):
            if spec.trigger.kind is TriggerKind.PERIODIC:
                rng = rng_for(cfg.seed, "periodic", i)
                gap = rng.uniform(spec.trigger.min_interval, spec.trigger.max_interval)
                self.loop.at(gap, self._periodic_fault, i, spec, rng)
            else:
                self._phase_faults.append((i, spec))
        after = self._after_step if cfg.debug.invariants else None
        self.loop.run(after_step=after, stop=self._all_done)
        if not self._all_done():
            raise SimulationStuck(f"event queue drained at t={self.loop.now} with unfinished jobs")
        if cfg.debug.invariants:
            self._full_check()
        metrics = self.acc.finish()
        metrics.check()
        peak = {}
        done = {}
        for job in self.jobs:
            for aid in job.reader_agents:
                stats = self.net.stats[self.nodes[aid].net_in]
                peak[(job.job_id, aid)] = stats.peak_by_tag.get(job.job_id, 0)
            for aid, t in job.ingest_done.items():
                done[(job.job_id, aid)] = t
        consumed = {(j.job_id, p): v for j in self.jobs for p, v in sorted(j.results.items())}
        return RunResult(
            metrics=metrics,
            trace=self.loop.trace,
            consumed=consumed,
            modes={j.job_id: j.mode.value for j in self.jobs},
            policies={j.job_id: j.policy.mode.value if j.policy else "" for j in self.jobs},
            peak_ingest_flows=peak,
            ingest_done=done,
            transfers=self.net.completed + self.net.failed,
            steps=self.loop.steps,
            faults=list(self.fault_log),
        )

    def _all_done(self) -> bool:
        return self.jobs_finished == len(self.jobs)

    # -- invariants -------------------------------------------------------------------

    def _after_step(self) -> None:
        loop = self.loop
        try:
            if self._dirty:
                for agent in self._dirty.values():
                    if agent.memory_management and agent.alive:
                        agent.check_watermark()
                self._dirty.clear()
            if loop.steps % FULL_CHECK_EVERY == 0:
                self._full_check()
        except AssertionError as exc:
            if isinstance(exc, InvariantViolation):
                raise
            raise InvariantViolation(loop.steps, loop.now, str(exc)) from None

    def _full_check(self) -> None:
        try:
            self.net.check_capacity()
            for aid in sorted(self.agents):
                self.agents[aid].check_invariants()
        except AssertionError as exc:
            raise InvariantViolation(self.loop.steps, self.loop.now, str(exc)) from None

    def _touch(self, agent: ShuffleAgent) -> None:
        self._dirty[agent.node_id] = agent

    # -- jobs ------------------------------------------------------------------------------

    def _submit(self, job: JobRun) -> None:
        cfg = self.cfg
        now = self.loop.now
        job.submitted_at = now
        self.active_jobs.append(job)
        spec = job.spec
        ws, rs = job.wstage, job.rstage
        self.loop.record("job_submit", job=job.job_id)
        self.acc.submit[job.job_id] = self.loop.trace[-1]["t"]

        # shuffle mode for the writer stage
        if self.daemon is not None:
            if now - self._last_tick >= self.daemon.period_s:
                self.daemon.tick(now, self._z_available())
                self._last_tick = now
            hist = [r for r in self.history if r.operator_kind == ws.operator_kind]
            t_hat = estimate_runtime(ws, max(ws.task_input_bytes), hist, cfg.task.writer_rate).t_hat
            job.mode = choose_mode(t_hat, self.daemon.current)
        else:
            job.mode = cfg.shuffle.fixed
        job.policy = decide_policy(rs, self.sched_cfg)
        job.thresholds = cfg.layout.thresholds()

        # agent groups
        writer_ids = [f"{job.job_id}.w{i}" for i in range(ws.parallelism)]
        kind = NodeKind.COMPUTE if job.mode is ShuffleMode.IN_MEMORY else NodeKind.STORAGE
        replicas = cfg.ft.replicas if cfg.ft.enabled else 1
        plan = self.ssm.register_job(job.job_id, writer_ids, cfg.ft.group_size, replicas, kind)
        job.replicas = [list(r) for r in plan.replicas]
        job.active = [r[0] for r in plan.replicas]
        job.group_of = {w: plan.group_of(w) for w in writer_ids}
        job.reader_agents = plan.reader_group()

        # block layout: pieces[w][p] are per-batch sizes
        batches = cfg.task.batches
        job.pieces = [[split_even(b, batches) for b in row] for row in ws.output_bytes]
        job.expected = [[] for _ in range(rs.parallelism)]
        for w, row in enumerate(job.pieces):
            for p, parts in enumerate(row):
                for seq, size in enumerate(parts):
                    if size > 0:
                        job.expected[p].append((writer_ids[w], seq))
        job.writers = [WriterTask(job, i, wid) for i, wid in enumerate(writer_ids)]
        job.readers = [ReaderTask(job, p, f"{job.job_id}.r{p}") for p in range(rs.parallelism)]
        job.progress_den = sum(ws.task_output(i) for i in range(ws.parallelism))
        for w in job.writers:
            self._new_attempt(w)
        self._maybe_launch_readers(job)
        self._dispatch()

    def _digest(self, job: JobRun, writer_id: str, p: int, seq: int) -> int:
        key = (writer_id, p, seq)
        d = job.digests.get(key)
        if d is None:
            d = checksum_of(writer_id, 0, p, payload_token(self.cfg.seed, job.job_id, writer_id, p, seq))
            job.digests[key] = d
        return d

    def _maybe_launch_readers(self, job: JobRun) -> None:
        if job.finished:
            return
        ids = [r.task_id for r in job.readers]
        launched = pre_start(ids, job.launched, job.progress, job.policy)
        for rid in launched:
            self._new_attempt(job.readers[int(rid.rsplit(".r", 1)[1])])
        if launched:
            self.loop.after(0.0, self._dispatch)

    def _job_maybe_done(self, job: JobRun) -> None:
        if job.readers_done < len(job.readers) or job.finished:
            return
        job.done_at = self.loop.now
        self.jobs_finished += 1
        for w in job.writers:
            if w.state in ("queued", "running"):
                self._end_task(w, "cancelled")
        self.loop.record("job_end", job=job.job_id)
        self.acc.end[job.job_id] = self.loop.trace[-1]["t"]
        for aid in sorted(self.ssm.deregister_job(job.job_id)):
            self.agents[aid].release_job(job.job_id)
            self._touch(self.agents[aid])
        self.catalog.drop_job(job.job_id)
        self.active_jobs.remove(job)
        if self.pending_jobs:
            nxt = self.pending_jobs.pop(0)
            self.loop.at(max(self.loop.now, nxt.spec.submit_time), self._submit, nxt)

    # -- slots --------------------------------------------------------------------------

    def _new_attempt(self, task: Task, rerun: bool = False) -> None:
        task.attempt += 1
        task.token += 1
        task.state = "queued"
        if isinstance(task, WriterTask):
            task.outstanding = 0
            task.compute_done = False
            task.layout = None
            task.via_agent = []
            task.delivered = []
            task.streaming = set()
            task.queued = {}
            task.backup_offset = 0
            task.produced = 0
            task.rerun = rerun
            cls = 0 if task.attempt > 0 else 1
        else:
            task.session = RecoverySession(task.idx, self.cfg.ft.retry_budget)
            task.cursor = ReadCursor()
            task.catalog_pos = 0
            task.known = {}
            task.todo = {}
            task.remaining = set(task.job.expected[task.idx])
            task.inflight = set()
            task.inflight_bytes = 0
            task.busy_until = 0.0
            task.bytes_read = 0
            task.bytes_mem = 0
            task.noted = {}
            task.finish_at = -1.0
            cls = 2
        self._qseq += 1
        key = (cls, -task.job.spec.priority, task.job.order, task.idx)
        heapq.heappush(self.queue, (key, self._qseq, task, task.token))

    def _writer_target_ok(self, w: WriterTask) -> bool:
        job = w.job
        reps = job.replicas[job.group_of[w.task_id]]
        return any(self.agents[a].alive for a in reps)

    def _pick_node(self) -> Node | None:
        best = None
        for nid in self.compute_ids:
            n = self.nodes[nid]
            if n.alive and n.free_slots > 0 and (best is None or n.free_slots > best.free_slots):
                best = n
        return best

    def _dispatch(self) -> None:
        while self.queue:
            node = self._pick_node()
            if node is None:
                return
            _, _, task, token = heapq.heappop(self.queue)
            if token != task.token or task.state != "queued" or task.job.finished:
                continue
            if isinstance(task, WriterTask) and not self._writer_target_ok(task):
                self.blocked.append(task)
                continue
            node.free_slots -= 1
            node.tasks.add(task.task_id)
            task.node = node.node_id
            task.slot_start = self.loop.now
            task.state = "running"
            self._memory_changed(node)
            self.loop.after(self.cfg.task.dispatch_latency_s, self._start_task, task, task.token)

    def _memory_changed(self, node: Node) -> None:
        if not node.alive or node.role is not NodeRole.COMPUTE:
            return
        agent = self.agents[node.node_id]
        agent.memory_tick(len(node.tasks) * self.cfg.task.task_memory)
        self._touch(agent)

    def _end_task(self, task: Task, status: str) -> None:
        """Release the slot of a running task and record its occupancy."""
        was_running = task.state == "running"
        task.token += 1
        task.state = "done" if status == "ok" else "pending"
        if not was_running:
            return
        node = self.nodes[task.node]
        if task.task_id in node.tasks:
            node.tasks.discard(task.task_id)
            node.free_slots += 1
            self._memory_changed(node)
        fields: dict[str, Any] = dict(job=task.job.job_id, task=task.task_id, kind=task.kind,
                                      attempt=task.attempt, node=task.node, slots=1,
                                      start=round(task.slot_start, 9), status=status)
        if isinstance(task, ReaderTask):
            fields["bytes_read"] = task.bytes_read
            fields["bytes_mem"] = task.bytes_mem
        self.loop.record("task_end", **fields)
        rec = self.loop.trace[-1]
        self.acc.task_end(task.kind, task.attempt, 1, rec["start"], rec["t"],
                          fields.get("bytes_read", 0), fields.get("bytes_mem", 0))
        self.last_progress = self.loop.now
        self.loop.after(0.0, self._dispatch)

    def _start_task(self, task: Task, token: int) -> None:
        if token != task.token:
            return
        task.run_start = self.loop.now
        self.last_progress = self.loop.now
        self.loop.record("task_start", job=task.job.job_id, task=task.task_id, kind=task.kind,
                         attempt=task.attempt, node=task.node)
        if isinstance(task, WriterTask):
            self._start_writer(task)
        else:
            self.loop.at(self._poll_tick(self.loop.now + self.cfg.task.startup_s),
                         self._reader_poll, task, task.token)
            self._check_phase_faults(task.job)

    # -- writers ------------------------------------------------------------------------------

    def _start_writer(self, w: WriterTask) -> None:
        t = self.cfg.task
        job = w.job
        rng = rng_for(self.cfg.seed, "jitter", job.job_id, w.idx, w.attempt)
        factor = 1.0 + t.jitter * rng.uniform(-1.0, 1.0)
        work = job.wstage.task_input_bytes[w.idx] / t.writer_rate * factor
        start = self.loop.now + t.startup_s
        for b in range(t.batches):
            self.loop.at(start + work * (b + 1) / t.batches, self._writer_batch, w, w.token, b)
        if not job.write_phase:
            job.write_phase = True
            self._check_phase_faults(job)

    def _writer_batch(self, w: WriterTask, token: int, b: int) -> None:
        if token != w.token:
            return
        job = w.job
        cfg = self.cfg
        now = self.loop.now
        retry = w.attempt
        g = job.group_of[w.task_id]
        target = job.active[g]
        chunks = {p: sum(parts[: b + 1]) for p, parts in enumerate(job.pieces[w.idx])}
        profile = WriterProfile(w.task_id, now - w.run_start, chunks, colocated_with_agent=(target == w.node))
        prior = w.layout
        decision = plan_layout(profile, job.thresholds) if prior is None else replan_on_progress(profile, prior, job.thresholds)
        w.layout = decision
        delta = layout_delta(prior or LayoutDecision(w.task_id), decision)

        blocks = []
        for p, parts in enumerate(job.pieces[w.idx]):
            size = parts[b]
            if size <= 0:
                continue
            self._arrival += 1
            agent_ip = target if decision.route(p) is Route.VIA_AGENT else "backup"
            key = BlockKey(job.job_id, w.task_id, w.access_point, p, agent_ip)
            digest = self._digest(job, w.task_id, p, b)
            blocks.append(DataBlock(key, w.task_id, retry, b, size, job.spec.priority, digest, self._arrival))
            job.manifest.record(w.task_id, retry, p, digest)

        # migrate bytes produced before the layout changed
        if delta.backup_enabled_now and w.via_agent:
            self._send_backup(w, list(w.via_agent), decision.backup_kind)
        if delta.new_backup_only:
            moved = set(delta.new_backup_only)
            earlier = [blk for blk in w.via_agent if blk.partition_id in moved]
            if earlier:
                self._send_backup_only(w, earlier)

        via = [blk for blk in blocks if decision.route(blk.partition_id) is Route.VIA_AGENT]
        only = [blk for blk in blocks if decision.route(blk.partition_id) is Route.BACKUP_ONLY]
        if via:
            proxy = self.proxies[w.node]
            transfers = []
            for blk in via:
                transfers.extend(proxy.submit(target, blk, now))
            transfers.extend(proxy.flush_all(blocks_of=w.access_point))
            if proxy.enabled:
                merged: dict[str, list[DataBlock]] = {}
                for tr in transfers:
                    merged.setdefault(tr.target, []).extend(tr.blocks)
                for tgt, blks in merged.items():
                    self._send_agent(w, g, tgt, blks)
            else:
                for tr in transfers:
                    self._send_agent(w, g, tr.target, list(tr.blocks))
            if decision.backup_enabled:
                self._send_backup(w, via, decision.backup_kind)
            w.via_agent.extend(via)
        if only:
            self._send_backup_only(w, only)

        w.produced += sum(blk.size_bytes for blk in blocks)
        if w.done_retry < 0:
            # a writer counts fully only once it has committed
            self._credit(w, min(w.produced, job.wstage.task_output(w.idx) - 1))
        if b == cfg.task.batches - 1:
            w.compute_done = True
            self._writer_maybe_done(w)

    def _credit(self, w: WriterTask, upto: int) -> None:
        if upto <= w.credited:
            return
        w.job.progress_num += upto - w.credited
        w.credited = upto
        self._maybe_launch_readers(w.job)

    def _resources(self, src: str, dst: str, disk_at: str | None) -> tuple[str, ...]:
        res: list[str] = []
        if src != dst:
            res += [self.nodes[src].net_out, self.nodes[dst].net_in]
        if disk_at is not None:
            res.append(self.nodes[disk_at].disk)
        return tuple(res)

    def _send_agent(self, w: WriterTask, g: int, target: str, blocks: list[DataBlock]) -> None:
        job = w.job
        token = w.token
        if not self.nodes[w.node].alive:
            w.outstanding += 1
            self.parked_sends.append((w, token, g, blocks))
            return
        if not self.agents[target].alive:
            self._agent_send_failed(w, token, g, target, blocks)
            return
        if target in w.streaming:
            if target not in w.queued:
                w.outstanding += 1
            w.queued.setdefault(target, []).extend(blocks)
            return
        w.streaming.add(target)
        disk = target if job.mode is ShuffleMode.ON_DISK else None
        nbytes = sum(b.size_bytes for b in blocks)
        w.outstanding += 1
        self.net.start(
            self._resources(w.node, target, disk), nbytes,
            lambda: self._agent_ack(w, token, g, target, blocks),
            lambda: self._agent_send_failed(w, token, g, target, blocks, counted=True),
            nodes=tuple(sorted({w.node, target})), tag=job.job_id,
        )

    def _agent_ack(self, w: WriterTask, token: int, g: int, target: str, blocks: list[DataBlock]) -> None:
        if token != w.token:
            return  # a later attempt keeps its own count
        w.outstanding -= 1
        w.streaming.discard(target)
        job = w.job
        agent = self.agents[target]
        authorized = self.ssm.authorize(job.job_id, target)
        parts = []
        for blk in blocks:
            if blk.key.agent_ip != target:
                blk = replace(blk, key=replace(blk.key, agent_ip=target))
            res = agent.ingest(blk, job.mode, authorized)
            if res.status is IngestStatus.REJECTED and res.reason in ("memory", "disk"):
                res = agent.ingest(blk, ShuffleMode.ON_DISK, authorized)
            if not res.ok:
                raise InvariantViolation(self.loop.steps, self.loop.now, f"{target} rejected a block: {res.reason}")
            if blk.partition_id not in parts:
                parts.append(blk.partition_id)
        for p in parts:
            try:
                agent.commit(job.job_id, p)
            except NothingToCommit:
                pass  # every block of the partition was already stored
        self._touch(agent)
        if target not in w.delivered:
            w.delivered.append(target)
        job.ingest_done[target] = self.loop.now
        self.last_progress = self.loop.now
        rest = w.queued.pop(target, None)
        if rest:
            w.outstanding -= 1
            self._send_agent(w, g, target, rest)
        self._writer_maybe_done(w)

    def _agent_send_failed(self, w: WriterTask, token: int, g: int, target: str,
                           blocks: list[DataBlock], counted: bool = False) -> None:
        if token != w.token:
            return
        if counted:
            w.outstanding -= 1
        w.streaming.discard(target)
        rest = w.queued.pop(target, None)
        if rest:
            w.outstanding -= 1
            blocks = blocks + rest
        job = w.job
        if not self.nodes[w.node].alive:
            # the writer is cut off but keeps running; retry after reconnect
            w.outstanding += 1
            self.parked_sends.append((w, token, g, blocks))
            return
        if not self.cfg.ft.enabled:
            self._fail_writer(w)
            return
        nxt = failover_target(job.replicas[g], target, lambda a: self.agents[a].alive)
        if nxt is None:
            w.outstanding += 1
            self.parked_sends.append((w, token, g, blocks))
            return
        if job.active[g] == target:
            job.active[g] = nxt
        self._send_agent(w, g, nxt, blocks)

    def _backup_node(self, w: WriterTask, kind: BackupKind) -> str | None:
        if kind is BackupKind.DEFAULT:
            return w.node
        ids = self.compute_ids
        start = ids.index(w.node)
        for k in range(1, len(ids)):
            nid = ids[(start + k) % len(ids)]
            if self.nodes[nid].alive:
                return nid
        return None

    def _send_backup(self, w: WriterTask, blocks: list[DataBlock], kind: BackupKind) -> None:
        node = self._backup_node(w, kind)
        if node is None:
            return
        source = Source.DEFAULT_BACKUP if kind is BackupKind.DEFAULT else Source.REMOTE_BACKUP
        self._write_copy(w, blocks, node, source)

    def _bo_nodes(self, job: JobRun, w: WriterTask, p: int) -> list[str]:
        ids = self.storage_ids
        h = hashlib.blake2b(repr((job.job_id, w.task_id, p)).encode("utf-8"), digest_size=4)
        start = int.from_bytes(h.digest(), "big") % len(ids)
        out = []
        for k in range(len(ids)):
            nid = ids[(start + k) % len(ids)]
            if self.nodes[nid].alive:
                out.append(nid)
                if len(out) == 2:
                    break
        return out

    def _send_backup_only(self, w: WriterTask, blocks: list[DataBlock]) -> None:
        by_node: dict[str, list[DataBlock]] = {}
        for blk in blocks:
            for nid in self._bo_nodes(w.job, w, blk.partition_id):
                by_node.setdefault(nid, []).append(blk)
        for nid, blks in by_node.items():
            self._write_copy(w, blks, nid, Source.BACKUP_ONLY)

    def _write_copy(self, w: WriterTask, blocks: list[DataBlock], node: str, source: Source) -> None:
        token = w.token
        epoch = self.nodes[node].disk_epoch
        w.outstanding += 1
        # a copy to the writer's own disk never crosses the network
        local = node == w.node
        if not local and not self.nodes[w.node].alive:
            self.parked_copies.append((w, token, blocks, node, source))
            return

        def done() -> None:
            if token != w.token:
                return
            w.outstanding -= 1
            if self.nodes[node].disk_epoch == epoch:
                for blk in blocks:
                    entry = IndexEntry(blk.writer_id, blk.retry_idx, blk.backup_seq, w.backup_offset,
                                       blk.size_bytes, source)
                    w.backup_offset += blk.size_bytes
                    self.catalog.add(w.job.job_id, blk.partition_id, entry, node, epoch)
            self._writer_maybe_done(w)

        def failed() -> None:
            if token != w.token:
                return
            if not self.nodes[w.node].alive:
                self.parked_copies.append((w, token, blocks, node, source))
                return
            w.outstanding -= 1
            if source is Source.BACKUP_ONLY:
                self._send_backup_only(w, blocks)
            else:
                self._send_backup(w, blocks, BackupKind.REMOTE)
            self._writer_maybe_done(w)

        self.net.start(self._resources(w.node, node, node), sum(b.size_bytes for b in blocks),
                       done, failed, nodes=tuple(sorted({w.node, node})), local=local)

    def _writer_maybe_done(self, w: WriterTask) -> None:
        if w.outstanding < 0:
            raise InvariantViolation(self.loop.steps, self.loop.now, f"{w.task_id}: negative in-flight count")
        if w.state != "running" or not w.compute_done or w.outstanding > 0:
            return
        job = w.job
        runtime = self.loop.now - w.run_start
        first = w.done_retry < 0
        w.done_retry = w.attempt
        job.manifest.complete(w.task_id, w.attempt)
        self._end_task(w, "ok")
        self.history.append(TaskRecord(runtime, job.wstage.task_output(w.idx), job.wstage.task_output(w.idx),
                                       job.wstage.task_input_bytes[w.idx], job.wstage.operator_kind))
        if first:
            job.writers_done += 1
            self._credit(w, job.wstage.task_output(w.idx))
            self._maybe_launch_readers(job)
        self._check_phase_faults(job)
        for r in job.readers:
            if r.state == "running":
                self._reader_maybe_finish(r)

    def _fail_writer(self, w: WriterTask) -> None:
        """Kill the running attempt and queue a rerun."""
        proxy = self.proxies.get(w.node)
        if proxy is not None:
            proxy.drop_writer(w.access_point)
        self._end_task(w, "failed")
        self._new_attempt(w, rerun=True)
        self.loop.after(0.0, self._dispatch)

    def _request_rerun(self, w: WriterTask) -> bool:
        if w.state in ("queued", "running") or w.job.finished:
            return False
        self._new_attempt(w, rerun=True)
        self.loop.after(0.0, self._dispatch)
        return True

    # -- readers ------------------------------------------------------------------------------

    def _available(self, r: ReaderTask, cand: Candidate, loc: Location) -> bool:
        node = self.nodes[loc.node_id]
        if not node.alive:
            return False
        if loc.source is Source.AGENT_FILE:
            agent = self.agents[loc.node_id]
            return agent.epoch == loc.epoch and agent.locate(
                r.job.job_id, cand.writer_id, cand.retry_idx, r.idx, cand.backup_seq) is not None
        return node.disk_epoch == loc.epoch

    def _poll_tick(self, t: float) -> float:
        """First tick of the shared poll clock at or after ``t``.

        Readers poll on one cluster-wide grid, so a reader's launch time
        does not shift when it notices newly committed data.
        """
        iv = self.cfg.task.poll_interval_s
        return max(t, math.ceil(round(t / iv, 9)) * iv)

    def _reader_poll(self, r: ReaderTask, token: int) -> None:
        if token != r.token:
            return
        job = r.job
        now = self.loop.now
        if now - self.last_progress > STALL_LIMIT_S:
            raise SimulationStuck(f"no progress since t={self.last_progress}")
        if not self.nodes[r.node].alive:
            self.loop.at(self._poll_tick(now + self.cfg.task.poll_interval_s), self._reader_poll, r, token)
            return
        found: list[Located] = []
        for aid in job.reader_agents:
            agent = self.agents[aid]
            entries, healthy = r.cursor.poll(agent, job.job_id, r.idx)
            if healthy:
                loc = Location(Source.AGENT_FILE, aid, agent.epoch)
                found.extend(Located(e, loc) for _, e in entries)
        backups, r.catalog_pos = self.catalog.entries(job.job_id, r.idx, r.catalog_pos)
        found.extend(backups)
        for ident in merge_located(r.known, found):
            if r.session.needs(ident, r.known[ident].retry_idx):
                r.todo[ident] = None
        self._pull(r)

        if job.writers_done == len(job.writers) and not r.session.finished:
            self._detect_missing(r)
        if r.token == token and r.state == "running":
            self._reader_maybe_finish(r)
        if r.token == token and r.state == "running":
            self.loop.at(self._poll_tick(now + self.cfg.task.poll_interval_s), self._reader_poll, r, token)

    def _pull(self, r: ReaderTask) -> None:
        """Fetch known blocks that have a live source, up to the fetch window."""
        job = r.job
        if not self.nodes[r.node].alive:
            return
        window = self.cfg.task.fetch_window
        budget = window - r.inflight_bytes
        plan: dict[tuple[str, bool], list[tuple[Candidate, Location]]] = {}
        for ident in list(r.todo):
            if ident in r.inflight:
                continue
            cand = r.known[ident]
            if not r.session.needs(ident, cand.retry_idx):
                del r.todo[ident]
                continue
            # one block may exceed the window on its own when nothing is in flight
            if cand.length > budget and (budget < window or plan):
                break
            for loc in cand.chain:
                if self._available(r, cand, loc):
                    mem = loc.source is Source.AGENT_FILE and self.agents[loc.node_id].locate(
                        job.job_id, cand.writer_id, cand.retry_idx, r.idx, cand.backup_seq) is Where.MEMORY
                    plan.setdefault((loc.node_id, mem), []).append((cand, loc))
                    budget -= cand.length
                    break
        for (src, mem), items in plan.items():
            self._fetch(r, src, mem, items)

    def _detect_missing(self, r: ReaderTask) -> None:
        job = r.job
        missing: list[str] = []
        for ident in sorted(r.remaining):
            if ident in r.inflight:
                continue
            cand = r.known.get(ident)
            if cand is not None and any(self._available(r, cand, loc) for loc in cand.chain):
                continue
            if ident[0] not in missing:
                missing.append(ident[0])
        for wid in missing:
            w = job.writers[int(wid.rsplit(".w", 1)[1])]
            if w.state != "done":
                continue  # regeneration already under way
            if not self.cfg.ft.enabled:
                self._request_rerun(w)
                self._restart_reader(r, "failed")
                return
            if r.noted.get(wid, -1) >= w.done_retry:
                continue
            r.noted[wid] = w.done_retry
            r.session.missing.discard(wid)
            if not r.session.report_missing([wid]):
                if r.session.state is RecoveryState.ABORTED:
                    self._request_rerun(w)
                    self._restart_reader(r, "aborted")
                    return
                continue
            self._request_rerun(w)

    def _fetch(self, r: ReaderTask, src: str, mem: bool, items: list[tuple[Candidate, Location]]) -> None:
        token = r.token
        disk = None if mem else src
        for cand, _ in items:
            r.inflight.add(cand.ident)
        nbytes = sum(c.length for c, _ in items)
        r.inflight_bytes += nbytes

        def done() -> None:
            if token != r.token:
                return
            r.inflight_bytes -= nbytes
            busy = 0.0
            for cand, _ in items:
                r.inflight.discard(cand.ident)
                digest = self._digest(r.job, cand.writer_id, r.idx, cand.backup_seq)
                r.bytes_read += cand.length
                if mem:
                    r.bytes_mem += cand.length
                if r.session.consume(cand.ident, cand.retry_idx, digest):
                    busy += cand.length / self.cfg.task.reader_rate
                    r.remaining.discard(cand.ident)
                r.todo.pop(cand.ident, None)
                if r.session.state is RecoveryState.ABORTED:
                    self._restart_reader(r, "aborted")
                    return
            r.busy_until = max(r.busy_until, self.loop.now) + busy
            self.last_progress = self.loop.now
            self._pull(r)
            self._reader_maybe_finish(r)

        def failed() -> None:
            if token != r.token:
                return
            r.inflight_bytes -= nbytes
            for cand, _ in items:
                r.inflight.discard(cand.ident)

        self.net.start(self._resources(src, r.node, disk), nbytes, done, failed,
                       nodes=tuple(sorted({src, r.node})), local=src == r.node)

    def _reader_maybe_finish(self, r: ReaderTask) -> None:
        job = r.job
        if r.state != "running" or r.remaining or r.inflight or job.writers_done < len(job.writers):
            return
        if any(w.state != "done" for w in job.writers):
            return
        now = self.loop.now
        if now < r.busy_until:
            if r.finish_at != r.busy_until:
                r.finish_at = r.busy_until
                self.loop.at(r.busy_until, self._reader_finish_check, r, r.token)
            return
        state = r.session.verify(job.manifest.partition_digest(r.idx))
        if state is RecoveryState.COMPLETE:
            job.results[r.idx] = r.session.consumed_multiset()
            self._end_task(r, "ok")
            job.readers_done += 1
            self._job_maybe_done(job)
        else:
            self._restart_reader(r, "aborted")

    def _reader_finish_check(self, r: ReaderTask, token: int) -> None:
        if token == r.token:
            self._reader_maybe_finish(r)

    def _restart_reader(self, r: ReaderTask, status: str) -> None:
        if r.state == "done":
            return
        self._end_task(r, status)
        self._new_attempt(r, rerun=True)
        self.loop.after(0.0, self._dispatch)

    # -- faults ------------------------------------------------------------------------------

    def _check_phase_faults(self, job: JobRun) -> None:
        if not self._phase_faults:
            return
        if not job.read_phase and job.writers_done == len(job.writers) and any(
                r.state == "running" for r in job.readers):
            job.read_phase = True
        for entry in list(self._phase_faults):
            i, spec = entry
            trig = spec.trigger
            if trig.job_index != job.order:
                continue
            fire = (trig.kind is TriggerKind.AT_WRITE_PHASE and job.write_phase) or (
                trig.kind is TriggerKind.AT_READ_PHASE and job.read_phase)
            if fire:
                self._phase_faults.remove(entry)
                rng = rng_for(self.cfg.seed, "fault", i)
                nid = pick_target(spec.target, rng, self.compute_ids, self.storage_ids)
                self.loop.after(trig.delay_s, self._node_down, nid, spec.duration_s)

    def _periodic_fault(self, i: int, spec: FaultSpec, rng: random.Random) -> None:
        if self._all_done():
            return
        nid = pick_target(spec.target, rng, self.compute_ids, self.storage_ids)
        self._node_down(nid, spec.duration_s)
        gap = rng.uniform(spec.trigger.min_interval, spec.trigger.max_interval)
        self.loop.after(gap, self._periodic_fault, i, spec, rng)

    def _node_down(self, nid: str, duration: float) -> None:
        node = self.nodes[nid]
        if not node.alive or self._all_done():
            return
        self.fault_log.append((self.loop.now, nid))
        self.loop.record("node_down", node=nid, duration=duration)
        node.alive = False
        self.agents[nid].fail()
        self.ssm.mark_dead(nid)
        # with fault tolerance, tasks ride out the disconnect and only their
        # transfers fail; without it the I/O errors fail every attempt there
        if not self.cfg.ft.enabled:
            for job in list(self.active_jobs):
                for task in list(job.writers) + list(job.readers):
                    if task.state == "running" and task.node == nid:
                        if isinstance(task, WriterTask):
                            self._fail_writer(task)
                        else:
                            self._restart_reader(task, "killed")
        for job in list(self.active_jobs):
            if nid in job.reader_agents:
                self._agent_lost(job, nid)
        self.net.fail_node(nid, keep_local=self.cfg.ft.enabled)
        self.loop.after(duration, self._node_up, nid)

    def _agent_lost(self, job: JobRun, nid: str) -> None:
        if self.cfg.ft.enabled:
            for g, a in enumerate(job.active):
                if a == nid:
                    nxt = failover_target(job.replicas[g], nid, lambda x: self.agents[x].alive)
                    if nxt is not None:
                        job.active[g] = nxt
            return
        # without fault tolerance every attempt that stored data there reruns,
        # and readers of the job fail on their next fetch
        for w in job.writers:
            if nid in w.delivered:
                if w.state == "running":
                    self._fail_writer(w)
                elif w.state == "done":
                    self._request_rerun(w)
        for r in job.readers:
            if r.state == "running":
                self._restart_reader(r, "failed")

    def _node_up(self, nid: str) -> None:
        node = self.nodes[nid]
        node.alive = True
        node.free_slots = node.slots - len(node.tasks)
        agent = self.agents[nid]
        agent.recover()
        self.ssm.heartbeat(nid, self.loop.now, 0.0)
        self._memory_changed(node)
        self.loop.record("node_up", node=nid)
        blocked, self.blocked = self.blocked, []
        for task in blocked:
            if task.state == "queued":
                self._qseq += 1
                heapq.heappush(self.queue, ((0, -task.job.spec.priority, task.job.order, task.idx),
                                            self._qseq, task, task.token))
        parked, self.parked_sends = self.parked_sends, []
        for w, token, g, blocks in parked:
            if token != w.token:
                continue
            w.outstanding -= 1
            alive = [a for a in w.job.replicas[g] if self.agents[a].alive]
            if not alive:
                w.outstanding += 1
                self.parked_sends.append((w, token, g, blocks))
                continue
            if not self.agents[w.job.active[g]].alive:
                w.job.active[g] = alive[0]
            self._send_agent(w, g, w.job.active[g], blocks)
        copies, self.parked_copies = self.parked_copies, []
        for w, token, blocks, dst, source in copies:
            if token != w.token:
                continue
            if not self.nodes[w.node].alive:
                self.parked_copies.append((w, token, blocks, dst, source))
                continue
            w.outstanding -= 1
            if self.nodes[dst].alive:
                self._write_copy(w, blocks, dst, source)
            elif source is Source.BACKUP_ONLY:
                self._send_backup_only(w, blocks)
            else:
                self._send_backup(w, blocks, BackupKind.REMOTE)
            self._writer_maybe_done(w)
        self._dispatch()


def simulate(cfg: SimConfig, jobs: list[JobSpec] | None = None) -> RunResult:
    return Simulation(cfg, jobs).run()
