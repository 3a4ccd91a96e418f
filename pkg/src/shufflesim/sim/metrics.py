"""Run metrics and an independent recomputation from the trace."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Any, Iterable


@dataclass
class Metrics:
    e2e_runtime: float = 0.0
    cu_cost: float = 0.0  # slot-minutes
    rerun_times: int = 0
    write_reruns: int = 0
    read_reruns: int = 0
    write_time: float = 0.0
    read_time: float = 0.0
    memory_shuffle_util: float = 0.0
    job_e2e: dict[str, float] = field(default_factory=dict)

    def check(self) -> None:
        for name in ("e2e_runtime", "cu_cost", "rerun_times", "write_time", "read_time", "memory_shuffle_util"):
            if getattr(self, name) < 0:
                raise AssertionError(f"negative metric {name}")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    SCALARS = ("e2e_runtime", "cu_cost", "rerun_times", "write_reruns", "read_reruns",
               "write_time", "read_time", "memory_shuffle_util")


class MetricsAccumulator:
    """Online counterpart of :func:`account`, fed by the engine."""

    def __init__(self) -> None:
        self.submit: dict[str, float] = {}
        self.end: dict[str, float] = {}
        self.cu_slot_s = 0.0
        self.write_s = 0.0
        self.read_s = 0.0
        self.write_reruns = 0
        self.read_reruns = 0
        self.bytes_read = 0
        self.bytes_mem = 0

    def task_end(self, kind: str, attempt: int, slots: int, start: float, end: float,
                 bytes_read: int = 0, bytes_mem: int = 0) -> None:
        dur = end - start
        self.cu_slot_s += slots * dur
        if kind == "writer":
            self.write_s += dur
            self.write_reruns += attempt > 0
        else:
            self.read_s += dur
            self.read_reruns += attempt > 0
        self.bytes_read += bytes_read
        self.bytes_mem += bytes_mem

    def finish(self) -> Metrics:
        return _build(self.submit, self.end, self.cu_slot_s, self.write_s, self.read_s,
                      self.write_reruns, self.read_reruns, self.bytes_read, self.bytes_mem)


def _build(submit, end, cu_slot_s, write_s, read_s, wr, rr, bytes_read, bytes_mem) -> Metrics:
    job_e2e = {j: round(end[j] - submit[j], 9) for j in sorted(end)}
    e2e = (max(end.values()) - min(submit.values())) if end else 0.0
    return Metrics(
        e2e_runtime=round(e2e, 9),
        cu_cost=round(cu_slot_s / 60.0, 9),
        rerun_times=wr + rr,
        write_reruns=wr,
        read_reruns=rr,
        write_time=round(write_s, 9),
        read_time=round(read_s, 9),
        memory_shuffle_util=round(bytes_mem / bytes_read, 9) if bytes_read else 0.0,
        job_e2e=job_e2e,
    )


def account(trace: Iterable[dict[str, Any]]) -> Metrics:
    """Recompute metrics from raw trace records."""
    submit: dict[str, float] = {}
    end: dict[str, float] = {}
    cu = write_s = read_s = 0.0
    wr = rr = 0
    bytes_read = bytes_mem = 0
    for rec in trace:
        ev = rec["ev"]
        if ev == "job_submit":
            submit[rec["job"]] = rec["t"]
        elif ev == "job_end":
            end[rec["job"]] = rec["t"]
        elif ev == "task_end":
            dur = rec["t"] - rec["start"]
            cu += rec["slots"] * dur
            if rec["kind"] == "writer":
                write_s += dur
                wr += rec["attempt"] > 0
            else:
                read_s += dur
                rr += rec["attempt"] > 0
            bytes_read += rec.get("bytes_read", 0)
            bytes_mem += rec.get("bytes_mem", 0)
    return _build(submit, end, cu, write_s, read_s, wr, rr, bytes_read, bytes_mem)
