"""Single-threaded discrete-event loop with an append-only trace."""

from __future__ import annotations

import heapq
import json
from typing import Any, Callable


class CausalityError(AssertionError):
    pass


class EventLoop:
    def __init__(self) -> None:
        self.now = 0.0
        self._heap: list[tuple[float, int, Callable, tuple]] = []
        self._seq = 0
        self.steps = 0
        self.trace: list[dict[str, Any]] = []

    def at(self, time: float, fn: Callable, *args) -> None:
        if time < self.now:
            raise CausalityError(f"event at {time} scheduled from {self.now}")
        self._seq += 1
        heapq.heappush(self._heap, (time, self._seq, fn, args))

    def after(self, delay: float, fn: Callable, *args) -> None:
        self.at(self.now + delay, fn, *args)

    def record(self, event: str, **fields: Any) -> None:
        fields["t"] = round(self.now, 9)
        fields["ev"] = event
        self.trace.append(fields)

    def run(self, until: float | None = None, after_step: Callable[[], None] | None = None,
            stop: Callable[[], bool] | None = None) -> None:
        heap = self._heap
        while heap:
            if until is not None and heap[0][0] > until:
                break
            time, _, fn, args = heapq.heappop(heap)
            self.now = time
            fn(*args)
            self.steps += 1
            if after_step is not None:
                after_step()
            if stop is not None and stop():
                break

    @property
    def pending(self) -> int:
        return len(self._heap)


def trace_to_ndjson(trace: list[dict[str, Any]]) -> str:
    return "".join(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n" for rec in trace)
