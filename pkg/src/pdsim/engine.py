"""Deterministic discrete-event core: virtual clock, ordered event queue, RNG streams.

Times are integer microseconds. Events are totally ordered by (fire_time, seq)
where seq is assigned at insertion, so ties resolve in FIFO insertion order and
two runs of the same scenario produce byte-identical event logs.
"""

from __future__ import annotations

import hashlib
import heapq
import json
import random
from dataclasses import dataclass, field
from typing import Any, Callable, TextIO


class SimulationError(RuntimeError):
    """An internal invariant was violated; the run must abort."""


@dataclass
class Event:
    fire_time: int
    seq: int
    target: str
    kind: str
    data: dict[str, Any] = field(default_factory=dict)
    cancelled: bool = False

    def cancel(self) -> None:
        self.cancelled = True


@dataclass
class RunStats:
    events_fired: int
    end_time: int


class RngStreams:
    """Named random substreams of one master seed.

    Each stream is an independent ``random.Random`` whose seed is derived from
    (master_seed, name) via SHA-256, so enabling or disabling one consumer
    never perturbs the draw sequence of another.
    """

    def __init__(self, master_seed: int):
        self.master_seed = master_seed
        self._streams: dict[str, random.Random] = {}

    def stream(self, name: str) -> random.Random:
        if name not in self._streams:
            digest = hashlib.sha256(f"{self.master_seed}:{name}".encode()).digest()
            self._streams[name] = random.Random(int.from_bytes(digest[:8], "big"))
        return self._streams[name]


class Engine:
    """Single-threaded event loop; the only clock authority in a run."""

    def __init__(self, max_events: int = 100_000_000,
                 trace_sink: Callable[[Event], None] | None = None):
        self.now: int = 0
        self.max_events = max_events
        self.trace_sink = trace_sink
        self._queue: list[tuple[int, int, Event]] = []
        self._seq = 0
        self._handlers: dict[str, Callable[[Event], None]] = {}
        self._fired = 0

    def register(self, target: str, handler: Callable[[Event], None]) -> None:
        if target in self._handlers:
            raise SimulationError(f"duplicate entity id {target!r}")
        self._handlers[target] = handler

    def reregister(self, target: str, handler: Callable[[Event], None]) -> None:
        """Swap the handler for an id (instance role flips reuse the id)."""
        if target not in self._handlers:
            raise SimulationError(f"reregister of unknown entity id {target!r}")
        self._handlers[target] = handler

    def schedule(self, fire_time: int, target: str, kind: str,
                 data: dict[str, Any] | None = None) -> Event:
        """Enqueue an event; returns a handle whose .cancel() prevents firing."""
        if fire_time < self.now:
            raise SimulationError(
                f"schedule into the past: fire_time={fire_time} < clock={self.now} "
                f"({target}/{kind})")
        event = Event(fire_time, self._seq, target, kind, data or {})
        self._seq += 1
        heapq.heappush(self._queue, (event.fire_time, event.seq, event))
        return event

    def cancel(self, handle: Event) -> None:
        handle.cancel()

    def queue_len(self) -> int:
        return sum(1 for _, _, e in self._queue if not e.cancelled)

    def run(self, until: int | None = None,
            stop: Callable[[], bool] | None = None) -> RunStats:
        """Fire all events with fire_time <= until in (fire_time, seq) order.

        With until=None, runs until the queue empties or `stop` returns True;
        `stop` is evaluated after each handled event. Aborts with a diagnostic
        if the per-run event cap is exceeded (livelock guard).
        """
        while self._queue:
            fire_time, _, event = self._queue[0]
            if until is not None and fire_time > until:
                break
            heapq.heappop(self._queue)
            if event.cancelled:
                continue
            self.now = fire_time
            self._fired += 1
            if self._fired > self.max_events:
                raise SimulationError(
                    f"event cap exceeded ({self.max_events}); likely livelock at t={self.now}")
            if self.trace_sink is not None:
                self.trace_sink(event)
            handler = self._handlers.get(event.target)
            if handler is None:
                raise SimulationError(f"event for unknown target {event.target!r}")
            handler(event)
            if stop is not None and stop():
                break
        if until is not None and until > self.now:
            self.now = until
        return RunStats(events_fired=self._fired, end_time=self.now)


def jsonl_trace_sink(fh: TextIO) -> Callable[[Event], None]:
    """Trace sink writing one compact JSON object per fired event."""

    def sink(event: Event) -> None:
        fh.write(json.dumps(
            {"t": event.fire_time, "seq": event.seq,
             "target": event.target, "kind": event.kind},
            separators=(",", ":")) + "\n")

    return sink


def collecting_trace_sink(out: list[dict[str, Any]]) -> Callable[[Event], None]:
    def sink(event: Event) -> None:
        out.append({"t": event.fire_time, "seq": event.seq,
                    "target": event.target, "kind": event.kind})

    return sink
