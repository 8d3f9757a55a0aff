"""Virtual-clock event scheduler.

Time is integer microseconds and only moves inside advance()/advance_until():
no wall sleeps anywhere. Events due at the same timestamp run in insertion
order, which is what makes runs byte-identical given the same inputs.

Multi-step behaviors (boot sequences, sampling loops, shell commands that
sleep) are written as generator processes yielding microsecond delays.
"""

from __future__ import annotations

import heapq
import itertools
from dataclasses import dataclass, field
from typing import Callable, Generator


@dataclass
class EventHandle:
    at_us: int
    cancelled: bool = False

    def cancel(self) -> None:
        self.cancelled = True


@dataclass
class ProcessHandle:
    """Tracks a spawned generator process."""

    done: bool = False
    result: object = None
    error: BaseException | None = None
    _waiters: list[Callable[[], None]] = field(default_factory=list)

    def on_done(self, fn: Callable[[], None]) -> None:
        if self.done:
            fn()
        else:
            self._waiters.append(fn)

    def _finish(self) -> None:
        self.done = True
        waiters, self._waiters = self._waiters, []
        for fn in waiters:
            fn()


class Scheduler:
    def __init__(self) -> None:
        self._now = 0
        self._heap: list[tuple[int, int, EventHandle, Callable[[], None]]] = []
        self._seq = itertools.count()
        self._dispatching = False

    def now_us(self) -> int:
        return self._now

    def call_at(self, at_us: int, fn: Callable[[], None]) -> EventHandle:
        at_us = max(at_us, self._now)
        handle = EventHandle(at_us=at_us)
        heapq.heappush(self._heap, (at_us, next(self._seq), handle, fn))
        return handle

    def call_after(self, dt_us: int, fn: Callable[[], None]) -> EventHandle:
        return self.call_at(self._now + max(0, dt_us), fn)

    def spawn(self, gen: Generator[int, None, object]) -> ProcessHandle:
        """Run a generator as a process; each yielded int is a delay in us."""
        handle = ProcessHandle()

        def step() -> None:
            try:
                dt = next(gen)
            except StopIteration as stop:
                handle.result = stop.value
                handle._finish()
                return
            except BaseException as exc:
                handle.error = exc
                handle._finish()
                return
            self.call_after(int(dt), step)

        self.call_after(0, step)
        return handle

    def _pop_due(self, limit_us: int):
        while self._heap and self._heap[0][0] <= limit_us:
            at_us, _, handle, fn = heapq.heappop(self._heap)
            if handle.cancelled:
                continue
            return at_us, fn
        return None

    def advance(self, dt_us: int) -> None:
        """Process every event scheduled at or before now+dt, then land exactly there."""
        if dt_us < 0:
            raise ValueError("dt_us must be >= 0")
        if self._dispatching:
            raise RuntimeError("advance() re-entered from an event callback")
        target = self._now + dt_us
        self._dispatching = True
        try:
            while (item := self._pop_due(target)) is not None:
                self._now, fn = item
                fn()
            self._now = target
        finally:
            self._dispatching = False

    def advance_until(self, predicate: Callable[[], bool], cap_us: int) -> bool:
        """Run events in order until predicate() or the time cap. Clock lands on
        the last processed event (or the cap when the predicate never held)."""
        if self._dispatching:
            raise RuntimeError("advance_until() re-entered from an event callback")
        cap = self._now + cap_us
        self._dispatching = True
        try:
            while not predicate():
                item = self._pop_due(cap)
                if item is None:
                    self._now = cap
                    return predicate()
                self._now, fn = item
                fn()
            return True
        finally:
            self._dispatching = False

    @property
    def pending_events(self) -> int:
        return sum(1 for e in self._heap if not e[2].cancelled)
