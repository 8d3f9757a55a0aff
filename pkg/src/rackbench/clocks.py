"""Clock abstraction shared by the power executor, agents, and collectors.

Everything that waits takes a Clock instead of calling time.sleep directly, so
the same code runs against wall time or against the simulator's virtual clock.
"""

from __future__ import annotations

import time
from typing import Protocol


class Clock(Protocol):
    def now_us(self) -> int:
        """Microseconds since this clock's epoch."""
        ...

    def sleep_us(self, dt_us: int) -> None:
        """Block until dt_us microseconds have passed."""
        ...


class RealClock:
    """Wall clock. now_us is relative to construction time (the process epoch)."""

    def __init__(self) -> None:
        self._epoch_ns = time.monotonic_ns()

    def now_us(self) -> int:
        return (time.monotonic_ns() - self._epoch_ns) // 1000

    def sleep_us(self, dt_us: int) -> None:
        if dt_us > 0:
            time.sleep(dt_us / 1_000_000)


class ManualClock:
    """Test clock: time moves only when told to."""

    def __init__(self, start_us: int = 0) -> None:
        self._now = start_us

    def now_us(self) -> int:
        return self._now

    def sleep_us(self, dt_us: int) -> None:
        if dt_us > 0:
            self._now += dt_us
