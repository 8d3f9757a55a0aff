"""Relay bank power control.

Each rack has one 4-relay bank driven from its control node through a level
shifter (3.3 V GPIO in, 5.0 V relay coil side out). Switching several relays
at once causes supply voltage sag, so plans stagger transitions: within one
bank consecutive transitions are spaced by at least the stagger interval
(default 500 ms). Different banks hang off different supplies and may switch
at the same offsets.

plan_switch turns switch requests into a TransitionPlan; execute_plan replays
a plan against GPIO drivers on an injected clock; render_gpio_script renders a
single-bank plan to POSIX shell scripts for on-device use.
"""

from __future__ import annotations

import enum
import threading
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Protocol

DEFAULT_STAGGER_MS = 500
RELAYS_PER_BANK = 4
DEFAULT_RELAY_PINS = (0, 1, 2, 3)


class PowerControlError(Exception):
    pass


class UnknownRelay(PowerControlError):
    pass


class DuplicateRequest(PowerControlError):
    pass


class MultiBankPlan(PowerControlError):
    pass


class BankBusy(PowerControlError):
    """A second executor tried to run on a bank that is mid-plan."""


class DriverFault(PowerControlError):
    """Raised by GpioDriver implementations when a pin write fails."""


class Switch(enum.Enum):
    OFF = "off"
    ON = "on"


class Level(enum.Enum):
    LOW = "low"
    HIGH = "high"


_LEVEL_FOR_TARGET = {Switch.ON: Level.HIGH, Switch.OFF: Level.LOW}


@dataclass(frozen=True)
class LevelShifter:
    """3.3 V logic side to 5.0 V relay side; High maps to the full output rail."""

    input_level_v: float = 3.3
    output_level_v: float = 5.0

    def output_v(self, level: Level) -> float:
        return self.output_level_v if level is Level.HIGH else 0.0


@dataclass
class Relay:
    relay_id: int
    gpio_pin: int
    state: Switch = Switch.OFF
    powered_nodes: list[str] = field(default_factory=list)


@dataclass
class RelayBank:
    """Exactly four relays behind one control node and one supply."""

    control_node_id: str
    relays: list[Relay]
    shifter: LevelShifter = field(default_factory=LevelShifter)

    def __post_init__(self) -> None:
        if len(self.relays) != RELAYS_PER_BANK:
            raise ValueError(f"bank needs exactly {RELAYS_PER_BANK} relays")
        ids = [r.relay_id for r in self.relays]
        if sorted(ids) != list(range(RELAYS_PER_BANK)):
            raise ValueError(f"relay ids must be 0..{RELAYS_PER_BANK - 1}, got {ids}")
        seen: set[str] = set()
        for r in self.relays:
            for node in r.powered_nodes:
                if node in seen:
                    raise ValueError(f"node {node!r} powered by two relays")
                seen.add(node)

    def relay(self, relay_id: int) -> Relay:
        for r in self.relays:
            if r.relay_id == relay_id:
                return r
        raise UnknownRelay(f"bank {self.control_node_id!r} has no relay {relay_id}")


@dataclass(frozen=True)
class SwitchRequest:
    bank: str
    relay_id: int
    target: Switch


@dataclass(frozen=True)
class Transition:
    """One pin write: resolved down to the physical pin at plan time."""

    bank: str
    relay_id: int
    gpio_pin: int
    target: Switch
    at_ms: int


@dataclass
class TransitionPlan:
    transitions: list[Transition]
    stagger_ms: int = DEFAULT_STAGGER_MS

    def banks(self) -> list[str]:
        out: list[str] = []
        for t in self.transitions:
            if t.bank not in out:
                out.append(t.bank)
        return out

    @property
    def duration_ms(self) -> int:
        return max((t.at_ms for t in self.transitions), default=0)


class GpioDriver(Protocol):
    def write(self, pin: int, level: Level) -> None: ...

    def read(self, pin: int) -> Level: ...


class MemoryGpioDriver:
    """In-memory pin bank; the simulated driver used in tests and demos."""

    def __init__(self, pins: Iterable[int] = DEFAULT_RELAY_PINS) -> None:
        self.levels: dict[int, Level] = {p: Level.LOW for p in pins}

    def write(self, pin: int, level: Level) -> None:
        if pin not in self.levels:
            raise DriverFault(f"no pin {pin}")
        self.levels[pin] = level

    def read(self, pin: int) -> Level:
        if pin not in self.levels:
            raise DriverFault(f"no pin {pin}")
        return self.levels[pin]


def plan_switch(
    banks: Mapping[str, RelayBank],
    requests: Iterable[SwitchRequest],
    stagger_ms: int = DEFAULT_STAGGER_MS,
) -> TransitionPlan:
    """Build a staggered plan from switch requests.

    Per bank, effective transitions land at offsets 0, stagger, 2*stagger ...
    in ascending relay_id order. Requests that match the relay's current state
    are dropped (no-ops); the same bank+relay requested twice with conflicting
    targets is an error, an identical duplicate collapses. Banks are planned
    independently and may share offsets.
    """
    if stagger_ms < 1:
        raise ValueError("stagger_ms must be >= 1")

    wanted: dict[tuple[str, int], Switch] = {}
    order: list[tuple[str, int]] = []
    for req in requests:
        if req.bank not in banks:
            raise UnknownRelay(f"no bank {req.bank!r}")
        relay = banks[req.bank].relay(req.relay_id)  # raises UnknownRelay
        key = (req.bank, relay.relay_id)
        if key in wanted:
            if wanted[key] is not req.target:
                raise DuplicateRequest(
                    f"bank {req.bank!r} relay {req.relay_id} requested both "
                    f"{wanted[key].value} and {req.target.value}"
                )
            continue
        wanted[key] = req.target
        order.append(key)

    bank_order: list[str] = []
    for b, _ in order:
        if b not in bank_order:
            bank_order.append(b)

    transitions: list[Transition] = []
    for bank_id in bank_order:
        bank = banks[bank_id]
        slot = 0
        for _, relay_id in sorted(
            (k for k in order if k[0] == bank_id), key=lambda k: k[1]
        ):
            relay = bank.relay(relay_id)
            target = wanted[(bank_id, relay_id)]
            if relay.state is target:
                continue
            transitions.append(
                Transition(
                    bank=bank_id,
                    relay_id=relay_id,
                    gpio_pin=relay.gpio_pin,
                    target=target,
                    at_ms=slot * stagger_ms,
                )
            )
            slot += 1
    transitions.sort(key=lambda t: (t.at_ms, t.bank, t.relay_id))
    return TransitionPlan(transitions=transitions, stagger_ms=stagger_ms)


@dataclass
class TransitionResult:
    bank: str
    relay_id: int
    target: Switch
    planned_at_ms: int
    actual_at_us: int | None
    status: str  # "ok" | "failed" | "skipped"
    state_after: Switch | None
    error: str = ""


@dataclass
class ExecutionReport:
    results: list[TransitionResult] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(r.status == "ok" for r in self.results)


# one executor per bank at a time, across threads and sim processes
_token_lock = threading.Lock()
_active_banks: set[str] = set()


def acquire_bank_tokens(bank_ids: Iterable[str]) -> list[str]:
    ids = list(bank_ids)
    with _token_lock:
        busy = [b for b in ids if b in _active_banks]
        if busy:
            raise BankBusy(f"banks already executing: {busy}")
        _active_banks.update(ids)
    return ids


def release_bank_tokens(bank_ids: Iterable[str]) -> None:
    with _token_lock:
        _active_banks.difference_update(bank_ids)


def execution_steps(plan: TransitionPlan):
    """Yield (wait_us, transition) pairs in timeline order.

    wait_us is relative to the previous step. The caller performs the actual
    waiting and pin writes, so the same timeline drives both the blocking
    executor and simulator processes.
    """
    elapsed_ms = 0
    for t in sorted(plan.transitions, key=lambda t: (t.at_ms, t.bank, t.relay_id)):
        yield (t.at_ms - elapsed_ms) * 1000, t
        elapsed_ms = t.at_ms


def apply_transition(
    t: Transition,
    banks: Mapping[str, RelayBank],
    drivers: Mapping[str, GpioDriver],
    report: ExecutionReport,
    failed_banks: set[str],
    now_us: int,
) -> None:
    """Write one transition's pin, recording the outcome in report."""
    if t.bank in failed_banks:
        report.results.append(
            TransitionResult(
                t.bank, t.relay_id, t.target, t.at_ms, None, "skipped", None,
                error="earlier transition in this bank failed",
            )
        )
        return
    try:
        drivers[t.bank].write(t.gpio_pin, _LEVEL_FOR_TARGET[t.target])
    except Exception as exc:  # a faulted driver must not kill other banks
        failed_banks.add(t.bank)
        report.results.append(
            TransitionResult(
                t.bank, t.relay_id, t.target, t.at_ms, now_us, "failed", None,
                error=str(exc) or type(exc).__name__,
            )
        )
        return
    banks[t.bank].relay(t.relay_id).state = t.target
    report.results.append(
        TransitionResult(t.bank, t.relay_id, t.target, t.at_ms, now_us, "ok", t.target)
    )


def execute_plan(
    plan: TransitionPlan,
    banks: Mapping[str, RelayBank],
    drivers: Mapping[str, GpioDriver],
    clock,
) -> ExecutionReport:
    """Replay a plan: one pin write per transition, no earlier than its offset.

    A driver fault aborts the remaining transitions of that bank only; other
    banks continue. Relay states in `banks` are updated on successful writes.
    """
    report = ExecutionReport()
    failed: set[str] = set()
    held = acquire_bank_tokens(plan.banks())
    try:
        for wait_us, t in execution_steps(plan):
            clock.sleep_us(wait_us)
            apply_transition(t, banks, drivers, report, failed, clock.now_us())
    finally:
        release_bank_tokens(held)
    return report


def _script_lines(writes: list[tuple[int, int, int]], indent: str) -> list[str]:
    """writes: (at_ms, pin, value). Emits echo lines with sleeps for the gaps."""
    lines: list[str] = []
    prev_ms = writes[0][0] if writes else 0
    for at_ms, pin, value in writes:
        gap = at_ms - prev_ms
        if gap > 0:
            lines.append(f"{indent}sleep {gap / 1000:g}")
        lines.append(f"{indent}echo {value} > /sys/class/gpio/gpio{pin}/value")
        prev_ms = at_ms
    return lines


def render_gpio_script(plan: TransitionPlan, mode: str = "combined") -> dict[str, str]:
    """Render a single-bank plan to shell script text.

    mode="combined" returns {"gpio.sh": text}: one script taking an on/off
    argument; the plan fixes pin order and spacing, the argument picks the
    written level for every pin. mode="per-relay" returns one script per relay
    in the plan ({"relay<N>.sh": text}), each applying that relay's planned
    target. Output is deterministic for a given plan.
    """
    bank_ids = plan.banks()
    if len(bank_ids) > 1:
        raise MultiBankPlan(f"plan touches banks {bank_ids}")
    if not plan.transitions:
        raise ValueError("cannot render an empty plan")
    bank = bank_ids[0]
    ordered = sorted(plan.transitions, key=lambda t: t.at_ms)

    if mode == "per-relay":
        scripts: dict[str, str] = {}
        for t in ordered:
            value = 1 if t.target is Switch.ON else 0
            body = _script_lines([(0, t.gpio_pin, value)], "")
            scripts[f"relay{t.relay_id}.sh"] = "\n".join(
                ["#!/bin/sh", f"# relay {t.relay_id} of bank {bank} -> {t.target.value}"]
                + body
            ) + "\n"
        return scripts

    if mode != "combined":
        raise ValueError(f"unknown mode {mode!r}")

    on_writes = [(t.at_ms, t.gpio_pin, 1) for t in ordered]
    off_writes = [(t.at_ms, t.gpio_pin, 0) for t in ordered]
    lines = [
        "#!/bin/sh",
        f"# staggered relay switch script for bank {bank}",
        'case "$1" in',
        "on)",
        *_script_lines(on_writes, "    "),
        "    ;;",
        "off)",
        *_script_lines(off_writes, "    "),
        "    ;;",
        "*)",
        '    echo "usage: $0 on|off" >&2',
        "    exit 2",
        "    ;;",
        "esac",
    ]
    return {"gpio.sh": "\n".join(lines) + "\n"}
