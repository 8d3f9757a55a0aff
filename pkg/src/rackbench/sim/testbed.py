"""Simulated rack testbed.

Default topology: 8 racks, each with 1 control node and 16 workers (136 nodes
total). The 4-relay bank of a rack powers 4 contiguous workers per relay and
hangs off one supply; two relay switches landing closer together than the
supply's overload window latch a permanent fault (cleared only by reset()).
Addresses follow 192.168.<rack>.<1..16> for workers and 192.168.<rack>.42
for control nodes, and node ids are rack*100+octet.

Everything runs on a virtual microsecond clock (sim.events.Scheduler): boots
take boot_ms of simulated time, agents stream samples over the in-memory
network, and shell commands issued through SimTransport execute as processes
that consume simulated time. Runs are deterministic: the same scenario and
the same command sequence produce byte-identical event traces.

A fresh testbed is fully powered down, including control nodes; set_mains()
models plugging a rack in, which boots its control node and any workers whose
relay is already on.
"""

from __future__ import annotations

import hashlib
import re
import shlex
import threading
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Iterable

from rackbench import linkshape, power
from rackbench.agent import AgentStream, SensorReading
from rackbench.clocks import Clock
from rackbench.runner import ExecResult, TransportConnectFailure
from rackbench.sim.events import EventHandle, Scheduler
from rackbench.sim.network import SimConnection, SimNetwork

WORKERS_PER_RACK = 16
WORKERS_PER_RELAY = WORKERS_PER_RACK // power.RELAYS_PER_BANK
CONTROL_OCTET = 42

COMMAND_TIMEOUT_US = 120_000_000  # cap for one simulated shell command


class SimError(Exception):
    pass


class SupplyFault(SimError):
    """Switch rejected because the rack supply has latched a fault."""


class NodeState(Enum):
    OFF = "off"
    BOOTING = "booting"
    ON = "on"


@dataclass(frozen=True)
class ScenarioConfig:
    racks: int = 8
    boot_ms: int = 5000
    stagger_ms: int = power.DEFAULT_STAGGER_MS
    overload_window_ms: int | None = None  # defaults to stagger_ms
    agent_port: int = 4231
    sample_period_ms: int = 100
    idle_ma: int = 500
    busy_ma: int = 900
    boot_ma: int = 1200
    bus_mv: int = 5000
    noise_ma: int = 0
    seed: int = 0
    relay_pins: tuple[int, ...] = power.DEFAULT_RELAY_PINS
    subnet: str = "192.168"
    node_overrides: dict[str, dict[str, int]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not 1 <= self.racks <= 255:
            raise ValueError("racks must be in 1..255")
        if len(self.relay_pins) != power.RELAYS_PER_BANK:
            raise ValueError(f"need {power.RELAYS_PER_BANK} relay pins")

    @property
    def window_us(self) -> int:
        window_ms = (
            self.overload_window_ms
            if self.overload_window_ms is not None
            else self.stagger_ms
        )
        return window_ms * 1000


_SCENARIO_INT_KEYS = {
    "racks", "boot_ms", "stagger_ms", "overload_window_ms", "agent_port",
    "sample_period_ms", "idle_ma", "busy_ma", "boot_ma", "bus_mv",
    "noise_ma", "seed",
}
_NODE_OVERRIDE_KEYS = {"idle_ma", "busy_ma", "boot_ma", "bus_mv"}


def parse_scenario(text: str) -> ScenarioConfig:
    """Flat key=value scenario file; node.<address>.<key>= overrides one node."""
    fields: dict[str, object] = {}
    overrides: dict[str, dict[str, int]] = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep:
            raise SimError(f"scenario line {line_no}: expected key=value, got {raw!r}")
        if key.startswith("node."):
            parts = key.split(".")
            address, okey = ".".join(parts[1:-1]), parts[-1]
            if okey not in _NODE_OVERRIDE_KEYS:
                raise SimError(f"scenario line {line_no}: unknown override {okey!r}")
            overrides.setdefault(address, {})[okey] = int(value)
        elif key in _SCENARIO_INT_KEYS:
            fields[key] = int(value)
        elif key == "subnet":
            fields[key] = value
        elif key == "relay_pins":
            fields[key] = tuple(int(p) for p in value.split(","))
        else:
            raise SimError(f"scenario line {line_no}: unknown key {key!r}")
    return ScenarioConfig(node_overrides=overrides, **fields)


@dataclass
class BootService:
    unit: str
    exec_command: str
    log_path: str


@dataclass
class SimNode:
    node_id: int
    address: str
    rack_id: int
    is_control: bool
    idle_ma: int
    busy_ma: int
    boot_ma: int
    bus_mv: int
    power: NodeState = NodeState.OFF
    busy: bool = False
    on_since_us: int | None = None
    fs: dict[str, bytes] = field(default_factory=dict)
    boot_services: list[BootService] = field(default_factory=list)
    _boot_handle: EventHandle | None = None


class PowerSupply:
    """Per-rack supply: at most one relay switch per overload window."""

    def __init__(self, rack_id: int, window_us: int) -> None:
        self.rack_id = rack_id
        self.window_us = window_us
        self.last_switch_us: int | None = None
        self.switch_count = 0
        self.fault = False

    def record_switch(self, now_us: int) -> bool:
        """Record an effective switch. Returns True when this switch trips the
        fault; raises SupplyFault when the fault was already latched."""
        if self.fault:
            raise SupplyFault(f"rack {self.rack_id} supply fault latched")
        tripped = (
            self.last_switch_us is not None
            and now_us - self.last_switch_us < self.window_us
        )
        self.last_switch_us = now_us
        self.switch_count += 1
        if tripped:
            self.fault = True
        return tripped


@dataclass
class Rack:
    rack_id: int
    control: SimNode
    workers: list[SimNode]
    bank: power.RelayBank
    supply: PowerSupply
    mains: bool = False


class TestbedGpioDriver:
    """GpioDriver facade for one control node's bank."""

    def __init__(self, testbed: "SimTestbed", control_address: str) -> None:
        self._testbed = testbed
        self._control = control_address

    def write(self, pin: int, level: power.Level) -> None:
        self._testbed.gpio_write(self._control, pin, level)

    def read(self, pin: int) -> power.Level:
        return self._testbed.gpio_read(self._control, pin)


class _NodeSensorDriver:
    """SensorDriver over the node's simulated current profile."""

    def __init__(self, testbed: "SimTestbed", node: SimNode) -> None:
        self._testbed = testbed
        self._node = node

    def init(self) -> None:
        pass

    def read(self) -> SensorReading:
        uA, mV = self._testbed.sim_current(self._node.address)
        return SensorReading(uA, mV, self._testbed.node_clock_us(self._node))


class _BlockingSimClock:
    """Clock adapter for callers outside the event loop: sleeping advances."""

    def __init__(self, testbed: "SimTestbed") -> None:
        self._testbed = testbed

    def now_us(self) -> int:
        return self._testbed.scheduler.now_us()

    def sleep_us(self, dt_us: int) -> None:
        if dt_us > 0:
            self._testbed.advance(dt_us)


class _LockedNetwork:
    """Dial/close shim taking the testbed lock, for off-loop collector threads."""

    def __init__(self, testbed: "SimTestbed") -> None:
        self._testbed = testbed

    def dial(self, address: str, port: int, receiver, on_close=None):
        with self._testbed.lock:
            conn = self._testbed.network.dial(address, port, receiver, on_close)
        return _LockedConnection(self._testbed, conn)


class _LockedConnection:
    def __init__(self, testbed: "SimTestbed", conn: SimConnection) -> None:
        self._testbed = testbed
        self._conn = conn

    def send(self, data: bytes) -> None:
        with self._testbed.lock:
            self._conn.send(data)

    def close(self) -> None:
        with self._testbed.lock:
            self._conn.close()


class SimTransport:
    """Orchestrator transport into one simulated node.

    copy() writes the node's in-memory fs; exec() runs the command through the
    simulated shell as a virtual-time process and blocks the calling thread
    until it completes. Each instance serializes against the testbed lock, so
    any number of orchestrator workers may hold transports concurrently.
    """

    def __init__(self, testbed: "SimTestbed", address: str) -> None:
        self._testbed = testbed
        self.address = address
        with testbed.lock:
            node = testbed.node(address)
            if node.power is not NodeState.ON:
                raise TransportConnectFailure(f"{address} is {node.power.value}")

    def _node(self) -> SimNode:
        node = self._testbed.node(self.address)
        if node.power is not NodeState.ON:
            raise TransportConnectFailure(f"{self.address} went {node.power.value}")
        return node

    def copy(self, data: bytes, dest: str) -> None:
        with self._testbed.lock:
            self._node().fs[dest] = bytes(data)

    def exec(self, command: str, privileged: bool = False) -> ExecResult:
        with self._testbed.lock:
            node = self._node()
            gen = self._testbed.run_command(node, command, privileged)
            return self._testbed.run_process(gen, COMMAND_TIMEOUT_US)

    def close(self) -> None:
        pass


def worker_address(subnet: str, rack: int, idx: int) -> str:
    return f"{subnet}.{rack}.{idx}"


def control_address(subnet: str, rack: int) -> str:
    return f"{subnet}.{rack}.{CONTROL_OCTET}"


class SimTestbed:
    def __init__(self, config: ScenarioConfig | None = None) -> None:
        self.config = config or ScenarioConfig()
        self.lock = threading.RLock()
        self._build()

    def _build(self) -> None:
        cfg = self.config
        self.scheduler = Scheduler()
        self.trace: list[str] = []
        self._subscribers: list[Callable[[dict], None]] = []
        self.racks: dict[int, Rack] = {}
        self._nodes: dict[str, SimNode] = {}

        for rack_id in range(1, cfg.racks + 1):
            control = self._make_node(rack_id, CONTROL_OCTET, is_control=True)
            workers = [
                self._make_node(rack_id, idx, is_control=False)
                for idx in range(1, WORKERS_PER_RACK + 1)
            ]
            relays = [
                power.Relay(
                    relay_id=rid,
                    gpio_pin=cfg.relay_pins[rid],
                    powered_nodes=[
                        w.address
                        for w in workers[rid * WORKERS_PER_RELAY : (rid + 1) * WORKERS_PER_RELAY]
                    ],
                )
                for rid in range(power.RELAYS_PER_BANK)
            ]
            bank = power.RelayBank(control_node_id=control.address, relays=relays)
            supply = PowerSupply(rack_id, cfg.window_us)
            self.racks[rack_id] = Rack(rack_id, control, workers, bank, supply)
            for node in [control, *workers]:
                self._nodes[node.address] = node

        self.links = linkshape.LinkTable(self._nodes)
        self.network = SimNetwork(self.scheduler, self._delay_for)

    def _make_node(self, rack_id: int, octet: int, is_control: bool) -> SimNode:
        cfg = self.config
        address = f"{cfg.subnet}.{rack_id}.{octet}"
        profile = {
            "idle_ma": cfg.idle_ma,
            "busy_ma": cfg.busy_ma,
            "boot_ma": cfg.boot_ma,
            "bus_mv": cfg.bus_mv,
        }
        profile.update(cfg.node_overrides.get(address, {}))
        return SimNode(
            node_id=rack_id * 100 + octet,
            address=address,
            rack_id=rack_id,
            is_control=is_control,
            **profile,
        )

    def _delay_for(self, address: str) -> int:
        try:
            return self.links.delay_us(address)
        except linkshape.UnknownNode:
            return 0

    def reset(self) -> None:
        """Back to pristine power-down state; clears latched supply faults."""
        with self.lock:
            self._build()

    # ------------------------------------------------------------- events

    def emit(self, kind: str, node: SimNode | None = None, **fields) -> None:
        now = self.scheduler.now_us()
        parts = [str(now), kind]
        if node is not None:
            parts.append(f"node={node.address}")
        parts += [f"{k}={v}" for k, v in fields.items()]
        self.trace.append(" ".join(parts))
        if self._subscribers:
            event = {"kind": kind, "timestamp_us": now, **fields}
            event["node"] = node.address if node is not None else None
            for fn in list(self._subscribers):
                fn(event)

    def subscribe(self, fn: Callable[[dict], None]) -> None:
        self._subscribers.append(fn)

    def advance(self, dt_us: int) -> list[str]:
        """Run dt_us of simulated time; returns the trace emitted in the window."""
        with self.lock:
            mark = len(self.trace)
            self.scheduler.advance(dt_us)
            return self.trace[mark:]

    def advance_until(self, predicate: Callable[[], bool], cap_us: int) -> bool:
        with self.lock:
            return self.scheduler.advance_until(predicate, cap_us)

    def run_process(self, gen, cap_us: int):
        """Spawn a generator process and advance until it completes."""
        with self.lock:
            handle = self.scheduler.spawn(gen)
            done = self.scheduler.advance_until(lambda: handle.done, cap_us)
            if not done:
                raise SimError("simulated process exceeded its time cap")
            if handle.error is not None:
                raise handle.error
            return handle.result

    def dump_trace(self) -> str:
        return "\n".join(self.trace) + ("\n" if self.trace else "")

    # ------------------------------------------------------------- lookups

    def node(self, address: str) -> SimNode:
        try:
            return self._nodes[address]
        except KeyError:
            raise linkshape.UnknownNode(f"no node {address!r}") from None

    def nodes(self) -> list[SimNode]:
        return list(self._nodes.values())

    def banks(self) -> dict[str, power.RelayBank]:
        return {r.bank.control_node_id: r.bank for r in self.racks.values()}

    def gpio_drivers(self) -> dict[str, TestbedGpioDriver]:
        return {
            r.bank.control_node_id: TestbedGpioDriver(self, r.bank.control_node_id)
            for r in self.racks.values()
        }

    def relays_for(self, addresses: Iterable[str]) -> list[tuple[str, int]]:
        """(bank, relay_id) pairs covering the given worker addresses.

        Power is relay-granular: a relay covering any requested worker is
        included, even if its other workers were not asked for.
        """
        wanted = set(addresses)
        out: list[tuple[str, int]] = []
        for rack in self.racks.values():
            for relay in rack.bank.relays:
                if wanted & set(relay.powered_nodes):
                    out.append((rack.bank.control_node_id, relay.relay_id))
        unknown = wanted - set(self._nodes)
        if unknown:
            raise linkshape.UnknownNode(f"addresses not in testbed: {sorted(unknown)}")
        return out

    def blocking_clock(self) -> Clock:
        return _BlockingSimClock(self)

    def collector_network(self) -> _LockedNetwork:
        return _LockedNetwork(self)

    def transport_factory(self) -> Callable[[object], SimTransport]:
        """Factory for the playbook runner; accepts a host entry or an address."""
        def factory(host: object) -> SimTransport:
            address = getattr(host, "address", host)
            return SimTransport(self, str(address))
        return factory

    def node_clock_us(self, node: SimNode) -> int:
        """Node-local agent clock: microseconds since its last boot completed."""
        return self.scheduler.now_us() - (node.on_since_us or 0)

    # ------------------------------------------------------------- power

    def set_mains(self, rack_id: int, on: bool) -> None:
        """Plug in / unplug a whole rack."""
        with self.lock:
            rack = self.racks[rack_id]
            if rack.mains == on:
                return
            rack.mains = on
            self.emit("mains", rack=rack_id, state="on" if on else "off")
            if on:
                self._power_up(rack.control)
                for relay in rack.bank.relays:
                    if relay.state is power.Switch.ON:
                        for addr in relay.powered_nodes:
                            self._power_up(self._nodes[addr])
            else:
                for node in [rack.control, *rack.workers]:
                    self._power_down(node)

    def set_all_mains(self, on: bool) -> None:
        for rack_id in self.racks:
            self.set_mains(rack_id, on)

    def switch_relay(self, bank_id: str, relay_id: int, target: power.Switch) -> bool:
        """Switch one relay. No-op requests (already in target state) return
        False without touching the supply. Raises SupplyFault when the rack
        supply has a latched fault."""
        with self.lock:
            rack = self._rack_for_bank(bank_id)
            relay = rack.bank.relay(relay_id)
            if relay.state is target:
                return False
            tripped = rack.supply.record_switch(self.scheduler.now_us())
            relay.state = target
            self.emit(
                "relay-switch", rack=rack.rack_id, relay=relay_id, target=target.value
            )
            if tripped:
                self.emit("supply-fault", rack=rack.rack_id)
            if rack.mains:
                for addr in relay.powered_nodes:
                    if target is power.Switch.ON:
                        self._power_up(self._nodes[addr])
                    else:
                        self._power_down(self._nodes[addr])
            return True

    def _rack_for_bank(self, bank_id: str) -> Rack:
        for rack in self.racks.values():
            if rack.bank.control_node_id == bank_id:
                return rack
        raise power.UnknownRelay(f"no bank {bank_id!r}")

    def gpio_write(self, control_addr: str, pin: int, level: power.Level) -> None:
        try:
            relay_id = self.config.relay_pins.index(pin)
        except ValueError:
            raise power.DriverFault(f"no relay on pin {pin}") from None
        target = power.Switch.ON if level is power.Level.HIGH else power.Switch.OFF
        self.switch_relay(control_addr, relay_id, target)

    def gpio_read(self, control_addr: str, pin: int) -> power.Level:
        rack = self._rack_for_bank(control_addr)
        try:
            relay_id = self.config.relay_pins.index(pin)
        except ValueError:
            raise power.DriverFault(f"no relay on pin {pin}") from None
        state = rack.bank.relay(relay_id).state
        return power.Level.HIGH if state is power.Switch.ON else power.Level.LOW

    def _power_up(self, node: SimNode) -> None:
        if node.power is not NodeState.OFF:
            return
        node.power = NodeState.BOOTING
        node.busy = False
        self.emit("power-up", node=node)
        boot_us = self.config.boot_ms * 1000

        def boot_complete() -> None:
            node.power = NodeState.ON
            node.on_since_us = self.scheduler.now_us()
            node._boot_handle = None
            self.emit("boot-complete", node=node)
            self._register_agent(node)
            for svc in list(node.boot_services):
                self.emit("service-start", node=node, unit=svc.unit)
                gen = self.run_command(node, svc.exec_command, privileged=True)
                self.scheduler.spawn(gen)

        node._boot_handle = self.scheduler.call_after(boot_us, boot_complete)

    def _power_down(self, node: SimNode) -> None:
        if node.power is NodeState.OFF:
            return
        if node._boot_handle is not None:
            node._boot_handle.cancel()
            node._boot_handle = None
        node.power = NodeState.OFF
        node.busy = False
        node.on_since_us = None
        self.network.unlisten(node.address, self.config.agent_port)
        self.network.close_all_for(node.address)
        self.emit("power-down", node=node)

    # ------------------------------------------------------------- telemetry

    def sim_current(self, address: str) -> tuple[int, int]:
        """Instantaneous (current_uA, bus_mV) for a node."""
        node = self.node(address)
        if node.power is NodeState.OFF:
            return 0, 0
        if node.power is NodeState.BOOTING:
            ma = node.boot_ma
        else:
            ma = node.busy_ma if node.busy else node.idle_ma
        uA = ma * 1000
        if self.config.noise_ma > 0:
            uA += self._noise_uA(node)
        return uA, node.bus_mv

    def _noise_uA(self, node: SimNode) -> int:
        # stateless hash noise: identical for a given (seed, node, timestamp)
        # regardless of event ordering, so traces stay reproducible
        span = self.config.noise_ma * 1000
        key = f"{self.config.seed}:{node.node_id}:{self.scheduler.now_us()}".encode()
        h = int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")
        return h % (2 * span + 1) - span

    def _register_agent(self, node: SimNode) -> None:
        port = self.config.agent_port

        def on_connect(conn: SimConnection) -> None:
            self._serve_agent(node, conn)

        self.network.listen(node.address, port, on_connect)

    def _serve_agent(self, node: SimNode, conn: SimConnection) -> None:
        stream = AgentStream(
            node.node_id, self.config.sample_period_ms, _NodeSensorDriver(self, node)
        )
        conn.send(stream.hello_bytes())
        period_us = self.config.sample_period_ms * 1000

        def pump():
            while node.power is NodeState.ON and not conn.closed:
                conn.send(stream.sample_bytes(self.node_clock_us(node)))
                yield period_us

        self.scheduler.spawn(pump())

    # ------------------------------------------------------------- commands

    def run_command(self, node: SimNode, command: str, privileged: bool):
        """Parse and dispatch one shell command; returns a process generator
        whose value is an ExecResult."""
        try:
            argv = shlex.split(command)
        except ValueError as exc:
            return _immediate(ExecResult(2, "", f"parse error: {exc}"))
        if not argv:
            return _immediate(ExecResult(0, "", ""))
        handler = _COMMANDS.get(argv[0])
        if handler is None:
            return _immediate(ExecResult(127, "", f"{argv[0]}: command not found"))
        return handler(self, node, argv, privileged)


def _immediate(result: ExecResult):
    return _gen_return(result)


def _gen_return(result: ExecResult):
    if False:
        yield 0
    return result


# --- simulated shell vocabulary ------------------------------------------

def _cmd_true(tb: SimTestbed, node: SimNode, argv: list[str], privileged: bool):
    return _gen_return(ExecResult(0, "", ""))


def _cmd_false(tb: SimTestbed, node: SimNode, argv: list[str], privileged: bool):
    return _gen_return(ExecResult(1, "", ""))


def _cmd_echo(tb: SimTestbed, node: SimNode, argv: list[str], privileged: bool):
    return _gen_return(ExecResult(0, " ".join(argv[1:]) + "\n", ""))


def _cmd_sleep(tb: SimTestbed, node: SimNode, argv: list[str], privileged: bool):
    def gen():
        try:
            seconds = float(argv[1])
        except (IndexError, ValueError):
            return ExecResult(2, "", "sleep: bad operand")
        yield int(seconds * 1_000_000)
        return ExecResult(0, "", "")

    return gen()


def _cmd_link(tb: SimTestbed, node: SimNode, argv: list[str], privileged: bool):
    def gen():
        if not privileged:
            return ExecResult(1, "", "link: permission denied")
        if len(argv) >= 2 and argv[1] == "reset":
            removed = tb.links.reset(node.address)
            tb.emit("link-reset", node=node)
            yield 0
            return ExecResult(0, f"reset (was delay={removed.delay_ms}ms)\n", "")
        if len(argv) == 4 and argv[1] == "set":
            try:
                cfg = linkshape.LinkConfig(
                    delay_ms=int(argv[2]), rate_kbit=linkshape.parse_rate(argv[3])
                )
            except ValueError as exc:
                return ExecResult(2, "", f"link set: {exc}")
            tb.links.apply(node.address, cfg)
            tb.emit(
                "link-set", node=node, delay_ms=cfg.delay_ms,
                rate_kbit=linkshape.format_rate(cfg.rate_kbit),
            )
            yield 0
            return ExecResult(0, "", "")
        return ExecResult(2, "", "usage: link set <delay_ms> <rate_kbit|unlimited> | link reset")

    return gen()


_WORKLOAD_DATA_DIR = "/var/lib/workload/"
_UNIT_DIR = "/etc/init/"


def _cmd_workload(tb: SimTestbed, node: SimNode, argv: list[str], privileged: bool):
    def gen():
        if len(argv) < 2:
            return ExecResult(2, "", "usage: workload start|stop|purge")
        action = argv[1]
        if action == "start":
            name = argv[2] if len(argv) > 2 else "default"
            node.busy = True
            node.fs[f"{_WORKLOAD_DATA_DIR}{name}.data"] = b"workload content\n"
            tb.emit("workload-start", node=node, name=name)
            yield 0
            return ExecResult(0, "", "")
        if action == "stop":
            node.busy = False
            tb.emit("workload-stop", node=node)
            yield 0
            return ExecResult(0, "", "")
        if action == "purge":
            node.busy = False
            for path in [p for p in node.fs if p.startswith(_WORKLOAD_DATA_DIR)]:
                del node.fs[path]
            for path in [p for p in node.fs if p.startswith(_UNIT_DIR)]:
                del node.fs[path]
            node.boot_services.clear()
            tb.emit("workload-purge", node=node)
            yield 0
            return ExecResult(0, "", "")
        return ExecResult(2, "", f"workload: unknown action {action!r}")

    return gen()


def _cmd_svc(tb: SimTestbed, node: SimNode, argv: list[str], privileged: bool):
    def gen():
        if not privileged:
            return ExecResult(1, "", "svc: permission denied")
        if len(argv) >= 3 and argv[1] == "remove":
            unit = argv[2]
            node.boot_services = [s for s in node.boot_services if s.unit != unit]
            node.fs.pop(f"{_UNIT_DIR}{unit}.service", None)
            yield 0
            return ExecResult(0, "", "")
        if len(argv) < 3 or argv[1] != "install":
            return ExecResult(2, "", "usage: svc install <unit> --log <path> --exec <cmd>")
        unit = argv[2]
        rest = argv[3:]
        log_path = f"/var/log/{unit}.log"
        exec_command = ""
        if "--log" in rest:
            log_path = rest[rest.index("--log") + 1]
        if "--exec" in rest:
            exec_command = " ".join(rest[rest.index("--exec") + 1 :])
        if not exec_command:
            return ExecResult(2, "", "svc install: missing --exec command")
        node.boot_services = [s for s in node.boot_services if s.unit != unit]
        svc = BootService(unit, exec_command, log_path)
        node.boot_services.append(svc)
        node.fs[f"{_UNIT_DIR}{unit}.service"] = (
            f"unit={unit}\nexec={exec_command}\nlog={log_path}\n".encode()
        )
        node.fs.setdefault(log_path, b"")
        tb.emit("service-install", node=node, unit=unit)
        yield 0
        # an already-running node starts the service right away
        if node.power is NodeState.ON:
            tb.emit("service-start", node=node, unit=unit)
            inner = tb.run_command(node, exec_command, privileged=True)
            tb.scheduler.spawn(inner)
        return ExecResult(0, "", "")

    return gen()


_GPIO_WRITE_RE = re.compile(r"^echo\s+([01])\s*>\s*/sys/class/gpio/gpio(\d+)/value$")
_SLEEP_RE = re.compile(r"^sleep\s+([0-9.]+)$")
_STDERR_ECHO_RE = re.compile(r'^echo\s+"(.*)"\s*>&2$')
_EXIT_RE = re.compile(r"^exit\s+(\d+)$")


def _script_branch(lines: list[str], arg: str | None) -> list[str] | None:
    """Extract the case-branch body for arg; None means no case structure."""
    if not any(line.strip().startswith("case ") for line in lines):
        return None
    label = f"{arg})" if arg is not None else None
    bodies: dict[str, list[str]] = {}
    current: str | None = None
    for line in lines:
        s = line.strip()
        if s.endswith(")") and not s.startswith("case"):
            current = s
            bodies[current] = []
        elif s == ";;":
            current = None
        elif current is not None:
            bodies[current].append(s)
    if label in bodies:
        return bodies[label]
    return bodies.get("*)", [])


def _cmd_bash(tb: SimTestbed, node: SimNode, argv: list[str], privileged: bool):
    """Interpret a copied shell script: gpio writes, sleeps, stderr echo, exit.

    Only the vocabulary render_gpio_script emits is understood; anything else
    in the script is ignored as structure.
    """

    def gen():
        if len(argv) < 2:
            return ExecResult(2, "", f"usage: {argv[0]} <script> [arg]")
        path = argv[1]
        arg = argv[2] if len(argv) > 2 else None
        data = node.fs.get(path)
        if data is None:
            return ExecResult(127, "", f"{argv[0]}: {path}: No such file or directory")
        lines = data.decode("utf-8", errors="replace").splitlines()
        body = _script_branch(lines, arg)
        if body is None:
            body = [line.strip() for line in lines]
        stdout_parts: list[str] = []
        stderr_parts: list[str] = []
        for line in body:
            if not line or line.startswith("#"):
                continue
            if m := _GPIO_WRITE_RE.match(line):
                if not privileged:
                    return ExecResult(1, "", f"{path}: gpio write: permission denied")
                value, pin = int(m.group(1)), int(m.group(2))
                level = power.Level.HIGH if value else power.Level.LOW
                try:
                    tb.gpio_write(node.address, pin, level)
                except (power.PowerControlError, SupplyFault) as exc:
                    return ExecResult(1, "".join(stdout_parts), str(exc))
                yield 0
                continue
            if m := _SLEEP_RE.match(line):
                yield int(float(m.group(1)) * 1_000_000)
                continue
            if m := _STDERR_ECHO_RE.match(line):
                stderr_parts.append(m.group(1) + "\n")
                continue
            if m := _EXIT_RE.match(line):
                return ExecResult(
                    int(m.group(1)), "".join(stdout_parts), "".join(stderr_parts)
                )
        return ExecResult(0, "".join(stdout_parts), "".join(stderr_parts))

    return gen()


_COMMANDS = {
    "true": _cmd_true,
    "false": _cmd_false,
    "echo": _cmd_echo,
    "sleep": _cmd_sleep,
    "link": _cmd_link,
    "workload": _cmd_workload,
    "svc": _cmd_svc,
    "bash": _cmd_bash,
    "sh": _cmd_bash,
}


def build_testbed(config: ScenarioConfig | None = None) -> SimTestbed:
    return SimTestbed(config)


def default_inventory_text(racks: int = 8, subnet: str = "192.168") -> str:
    """Inventory matching the simulated topology.

    Ships the classic three groups (rack 1's workers, a single consumer, the
    control nodes) plus a group covering every worker in every rack.
    """
    if racks < 1:
        raise ValueError("racks must be >= 1")
    rack_range = f"[1:{racks}]" if racks > 1 else "1"
    return f"""\
# {racks * WORKERS_PER_RACK + racks} node testbed: {racks} racks of {WORKERS_PER_RACK} workers plus a control node

[odroids-testgroup]
{subnet}.1.[1:{WORKERS_PER_RACK}] ssh_pass=odroid

[odroids-testgroup-consumer]
{subnet}.1.1 ssh_pass=odroid

[odroids-control]
{subnet}.{rack_range}.{CONTROL_OCTET}

[odroids-all-workers]
{subnet}.{rack_range}.[1:{WORKERS_PER_RACK}] ssh_pass=odroid
"""
