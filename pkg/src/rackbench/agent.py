"""Per-node telemetry agent.

The agent listens; collectors dial in. Each accepted connection gets a Hello
frame, then one Sample per period (the first immediately), then a Bye on
graceful shutdown. Sequence numbers are per connection and gapless from 0.
A sensor read fault substitutes a zero-current sample and is logged; the
connection stays up. Connections are handled independently: one failing
never disturbs the others.

AgentStream is the transport-free core; AgentServer is its real-TCP shell.
The simulator drives the same AgentStream over its in-memory network.
"""

from __future__ import annotations

import logging
import socket
import threading
from dataclasses import dataclass, replace
from typing import Protocol

from rackbench import wire
from rackbench.clocks import Clock, RealClock

log = logging.getLogger(__name__)

DEFAULT_AGENT_PORT = 4231
DEFAULT_SAMPLE_PERIOD_MS = 100


class AgentError(Exception):
    pass


class BindFailure(AgentError):
    pass


class SensorFault(Exception):
    """Raised by SensorDriver.read when the underlying sensor misbehaves."""


@dataclass(frozen=True)
class SensorReading:
    current_uA: int
    bus_mV: int
    read_at_us: int


class SensorDriver(Protocol):
    def init(self) -> None: ...

    def read(self) -> SensorReading: ...


class ConstantDriver:
    """Fixed current/voltage; read_at_us follows the supplied clock."""

    def __init__(self, current_uA: int, bus_mV: int, clock: Clock) -> None:
        self.current_uA = current_uA
        self.bus_mV = bus_mV
        self._clock = clock

    def init(self) -> None:
        pass

    def read(self) -> SensorReading:
        return SensorReading(self.current_uA, self.bus_mV, self._clock.now_us())


@dataclass(frozen=True)
class AgentConfig:
    node_id: int = 0
    listen_port: int = DEFAULT_AGENT_PORT
    sample_period_ms: int = DEFAULT_SAMPLE_PERIOD_MS
    driver: str = "constant"

    def __post_init__(self) -> None:
        if self.sample_period_ms < 1:
            raise ValueError("sample_period_ms must be >= 1")


_CONFIG_KEYS = {
    "node_id": ("node_id", int),
    "port": ("listen_port", int),
    "period_ms": ("sample_period_ms", int),
    "driver": ("driver", str),
}


def parse_agent_config(text: str, base: AgentConfig | None = None) -> AgentConfig:
    """Flat key=value config file; '#' lines are comments, unknown keys error."""
    cfg = base or AgentConfig()
    updates: dict[str, object] = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or key not in _CONFIG_KEYS:
            raise AgentError(f"agent config line {line_no}: bad entry {raw!r}")
        field_name, conv = _CONFIG_KEYS[key]
        updates[field_name] = conv(value.strip())
    return replace(cfg, **updates)


class AgentStream:
    """Per-connection message source: hello, samples with gapless seq, bye."""

    def __init__(self, node_id: int, sample_period_ms: int, driver: SensorDriver) -> None:
        self.node_id = node_id
        self.sample_period_ms = sample_period_ms
        self.driver = driver
        self.seq = 0

    def hello_bytes(self) -> bytes:
        return wire.encode(wire.Hello(self.node_id, self.sample_period_ms))

    def sample_bytes(self, fallback_ts_us: int) -> bytes:
        try:
            reading = self.driver.read()
            ts = reading.read_at_us
            current, bus = reading.current_uA, reading.bus_mV
        except SensorFault as exc:
            log.warning("node %d sensor fault, substituting zero: %s", self.node_id, exc)
            ts, current, bus = fallback_ts_us, 0, 0
        frame = wire.encode(wire.Sample(self.node_id, self.seq, ts, current, bus))
        self.seq += 1
        return frame

    def bye_bytes(self) -> bytes:
        return wire.encode(wire.Bye())


class AgentServer:
    """Real-TCP agent: a listener thread plus one thread per connection."""

    def __init__(
        self,
        config: AgentConfig,
        driver: SensorDriver,
        clock: Clock | None = None,
        host: str = "127.0.0.1",
    ) -> None:
        self.config = config
        self.driver = driver
        self.clock = clock or RealClock()
        self.host = host
        self._stop = threading.Event()
        self._listener: socket.socket | None = None
        self._threads: list[threading.Thread] = []
        self.port: int | None = None

    def start(self) -> int:
        """Bind and start accepting. Returns the bound port."""
        self.driver.init()
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            sock.bind((self.host, self.config.listen_port))
        except OSError as exc:
            sock.close()
            raise BindFailure(f"cannot bind port {self.config.listen_port}: {exc}") from exc
        sock.listen()
        sock.settimeout(0.1)
        self._listener = sock
        self.port = sock.getsockname()[1]
        t = threading.Thread(target=self._accept_loop, name="agent-accept", daemon=True)
        t.start()
        self._threads.append(t)
        log.info("agent node %d listening on %s:%d", self.config.node_id, self.host, self.port)
        return self.port

    def _accept_loop(self) -> None:
        assert self._listener is not None
        while not self._stop.is_set():
            try:
                conn, addr = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            t = threading.Thread(
                target=self._serve_connection, args=(conn, addr), daemon=True
            )
            t.start()
            self._threads.append(t)

    def _serve_connection(self, conn: socket.socket, addr) -> None:
        stream = AgentStream(self.config.node_id, self.config.sample_period_ms, self.driver)
        period_us = self.config.sample_period_ms * 1000
        try:
            conn.sendall(stream.hello_bytes())
            next_at = self.clock.now_us()
            while not self._stop.is_set():
                conn.sendall(stream.sample_bytes(self.clock.now_us()))
                next_at += period_us
                wait = next_at - self.clock.now_us()
                if wait > 0:
                    if self._stop.wait(wait / 1_000_000):
                        break
            try:
                conn.sendall(stream.bye_bytes())
            except OSError:
                pass
        except OSError as exc:
            log.info("connection %s dropped: %s", addr, exc)
        finally:
            conn.close()

    def shutdown(self) -> None:
        """Send Bye on every open connection, then stop accepting."""
        self._stop.set()
        if self._listener is not None:
            self._listener.close()
        for t in self._threads:
            t.join(timeout=2.0)


def run_agent(config: AgentConfig, driver: SensorDriver) -> None:
    """Blocking agent entry point; Ctrl-C shuts down cleanly with Byes."""
    server = AgentServer(config, driver)
    server.start()
    try:
        while True:
            threading.Event().wait(3600)
    except KeyboardInterrupt:
        pass
    finally:
        server.shutdown()
