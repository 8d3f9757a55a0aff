"""Telemetry collection and energy accounting.

The collector dials every agent in an inventory group, records the samples it
receives into per-node series, and integrates power over time by the
trapezoidal rule: P_i = (current_uA * 1e-6) * (bus_mV * 1e-3) watts, energy in
joules. A node that refuses the dial is marked lost with an empty series; a
node that drops mid-run keeps its partial data. Out-of-order or duplicate-seq
samples are dropped and counted, never reordered.

Because nonzero link delay keeps the last samples in flight when the window
closes, run_collection waits a small grace period beyond the requested
duration and each series keeps exactly `duration` of agent-clock time from
its first sample; later arrivals are dropped with a counter.
"""

from __future__ import annotations

import csv
import enum
import logging
import socket
import threading
from dataclasses import dataclass, field
from typing import Callable, Mapping, Protocol

from rackbench import wire
from rackbench.clocks import Clock, RealClock
from rackbench.inventory import HostGroup

log = logging.getLogger(__name__)

DEFAULT_GRACE_S = 0.5

SERIES_CSV_HEADER = ["node_id", "timestamp_us", "current_uA", "bus_mV"]
REPORT_CSV_HEADER = ["node_id", "duration_s", "energy_J", "mean_power_W", "sample_count"]


class ConnectionState(enum.Enum):
    CONNECTED = "connected"
    LOST = "lost"


@dataclass(frozen=True)
class SamplePoint:
    timestamp_us: int
    current_uA: int
    bus_mV: int


@dataclass
class NodeSeries:
    """Append-only, strictly increasing timestamps."""

    address: str
    node_id: int | None = None
    samples: list[SamplePoint] = field(default_factory=list)
    state: ConnectionState = ConnectionState.CONNECTED
    dropped_out_of_order: int = 0
    dropped_after_window: int = 0
    error: str = ""
    window_us: int | None = None  # agent-clock span to keep, from first sample
    _last_seq: int = -1
    _window_end_us: int | None = None

    def append(self, sample: wire.Sample) -> bool:
        if sample.seq <= self._last_seq:
            self.dropped_out_of_order += 1
            return False
        if self.samples and sample.timestamp_us <= self.samples[-1].timestamp_us:
            self.dropped_out_of_order += 1
            return False
        if not self.samples and self.window_us is not None:
            self._window_end_us = sample.timestamp_us + self.window_us
        if self._window_end_us is not None and sample.timestamp_us > self._window_end_us:
            self.dropped_after_window += 1
            return False
        self._last_seq = sample.seq
        self.samples.append(
            SamplePoint(sample.timestamp_us, sample.current_uA, sample.bus_mV)
        )
        return True

    @property
    def label(self) -> str:
        return str(self.node_id) if self.node_id is not None else self.address


def power_w(point: SamplePoint) -> float:
    return (point.current_uA * 1e-6) * (point.bus_mV * 1e-3)


def integrate_energy(series: NodeSeries) -> float:
    """Trapezoidal energy in joules; fewer than 2 samples integrate to 0."""
    pts = series.samples
    if len(pts) < 2:
        return 0.0
    total = 0.0
    for a, b in zip(pts, pts[1:]):
        dt_s = (b.timestamp_us - a.timestamp_us) * 1e-6
        total += 0.5 * (power_w(a) + power_w(b)) * dt_s
    return total


@dataclass(frozen=True)
class NodeEnergy:
    node: str  # node_id when known, else the address
    duration_s: float
    energy_J: float
    mean_power_W: float
    sample_count: int
    warning: bool = False  # too few samples to integrate


@dataclass
class EnergyReport:
    rows: list[NodeEnergy] = field(default_factory=list)

    @property
    def total_energy_J(self) -> float:
        return sum(r.energy_J for r in self.rows)


def build_report(series_map: Mapping[str, NodeSeries]) -> EnergyReport:
    """One row per node; total is the exact sum of the rows."""
    rows = []
    for series in series_map.values():
        pts = series.samples
        duration_s = (
            (pts[-1].timestamp_us - pts[0].timestamp_us) * 1e-6 if len(pts) >= 2 else 0.0
        )
        energy = integrate_energy(series)
        rows.append(
            NodeEnergy(
                node=series.label,
                duration_s=duration_s,
                energy_J=energy,
                mean_power_W=energy / duration_s if duration_s > 0 else 0.0,
                sample_count=len(pts),
                warning=len(pts) < 2,
            )
        )
    rows.sort(key=lambda r: r.node)
    return EnergyReport(rows=rows)


class CollectorSession:
    """Decodes one connection's byte stream into a NodeSeries."""

    def __init__(self, series: NodeSeries) -> None:
        self.series = series
        self.decoder = wire.FrameDecoder()
        self.finished = False  # Bye seen or collector is closing
        self.failed = False

    def on_bytes(self, data: bytes) -> None:
        if self.failed:
            return
        try:
            self.decoder.feed(data)
            for msg in self.decoder:
                if isinstance(msg, wire.Hello):
                    self.series.node_id = msg.node_id
                elif isinstance(msg, wire.Sample):
                    if self.series.node_id is None:
                        self.series.node_id = msg.node_id
                    self.series.append(msg)
                elif isinstance(msg, wire.Bye):
                    self.finished = True
        except wire.WireError as exc:
            self.failed = True
            self.series.state = ConnectionState.LOST
            self.series.error = f"wire error: {exc}"

    def on_close(self) -> None:
        if not self.finished:
            self.series.state = ConnectionState.LOST
            self.series.error = self.series.error or "connection lost"


class Connection(Protocol):
    def close(self) -> None: ...


class Network(Protocol):
    """Dialer abstraction: the simulator and real TCP both provide this."""

    def dial(
        self,
        address: str,
        port: int,
        receiver: Callable[[bytes], None],
        on_close: Callable[[], None] | None = None,
    ) -> Connection: ...


def run_collection(
    group: HostGroup,
    port: int,
    duration_s: float,
    network: Network,
    clock: Clock,
    grace_s: float = DEFAULT_GRACE_S,
) -> dict[str, NodeSeries]:
    """Collect duration_s of telemetry from every host in the group.

    Returns address -> NodeSeries. Refused hosts come back LOST and empty;
    mid-run disconnects keep their partial series; duration 0 dials and closes
    immediately, leaving empty CONNECTED series.
    """
    window_us = max(0, int(duration_s * 1_000_000))
    series_map: dict[str, NodeSeries] = {}
    open_conns: list[tuple[Connection, CollectorSession]] = []
    closing = False

    for host in group.hosts:
        series = NodeSeries(address=host.address, window_us=window_us)
        series_map[host.address] = series
        session = CollectorSession(series)

        def on_close(session: CollectorSession = session) -> None:
            if not closing:
                session.on_close()

        try:
            conn = network.dial(host.address, port, session.on_bytes, on_close)
        except Exception as exc:
            series.state = ConnectionState.LOST
            series.error = str(exc) or type(exc).__name__
            continue
        open_conns.append((conn, session))

    if window_us > 0:
        clock.sleep_us(window_us + int(grace_s * 1_000_000))

    closing = True
    for conn, session in open_conns:
        session.finished = True
        conn.close()
    return series_map


class TcpNetwork:
    """Real-socket Network: one reader thread per dialled connection."""

    def __init__(self, connect_timeout_s: float = 2.0) -> None:
        self.connect_timeout_s = connect_timeout_s
        self._threads: list[threading.Thread] = []

    def dial(self, address, port, receiver, on_close=None):
        sock = socket.create_connection((address, port), timeout=self.connect_timeout_s)
        sock.settimeout(0.2)
        conn = _TcpConnection(sock)

        def reader() -> None:
            try:
                while not conn.closed:
                    try:
                        data = sock.recv(4096)
                    except socket.timeout:
                        continue
                    except OSError:
                        break
                    if not data:
                        break
                    receiver(data)
            finally:
                if not conn.closed and on_close is not None:
                    on_close()

        t = threading.Thread(target=reader, daemon=True)
        t.start()
        self._threads.append(t)
        return conn

    def join(self, timeout_s: float = 2.0) -> None:
        for t in self._threads:
            t.join(timeout=timeout_s)


class _TcpConnection:
    def __init__(self, sock: socket.socket) -> None:
        self._sock = sock
        self.closed = False

    def close(self) -> None:
        self.closed = True
        try:
            self._sock.close()
        except OSError:
            pass


def collect_over_tcp(
    group: HostGroup, port: int, duration_s: float, grace_s: float = DEFAULT_GRACE_S
) -> dict[str, NodeSeries]:
    network = TcpNetwork()
    result = run_collection(group, port, duration_s, network, RealClock(), grace_s)
    network.join()
    return result


# --- CSV export ------------------------------------------------------------

def export_series_csv(series_map: Mapping[str, NodeSeries], path: str) -> None:
    """All samples, sorted by node then timestamp."""
    ordered = sorted(series_map.values(), key=lambda s: s.label)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(SERIES_CSV_HEADER)
        for series in ordered:
            for p in series.samples:
                writer.writerow([series.label, p.timestamp_us, p.current_uA, p.bus_mV])


def export_report_csv(report: EnergyReport, path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_CSV_HEADER)
        for r in report.rows:
            writer.writerow(
                [r.node, repr(r.duration_s), repr(r.energy_J), repr(r.mean_power_W),
                 r.sample_count]
            )


def export_csv(obj, path: str) -> None:
    """Write either a series map or an EnergyReport, chosen by type."""
    if isinstance(obj, EnergyReport):
        export_report_csv(obj, path)
    else:
        export_series_csv(obj, path)


def read_series_csv(path: str) -> dict[str, NodeSeries]:
    """Re-import an exported series CSV (keyed by the node label column)."""
    out: dict[str, NodeSeries] = {}
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != SERIES_CSV_HEADER:
            raise ValueError(f"unexpected series CSV header: {header}")
        for row in reader:
            label, ts, current, bus = row
            series = out.setdefault(label, NodeSeries(address=label))
            try:
                series.node_id = int(label)
            except ValueError:
                pass
            series.samples.append(SamplePoint(int(ts), int(current), int(bus)))
    return out
