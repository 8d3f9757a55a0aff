"""Telemetry agent tests over real TCP sockets."""

import socket
import time

import pytest

from rackbench.agent import (
    AgentConfig,
    AgentServer,
    AgentStream,
    BindFailure,
    ConstantDriver,
    SensorFault,
    SensorReading,
    parse_agent_config,
)
from rackbench.clocks import ManualClock, RealClock
from rackbench.collector import collect_over_tcp
from rackbench.inventory import HostEntry, HostGroup
from rackbench.wire import Bye, FrameDecoder, Hello, Sample


def start_agent(node_id=7, period_ms=100, driver=None):
    driver = driver or ConstantDriver(500_000, 5000, RealClock())
    server = AgentServer(
        AgentConfig(node_id=node_id, listen_port=0, sample_period_ms=period_ms),
        driver,
    )
    port = server.start()
    return server, port


def drain(port, seconds):
    """Read an agent connection for a while; returns decoded messages."""
    msgs = []
    decoder = FrameDecoder()
    with socket.create_connection(("127.0.0.1", port), timeout=2) as sock:
        sock.settimeout(0.1)
        deadline = time.monotonic() + seconds
        while time.monotonic() < deadline:
            try:
                data = sock.recv(4096)
            except socket.timeout:
                continue
            if not data:
                break
            decoder.feed(data)
            msgs.extend(decoder)
    return msgs


def test_hello_then_steady_samples():
    server, port = start_agent(node_id=9, period_ms=100)
    try:
        msgs = drain(port, 1.05)
    finally:
        server.shutdown()
    assert isinstance(msgs[0], Hello)
    assert msgs[0] == Hello(node_id=9, sample_period_ms=100)
    samples = [m for m in msgs if isinstance(m, Sample)]
    # first sample immediate, then one per 100 ms: 10-12 over ~1 s
    assert 9 <= len(samples) <= 12
    assert [s.seq for s in samples] == list(range(len(samples)))
    assert all(s.node_id == 9 for s in samples)
    assert all(s.current_uA == 500_000 and s.bus_mV == 5000 for s in samples)
    ts = [s.timestamp_us for s in samples]
    assert ts == sorted(ts)


def test_independent_connections_get_independent_seq():
    server, port = start_agent()
    try:
        a = drain(port, 0.35)
        b = drain(port, 0.35)
    finally:
        server.shutdown()
    for msgs in (a, b):
        samples = [m for m in msgs if isinstance(m, Sample)]
        assert samples[0].seq == 0  # seq restarts per connection


def test_bye_on_shutdown():
    server, port = start_agent(period_ms=50)
    msgs = []
    decoder = FrameDecoder()
    with socket.create_connection(("127.0.0.1", port), timeout=2) as sock:
        sock.settimeout(0.1)
        time.sleep(0.25)
        server.shutdown()
        deadline = time.monotonic() + 1.0
        while time.monotonic() < deadline:
            try:
                data = sock.recv(4096)
            except socket.timeout:
                continue
            if not data:
                break
            decoder.feed(data)
            msgs.extend(decoder)
    assert isinstance(msgs[-1], Bye)


class FaultyDriver:
    """Raises on every second read."""

    def __init__(self):
        self.calls = 0

    def init(self):
        pass

    def read(self):
        self.calls += 1
        if self.calls % 2 == 0:
            raise SensorFault("i2c timeout")
        return SensorReading(700_000, 5000, self.calls * 1000)


def test_sensor_fault_substitutes_zero_and_keeps_stream():
    stream = AgentStream(3, 100, FaultyDriver())
    decoder = FrameDecoder()
    for _ in range(4):
        decoder.feed(stream.sample_bytes(fallback_ts_us=999))
    samples = list(decoder)
    assert [s.seq for s in samples] == [0, 1, 2, 3]  # gapless despite faults
    assert samples[0].current_uA == 700_000
    assert samples[1].current_uA == 0 and samples[1].bus_mV == 0
    assert samples[1].timestamp_us == 999  # fallback clock
    assert samples[2].current_uA == 700_000


def test_collector_against_real_agent():
    server, port = start_agent(node_id=11, period_ms=100)
    try:
        group = HostGroup(name="g", hosts=[HostEntry(address="127.0.0.1")])
        series = collect_over_tcp(group, port, duration_s=1.0, grace_s=0.3)
    finally:
        server.shutdown()
    s = series["127.0.0.1"]
    assert s.node_id == 11
    assert 9 <= len(s.samples) <= 12
    assert s.dropped_out_of_order == 0


def test_bind_failure():
    blocker = socket.socket()
    blocker.bind(("127.0.0.1", 0))
    blocker.listen()
    port = blocker.getsockname()[1]
    try:
        server = AgentServer(
            AgentConfig(listen_port=port), ConstantDriver(0, 0, RealClock())
        )
        with pytest.raises(BindFailure):
            server.start()
    finally:
        blocker.close()


# --- config --------------------------------------------------------------------

def test_parse_agent_config():
    cfg = parse_agent_config(
        "# comment\nnode_id = 12\nport=5000\nperiod_ms = 250\ndriver=constant\n"
    )
    assert cfg.node_id == 12
    assert cfg.listen_port == 5000
    assert cfg.sample_period_ms == 250
    assert cfg.driver == "constant"


def test_parse_agent_config_overrides_base():
    base = AgentConfig(node_id=1, sample_period_ms=100)
    cfg = parse_agent_config("period_ms=50\n", base)
    assert cfg.node_id == 1 and cfg.sample_period_ms == 50


def test_parse_agent_config_rejects_unknown_key():
    from rackbench.agent import AgentError

    with pytest.raises(AgentError):
        parse_agent_config("nodeid=1\n")


def test_period_must_be_positive():
    with pytest.raises(ValueError):
        AgentConfig(sample_period_ms=0)


def test_manual_clock_driver_timestamps():
    clock = ManualClock()
    driver = ConstantDriver(100, 200, clock)
    stream = AgentStream(1, 100, driver)
    decoder = FrameDecoder()
    decoder.feed(stream.sample_bytes(0))
    clock.sleep_us(400_000)
    decoder.feed(stream.sample_bytes(0))
    first, second = list(decoder)
    assert second.timestamp_us - first.timestamp_us == 400_000
