"""HTTP control plane: routes, plans, experiments, stream."""

import http.client
import json
import queue
import time

import pytest

from rackbench import power, service
from rackbench.experiment import ready_testbed
from rackbench.inventory import parse_inventory
from rackbench.service import ApiError, ControlPlane
from rackbench.sim.testbed import (
    NodeState,
    ScenarioConfig,
    SimTestbed,
    default_inventory_text,
)


@pytest.fixture(autouse=True)
def clean_bank_tokens():
    # plans hold module-global bank tokens; never leak them across tests
    yield
    with power._token_lock:
        power._active_banks.clear()


def quick_plane(racks=1, monitor=True, boot_ms=200, static_dir=None):
    tb = SimTestbed(ScenarioConfig(racks=racks, boot_ms=boot_ms))
    inv = parse_inventory(default_inventory_text(racks=racks))
    return ControlPlane(tb, inv, monitor=monitor, static_dir=static_dir)


WORKERS = [f"192.168.1.{i}" for i in range(1, 17)]


# --- node views --------------------------------------------------------------------

def test_nodes_json_fresh_testbed_all_off(full_inventory, testbed):
    plane = ControlPlane(testbed, full_inventory, monitor=False)
    out = plane.nodes_json()
    assert len(out["nodes"]) == 136
    assert all(n["power"] == "off" for n in out["nodes"])
    ids = [n["node_id"] for n in out["nodes"]]
    assert ids == sorted(ids)
    assert out["nodes"][0]["node_id"] == 101


def test_nodes_json_group_filter(full_inventory, testbed):
    plane = ControlPlane(testbed, full_inventory, monitor=False)
    out = plane.nodes_json(group="odroids-control")
    assert [n["node_id"] for n in out["nodes"]] == [
        142, 242, 342, 442, 542, 642, 742, 842,
    ]
    with pytest.raises(ApiError) as err:
        plane.nodes_json(group="ghost")
    assert err.value.status == 404


def test_node_json_by_id_and_address(full_inventory, testbed):
    plane = ControlPlane(testbed, full_inventory, monitor=False)
    assert plane.node_json("101")["address"] == "192.168.1.1"
    assert plane.node_json("192.168.1.42")["role"] == "control"
    for key in ("999", "192.168.9.1"):
        with pytest.raises(ApiError) as err:
            plane.node_json(key)
        assert err.value.status == 404


def test_node_status_shape(full_inventory, testbed):
    plane = ControlPlane(testbed, full_inventory, monitor=False)
    status = plane.node_json("101")
    assert set(status) == {
        "node_id", "address", "rack", "role", "power", "busy", "connection",
        "current_uA", "bus_mV", "last_sample_us", "link",
    }
    assert status["connection"] == "disconnected"
    assert status["current_uA"] == 0 and status["last_sample_us"] is None
    assert status["link"] == {"delay_ms": 0, "rate_kbit": None}


# --- power plans -------------------------------------------------------------------

def test_group_power_plan_runs_async():
    plane = quick_plane()
    tb = plane.testbed
    ready_testbed(tb)

    resp = plane.start_power({"group": "odroids-testgroup", "state": "on"})
    assert resp["transitions"] == 4
    assert resp["duration_ms"] == 1500
    assert resp["banks"] == ["192.168.1.42"]

    plan_id = resp["plan_id"]
    assert plane.plan_json(plan_id)["state"] == "running"  # nothing advanced yet

    tb.advance(1_500_001)
    status = plane.plan_json(plan_id)
    assert status["state"] == "done"
    assert status["applied"] == 4
    assert [r["status"] for r in status["results"]] == ["ok"] * 4
    assert [r["planned_at_ms"] for r in status["results"]] == [0, 500, 1000, 1500]

    tb.advance(tb.config.boot_ms * 1000 + 1000)
    assert all(tb.node(a).power is NodeState.ON for a in WORKERS)


def test_bank_power_single_relay():
    plane = quick_plane()
    tb = plane.testbed
    ready_testbed(tb)
    resp = plane.start_power({"bank": "192.168.1.42", "relay_id": 2, "state": "on"})
    assert resp["transitions"] == 1
    tb.advance(1000)
    assert tb.banks()["192.168.1.42"].relays[2].state is power.Switch.ON
    assert tb.node("192.168.1.9").power is NodeState.BOOTING
    assert tb.node("192.168.1.1").power is NodeState.OFF


@pytest.mark.parametrize(
    "payload,status",
    [
        ({"group": "odroids-testgroup", "state": "maybe"}, 400),
        ({"state": "on"}, 400),
        ({"group": "ghost", "state": "on"}, 404),
        ({"bank": "10.9.9.9", "state": "on"}, 404),
        ({"group": "odroids-control", "state": "on"}, 400),  # mains-powered
        ({"group": "odroids-testgroup", "state": "on", "stagger_ms": 0}, 400),
    ],
)
def test_start_power_validation(payload, status):
    plane = quick_plane()
    ready_testbed(plane.testbed)
    with pytest.raises(ApiError) as err:
        plane.start_power(payload)
    assert err.value.status == status


def test_conflicting_plan_409_until_done():
    plane = quick_plane()
    tb = plane.testbed
    ready_testbed(tb)

    first = plane.start_power({"group": "odroids-testgroup", "state": "on"})
    # the first plan holds the bank token while its transitions are pending
    with pytest.raises(ApiError) as err:
        plane.start_power({"group": "odroids-testgroup", "state": "on"})
    assert err.value.status == 409

    tb.advance(1_500_001)
    assert plane.plan_json(first["plan_id"])["state"] == "done"
    tb.advance(tb.config.window_us)  # keep the next plan clear of the supply window

    second = plane.start_power({"group": "odroids-testgroup", "state": "off"})
    tb.advance(1_500_001)
    assert plane.plan_json(second["plan_id"])["state"] == "done"
    assert all(tb.node(a).power is NodeState.OFF for a in WORKERS)


def test_noop_plan_settles_immediately():
    plane = quick_plane()
    ready_testbed(plane.testbed)
    resp = plane.start_power({"group": "odroids-testgroup", "state": "off"})
    assert resp["transitions"] == 0  # relays already off
    assert plane.plan_json(resp["plan_id"])["state"] == "done"
    # and it held no tokens, so a real plan can start right away
    plane.start_power({"group": "odroids-testgroup", "state": "on"})


def test_plan_json_unknown_404():
    plane = quick_plane(monitor=False)
    with pytest.raises(ApiError) as err:
        plane.plan_json("nope")
    assert err.value.status == 404


# --- playbooks ---------------------------------------------------------------------

def test_run_playbook_builtin_end_to_end():
    plane = quick_plane()
    tb = plane.testbed
    ready_testbed(tb)
    out = plane.run_playbook(
        {"name": "odroids_power", "extra_vars": {"power": "on"}}
    )
    assert out["ok"] is True
    assert [r["status"] for r in out["results"]] == ["ok", "ok"]
    assert out["results"][0]["host"] == "192.168.1.42"
    bank = tb.banks()["192.168.1.42"]
    assert all(r.state is power.Switch.ON for r in bank.relays)


def test_run_playbook_source_and_errors():
    plane = quick_plane()
    ready_testbed(plane.testbed)

    out = plane.run_playbook({
        "source": (
            "- hosts: odroids-control\n"
            "  tasks:\n"
            "    - name: greet\n"
            "      shell: echo hi\n"
        ),
    })
    assert out["ok"] and out["results"][0]["stdout"] == "hi\n"

    cases = [
        ({"name": "ghost"}, 404),
        ({}, 400),
        ({"source": "- hosts: g\n"}, 400),  # no tasks
        ({"source": "- hosts: ghost\n  tasks:\n    - name: t\n      shell: true\n"}, 404),
    ]
    for payload, status in cases:
        with pytest.raises(ApiError) as err:
            plane.run_playbook(payload)
        assert err.value.status == status


# --- experiments -------------------------------------------------------------------

def wait_finished(plane, run_id, timeout_s=60):
    deadline = time.monotonic() + timeout_s
    while time.monotonic() < deadline:
        out = plane.experiment_json(run_id)
        if out["finished"]:
            return out
        time.sleep(0.01)
    raise AssertionError("experiment never finished")


def test_experiment_lifecycle_and_busy_group():
    plane = quick_plane()
    assert plane.experiments_json() == {"runs": []}

    resp = plane.start_experiment({"group": "odroids-testgroup", "duration_s": 0.3})
    run_id = resp["run_id"]

    with pytest.raises(ApiError) as err:  # same group: one live run at a time
        plane.start_experiment({"group": "odroids-testgroup", "duration_s": 0.3})
    assert err.value.status == 409

    out = wait_finished(plane, run_id)
    assert out["ok"] is True
    assert [p["status"] for p in out["phases"]] == ["ok"] * 5
    assert len(out["report"]) == 16
    assert out["total_energy_J"] == pytest.approx(16 * 0.3 * 2.5, rel=1e-2)
    for row in out["report"]:
        assert row["energy_J"] == pytest.approx(0.75, rel=1e-2)  # idle 2.5 W

    # the group frees up once the run finishes
    again = plane.start_experiment({"group": "odroids-testgroup", "duration_s": 0.2})
    wait_finished(plane, again["run_id"])
    assert len(plane.experiments_json()["runs"]) == 2


@pytest.mark.parametrize(
    "payload,status",
    [
        ({}, 400),
        ({"group": "ghost"}, 404),
        ({"group": "odroids-testgroup", "workload": "/missing.pb"}, 400),
        ({"group": "odroids-testgroup", "duration_s": "soon"}, 400),
        ({"group": "odroids-testgroup", "delay_ms": "lots"}, 400),
    ],
)
def test_start_experiment_validation(payload, status):
    plane = quick_plane(monitor=False)
    with pytest.raises(ApiError) as err:
        plane.start_experiment(payload)
    assert err.value.status == status


def test_experiment_json_unknown_404():
    plane = quick_plane(monitor=False)
    with pytest.raises(ApiError) as err:
        plane.experiment_json("nope")
    assert err.value.status == 404


# --- event hub ---------------------------------------------------------------------

def parse_lines(q):
    out = []
    while True:
        try:
            line = q.get_nowait()
        except queue.Empty:
            return out
        if line is not None:
            out.append(json.loads(line))


def test_sim_events_are_published():
    plane = quick_plane(monitor=False)
    tb = plane.testbed
    q = plane.hub.attach()

    tb.switch_relay("192.168.1.42", 1, power.Switch.ON)
    events = parse_lines(q)
    assert events[0]["kind"] == "relay-switch"
    assert events[0]["node_id"] is None
    assert events[0]["payload"]["relay"] == 1
    assert events[0]["payload"]["target"] == "on"

    tb.set_mains(1, True)
    kinds = [e["kind"] for e in parse_lines(q)]
    assert "mains" in kinds and "power-up" in kinds
    plane.hub.detach(q)


def test_power_up_events_carry_status():
    plane = quick_plane(monitor=False)
    q = plane.hub.attach()
    plane.testbed.set_mains(1, True)
    events = [e for e in parse_lines(q) if e["kind"] == "power-up"]
    control = [e for e in events if e["node_id"] == 142][0]
    assert control["payload"]["status"]["power"] == "booting"
    assert control["payload"]["status"]["address"] == "192.168.1.42"


def test_monitor_dials_booted_nodes():
    plane = quick_plane()  # monitor on
    tb = plane.testbed
    q = plane.hub.attach()
    ready_testbed(tb)
    tb.advance(1_000_000)  # a couple of monitor polls plus sample periods

    assert plane.monitor.connected("192.168.1.42")
    sample = plane.monitor.last_sample["192.168.1.42"]
    assert sample["current_uA"] == 500_000
    assert sample["bus_mV"] == 5000

    status = plane.node_json("142")
    assert status["connection"] == "connected"
    assert status["current_uA"] == 500_000

    kinds = [e["kind"] for e in parse_lines(q)]
    assert "sample" in kinds
    plane.hub.detach(q)


def test_monitor_forgets_depowered_nodes():
    plane = quick_plane()
    tb = plane.testbed
    ready_testbed(tb)
    tb.advance(1_000_000)
    assert plane.monitor.connected("192.168.1.42")
    tb.set_mains(1, False)
    assert not plane.monitor.connected("192.168.1.42")
    assert plane.node_json("142")["connection"] == "disconnected"


def test_snapshot_event_shape():
    plane = quick_plane(monitor=False)
    snap = plane.snapshot_event()
    assert snap["kind"] == "snapshot"
    assert snap["node_id"] is None
    assert len(snap["payload"]["nodes"]) == 17


def test_stop_wakes_stream_clients():
    plane = quick_plane(monitor=False)
    q = plane.hub.attach()
    assert plane.running
    plane.stop()
    assert not plane.running
    assert q.get_nowait() is None  # wake sentinel


# --- over real HTTP ----------------------------------------------------------------

def request(port, method, path, body=None):
    conn = http.client.HTTPConnection("127.0.0.1", port, timeout=10)
    try:
        data = None
        headers = {}
        if body is not None:
            data = body if isinstance(body, bytes) else json.dumps(body).encode()
            headers["Content-Type"] = "application/json"
        conn.request(method, path, data, headers)
        resp = conn.getresponse()
        raw = resp.read()
        parsed = json.loads(raw) if raw.strip().startswith((b"{", b"[")) else raw
        return resp.status, parsed
    finally:
        conn.close()


@pytest.fixture
def served():
    plane = quick_plane()
    host, port = plane.serve(port=0, real_time=False)
    yield plane, port
    plane.stop()


def test_http_root_and_nodes(served):
    plane, port = served
    status, out = request(port, "GET", "/")
    assert status == 200 and out["service"] == "rackbench"

    status, out = request(port, "GET", "/nodes")
    assert status == 200 and len(out["nodes"]) == 17

    status, out = request(port, "GET", "/nodes/142")
    assert status == 200 and out["role"] == "control"

    status, out = request(port, "GET", "/nodes/999")
    assert status == 404 and "error" in out

    status, out = request(port, "GET", "/playbooks")
    assert status == 200
    assert out["playbooks"] == [
        "experiment_reset", "link_setup", "odroids_power", "service_init",
    ]


def test_http_power_flow(served):
    plane, port = served
    ready_testbed(plane.testbed)

    status, out = request(
        port, "POST", "/power", {"group": "odroids-testgroup", "state": "on"}
    )
    assert status == 202
    plan_id = out["plan_id"]

    plane.testbed.advance(1_600_000)
    status, out = request(port, "GET", f"/power/{plan_id}")
    assert status == 200 and out["state"] == "done"

    plane.testbed.advance(300_000)
    status, out = request(port, "GET", "/nodes/101")
    assert out["power"] == "on"


def test_http_error_statuses(served):
    plane, port = served
    assert request(port, "GET", "/no/such/route")[0] == 404
    assert request(port, "POST", "/nodes", {})[0] == 404
    assert request(port, "POST", "/power", b"not json")[0] == 400
    assert request(port, "POST", "/power")[0] == 400  # no body
    status, out = request(port, "POST", "/experiments", {"group": "ghost"})
    assert status == 404


def test_http_stream_snapshot_events_ping(served, monkeypatch):
    monkeypatch.setattr(service, "STREAM_PING_S", 0.1)
    plane, port = served
    ready_testbed(plane.testbed)

    conn = http.client.HTTPConnection("127.0.0.1", port, timeout=5)
    try:
        conn.request("GET", "/stream")
        resp = conn.getresponse()
        assert resp.status == 200
        assert resp.getheader("Content-Type") == "application/x-ndjson"

        snapshot = json.loads(resp.readline())
        assert snapshot["kind"] == "snapshot"
        assert len(snapshot["payload"]["nodes"]) == 17

        # quiet line: the keepalive ping arrives on its own
        line = json.loads(resp.readline())
        assert line["kind"] == "ping"

        plane.start_power({"bank": "192.168.1.42", "relay_id": 0, "state": "on"})
        plane.testbed.advance(1000)
        kinds = set()
        while "relay-switch" not in kinds:
            kinds.add(json.loads(resp.readline())["kind"])
        assert "relay-switch" in kinds
    finally:
        conn.close()


def test_http_static_ui(tmp_path):
    static = tmp_path / "ui"
    static.mkdir()
    (static / "index.html").write_text("<h1>bench</h1>")
    (static / "app.js").write_text("console.log(1)")
    (tmp_path / "secret.txt").write_text("keep out")

    plane = quick_plane(monitor=False, static_dir=static)
    _, port = plane.serve(port=0, real_time=False)
    try:
        conn = http.client.HTTPConnection("127.0.0.1", port, timeout=5)
        conn.request("GET", "/")
        resp = conn.getresponse()
        resp.read()
        assert resp.status == 302 and resp.getheader("Location") == "/ui/"
        conn.close()

        status, body = request(port, "GET", "/ui/")
        assert status == 200 and body == b"<h1>bench</h1>"

        conn = http.client.HTTPConnection("127.0.0.1", port, timeout=5)
        conn.request("GET", "/ui/app.js")
        resp = conn.getresponse()
        assert resp.getheader("Content-Type") == "application/javascript"
        resp.read()
        conn.close()

        status, _ = request(port, "GET", "/ui/../secret.txt")
        assert status == 404  # traversal is rejected
        status, _ = request(port, "GET", "/ui/missing.html")
        assert status == 404
    finally:
        plane.stop()


def test_http_real_time_ticker_advances_sim():
    plane = quick_plane()
    _, port = plane.serve(port=0, real_time=True)
    try:
        before = plane.testbed.scheduler.now_us()
        time.sleep(0.3)
        after = plane.testbed.scheduler.now_us()
        assert after - before > 100_000  # the wall clock drags sim time along
    finally:
        plane.stop()
