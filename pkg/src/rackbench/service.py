"""HTTP control plane over a simulated testbed.

Listens on localhost and exposes the testbed over plain JSON:

    GET  /nodes[?group=NAME]     all node statuses (or one group's)
    GET  /nodes/{id|address}     one node
    POST /power                  {"group","state"[,"stagger_ms"]} or
                                 {"bank","relay_id","state"} -> 202 + plan_id
    GET  /power/{plan_id}        transition plan progress
    GET  /playbooks              builtin playbook names
    POST /playbooks/run          {"name"|"source"[,"extra_vars","fork_limit"]}
    POST /experiments            spec fields -> 202 + run_id (409 while the
                                 group already has a live run)
    GET  /experiments[/{id}]     run status; report rows once collect finished
    GET  /stream                 line-delimited JSON event feed

The stream carries one JSON object per line, each with kind, node_id,
timestamp_us and payload. Kinds are the sim's own event names plus "snapshot"
(sent once on attach), "sample" (live telemetry via the monitor), "experiment"
(phase changes) and "ping" (keepalive). A monitor process inside the sim dials
every booted node's telemetry port, so node statuses carry the last observed
sample rather than a value read out of band.

Power plans run as simulated processes: the HTTP thread returns 202
immediately and the transitions fire as simulated time advances (the serve
loop's ticker in real-time mode, or explicit advance calls in tests).
"""

from __future__ import annotations

import json
import logging
import queue
import tempfile
import threading
import time
import uuid
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import parse_qs, urlsplit

from rackbench import experiment as exp
from rackbench import power
from rackbench.inventory import Inventory, UnknownGroup, resolve_group
from rackbench.linkshape import UnknownNode
from rackbench.playbook import (
    BUILTIN_SOURCES,
    PlaybookError,
    parse_playbook,
)
from rackbench.runner import execute_playbook
from rackbench.sim.testbed import NodeState, SimNode, SimTestbed
from rackbench.wire import FrameDecoder, Hello, Sample, WireError

log = logging.getLogger(__name__)

DEFAULT_HTTP_PORT = 8337
MONITOR_POLL_US = 500_000
STREAM_PING_S = 2.0


class ApiError(Exception):
    def __init__(self, status: int, message: str) -> None:
        super().__init__(message)
        self.status = status


def _json_line(obj) -> bytes:
    return json.dumps(obj, separators=(",", ":")).encode("utf-8") + b"\n"


class StreamHub:
    """Fan-out of event lines to attached stream clients."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._clients: list[queue.SimpleQueue] = []

    def attach(self) -> queue.SimpleQueue:
        q: queue.SimpleQueue = queue.SimpleQueue()
        with self._lock:
            self._clients.append(q)
        return q

    def detach(self, q: queue.SimpleQueue) -> None:
        with self._lock:
            try:
                self._clients.remove(q)
            except ValueError:
                pass

    def publish(self, obj) -> None:
        line = _json_line(obj)
        with self._lock:
            clients = list(self._clients)
        for q in clients:
            q.put(line)

    def wake_all(self) -> None:
        with self._lock:
            clients = list(self._clients)
        for q in clients:
            q.put(None)

    @property
    def client_count(self) -> int:
        with self._lock:
            return len(self._clients)


class NodeMonitor:
    """Keeps one telemetry connection per booted node, inside the sim loop.

    Dials a node's agent once it reaches On, records the newest sample, and
    forgets the connection when it drops (power-off closes it). Everything
    here runs as a scheduler process, so no locking beyond the testbed's own
    is needed.
    """

    def __init__(self, testbed: SimTestbed, publish) -> None:
        self._testbed = testbed
        self._publish = publish
        self._conns: dict[str, object] = {}
        self.last_sample: dict[str, dict] = {}
        with testbed.lock:
            testbed.scheduler.spawn(self._loop())

    def connected(self, address: str) -> bool:
        return address in self._conns

    def _loop(self):
        tb = self._testbed
        while True:
            for node in tb.nodes():
                if node.power is NodeState.ON and node.address not in self._conns:
                    self._dial(node)
            yield MONITOR_POLL_US

    def _dial(self, node: SimNode) -> None:
        tb = self._testbed
        decoder = FrameDecoder()
        address = node.address

        def on_data(data: bytes) -> None:
            try:
                decoder.feed(data)
                for msg in decoder:
                    if isinstance(msg, Sample):
                        self._record(node, msg)
                    elif isinstance(msg, Hello):
                        pass
            except WireError as exc:
                log.warning("monitor: bad frame from %s: %s", address, exc)
                conn = self._conns.pop(address, None)
                if conn is not None:
                    conn.close()

        def on_close() -> None:
            self._conns.pop(address, None)

        try:
            conn = tb.network.dial(address, tb.config.agent_port, on_data, on_close)
        except Exception as exc:
            log.debug("monitor: dial %s failed: %s", address, exc)
            return
        self._conns[address] = conn

    def _record(self, node: SimNode, msg: Sample) -> None:
        self.last_sample[node.address] = {
            "seq": msg.seq,
            "timestamp_us": msg.timestamp_us,
            "current_uA": msg.current_uA,
            "bus_mV": msg.bus_mV,
        }
        self._publish(
            {
                "kind": "sample",
                "node_id": node.node_id,
                "timestamp_us": self._testbed.scheduler.now_us(),
                "payload": self.last_sample[node.address],
            }
        )


class ControlPlane:
    """Route handlers and run registries; serving is optional (see serve())."""

    def __init__(
        self,
        testbed: SimTestbed,
        inv: Inventory,
        monitor: bool = True,
        static_dir: Path | str | None = None,
    ) -> None:
        self.testbed = testbed
        self.inv = inv
        self.hub = StreamHub()
        self.static_dir = Path(static_dir) if static_dir else None
        self._stopped = threading.Event()
        self._lock = threading.Lock()
        self._plans: dict[str, dict] = {}
        self._experiments: dict[str, exp.ExperimentRun] = {}
        self._experiment_threads: list[threading.Thread] = []
        self._server: ThreadingHTTPServer | None = None
        self._ticker: threading.Thread | None = None

        testbed.subscribe(self._on_sim_event)
        self.monitor = NodeMonitor(testbed, self.hub.publish) if monitor else None

    # ------------------------------------------------------------ events

    def _on_sim_event(self, event: dict) -> None:
        address = event.get("node")
        payload = {
            k: v for k, v in event.items() if k not in ("kind", "timestamp_us", "node")
        }
        node_id = None
        if address is not None:
            node = self.testbed.node(address)
            node_id = node.node_id
            payload["status"] = self.node_status(node)
        self.hub.publish(
            {
                "kind": event["kind"],
                "node_id": node_id,
                "timestamp_us": event["timestamp_us"],
                "payload": payload,
            }
        )

    def _publish_experiment(self, run: exp.ExperimentRun) -> None:
        self.hub.publish(
            {
                "kind": "experiment",
                "node_id": None,
                "timestamp_us": self.testbed.scheduler.now_us(),
                "payload": self.run_json(run),
            }
        )

    # ------------------------------------------------------------ statuses

    def node_status(self, node: SimNode) -> dict:
        link = self.testbed.links.get(node.address)
        sample = (
            self.monitor.last_sample.get(node.address, {}) if self.monitor else {}
        )
        connected = bool(self.monitor and self.monitor.connected(node.address))
        return {
            "node_id": node.node_id,
            "address": node.address,
            "rack": node.rack_id,
            "role": "control" if node.is_control else "worker",
            "power": node.power.value,
            "busy": node.busy,
            "connection": "connected" if connected else "disconnected",
            "current_uA": sample.get("current_uA", 0),
            "bus_mV": sample.get("bus_mV", 0),
            "last_sample_us": sample.get("timestamp_us"),
            "link": {"delay_ms": link.delay_ms, "rate_kbit": link.rate_kbit},
        }

    def nodes_json(self, group: str | None = None) -> dict:
        with self.testbed.lock:
            nodes = sorted(self.testbed.nodes(), key=lambda n: n.node_id)
            if group is not None:
                try:
                    wanted = {h.address for h in resolve_group(self.inv, group).hosts}
                except UnknownGroup as exc:
                    raise ApiError(404, str(exc)) from None
                nodes = [n for n in nodes if n.address in wanted]
            return {"nodes": [self.node_status(n) for n in nodes]}

    def node_json(self, key: str) -> dict:
        with self.testbed.lock:
            if key.isdigit():
                for node in self.testbed.nodes():
                    if node.node_id == int(key):
                        return self.node_status(node)
                raise ApiError(404, f"no node id {key}")
            try:
                return self.node_status(self.testbed.node(key))
            except UnknownNode as exc:
                raise ApiError(404, str(exc)) from None

    def snapshot_event(self) -> dict:
        return {
            "kind": "snapshot",
            "node_id": None,
            "timestamp_us": self.testbed.scheduler.now_us(),
            "payload": self.nodes_json(),
        }

    # ------------------------------------------------------------ power

    def start_power(self, payload: dict) -> dict:
        state = payload.get("state")
        if state not in ("on", "off"):
            raise ApiError(400, 'state must be "on" or "off"')
        target = power.Switch.ON if state == "on" else power.Switch.OFF
        stagger = payload.get("stagger_ms")
        try:
            with self.testbed.lock:
                if "group" in payload:
                    plan = exp.plan_group_power(
                        self.testbed, self.inv, payload["group"], target, stagger
                    )
                elif "bank" in payload:
                    requests = [
                        power.SwitchRequest(
                            payload["bank"], int(payload.get("relay_id", 0)), target
                        )
                    ]
                    plan = power.plan_switch(
                        self.testbed.banks(), requests,
                        self.testbed.config.stagger_ms if stagger is None else stagger,
                    )
                else:
                    raise ApiError(400, "need group or bank")
        except UnknownGroup as exc:
            raise ApiError(404, str(exc)) from None
        except power.UnknownRelay as exc:
            raise ApiError(404, str(exc)) from None
        except (exp.ExperimentError, power.PowerControlError, ValueError) as exc:
            raise ApiError(400, str(exc)) from None

        try:
            held = power.acquire_bank_tokens(plan.banks())
        except power.BankBusy as exc:
            raise ApiError(409, str(exc)) from None

        plan_id = uuid.uuid4().hex[:12]
        report = power.ExecutionReport()
        entry = {"plan": plan, "report": report, "state": "running"}
        with self._lock:
            self._plans[plan_id] = entry

        banks = self.testbed.banks()
        drivers = self.testbed.gpio_drivers()
        failed: set[str] = set()
        testbed = self.testbed

        def proc():
            try:
                for wait_us, tr in power.execution_steps(plan):
                    if wait_us > 0:
                        yield wait_us
                    power.apply_transition(
                        tr, banks, drivers, report, failed, testbed.scheduler.now_us()
                    )
                entry["state"] = "done" if report.ok else "failed"
            finally:
                power.release_bank_tokens(held)
                if entry["state"] == "running":
                    entry["state"] = "failed"

        with testbed.lock:
            testbed.scheduler.spawn(proc())
        if not plan.transitions:
            entry["state"] = "done"  # nothing to do; settle immediately
        return {
            "plan_id": plan_id,
            "transitions": len(plan.transitions),
            "duration_ms": plan.duration_ms,
            "banks": plan.banks(),
        }

    def plan_json(self, plan_id: str) -> dict:
        with self._lock:
            entry = self._plans.get(plan_id)
        if entry is None:
            raise ApiError(404, f"no plan {plan_id}")
        plan: power.TransitionPlan = entry["plan"]
        report: power.ExecutionReport = entry["report"]
        return {
            "plan_id": plan_id,
            "state": entry["state"],
            "transitions": len(plan.transitions),
            "applied": len(report.results),
            "results": [
                {
                    "bank": r.bank,
                    "relay_id": r.relay_id,
                    "target": r.target.value,
                    "planned_at_ms": r.planned_at_ms,
                    "status": r.status,
                    "error": r.error,
                }
                for r in report.results
            ],
        }

    # ------------------------------------------------------------ playbooks

    def run_playbook(self, payload: dict) -> dict:
        if "name" in payload:
            source = BUILTIN_SOURCES.get(payload["name"])
            if source is None:
                raise ApiError(404, f"no builtin playbook {payload['name']!r}")
        elif "source" in payload:
            source = payload["source"]
        else:
            raise ApiError(400, "need name or source")
        try:
            pb = parse_playbook(source)
        except PlaybookError as exc:
            raise ApiError(400, str(exc)) from None

        extra_vars = dict(payload.get("extra_vars") or {})
        fork_limit = int(payload.get("fork_limit") or 8)
        with tempfile.TemporaryDirectory() as tmp:
            exp.materialize_files(
                Path(tmp), self.testbed.config.stagger_ms, self.testbed.config.relay_pins
            )
            try:
                result = execute_playbook(
                    pb, self.inv, self.testbed.transport_factory(),
                    extra_vars=extra_vars, fork_limit=fork_limit, files_root=tmp,
                )
            except UnknownGroup as exc:
                raise ApiError(404, str(exc)) from None
            except Exception as exc:
                raise ApiError(400, str(exc)) from None
        return {
            "ok": result.ok,
            "results": [
                {
                    "host": r.host,
                    "task": r.task_name,
                    "status": r.status.value,
                    "exit_code": r.exit_code,
                    "stdout": r.stdout,
                    "stderr": r.stderr,
                }
                for r in result.results
            ],
        }

    # ------------------------------------------------------------ experiments

    def start_experiment(self, payload: dict) -> dict:
        try:
            spec = exp.ExperimentSpec(
                group=payload["group"],
                delay_ms=int(payload.get("delay_ms", 0)),
                rate_kbit=(
                    None if payload.get("rate_kbit") in (None, "")
                    else int(payload["rate_kbit"])
                ),
                duration_s=float(payload.get("duration_s", 10.0)),
                workload=str(payload.get("workload", "idle")),
                workload_vars={
                    str(k): str(v)
                    for k, v in (payload.get("workload_vars") or {}).items()
                },
            )
        except KeyError:
            raise ApiError(400, "need group") from None
        except (TypeError, ValueError) as exc:
            raise ApiError(400, str(exc)) from None
        try:
            resolve_group(self.inv, spec.group)
        except UnknownGroup as exc:
            raise ApiError(404, str(exc)) from None
        try:
            exp.resolve_workload(spec.workload)
        except (OSError, PlaybookError) as exc:
            raise ApiError(400, f"workload: {exc}") from None

        run_id = uuid.uuid4().hex[:12]
        with self._lock:
            # a group is busy while any of its runs is unfinished; the freshly
            # registered run below is all-pending, so the window between
            # registration and the final update is covered by the same rule
            if any(
                r.group == spec.group and not r.finished
                for r in self._experiments.values()
            ):
                raise ApiError(409, f"group {spec.group!r} already has a live run")
            self._experiments[run_id] = exp.ExperimentRun(
                run_id=run_id,
                group=spec.group,
                phases=[exp.PhaseResult(n) for n in exp.PHASES],
            )

        thread = threading.Thread(
            target=self._experiment_body, args=(run_id, spec),
            name=f"experiment-{run_id}", daemon=True,
        )
        with self._lock:
            self._experiment_threads.append(thread)
        thread.start()
        return {"run_id": run_id, "group": spec.group}

    def _experiment_body(self, run_id: str, spec: exp.ExperimentSpec) -> None:
        def on_update(run: exp.ExperimentRun) -> None:
            with self._lock:
                self._experiments[run_id] = run
            self._publish_experiment(run)

        try:
            with tempfile.TemporaryDirectory() as tmp:
                exp.materialize_files(
                    Path(tmp), self.testbed.config.stagger_ms,
                    self.testbed.config.relay_pins,
                )
                exp.run_experiment(
                    self.testbed, self.inv, spec,
                    files_root=tmp, on_update=on_update,
                    cancel=self._stopped.is_set, run_id=run_id,
                )
        except Exception as exc:
            log.exception("experiment %s crashed", run_id)
            with self._lock:
                run = self._experiments[run_id]
                for phase in run.phases:
                    if phase.status in ("pending", "running"):
                        phase.status = "failed"
                        phase.detail = str(exc)
                        break
                for phase in run.phases:
                    if phase.status == "pending":
                        phase.status = "skipped"
            self._publish_experiment(self._experiments[run_id])

    def run_json(self, run: exp.ExperimentRun) -> dict:
        out = {
            "run_id": run.run_id,
            "group": run.group,
            "finished": run.finished,
            "ok": run.finished and run.ok,
            "phases": [
                {"name": p.name, "status": p.status, "detail": p.detail}
                for p in run.phases
            ],
            "report": None,
            "total_energy_J": None,
        }
        if run.energy_report is not None:
            out["report"] = [
                {
                    "node": r.node,
                    "duration_s": r.duration_s,
                    "energy_J": r.energy_J,
                    "mean_power_W": r.mean_power_W,
                    "sample_count": r.sample_count,
                    "warning": r.warning,
                }
                for r in run.energy_report.rows
            ]
            out["total_energy_J"] = run.energy_report.total_energy_J
        return out

    def experiment_json(self, run_id: str) -> dict:
        with self._lock:
            run = self._experiments.get(run_id)
        if run is None:
            raise ApiError(404, f"no experiment {run_id}")
        return self.run_json(run)

    def experiments_json(self) -> dict:
        with self._lock:
            runs = list(self._experiments.values())
        return {"runs": [self.run_json(r) for r in runs]}

    # ------------------------------------------------------------ lifecycle

    @property
    def running(self) -> bool:
        return not self._stopped.is_set()

    def serve(self, host: str = "127.0.0.1", port: int = DEFAULT_HTTP_PORT,
              real_time: bool = True) -> tuple[str, int]:
        """Start the HTTP server (and the real-time ticker); returns the bind."""
        server = ThreadingHTTPServer((host, port), _Handler)
        server.daemon_threads = True
        server.plane = self
        self._server = server
        threading.Thread(target=server.serve_forever, name="http", daemon=True).start()
        if real_time:
            self._ticker = threading.Thread(
                target=self._tick_loop, name="sim-ticker", daemon=True
            )
            self._ticker.start()
        return server.server_address[0], server.server_address[1]

    def _tick_loop(self) -> None:
        last = time.monotonic()
        while not self._stopped.wait(0.02):
            now = time.monotonic()
            dt_us = int((now - last) * 1e6)
            last = now
            if dt_us > 0:
                self.testbed.advance(dt_us)

    def stop(self) -> None:
        """Shut down; in-flight experiments are cancelled and still reset."""
        self._stopped.set()
        self.hub.wake_all()
        with self._lock:
            threads = list(self._experiment_threads)
        for t in threads:
            t.join(timeout=30)
        if self._ticker is not None:
            self._ticker.join(timeout=5)
        if self._server is not None:
            self._server.shutdown()
            self._server.server_close()


_CONTENT_TYPES = {
    ".html": "text/html; charset=utf-8",
    ".js": "application/javascript",
    ".mjs": "application/javascript",
    ".css": "text/css",
    ".json": "application/json",
    ".map": "application/json",
    ".svg": "image/svg+xml",
    ".png": "image/png",
    ".ico": "image/x-icon",
}


class _Handler(BaseHTTPRequestHandler):
    server_version = "rackbench"
    protocol_version = "HTTP/1.1"

    # ------------------------------------------------------------ plumbing

    @property
    def plane(self) -> ControlPlane:
        return self.server.plane

    def log_message(self, fmt, *args):
        log.debug("http: " + fmt, *args)

    def _send_json(self, status: int, obj) -> None:
        body = json.dumps(obj, indent=1).encode("utf-8") + b"\n"
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _read_json(self) -> dict:
        length = int(self.headers.get("Content-Length") or 0)
        if length <= 0:
            raise ApiError(400, "missing request body")
        if length > 1 << 20:
            raise ApiError(400, "request body too large")
        try:
            obj = json.loads(self.rfile.read(length))
        except json.JSONDecodeError as exc:
            raise ApiError(400, f"bad JSON: {exc}") from None
        if not isinstance(obj, dict):
            raise ApiError(400, "request body must be a JSON object")
        return obj

    def _dispatch(self, method: str) -> None:
        parts = urlsplit(self.path)
        segments = [s for s in parts.path.split("/") if s]
        query = {k: v[-1] for k, v in parse_qs(parts.query).items()}
        try:
            self._route(method, segments, query)
        except ApiError as exc:
            self._send_json(exc.status, {"error": str(exc)})
        except BrokenPipeError:
            pass
        except Exception as exc:
            log.exception("unhandled error for %s %s", method, self.path)
            self._send_json(500, {"error": f"{type(exc).__name__}: {exc}"})

    def do_GET(self) -> None:
        self._dispatch("GET")

    def do_POST(self) -> None:
        self._dispatch("POST")

    # ------------------------------------------------------------ routes

    def _route(self, method: str, seg: list[str], query: dict) -> None:
        plane = self.plane
        if method == "GET":
            if not seg:
                if plane.static_dir is not None:
                    self.send_response(302)
                    self.send_header("Location", "/ui/")
                    self.send_header("Content-Length", "0")
                    self.end_headers()
                    return
                self._send_json(200, {"service": "rackbench", "endpoints": [
                    "/nodes", "/nodes/{id}", "/power", "/playbooks",
                    "/experiments", "/stream",
                ]})
                return
            if seg == ["nodes"]:
                self._send_json(200, plane.nodes_json(query.get("group")))
                return
            if len(seg) == 2 and seg[0] == "nodes":
                self._send_json(200, plane.node_json(seg[1]))
                return
            if len(seg) == 2 and seg[0] == "power":
                self._send_json(200, plane.plan_json(seg[1]))
                return
            if seg == ["playbooks"]:
                self._send_json(200, {"playbooks": sorted(BUILTIN_SOURCES)})
                return
            if seg == ["experiments"]:
                self._send_json(200, plane.experiments_json())
                return
            if len(seg) == 2 and seg[0] == "experiments":
                self._send_json(200, plane.experiment_json(seg[1]))
                return
            if seg == ["stream"]:
                self._stream()
                return
            if seg[0] == "ui" and plane.static_dir is not None:
                self._static(seg[1:])
                return
            raise ApiError(404, f"no route GET /{'/'.join(seg)}")

        if method == "POST":
            if seg == ["power"]:
                self._send_json(202, plane.start_power(self._read_json()))
                return
            if seg == ["playbooks", "run"]:
                self._send_json(200, plane.run_playbook(self._read_json()))
                return
            if seg == ["experiments"]:
                self._send_json(202, plane.start_experiment(self._read_json()))
                return
            raise ApiError(404, f"no route POST /{'/'.join(seg)}")

        raise ApiError(405, f"method {method} not supported")

    # ------------------------------------------------------------ stream

    def _stream(self) -> None:
        plane = self.plane
        q = plane.hub.attach()
        try:
            self.send_response(200)
            self.send_header("Content-Type", "application/x-ndjson")
            self.send_header("Cache-Control", "no-store")
            self.send_header("Connection", "close")
            self.end_headers()
            self.wfile.write(_json_line(plane.snapshot_event()))
            self.wfile.flush()
            while plane.running:
                try:
                    line = q.get(timeout=STREAM_PING_S)
                except queue.Empty:
                    line = _json_line(
                        {
                            "kind": "ping",
                            "node_id": None,
                            "timestamp_us": plane.testbed.scheduler.now_us(),
                            "payload": {},
                        }
                    )
                if line is None:
                    break
                self.wfile.write(line)
                self.wfile.flush()
        except (BrokenPipeError, ConnectionResetError):
            pass
        finally:
            plane.hub.detach(q)
            self.close_connection = True

    # ------------------------------------------------------------ static ui

    def _static(self, parts: list[str]) -> None:
        root = self.plane.static_dir.resolve()
        rel = "/".join(parts) or "index.html"
        target = (root / rel).resolve()
        if not target.is_relative_to(root) or not target.is_file():
            raise ApiError(404, f"no file {rel}")
        body = target.read_bytes()
        ctype = _CONTENT_TYPES.get(target.suffix, "application/octet-stream")
        self.send_response(200)
        self.send_header("Content-Type", ctype)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)
