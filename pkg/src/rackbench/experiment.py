"""Experiment workflow: link shaping, power-on, workload, collection, reset.

An experiment runs five phases in a fixed order: apply_links, power_on,
workload, collect, reset. A failed phase halts the ones after it, except
reset, which always runs; reset verifies its own postcondition (default link
configs and no workload boot services on the group) instead of trusting the
reset playbook's exit codes. The energy report is attached when collect
succeeds.

This module also carries the operational helpers shared by the CLI and the
HTTP service: readying a testbed, planning group power, and materializing
the file fixtures the builtin playbooks copy (the rendered gpio script and
an opaque service binary).
"""

from __future__ import annotations

import logging
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from rackbench import collector, linkshape, power
from rackbench.inventory import Inventory, resolve_group
from rackbench.playbook import BUILTIN_SOURCES, Playbook, parse_playbook
from rackbench.runner import RunResult, execute_playbook

log = logging.getLogger(__name__)

PHASES = ("apply_links", "power_on", "workload", "collect", "reset")

IDLE_WORKLOAD = """\
- hosts: {{ group }}
  tasks:
    - name: idle workload
      shell: true
"""

SERVICE_BLOB = b"RBIN\x01\x00workload service image\n" + bytes(64)


class ExperimentError(Exception):
    pass


@dataclass(frozen=True)
class ExperimentSpec:
    group: str
    delay_ms: int = 0
    rate_kbit: int | None = None
    duration_s: float = 10.0
    workload: str = "idle"  # "idle", a builtin name, or a playbook path
    agent_port: int | None = None
    workload_vars: dict[str, str] = field(default_factory=dict)


def parse_experiment_spec(text: str) -> ExperimentSpec:
    """Flat key=value spec; workload.var.<k>= passes extra vars to the workload."""
    fields: dict[str, object] = {}
    workload_vars: dict[str, str] = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep:
            raise ExperimentError(f"spec line {line_no}: expected key=value")
        if key.startswith("workload.var."):
            workload_vars[key[len("workload.var."):]] = value
        elif key == "group":
            fields["group"] = value
        elif key == "delay_ms":
            fields["delay_ms"] = int(value)
        elif key == "rate_kbit":
            fields["rate_kbit"] = linkshape.parse_rate(value)
        elif key == "duration_s":
            fields["duration_s"] = float(value)
        elif key == "workload":
            fields["workload"] = value
        elif key == "agent_port":
            fields["agent_port"] = int(value)
        else:
            raise ExperimentError(f"spec line {line_no}: unknown key {key!r}")
    if "group" not in fields:
        raise ExperimentError("spec needs a group= line")
    return ExperimentSpec(workload_vars=workload_vars, **fields)


def resolve_workload(name: str) -> Playbook:
    if name == "idle":
        return parse_playbook(IDLE_WORKLOAD)
    if name in BUILTIN_SOURCES:
        return parse_playbook(BUILTIN_SOURCES[name])
    return parse_playbook(Path(name).read_text(encoding="utf-8"))


@dataclass
class PhaseResult:
    name: str
    status: str = "pending"  # pending | running | ok | failed | skipped
    detail: str = ""


@dataclass
class ExperimentRun:
    run_id: str
    group: str
    phases: list[PhaseResult]
    energy_report: collector.EnergyReport | None = None
    series: dict[str, collector.NodeSeries] | None = None

    @property
    def finished(self) -> bool:
        return all(p.status in ("ok", "failed", "skipped") for p in self.phases)

    @property
    def ok(self) -> bool:
        return all(p.status == "ok" for p in self.phases)

    def phase(self, name: str) -> PhaseResult:
        for p in self.phases:
            if p.name == name:
                return p
        raise KeyError(name)


# --- operational helpers ----------------------------------------------------

def render_standard_gpio_script(stagger_ms: int, relay_pins=power.DEFAULT_RELAY_PINS) -> str:
    """The combined all-relays script every control node receives."""
    relays = [power.Relay(rid, pin) for rid, pin in enumerate(relay_pins)]
    bank = power.RelayBank("standard", relays)
    requests = [
        power.SwitchRequest("standard", rid, power.Switch.ON)
        for rid in range(power.RELAYS_PER_BANK)
    ]
    plan = power.plan_switch({"standard": bank}, requests, stagger_ms)
    return power.render_gpio_script(plan, "combined")["gpio.sh"]


def materialize_files(directory: Path, stagger_ms: int, relay_pins=power.DEFAULT_RELAY_PINS) -> None:
    """Write the local files the builtin playbooks copy from."""
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "gpio.sh").write_text(
        render_standard_gpio_script(stagger_ms, relay_pins), encoding="utf-8"
    )
    (directory / "service.bin").write_bytes(SERVICE_BLOB)


def ready_testbed(testbed, extra_boot_ms: int = 200) -> None:
    """Energize every rack and wait for the control nodes to finish booting."""
    testbed.set_all_mains(True)
    controls = [r.control for r in testbed.racks.values()]
    from rackbench.sim.testbed import NodeState  # local import to stay sim-agnostic

    testbed.advance_until(
        lambda: all(c.power is NodeState.ON for c in controls),
        (testbed.config.boot_ms + extra_boot_ms) * 1000,
    )


def plan_group_power(testbed, inv: Inventory, group_name: str, target: power.Switch,
                     stagger_ms: int | None = None) -> power.TransitionPlan:
    """Plan relay switches covering every worker of the group."""
    group = resolve_group(inv, group_name)
    addresses = [h.address for h in group.hosts]
    controls = [a for a in addresses if testbed.node(a).is_control]
    if controls:
        raise ExperimentError(
            f"group {group_name!r} contains control nodes (mains-powered): {controls}"
        )
    pairs = testbed.relays_for(addresses)
    requests = [power.SwitchRequest(bank, relay_id, target) for bank, relay_id in pairs]
    if stagger_ms is None:
        stagger_ms = testbed.config.stagger_ms
    return power.plan_switch(testbed.banks(), requests, stagger_ms)


def execute_group_power(testbed, plan: power.TransitionPlan) -> power.ExecutionReport:
    """Blocking plan execution on the simulated clock."""
    return power.execute_plan(
        plan, testbed.banks(), testbed.gpio_drivers(), testbed.blocking_clock()
    )


def wait_power_state(testbed, addresses: list[str], state, cap_ms: int) -> bool:
    nodes = [testbed.node(a) for a in addresses]
    return testbed.advance_until(
        lambda: all(n.power is state for n in nodes), cap_ms * 1000
    )


# --- the workflow ------------------------------------------------------------

def run_experiment(
    testbed,
    inv: Inventory,
    spec: ExperimentSpec,
    files_root: Path | str | None = None,
    on_update: Callable[[ExperimentRun], None] | None = None,
    cancel: Callable[[], bool] | None = None,
    run_id: str | None = None,
) -> ExperimentRun:
    """Run the five-phase workflow against a (simulated) testbed.

    Raises for unusable specs (unknown group, unparseable workload); phase
    failures are recorded in the returned run instead.
    """
    from rackbench.sim.testbed import NodeState

    group = resolve_group(inv, spec.group)  # unusable spec: raise before starting
    workload_pb = resolve_workload(spec.workload)
    addresses = [h.address for h in group.hosts]
    agent_port = spec.agent_port or testbed.config.agent_port

    root = Path(files_root) if files_root is not None else None
    run = ExperimentRun(
        run_id=run_id or uuid.uuid4().hex[:12],
        group=spec.group,
        phases=[PhaseResult(name) for name in PHASES],
    )

    def notify() -> None:
        if on_update is not None:
            on_update(run)

    def begin(name: str) -> PhaseResult:
        phase = run.phase(name)
        phase.status = "running"
        notify()
        return phase

    def finish(phase: PhaseResult, ok: bool, detail: str = "") -> bool:
        phase.status = "ok" if ok else "failed"
        phase.detail = detail
        notify()
        return ok

    ready_testbed(testbed)
    halted = False

    def proceed() -> bool:
        return not halted and not _cancelled(cancel)

    # apply_links: shape the plane's view directly; nodes may still be off
    phase = begin("apply_links")
    try:
        cfg = linkshape.LinkConfig(delay_ms=spec.delay_ms, rate_kbit=spec.rate_kbit)
        for address in addresses:
            testbed.links.apply(address, cfg)
        halted = not finish(phase, True, f"{len(addresses)} nodes shaped")
    except (linkshape.LinkError, ValueError) as exc:
        halted = not finish(phase, False, str(exc))

    if proceed():
        phase = begin("power_on")
        try:
            plan = plan_group_power(testbed, inv, spec.group, power.Switch.ON)
            execute_group_power(testbed, plan)
            booted = wait_power_state(
                testbed, addresses, NodeState.ON,
                cap_ms=testbed.config.boot_ms + plan.duration_ms + 2000,
            )
            halted = not finish(
                phase, booted,
                f"{len(plan.transitions)} transitions" if booted else "nodes never reached On",
            )
        except Exception as exc:
            halted = not finish(phase, False, str(exc))

    if proceed():
        phase = begin("workload")
        try:
            extra = {"group": spec.group, **spec.workload_vars}
            result: RunResult = execute_playbook(
                workload_pb, inv, testbed.transport_factory(),
                extra_vars=extra, files_root=root or Path("."),
            )
            failed = result.failed()
            halted = not finish(
                phase, not failed,
                f"{len(result.results)} task results"
                if not failed else f"{len(failed)} failed tasks",
            )
        except Exception as exc:
            halted = not finish(phase, False, str(exc))

    if proceed():
        phase = begin("collect")
        series = collector.run_collection(
            group, agent_port, spec.duration_s,
            testbed.collector_network(), testbed.blocking_clock(),
        )
        run.series = series
        run.energy_report = collector.build_report(series)
        warned = [r for r in run.energy_report.rows if r.warning]
        detail = f"{len(series)} nodes"
        if warned:
            detail += f", {len(warned)} with too few samples"
        finish(phase, True, detail)

    # reset always runs, even after a failure or cancel
    for name in ("power_on", "workload", "collect"):
        if run.phase(name).status == "pending":
            run.phase(name).status = "skipped"
    phase = begin("reset")
    detail = _reset_group(testbed, inv, spec.group, addresses, root)
    finish(phase, detail == "", detail or "links default, no boot services")

    notify()
    return run


def _cancelled(cancel: Callable[[], bool] | None) -> bool:
    return bool(cancel is not None and cancel())


def _reset_group(testbed, inv, group_name: str, addresses: list[str],
                 files_root: Path | None) -> str:
    """Reset links and workload state; returns "" when the postcondition holds."""
    from rackbench.sim.testbed import NodeState

    reset_pb = parse_playbook(BUILTIN_SOURCES["experiment_reset"])
    try:
        execute_playbook(
            reset_pb, inv, testbed.transport_factory(),
            extra_vars={"group": group_name}, files_root=files_root or Path("."),
        )
    except Exception as exc:  # reachability problems must not stop the reset
        log.warning("reset playbook run failed: %s", exc)

    # belt and braces: the plane resets links regardless of node reachability
    for address in addresses:
        testbed.links.reset(address)

    problems: list[str] = []
    for address in addresses:
        if testbed.links.get(address) != linkshape.DEFAULT_LINK:
            problems.append(f"{address} still shaped")
        node = testbed.node(address)
        if node.power is not NodeState.OFF and node.boot_services:
            problems.append(f"{address} still has boot services")
        if node.busy:
            problems.append(f"{address} still busy")
    return "; ".join(problems)
