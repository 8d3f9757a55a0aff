"""Command line interface.

Every stateful command boots its own simulated testbed from the inventory and
scenario, acts, and exits; nothing persists between invocations. `sim serve`
is the long-running mode: it keeps one testbed alive behind the HTTP control
plane and advances it in real time.

Exit codes: 0 success, 1 the operation ran but failed (task failures, supply
faults, failed experiment phases), 2 bad invocation or unparseable input.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import tempfile
import time
from pathlib import Path

from rackbench import __version__, collector, power, report
from rackbench import experiment as exp
from rackbench.agent import AgentConfig, ConstantDriver, parse_agent_config, run_agent
from rackbench.clocks import RealClock
from rackbench.inventory import (
    Inventory,
    InventoryError,
    UnknownGroup,
    parse_inventory_file,
    resolve_group,
)
from rackbench.playbook import BUILTIN_SOURCES, PlaybookError, parse_playbook
from rackbench.runner import TaskStatus, execute_playbook
from rackbench.service import DEFAULT_HTTP_PORT, ControlPlane
from rackbench.sim.testbed import (
    NodeState,
    ScenarioConfig,
    SimError,
    SimTestbed,
    default_inventory_text,
    parse_scenario,
)

log = logging.getLogger(__name__)

USAGE_EXIT = 2

SAMPLE_SCENARIO = """\
# testbed scenario: sizes and electrical profile
racks = 8
boot_ms = 5000
stagger_ms = 500
sample_period_ms = 100
idle_ma = 500
busy_ma = 900
boot_ma = 1200
bus_mv = 5000
# noise_ma = 25
# seed = 7
"""

SAMPLE_EXPERIMENT = """\
# ten seconds of idle telemetry from rack 1 behind a 20 ms link
group = odroids-testgroup
delay_ms = 20
rate_kbit = 10000
duration_s = 10
workload = idle
"""


class CliError(Exception):
    def __init__(self, message: str, exit_code: int = 1) -> None:
        super().__init__(message)
        self.exit_code = exit_code


def _load_inventory(path: str) -> Inventory:
    try:
        return parse_inventory_file(path)
    except FileNotFoundError:
        raise CliError(f"inventory file not found: {path}", USAGE_EXIT) from None
    except InventoryError as exc:
        raise CliError(f"bad inventory: {exc}", USAGE_EXIT) from None


def _load_scenario(path: str | None) -> ScenarioConfig:
    if path is None:
        return ScenarioConfig()
    try:
        return parse_scenario(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CliError(f"scenario file not found: {path}", USAGE_EXIT) from None
    except (SimError, ValueError) as exc:
        raise CliError(f"bad scenario: {exc}", USAGE_EXIT) from None


def _parse_extra_vars(pairs: list[str]) -> dict[str, str]:
    out: dict[str, str] = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep or not key:
            raise CliError(f"--extra-vars needs key=value, got {pair!r}", USAGE_EXIT)
        out[key] = value
    return out


def _table(rows: list[list[str]], headers: list[str]) -> str:
    widths = [len(h) for h in headers]
    for row in rows:
        for i, cell in enumerate(row):
            widths[i] = max(widths[i], len(cell))
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    lines = [fmt.format(*headers), fmt.format(*["-" * w for w in widths])]
    lines += [fmt.format(*row) for row in rows]
    return "\n".join(lines)


def _group_addresses(inv: Inventory, name: str) -> list[str]:
    try:
        return [h.address for h in resolve_group(inv, name).hosts]
    except UnknownGroup as exc:
        raise CliError(str(exc), USAGE_EXIT) from None


# ------------------------------------------------------------ commands

def _cmd_status(args) -> int:
    inv = _load_inventory(args.inventory)
    testbed = SimTestbed(_load_scenario(args.scenario))
    nodes = sorted(testbed.nodes(), key=lambda n: n.node_id)
    if args.group:
        wanted = set(_group_addresses(inv, args.group))
        nodes = [n for n in nodes if n.address in wanted]
    rows = []
    for n in nodes:
        link = testbed.links.get(n.address)
        rows.append([
            str(n.node_id), n.address, str(n.rack_id),
            "control" if n.is_control else "worker",
            n.power.value,
            f"{link.delay_ms}ms/{link.rate_kbit or 'unlimited'}",
        ])
    print(_table(rows, ["node", "address", "rack", "role", "power", "link"]))
    counts = {s: sum(1 for n in nodes if n.power is s) for s in NodeState}
    print(f"\n{len(nodes)} nodes: " + ", ".join(
        f"{v} {s.value}" for s, v in counts.items()
    ))
    return 0


def _cmd_power(args) -> int:
    inv = _load_inventory(args.inventory)
    testbed = SimTestbed(_load_scenario(args.scenario))
    exp.ready_testbed(testbed)
    target = power.Switch.ON if args.state == "on" else power.Switch.OFF
    try:
        plan = exp.plan_group_power(testbed, inv, args.group, target, args.stagger_ms)
    except UnknownGroup as exc:
        raise CliError(str(exc), USAGE_EXIT) from None
    except (exp.ExperimentError, power.PowerControlError) as exc:
        raise CliError(str(exc), USAGE_EXIT) from None

    if not plan.transitions:
        print("nothing to switch (all relays already in the target state)")
        return 0
    run_report = exp.execute_group_power(testbed, plan)
    addresses = _group_addresses(inv, args.group)
    state = NodeState.ON if target is power.Switch.ON else NodeState.OFF
    settled = exp.wait_power_state(
        testbed, addresses,
        state, cap_ms=testbed.config.boot_ms + plan.duration_ms + 2000,
    )
    rows = [
        [r.bank, str(r.relay_id), r.target.value, str(r.planned_at_ms), r.status, r.error]
        for r in run_report.results
    ]
    print(_table(rows, ["bank", "relay", "target", "at_ms", "status", "error"]))
    print(f"\n{len(addresses)} nodes {'reached' if settled else 'did NOT reach'} "
          f"{state.value}")
    return 0 if run_report.ok and settled else 1


def _resolve_playbook_source(name: str) -> str:
    if name in BUILTIN_SOURCES:
        return BUILTIN_SOURCES[name]
    path = Path(name)
    if not path.is_file():
        raise CliError(
            f"{name!r} is neither a builtin playbook ({', '.join(sorted(BUILTIN_SOURCES))}) "
            f"nor a file", USAGE_EXIT,
        )
    return path.read_text(encoding="utf-8")


def _cmd_run(args) -> int:
    inv = _load_inventory(args.inventory)
    testbed = SimTestbed(_load_scenario(args.scenario))
    exp.ready_testbed(testbed)
    try:
        pb = parse_playbook(_resolve_playbook_source(args.playbook))
    except PlaybookError as exc:
        raise CliError(f"bad playbook: {exc}", USAGE_EXIT) from None
    extra_vars = _parse_extra_vars(args.extra_vars)

    with tempfile.TemporaryDirectory() as tmp:
        root = Path(args.files_root) if args.files_root else Path(tmp)
        if args.files_root is None:
            exp.materialize_files(
                root, testbed.config.stagger_ms, testbed.config.relay_pins
            )
        try:
            result = execute_playbook(
                pb, inv, testbed.transport_factory(),
                extra_vars=extra_vars, fork_limit=args.fork_limit, files_root=root,
            )
        except UnknownGroup as exc:
            raise CliError(str(exc), USAGE_EXIT) from None

    rows = [
        [r.host, r.task_name, r.status.value,
         "" if r.exit_code is None else str(r.exit_code),
         r.stderr.strip().splitlines()[0] if r.stderr.strip() else ""]
        for r in result.results
    ]
    print(_table(rows, ["host", "task", "status", "exit", "stderr"]))
    failed = result.failed()
    print(f"\n{len(result.results)} task results, {len(failed)} failed")
    return 0 if result.ok else 1


def _write_outputs(series, energy, out_stem: str, figures: bool) -> list[Path]:
    stem = Path(out_stem)
    if stem.parent and not stem.parent.exists():
        stem.parent.mkdir(parents=True, exist_ok=True)
    paths = [
        stem.with_name(stem.name + "_series.csv"),
        stem.with_name(stem.name + "_report.csv"),
    ]
    collector.export_series_csv(series, str(paths[0]))
    collector.export_report_csv(energy, str(paths[1]))
    if figures:
        paths += report.render_figures(series, energy, stem)
    return paths


def _print_report(energy: collector.EnergyReport) -> None:
    rows = [
        [r.node, f"{r.duration_s:.3f}", f"{r.energy_J:.4f}", f"{r.mean_power_W:.4f}",
         str(r.sample_count), "too few samples" if r.warning else ""]
        for r in energy.rows
    ]
    print(_table(rows, ["node", "duration_s", "energy_J", "mean_W", "samples", "note"]))
    print(f"\ntotal energy: {energy.total_energy_J:.4f} J over {len(energy.rows)} nodes")


def _cmd_collect(args) -> int:
    inv = _load_inventory(args.inventory)
    testbed = SimTestbed(_load_scenario(args.scenario))
    exp.ready_testbed(testbed)
    addresses = _group_addresses(inv, args.group)

    # one-shot sims start cold, so power the group before sampling it
    try:
        plan = exp.plan_group_power(testbed, inv, args.group, power.Switch.ON)
        exp.execute_group_power(testbed, plan)
        exp.wait_power_state(
            testbed, addresses, NodeState.ON,
            cap_ms=testbed.config.boot_ms + plan.duration_ms + 2000,
        )
    except (exp.ExperimentError, power.PowerControlError) as exc:
        raise CliError(str(exc), USAGE_EXIT) from None

    group = resolve_group(inv, args.group)
    series = collector.run_collection(
        group, testbed.config.agent_port, args.duration_s,
        testbed.collector_network(), testbed.blocking_clock(),
    )
    energy = collector.build_report(series)
    _print_report(energy)
    lost = [
        s for s in series.values()
        if s.state is collector.ConnectionState.LOST and not s.samples
    ]
    if args.out:
        paths = _write_outputs(series, energy, args.out, not args.no_figures)
        print("\nwrote " + ", ".join(str(p) for p in paths))
    return 1 if len(lost) == len(series) else 0


def _cmd_experiment(args) -> int:
    inv = _load_inventory(args.inventory)
    testbed = SimTestbed(_load_scenario(args.scenario))
    try:
        spec = exp.parse_experiment_spec(Path(args.spec).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CliError(f"spec file not found: {args.spec}", USAGE_EXIT) from None
    except (exp.ExperimentError, ValueError) as exc:
        raise CliError(f"bad spec: {exc}", USAGE_EXIT) from None

    seen: set[tuple[str, str]] = set()

    def on_update(run: exp.ExperimentRun) -> None:
        for phase in run.phases:
            key = (phase.name, phase.status)
            if phase.status != "pending" and key not in seen:
                seen.add(key)
                detail = f"  ({phase.detail})" if phase.detail else ""
                print(f"[{phase.status:>7}] {phase.name}{detail}")

    try:
        with tempfile.TemporaryDirectory() as tmp:
            exp.materialize_files(
                Path(tmp), testbed.config.stagger_ms, testbed.config.relay_pins
            )
            run = exp.run_experiment(
                testbed, inv, spec, files_root=tmp, on_update=on_update
            )
    except UnknownGroup as exc:
        raise CliError(str(exc), USAGE_EXIT) from None
    except (PlaybookError, OSError) as exc:
        raise CliError(f"bad workload: {exc}", USAGE_EXIT) from None

    if run.energy_report is not None:
        print()
        _print_report(run.energy_report)
        if run.series is not None:
            stem = str(Path(args.out_dir) / f"experiment_{run.run_id}")
            paths = _write_outputs(
                run.series, run.energy_report, stem, not args.no_figures
            )
            print("\nwrote " + ", ".join(str(p) for p in paths))
    print(f"\nexperiment {run.run_id}: {'ok' if run.ok else 'FAILED'}")
    return 0 if run.ok else 1


def _cmd_sim_serve(args) -> int:
    inv = _load_inventory(args.inventory)
    testbed = SimTestbed(_load_scenario(args.scenario))
    if not args.no_mains:
        testbed.set_all_mains(True)
    plane = ControlPlane(testbed, inv, static_dir=args.static_dir)
    host, port = plane.serve(args.listen, args.http_port, real_time=not args.no_real_time)
    print(f"control plane listening on http://{host}:{port}")
    print("press Ctrl-C to stop")
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        print("\nshutting down")
    finally:
        plane.stop()
    return 0


def _cmd_agent_serve(args) -> int:
    cfg = AgentConfig()
    if args.config:
        try:
            cfg = parse_agent_config(
                Path(args.config).read_text(encoding="utf-8"), cfg
            )
        except FileNotFoundError:
            raise CliError(f"config file not found: {args.config}", USAGE_EXIT) from None
        except ValueError as exc:
            raise CliError(f"bad agent config: {exc}", USAGE_EXIT) from None
    overrides = {}
    if args.node_id is not None:
        overrides["node_id"] = args.node_id
    if args.port is not None:
        overrides["listen_port"] = args.port
    if args.period_ms is not None:
        overrides["sample_period_ms"] = args.period_ms
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    driver = ConstantDriver(args.current_ua, args.bus_mv, RealClock())
    print(f"agent {cfg.node_id} listening on port {cfg.listen_port}, "
          f"period {cfg.sample_period_ms} ms")
    run_agent(cfg, driver)
    return 0


def _cmd_init(args) -> int:
    directory = Path(args.directory)
    directory.mkdir(parents=True, exist_ok=True)
    wrote = []
    for name, text in (
        ("inventory.ini", default_inventory_text(args.racks)),
        ("scenario.ini", SAMPLE_SCENARIO.replace("racks = 8", f"racks = {args.racks}")),
        ("experiment.ini", SAMPLE_EXPERIMENT),
    ):
        path = directory / name
        if path.exists() and not args.force:
            print(f"skipping {path} (exists; use --force to overwrite)")
            continue
        path.write_text(text, encoding="utf-8")
        wrote.append(path)
    for path in wrote:
        print(f"wrote {path}")
    print(
        f"\ntry: rackbench status -i {directory / 'inventory.ini'}"
        f" --scenario {directory / 'scenario.ini'}"
    )
    return 0


# ------------------------------------------------------------ wiring

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rackbench",
        description="desk-scale rack testbed: simulator, power control, "
                    "telemetry collection and experiment orchestration",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, scenario=True):
        p.add_argument("-i", "--inventory", required=True, help="inventory file")
        if scenario:
            p.add_argument("--scenario", help="scenario file (defaults: 8 racks)")

    p = sub.add_parser("status", help="node table for a fresh testbed")
    add_common(p)
    p.add_argument("--group", help="limit to one inventory group")
    p.set_defaults(fn=_cmd_status)

    p = sub.add_parser("power", help="switch a group's relays with staggering")
    add_common(p)
    p.add_argument("state", choices=["on", "off"])
    p.add_argument("--group", required=True)
    p.add_argument("--stagger-ms", type=int, help="override the plan stagger")
    p.set_defaults(fn=_cmd_power)

    p = sub.add_parser("run", help="run a playbook (builtin name or file)")
    add_common(p)
    p.add_argument("playbook")
    p.add_argument("--extra-vars", nargs="*", default=[], metavar="KEY=VALUE")
    p.add_argument("--fork-limit", type=int, default=8)
    p.add_argument("--files-root", help="directory copy sources resolve against "
                                        "(default: auto-generated gpio.sh etc.)")
    p.set_defaults(fn=_cmd_run)

    p = sub.add_parser("collect", help="power a group on and collect telemetry")
    add_common(p)
    p.add_argument("--group", required=True)
    p.add_argument("--duration-s", type=float, default=10.0)
    p.add_argument("--out", help="output stem; writes <out>_series.csv, "
                                 "<out>_report.csv and figures")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(fn=_cmd_collect)

    p = sub.add_parser("experiment", help="run a five-phase experiment spec")
    add_common(p)
    p.add_argument("spec", help="experiment spec file")
    p.add_argument("--out-dir", default=".", help="where csv/figures land")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(fn=_cmd_experiment)

    p_sim = sub.add_parser("sim", help="simulator modes")
    sim_sub = p_sim.add_subparsers(dest="sim_command", required=True)
    p = sim_sub.add_parser("serve", help="HTTP control plane over a live sim")
    add_common(p)
    p.add_argument("--http-port", type=int, default=DEFAULT_HTTP_PORT)
    p.add_argument("--listen", default="127.0.0.1")
    p.add_argument("--no-mains", action="store_true",
                   help="start with every rack unplugged")
    p.add_argument("--no-real-time", action="store_true",
                   help="do not advance the sim clock with wall time")
    p.add_argument("--static-dir", help="serve a dashboard build under /ui/")
    p.set_defaults(fn=_cmd_sim_serve)

    p_agent = sub.add_parser("agent", help="telemetry agent modes")
    agent_sub = p_agent.add_subparsers(dest="agent_command", required=True)
    p = agent_sub.add_parser("serve", help="real-TCP telemetry agent")
    p.add_argument("--config", help="agent config file (key=value)")
    p.add_argument("--node-id", type=int)
    p.add_argument("--port", type=int)
    p.add_argument("--period-ms", type=int)
    p.add_argument("--current-ua", type=int, default=500_000,
                   help="constant driver current")
    p.add_argument("--bus-mv", type=int, default=5_000)
    p.set_defaults(fn=_cmd_agent_serve)

    p = sub.add_parser("init", help="write sample inventory/scenario/experiment files")
    p.add_argument("directory")
    p.add_argument("--racks", type=int, default=8)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=_cmd_init)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        return args.fn(args)
    except CliError as exc:
        print(f"rackbench: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except KeyboardInterrupt:
        return 1


if __name__ == "__main__":
    sys.exit(main())
