"""Playbook execution over pluggable transports.

Per host, tasks run in order and fail fast: after the first Failed task every
later task is Skipped, so a host's result statuses always match
Ok* (Failed Skipped*)?. Hosts run independently, fanned out over at most
fork_limit workers; per-host outcomes never depend on the fan-out width.

A Transport moves bytes and commands to one host. The simulator provides one
per simulated node; hardware transports (real SSH) would plug in behind the
same two methods.
"""

from __future__ import annotations

import enum
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path, PurePosixPath
from typing import Callable, Protocol

from rackbench.inventory import HostEntry, Inventory, resolve_group
from rackbench.playbook import (
    CopyFile,
    Playbook,
    ServiceInstall,
    Shell,
    Task,
    UndefinedVariable,
    render_template,
)

log = logging.getLogger(__name__)

DEFAULT_FORK_LIMIT = 8


@dataclass(frozen=True)
class ExecResult:
    exit_code: int
    stdout: str = ""
    stderr: str = ""


class TransportError(Exception):
    pass


class TransportConnectFailure(TransportError):
    pass


class Transport(Protocol):
    def copy(self, data: bytes, dest: str) -> None: ...

    def exec(self, command: str, privileged: bool = False) -> ExecResult: ...

    def close(self) -> None: ...


TransportFactory = Callable[[HostEntry], Transport]


class TaskStatus(enum.Enum):
    OK = "ok"
    FAILED = "failed"
    SKIPPED = "skipped"


@dataclass(frozen=True)
class TaskResult:
    host: str
    task_name: str
    status: TaskStatus
    exit_code: int | None = None
    stdout: str = ""
    stderr: str = ""


@dataclass
class RunResult:
    results: list[TaskResult] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(r.status is TaskStatus.OK for r in self.results)

    def for_host(self, host: str) -> list[TaskResult]:
        return [r for r in self.results if r.host == host]

    def failed(self) -> list[TaskResult]:
        return [r for r in self.results if r.status is TaskStatus.FAILED]


def _run_task(
    task: Task,
    host: HostEntry,
    transport: Transport,
    variables: dict[str, str],
    become: bool,
    files_root: Path,
) -> TaskResult:
    action = task.action
    try:
        if isinstance(action, CopyFile):
            src = render_template(action.src, variables)
            dest = render_template(action.dest, variables)
            data = (files_root / src).read_bytes()
            if dest.endswith("/"):
                dest += PurePosixPath(src).name
            transport.copy(data, dest)
            return TaskResult(host.address, task.name, TaskStatus.OK, exit_code=0)
        if isinstance(action, Shell):
            command = render_template(action.command, variables)
            res = transport.exec(command, privileged=become)
            status = TaskStatus.OK if res.exit_code == 0 else TaskStatus.FAILED
            return TaskResult(
                host.address, task.name, status, res.exit_code, res.stdout, res.stderr
            )
        if isinstance(action, ServiceInstall):
            unit = render_template(action.unit, variables)
            exec_command = render_template(action.exec_command, variables)
            log_path = render_template(action.log_path, variables)
            command = f"svc install {unit} --log {log_path} --exec {exec_command}"
            res = transport.exec(command, privileged=become)
            status = TaskStatus.OK if res.exit_code == 0 else TaskStatus.FAILED
            return TaskResult(
                host.address, task.name, status, res.exit_code, res.stdout, res.stderr
            )
        raise TypeError(f"unhandled action {action!r}")
    except UndefinedVariable as exc:
        return TaskResult(host.address, task.name, TaskStatus.FAILED, stderr=str(exc))
    except Exception as exc:
        return TaskResult(
            host.address, task.name, TaskStatus.FAILED,
            stderr=str(exc) or type(exc).__name__,
        )


def _run_host(
    pb: Playbook,
    host: HostEntry,
    factory: TransportFactory,
    variables: dict[str, str],
    files_root: Path,
) -> list[TaskResult]:
    results: list[TaskResult] = []
    try:
        transport = factory(host)
    except Exception as exc:
        # unreachable host: first task Failed, the rest Skipped
        for idx, task in enumerate(pb.tasks):
            if idx == 0:
                results.append(
                    TaskResult(
                        host.address, task.name, TaskStatus.FAILED,
                        stderr=str(exc) or type(exc).__name__,
                    )
                )
            else:
                results.append(TaskResult(host.address, task.name, TaskStatus.SKIPPED))
        return results

    failed = False
    try:
        for task in pb.tasks:
            if failed:
                results.append(TaskResult(host.address, task.name, TaskStatus.SKIPPED))
                continue
            result = _run_task(task, host, transport, variables, pb.become, files_root)
            results.append(result)
            if result.status is TaskStatus.FAILED:
                failed = True
                log.info("host %s failed at task %r", host.address, task.name)
    finally:
        try:
            transport.close()
        except Exception:
            pass
    return results


def execute_playbook(
    pb: Playbook,
    inv: Inventory,
    transport_factory: TransportFactory,
    extra_vars: dict[str, str] | None = None,
    fork_limit: int = DEFAULT_FORK_LIMIT,
    files_root: Path | str = ".",
) -> RunResult:
    """Run a playbook against an inventory group.

    extra_vars override the playbook's own vars. The hosts field is itself
    template-rendered with the merged vars before group resolution, so
    builtins can target {{ group }}. Result rows keep group host order, then
    task order.
    """
    if fork_limit < 1:
        raise ValueError("fork_limit must be >= 1")
    variables = {**pb.vars, **(extra_vars or {})}
    group_name = render_template(pb.hosts, variables)
    group = resolve_group(inv, group_name)
    root = Path(files_root)

    if not group.hosts:
        return RunResult([])
    with ThreadPoolExecutor(max_workers=min(fork_limit, len(group.hosts))) as pool:
        per_host = list(
            pool.map(
                lambda host: _run_host(pb, host, transport_factory, variables, root),
                group.hosts,
            )
        )
    return RunResult([r for host_results in per_host for r in host_results])
