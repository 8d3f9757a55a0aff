"""Minimal playbook format: parsing, templating, builtin fixtures.

A playbook is one play in a strict indentation-based grammar (a deliberate
subset, not YAML):

    ---                       # optional marker, comments allowed anywhere
    - hosts: <group or template>
      become: yes
      vars:
        key: value
      tasks:
        - name: <text>
          copy:
            src: <path>
            dest: <path>
        - name: <text>
          shell: <command>    # or a block continuation:
        - name: <text>
          shell:
            | <command>
        - name: <text>
          service:
            unit: <name>
            exec: <command>
            log: <path>       # optional, defaults under /var/log/

Indentation is spaces only and must be consistent within each block. Unknown
play keys and unknown action kinds are errors; a play needs hosts and at
least one task.

Templates use {{ name }} placeholders (any inner whitespace). Rendering is a
single pass: substituted text is never re-expanded. An undefined variable is
an error naming the variable, and rendering is all-or-nothing.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field


class PlaybookError(Exception):
    pass


class MissingHosts(PlaybookError):
    pass


class EmptyTasks(PlaybookError):
    pass


class MalformedIndentation(PlaybookError):
    pass


class UnknownActionKind(PlaybookError):
    pass


class UndefinedVariable(PlaybookError):
    def __init__(self, name: str) -> None:
        super().__init__(f"undefined variable {name!r}")
        self.name = name


@dataclass(frozen=True)
class CopyFile:
    src: str
    dest: str


@dataclass(frozen=True)
class Shell:
    command: str


@dataclass(frozen=True)
class ServiceInstall:
    unit: str
    exec_command: str
    log_path: str


Action = CopyFile | Shell | ServiceInstall


@dataclass(frozen=True)
class Task:
    name: str
    action: Action


@dataclass
class Playbook:
    hosts: str
    become: bool = False
    vars: dict[str, str] = field(default_factory=dict)
    tasks: list[Task] = field(default_factory=list)


_PLACEHOLDER_RE = re.compile(r"\{\{\s*([A-Za-z_][A-Za-z0-9_]*)\s*\}\}")


def render_template(template: str, variables: dict[str, str]) -> str:
    """Substitute every {{ name }} in one pass; inserted text is not rescanned."""

    def substitute(m: re.Match) -> str:
        name = m.group(1)
        if name not in variables:
            raise UndefinedVariable(name)
        return str(variables[name])

    return _PLACEHOLDER_RE.sub(substitute, template)


@dataclass(frozen=True)
class _Line:
    no: int
    indent: int
    text: str


def _content_lines(source: str) -> list[_Line]:
    out: list[_Line] = []
    for no, raw in enumerate(source.splitlines(), start=1):
        stripped = raw.strip()
        if not stripped or stripped.startswith("#") or stripped == "---":
            continue
        leading = raw[: len(raw) - len(raw.lstrip())]
        if "\t" in leading:
            raise MalformedIndentation(f"line {no}: tabs in indentation")
        out.append(_Line(no, len(leading), stripped))
    return out


def _parse_bool(value: str, no: int) -> bool:
    if value in ("yes", "true"):
        return True
    if value in ("no", "false"):
        return False
    raise PlaybookError(f"line {no}: become must be yes/no, got {value!r}")


def _build_action(
    kind: str, inline: str, block_parts: list[str], params: dict[str, str],
    task_name: str, no: int,
) -> Action:
    if kind == "copy":
        if inline or block_parts:
            raise PlaybookError(f"line {no}: copy takes src/dest keys, not a value")
        unknown = set(params) - {"src", "dest"}
        if unknown:
            raise PlaybookError(f"line {no}: unknown copy keys {sorted(unknown)}")
        if "src" not in params or "dest" not in params:
            raise PlaybookError(f"line {no}: copy needs both src and dest")
        return CopyFile(src=params["src"], dest=params["dest"])
    if kind == "shell":
        if params:
            raise PlaybookError(f"line {no}: shell takes a command, not keys")
        parts = ([inline] if inline else []) + block_parts
        command = "\n".join(parts).strip()
        if not command:
            raise PlaybookError(f"line {no}: task {task_name!r} has an empty command")
        return Shell(command=command)
    if kind == "service":
        if inline or block_parts:
            raise PlaybookError(f"line {no}: service takes unit/exec/log keys")
        unknown = set(params) - {"unit", "exec", "log"}
        if unknown:
            raise PlaybookError(f"line {no}: unknown service keys {sorted(unknown)}")
        if "unit" not in params or "exec" not in params:
            raise PlaybookError(f"line {no}: service needs unit and exec")
        unit = params["unit"]
        return ServiceInstall(
            unit=unit,
            exec_command=params["exec"],
            log_path=params.get("log", f"/var/log/{unit}.log"),
        )
    raise UnknownActionKind(f"line {no}: unknown action {kind!r}")


def _parse_tasks(lines: list[_Line], i: int, key_indent: int) -> tuple[list[Task], int]:
    tasks: list[Task] = []
    item_indent: int | None = None
    while i < len(lines) and lines[i].indent > key_indent:
        ln = lines[i]
        if item_indent is None:
            item_indent = ln.indent
        if ln.indent != item_indent:
            raise MalformedIndentation(
                f"line {ln.no}: task items must align at column {item_indent}"
            )
        if not ln.text.startswith("- name:"):
            raise PlaybookError(f"line {ln.no}: task item must start with '- name:'")
        name = ln.text[len("- name:"):].strip()
        if not name:
            raise PlaybookError(f"line {ln.no}: task has no name")
        i += 1

        action_indent = item_indent + 2
        if i >= len(lines) or lines[i].indent != action_indent:
            raise PlaybookError(f"line {ln.no}: task {name!r} has no action")
        aln = lines[i]
        kind, sep, inline = aln.text.partition(":")
        if not sep or kind.strip().startswith("- "):
            raise PlaybookError(f"line {aln.no}: expected an action key")
        kind, inline = kind.strip(), inline.strip()
        i += 1

        params: dict[str, str] = {}
        block_parts: list[str] = []
        param_indent: int | None = None
        while i < len(lines) and lines[i].indent > action_indent:
            pln = lines[i]
            if param_indent is None:
                param_indent = pln.indent
            elif pln.indent != param_indent:
                raise MalformedIndentation(
                    f"line {pln.no}: action fields must align at column {param_indent}"
                )
            if pln.text.startswith("|"):
                block_parts.append(pln.text[1:].strip())
            else:
                pk, psep, pv = pln.text.partition(":")
                if not psep:
                    raise PlaybookError(f"line {pln.no}: expected key: value")
                params[pk.strip()] = pv.strip()
            i += 1

        if i < len(lines) and lines[i].indent == action_indent:
            raise PlaybookError(f"line {lines[i].no}: task {name!r} has a second action")
        tasks.append(Task(name=name, action=_build_action(kind, inline, block_parts, params, name, aln.no)))
    return tasks, i


def parse_playbook(source: str) -> Playbook:
    lines = _content_lines(source)
    if not lines:
        raise MissingHosts("playbook is empty")
    first = lines[0]
    if not first.text.startswith("- hosts:"):
        raise MissingHosts(f"line {first.no}: playbook must start with '- hosts:'")
    hosts = first.text[len("- hosts:"):].strip()
    if not hosts:
        raise MissingHosts(f"line {first.no}: hosts value is empty")

    play_indent = first.indent
    key_indent = play_indent + 2
    become = False
    variables: dict[str, str] = {}
    tasks: list[Task] = []
    saw_tasks = False

    i = 1
    while i < len(lines):
        ln = lines[i]
        if ln.indent <= play_indent:
            raise PlaybookError(f"line {ln.no}: only one play per playbook")
        if ln.indent != key_indent:
            raise MalformedIndentation(
                f"line {ln.no}: play keys must align at column {key_indent}"
            )
        key, sep, value = ln.text.partition(":")
        if not sep:
            raise PlaybookError(f"line {ln.no}: expected key: value")
        key, value = key.strip(), value.strip()
        if key == "become":
            become = _parse_bool(value, ln.no)
            i += 1
        elif key == "vars":
            if value:
                raise PlaybookError(f"line {ln.no}: vars opens a block")
            i += 1
            var_indent: int | None = None
            while i < len(lines) and lines[i].indent > key_indent:
                vln = lines[i]
                if var_indent is None:
                    var_indent = vln.indent
                elif vln.indent != var_indent:
                    raise MalformedIndentation(
                        f"line {vln.no}: vars must align at column {var_indent}"
                    )
                vk, vsep, vv = vln.text.partition(":")
                if not vsep or vk.strip().startswith("- "):
                    raise PlaybookError(f"line {vln.no}: vars entries are key: value")
                variables[vk.strip()] = vv.strip()
                i += 1
        elif key == "tasks":
            if value:
                raise PlaybookError(f"line {ln.no}: tasks opens a block")
            saw_tasks = True
            tasks, i = _parse_tasks(lines, i + 1, key_indent)
        else:
            raise PlaybookError(f"line {ln.no}: unknown play key {key!r}")

    if not saw_tasks or not tasks:
        raise EmptyTasks("playbook has no tasks")
    return Playbook(hosts=hosts, become=become, vars=variables, tasks=tasks)


# --- builtin fixture playbooks ---------------------------------------------

_ODROIDS_POWER = """\
---
# Stagger-switch the relay banks of every rack through its control node.
# The control nodes must be reachable; pass power=on or power=off.
- hosts: odroids-control
  become: yes
  tasks:
    - name: copy relay switch script
      copy:
        src: ./gpio.sh
        dest: /home/odroid/
    - name: switch relay banks
      shell:
        | bash /home/odroid/gpio.sh {{ power }}
"""

_SERVICE_INIT = """\
---
# Install a workload binary and register it as a boot-start service with
# logs under /var/. Override unit= to name the service.
- hosts: {{ group }}
  become: yes
  vars:
    unit: workload
  tasks:
    - name: copy service binary
      copy:
        src: ./service.bin
        dest: /opt/{{ unit }}/{{ unit }}.bin
    - name: install boot service
      service:
        unit: {{ unit }}
        exec: workload start {{ unit }}
        log: /var/log/{{ unit }}.log
"""

_LINK_SETUP = """\
---
# Apply delay/bandwidth shaping on every node of a group.
- hosts: {{ group }}
  become: yes
  vars:
    delay_ms: 0
    rate_kbit: unlimited
  tasks:
    - name: shape node links
      shell: link set {{ delay_ms }} {{ rate_kbit }}
"""

_EXPERIMENT_RESET = """\
---
# Return nodes to their pre-experiment state: drop workload content and
# boot services, then restore default link shaping.
- hosts: {{ group }}
  become: yes
  tasks:
    - name: purge workload state
      shell: workload purge
    - name: reset link shaping
      shell: link reset
"""

BUILTIN_SOURCES: dict[str, str] = {
    "odroids_power": _ODROIDS_POWER,
    "service_init": _SERVICE_INIT,
    "link_setup": _LINK_SETUP,
    "experiment_reset": _EXPERIMENT_RESET,
}


def builtin_playbooks() -> dict[str, Playbook]:
    """Named fixture playbooks, freshly parsed (absent names are absent)."""
    return {name: parse_playbook(src) for name, src in BUILTIN_SOURCES.items()}
