"""Inventory file parsing.

Format, line by line:

    # comment (whole line only)
    [group-name]
    10.0.0.[1:4] key=value other=thing
    10.0.0.250

A host line holds one host pattern followed by optional space-separated
key=value variables. Patterns may contain bracket ranges ``[lo:hi]`` with
integer bounds, lo <= hi, no sign, no leading zeros; each range expands to
every value in the inclusive span and multiple ranges combine cartesian, with
the leftmost range varying slowest. Every expanded address must be a valid
dotted-quad IPv4 address.

The key ``ansible_ssh_pass`` is accepted for compatibility and stored under
the generic name ``ssh_pass``. All other keys are kept verbatim and values
are opaque text.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field


class InventoryError(Exception):
    """Base class for inventory parse and lookup failures."""


class UnterminatedGroupHeader(InventoryError):
    pass


class MalformedGroupHeader(InventoryError):
    pass


class HostLineBeforeAnyGroup(InventoryError):
    pass


class MalformedRange(InventoryError):
    pass


class DuplicateGroupName(InventoryError):
    pass


class MalformedVarAssignment(InventoryError):
    pass


class InvalidHostAddress(InventoryError):
    pass


class DuplicateHostAddress(InventoryError):
    pass


class UnknownGroup(InventoryError):
    pass


# legacy key names mapped to tool-neutral ones
VAR_ALIASES = {"ansible_ssh_pass": "ssh_pass"}

_RANGE_RE = re.compile(r"\[([^\[\]]*)\]")
_BOUND_RE = re.compile(r"^(0|[1-9][0-9]*)$")
_VAR_KEY_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")
_GROUP_LINE_RE = re.compile(r"^\[([^\[\]]*)\]$")


@dataclass(frozen=True)
class HostEntry:
    """One concrete host: a dotted-quad address plus its variables."""

    address: str
    vars: dict[str, str] = field(default_factory=dict)


@dataclass
class HostGroup:
    name: str
    hosts: list[HostEntry] = field(default_factory=list)

    @property
    def addresses(self) -> list[str]:
        return [h.address for h in self.hosts]


@dataclass
class Inventory:
    """Parsed inventory: named groups in file order."""

    groups: dict[str, HostGroup] = field(default_factory=dict)

    def group(self, name: str) -> HostGroup:
        return resolve_group(self, name)


def _parse_range(body: str, pattern: str) -> range:
    parts = body.split(":")
    if len(parts) != 2:
        raise MalformedRange(f"range [{body}] in {pattern!r}: expected [lo:hi]")
    lo_s, hi_s = parts
    for bound in (lo_s, hi_s):
        if not _BOUND_RE.match(bound):
            raise MalformedRange(
                f"range [{body}] in {pattern!r}: bounds must be non-negative "
                "integers without leading zeros"
            )
    lo, hi = int(lo_s), int(hi_s)
    if lo > hi:
        raise MalformedRange(f"range [{body}] in {pattern!r}: lo > hi")
    return range(lo, hi + 1)


def _check_ipv4(address: str, pattern: str) -> None:
    parts = address.split(".")
    if len(parts) != 4:
        raise InvalidHostAddress(f"{address!r} (from {pattern!r}) is not dotted-quad IPv4")
    for p in parts:
        if not p.isdigit() or (len(p) > 1 and p[0] == "0") or int(p) > 255:
            raise InvalidHostAddress(
                f"{address!r} (from {pattern!r}) has invalid octet {p!r}"
            )


def expand_pattern(pattern: str) -> list[str]:
    """Expand bracket ranges into the full address list.

    A pattern without ranges yields exactly itself. With ranges, the result
    enumerates the cartesian product with the leftmost range varying slowest,
    e.g. "10.0.[1:2].[5:6]" -> 10.0.1.5, 10.0.1.6, 10.0.2.5, 10.0.2.6.
    """
    if "[" in pattern or "]" in pattern:
        # reject stray brackets that the range regex would skip over
        stripped = _RANGE_RE.sub("", pattern)
        if "[" in stripped or "]" in stripped:
            raise MalformedRange(f"unbalanced brackets in {pattern!r}")

    pieces = _RANGE_RE.split(pattern)
    # pieces alternates literal, range-body, literal, range-body, ... literal
    literals = pieces[0::2]
    ranges = [_parse_range(body, pattern) for body in pieces[1::2]]

    addresses = [literals[0]]
    for rng, lit in zip(ranges, literals[1:]):
        addresses = [prefix + str(v) + lit for prefix in addresses for v in rng]
    for a in addresses:
        _check_ipv4(a, pattern)
    return addresses


def _parse_vars(tokens: list[str], line_no: int) -> dict[str, str]:
    out: dict[str, str] = {}
    for tok in tokens:
        key, sep, value = tok.partition("=")
        if not sep or not _VAR_KEY_RE.match(key):
            raise MalformedVarAssignment(f"line {line_no}: bad assignment {tok!r}")
        out[VAR_ALIASES.get(key, key)] = value
    return out


def parse_inventory(text: str) -> Inventory:
    """Parse inventory text. Pure: never mutates or depends on external state."""
    inv = Inventory()
    current: HostGroup | None = None
    seen_addrs: set[str] = set()

    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("["):
            m = _GROUP_LINE_RE.match(line)
            if m is None:
                if "]" not in line:
                    raise UnterminatedGroupHeader(f"line {line_no}: {raw!r}")
                raise MalformedGroupHeader(f"line {line_no}: {raw!r}")
            name = m.group(1).strip()
            if not name:
                raise MalformedGroupHeader(f"line {line_no}: empty group name")
            if name in inv.groups:
                raise DuplicateGroupName(f"line {line_no}: group {name!r} redefined")
            current = HostGroup(name=name)
            inv.groups[name] = current
            seen_addrs = set()
            continue
        if current is None:
            raise HostLineBeforeAnyGroup(f"line {line_no}: {raw!r}")
        tokens = line.split()
        host_vars = _parse_vars(tokens[1:], line_no)
        for address in expand_pattern(tokens[0]):
            if address in seen_addrs:
                raise DuplicateHostAddress(
                    f"line {line_no}: {address!r} repeated in group {current.name!r}"
                )
            seen_addrs.add(address)
            current.hosts.append(HostEntry(address=address, vars=dict(host_vars)))
    return inv


def parse_inventory_file(path: str) -> Inventory:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_inventory(fh.read())


def resolve_group(inv: Inventory, name: str) -> HostGroup:
    """Exact-name group lookup."""
    try:
        return inv.groups[name]
    except KeyError:
        raise UnknownGroup(f"no group named {name!r}") from None


def serialize_inventory(inv: Inventory) -> str:
    """Render an Inventory back to file text, one concrete host per line.

    Ranges are not re-compressed, so parse(serialize(inv)) == inv for any
    valid Inventory.
    """
    lines: list[str] = []
    for group in inv.groups.values():
        if lines:
            lines.append("")
        lines.append(f"[{group.name}]")
        for host in group.hosts:
            parts = [host.address]
            parts += [f"{k}={v}" for k, v in host.vars.items()]
            lines.append(" ".join(parts))
    return "\n".join(lines) + "\n"
