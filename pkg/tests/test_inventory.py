"""Inventory parsing tests.

The expansion oracle below is written independently of the implementation:
it substitutes ranges by explicit nested loops and string concatenation, so
any agreement between the two is meaningful.
"""

import re

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rackbench import inventory as mod
from rackbench.inventory import (
    DuplicateGroupName,
    DuplicateHostAddress,
    HostLineBeforeAnyGroup,
    InvalidHostAddress,
    MalformedGroupHeader,
    MalformedRange,
    MalformedVarAssignment,
    UnknownGroup,
    UnterminatedGroupHeader,
    expand_pattern,
    parse_inventory,
    resolve_group,
    serialize_inventory,
)

from conftest import RACK_LISTING


# --- oracle ------------------------------------------------------------------

def oracle_expand(pattern: str) -> list[str]:
    """Reference expansion: left-to-right nested loops over each [lo:hi]."""
    m = re.search(r"\[(\d+):(\d+)\]", pattern)
    if m is None:
        return [pattern]
    lo, hi = int(m.group(1)), int(m.group(2))
    out = []
    for v in range(lo, hi + 1):
        rest = pattern[: m.start()] + str(v) + pattern[m.end():]
        out.extend(oracle_expand(rest))
    return out


def test_oracle_selfcheck():
    assert oracle_expand("10.0.0.[1:3]") == ["10.0.0.1", "10.0.0.2", "10.0.0.3"]
    assert oracle_expand("10.[1:2].0.[5:6]") == [
        "10.1.0.5", "10.1.0.6", "10.2.0.5", "10.2.0.6",
    ]


# --- the shipped rack listing -------------------------------------------------

def test_rack_listing_groups(rack_inventory):
    inv = rack_inventory
    assert list(inv.groups) == [
        "odroids-testgroup", "odroids-testgroup-consumer", "odroids-control",
    ]
    assert len(inv.groups["odroids-testgroup"].hosts) == 16
    assert len(inv.groups["odroids-testgroup-consumer"].hosts) == 1
    assert len(inv.groups["odroids-control"].hosts) == 8


def test_rack_listing_addresses(rack_inventory):
    test_group = rack_inventory.groups["odroids-testgroup"]
    assert test_group.addresses == [f"192.168.1.{i}" for i in range(1, 17)]
    control = rack_inventory.groups["odroids-control"]
    assert control.addresses == [f"192.168.{r}.42" for r in range(1, 9)]


def test_rack_listing_vars(rack_inventory):
    for host in rack_inventory.groups["odroids-testgroup"].hosts:
        assert host.vars == {"ssh_pass": "odroid"}
    for host in rack_inventory.groups["odroids-control"].hosts:
        assert host.vars == {}


def test_legacy_var_key_is_renamed():
    inv = parse_inventory("[g]\n10.0.0.1 ansible_ssh_pass=secret\n")
    assert inv.groups["g"].hosts[0].vars == {"ssh_pass": "secret"}


def test_overlapping_groups_are_independent():
    inv = parse_inventory(RACK_LISTING)
    consumer = inv.groups["odroids-testgroup-consumer"].hosts[0]
    member = inv.groups["odroids-testgroup"].hosts[0]
    assert consumer.address == member.address == "192.168.1.1"
    assert consumer is not member  # same address, distinct entries


# --- expansion against the oracle ---------------------------------------------

@pytest.mark.parametrize("pattern", [
    "10.0.0.7",
    "10.0.0.[1:1]",
    "10.0.0.[1:16]",
    "192.168.[1:8].42",
    "10.[1:3].[1:3].[1:3]",
    "10.0.[9:11].250",
])
def test_expand_matches_oracle(pattern):
    assert expand_pattern(pattern) == oracle_expand(pattern)


octet = st.integers(min_value=0, max_value=255)


@st.composite
def range_patterns(draw):
    """Patterns of 4 octet positions, each literal or a width<=10 range."""
    parts = []
    n_ranges = 0
    for _ in range(4):
        if n_ranges < 3 and draw(st.booleans()):
            lo = draw(st.integers(min_value=0, max_value=246))
            hi = draw(st.integers(min_value=lo, max_value=min(255, lo + 9)))
            parts.append(f"[{lo}:{hi}]")
            n_ranges += 1
        else:
            parts.append(str(draw(octet)))
    return ".".join(parts)


@settings(max_examples=300, deadline=None)
@given(range_patterns())
def test_expand_property_matches_oracle(pattern):
    assert expand_pattern(pattern) == oracle_expand(pattern)


@settings(max_examples=300, deadline=None)
@given(range_patterns())
def test_expand_count_law(pattern):
    expected = 1
    for lo, hi in re.findall(r"\[(\d+):(\d+)\]", pattern):
        expected *= int(hi) - int(lo) + 1
    result = expand_pattern(pattern)
    assert len(result) == expected
    assert len(set(result)) == expected  # no duplicates


def test_expand_is_pure():
    pattern = "10.0.[1:4].1"
    first = expand_pattern(pattern)
    second = expand_pattern(pattern)
    assert first == second and first is not second


# --- round trip ----------------------------------------------------------------

def test_serialize_parse_round_trip(rack_inventory):
    assert parse_inventory(serialize_inventory(rack_inventory)) == rack_inventory


group_names = st.text(
    alphabet=st.characters(whitelist_categories=("Ll", "Nd"), whitelist_characters="-_"),
    min_size=1, max_size=12,
).filter(lambda s: s.strip() == s and "[" not in s and "]" not in s)

var_values = st.text(
    alphabet=st.characters(whitelist_categories=("Ll", "Lu", "Nd")),
    min_size=1, max_size=8,
)


@st.composite
def inventories(draw):
    inv = mod.Inventory()
    names = draw(st.lists(group_names, min_size=1, max_size=4, unique=True))
    for name in names:
        group = mod.HostGroup(name=name)
        n_hosts = draw(st.integers(min_value=0, max_value=6))
        used: set[str] = set()
        for _ in range(n_hosts):
            address = ".".join(str(draw(octet)) for _ in range(4))
            if address in used:
                continue
            used.add(address)
            host_vars = draw(
                st.dictionaries(
                    st.sampled_from(["ssh_pass", "user", "tag"]), var_values, max_size=2
                )
            )
            group.hosts.append(mod.HostEntry(address=address, vars=host_vars))
        inv.groups[name] = group
    return inv


@settings(max_examples=200, deadline=None)
@given(inventories())
def test_round_trip_property(inv):
    assert parse_inventory(serialize_inventory(inv)) == inv


# --- errors ---------------------------------------------------------------------

@pytest.mark.parametrize("text,error", [
    ("[grp\n10.0.0.1\n", UnterminatedGroupHeader),
    ("[grp] trailing\n", MalformedGroupHeader),
    ("[]\n", MalformedGroupHeader),
    ("[a][b]\n", MalformedGroupHeader),
    ("10.0.0.1\n[grp]\n", HostLineBeforeAnyGroup),
    ("[grp]\n10.0.0.[5:1]\n", MalformedRange),
    ("[grp]\n10.0.0.[1:2:3]\n", MalformedRange),
    ("[grp]\n10.0.0.[01:5]\n", MalformedRange),
    ("[grp]\n10.0.0.[1:-3]\n", MalformedRange),
    ("[grp]\n10.0.0.[1:5\n", MalformedRange),
    ("[grp]\n10.0.0.1]\n", MalformedRange),
    ("[grp]\n[a]\n[grp]\n", DuplicateGroupName),
    ("[grp]\n10.0.0.1 novalue\n", MalformedVarAssignment),
    ("[grp]\n10.0.0.1 0bad=x\n", MalformedVarAssignment),
    ("[grp]\n10.0.0.256\n", InvalidHostAddress),
    ("[grp]\n10.0.0\n", InvalidHostAddress),
    ("[grp]\n10.0.0.01\n", InvalidHostAddress),
    ("[grp]\nhost.example.com\n", InvalidHostAddress),
    ("[grp]\n10.0.0.[250:260]\n", InvalidHostAddress),
    ("[grp]\n10.0.0.1\n10.0.0.[1:4]\n", DuplicateHostAddress),
])
def test_parse_errors(text, error):
    with pytest.raises(error):
        parse_inventory(text)


def test_same_address_ok_across_groups():
    inv = parse_inventory("[a]\n10.0.0.1\n[b]\n10.0.0.1\n")
    assert inv.groups["a"].addresses == inv.groups["b"].addresses


def test_comments_and_blanks_ignored():
    inv = parse_inventory("# heading\n\n[grp]\n# note\n10.0.0.1\n\n")
    assert inv.groups["grp"].addresses == ["10.0.0.1"]


def test_resolve_group_unknown(rack_inventory):
    with pytest.raises(UnknownGroup):
        resolve_group(rack_inventory, "no-such-group")


def test_error_hierarchy():
    for err in (UnterminatedGroupHeader, MalformedRange, UnknownGroup,
                DuplicateHostAddress, InvalidHostAddress):
        assert issubclass(err, mod.InventoryError)
