"""Discrete-event testbed simulator: virtual clock, in-memory network, nodes."""

from rackbench.sim.events import ProcessHandle, Scheduler
from rackbench.sim.network import ConnectionRefused, SimConnection, SimNetwork
from rackbench.sim.testbed import (
    NodeState,
    ScenarioConfig,
    SimNode,
    SimTestbed,
    SupplyFault,
    build_testbed,
    parse_scenario,
)

__all__ = [
    "ConnectionRefused",
    "NodeState",
    "ProcessHandle",
    "ScenarioConfig",
    "Scheduler",
    "SimConnection",
    "SimNetwork",
    "SimNode",
    "SimTestbed",
    "SupplyFault",
    "build_testbed",
    "parse_scenario",
]
