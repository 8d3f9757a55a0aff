"""Desk-scale rack testbed control: a 136-node simulator, relay power
plans with supply-safe staggering, TCP telemetry with energy accounting,
playbook orchestration and an HTTP control plane."""

__version__ = "0.1.0"
