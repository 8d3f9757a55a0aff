import type { NodeStatus, RunJson, StreamEvent } from "../src/types.js";

export const CONTROL_OCTET = 42;

export function makeNode(
  rack: number,
  octet: number,
  over: Partial<NodeStatus> = {},
): NodeStatus {
  return {
    node_id: rack * 100 + octet,
    address: `192.168.${rack}.${octet}`,
    rack,
    role: octet === CONTROL_OCTET ? "control" : "worker",
    power: "off",
    busy: false,
    connection: "disconnected",
    current_uA: 0,
    bus_mV: 0,
    last_sample_us: null,
    link: { delay_ms: 0, rate_kbit: null },
    ...over,
  };
}

export function fullTopology(rackCount = 8): NodeStatus[] {
  const nodes: NodeStatus[] = [];
  for (let rack = 1; rack <= rackCount; rack++) {
    nodes.push(makeNode(rack, CONTROL_OCTET, { power: "on" }));
    for (let octet = 1; octet <= 16; octet++) nodes.push(makeNode(rack, octet));
  }
  return nodes;
}

export function snapshotEvent(nodes: NodeStatus[], t = 0): StreamEvent {
  return { kind: "snapshot", node_id: null, timestamp_us: t, payload: { nodes } };
}

export function sampleEvent(nodeId: number, t: number, uA = 500_000, mV = 5000): StreamEvent {
  return {
    kind: "sample",
    node_id: nodeId,
    timestamp_us: t,
    payload: { seq: 0, timestamp_us: t, current_uA: uA, bus_mV: mV },
  };
}

export function statusEvent(kind: string, node: NodeStatus, t: number): StreamEvent {
  return { kind, node_id: node.node_id, timestamp_us: t, payload: { status: node } };
}

export function runJson(over: Partial<RunJson> = {}): RunJson {
  return {
    run_id: "r1",
    group: "g",
    finished: false,
    ok: false,
    phases: [
      { name: "apply_links", status: "pending", detail: "" },
      { name: "power_on", status: "pending", detail: "" },
      { name: "workload", status: "pending", detail: "" },
      { name: "collect", status: "pending", detail: "" },
      { name: "reset", status: "pending", detail: "" },
    ],
    report: null,
    total_energy_J: null,
    ...over,
  };
}
