/** Pure view model. The rendered state is a function of (last snapshot +
 * stream events since); applyEvent never mutates its input, so replaying the
 * same event log always reproduces an identical model. */

import type {
  NodeStatus,
  Phase,
  PhaseState,
  ReportRow,
  RunJson,
  SamplePayload,
  StreamEvent,
} from "./types.js";

export const SPARK_POINTS = 60;
// render-side downsampling: keep at most 10 points per second per node
export const MIN_POINT_SPACING_US = 100_000;
export const AGGREGATE_POINTS = 600;
export const MAX_TOASTS = 5;

export interface SparkPoint {
  t_us: number;
  w: number;
}

export interface Tile {
  node: NodeStatus;
  spark: SparkPoint[];
  /** optimistic state after the user clicked a power control, cleared when
   * the stream shows the node in the requested state */
  pending: "on" | "off" | null;
}

export interface Model {
  tiles: Record<number, Tile>;
  stale: boolean;
  run: RunJson | null;
  aggregate: SparkPoint[];
  toasts: string[];
  lastEventUs: number;
}

export function initialModel(): Model {
  return { tiles: {}, stale: false, run: null, aggregate: [], toasts: [], lastEventUs: 0 };
}

export function powerW(current_uA: number, bus_mV: number): number {
  return current_uA * 1e-6 * (bus_mV * 1e-3);
}

function pushPoint(points: SparkPoint[], pt: SparkPoint, cap: number): SparkPoint[] {
  const last = points[points.length - 1];
  if (last !== undefined && pt.t_us - last.t_us < MIN_POINT_SPACING_US) {
    return points;
  }
  const next = [...points, pt];
  return next.length > cap ? next.slice(next.length - cap) : next;
}

export function applySnapshot(model: Model, nodes: NodeStatus[]): Model {
  const tiles: Record<number, Tile> = {};
  for (const node of nodes) {
    const prev = model.tiles[node.node_id];
    tiles[node.node_id] = {
      node,
      spark: prev ? prev.spark : [],
      pending: prev && prev.pending !== node.power ? prev.pending : null,
    };
  }
  return { ...model, tiles };
}

const PHASE_RANK: Record<PhaseState, number> = {
  pending: 0,
  running: 1,
  ok: 2,
  failed: 2,
  skipped: 2,
};

/** Phases only move forward (pending -> running -> settled); an update that
 * would regress one keeps the current value. */
function mergePhases(prev: Phase[] | undefined, next: Phase[]): Phase[] {
  if (!prev) return next;
  return next.map((phase) => {
    const old = prev.find((p) => p.name === phase.name);
    if (old && PHASE_RANK[phase.status] < PHASE_RANK[old.status]) {
      return old;
    }
    return phase;
  });
}

function mergeRun(model: Model, run: RunJson): Model {
  const prev = model.run && model.run.run_id === run.run_id ? model.run : null;
  return {
    ...model,
    run: { ...run, phases: mergePhases(prev?.phases, run.phases) },
  };
}

function addToast(model: Model, text: string): Model {
  const toasts = [...model.toasts, text];
  return {
    ...model,
    toasts: toasts.length > MAX_TOASTS ? toasts.slice(toasts.length - MAX_TOASTS) : toasts,
  };
}

export function applyEvent(model: Model, ev: StreamEvent): Model {
  const base = ev.timestamp_us > model.lastEventUs
    ? { ...model, lastEventUs: ev.timestamp_us }
    : { ...model };

  if (ev.kind === "ping") {
    return base;
  }

  if (ev.kind === "snapshot") {
    const nodes = (ev.payload as { nodes?: NodeStatus[] }).nodes ?? [];
    return applySnapshot(base, nodes);
  }

  if (ev.kind === "sample" && ev.node_id !== null) {
    const tile = base.tiles[ev.node_id];
    if (!tile) return base;
    const sample = ev.payload as unknown as SamplePayload;
    const w = powerW(sample.current_uA, sample.bus_mV);
    const node: NodeStatus = {
      ...tile.node,
      connection: "connected",
      current_uA: sample.current_uA,
      bus_mV: sample.bus_mV,
      last_sample_us: sample.timestamp_us,
    };
    const tiles = {
      ...base.tiles,
      [ev.node_id]: {
        ...tile,
        node,
        spark: pushPoint(tile.spark, { t_us: sample.timestamp_us, w }, SPARK_POINTS),
      },
    };
    const aggregate = pushPoint(
      base.aggregate,
      { t_us: ev.timestamp_us, w: totalPowerW({ ...base, tiles }) },
      AGGREGATE_POINTS,
    );
    return { ...base, tiles, aggregate };
  }

  if (ev.kind === "supply-fault") {
    return addToast(base, `supply fault on rack ${String(ev.payload["rack"] ?? "?")}`);
  }

  if (ev.kind === "experiment") {
    return mergeRun(base, ev.payload as unknown as RunJson);
  }

  // every node-scoped sim event carries the node's refreshed status
  const status = ev.payload["status"] as NodeStatus | undefined;
  if (ev.node_id !== null && status) {
    const tile = base.tiles[ev.node_id];
    const pending = tile && tile.pending !== status.power ? (tile?.pending ?? null) : null;
    return {
      ...base,
      tiles: {
        ...base.tiles,
        [ev.node_id]: {
          node: status,
          spark: tile ? tile.spark : [],
          pending,
        },
      },
    };
  }

  return base;
}

export function applyLog(model: Model, events: StreamEvent[]): Model {
  return events.reduce(applyEvent, model);
}

export function setStale(model: Model, stale: boolean): Model {
  return model.stale === stale ? model : { ...model, stale };
}

export function markPending(model: Model, nodeIds: number[], target: "on" | "off"): Model {
  const tiles = { ...model.tiles };
  for (const id of nodeIds) {
    const tile = tiles[id];
    if (tile && tile.node.power !== target) {
      tiles[id] = { ...tile, pending: target };
    }
  }
  return { ...model, tiles };
}

export function clearPending(model: Model, nodeIds: number[]): Model {
  const tiles = { ...model.tiles };
  for (const id of nodeIds) {
    const tile = tiles[id];
    if (tile && tile.pending !== null) {
      tiles[id] = { ...tile, pending: null };
    }
  }
  return { ...model, tiles };
}

/** Fold a run_json (from POST response or stream) in, respecting phase
 * monotonicity against whatever is already displayed. */
export function applyRun(model: Model, run: RunJson): Model {
  return mergeRun(model, run);
}

export function toast(model: Model, text: string): Model {
  return addToast(model, text);
}

export function totalPowerW(model: Model): number {
  let total = 0;
  for (const tile of Object.values(model.tiles)) {
    if (tile.node.connection === "connected") {
      total += powerW(tile.node.current_uA, tile.node.bus_mV);
    }
  }
  return total;
}

export function racks(model: Model): Map<number, Tile[]> {
  const byRack = new Map<number, Tile[]>();
  const tiles = Object.values(model.tiles).sort((a, b) => a.node.node_id - b.node.node_id);
  for (const tile of tiles) {
    const list = byRack.get(tile.node.rack) ?? [];
    list.push(tile);
    byRack.set(tile.node.rack, list);
  }
  return new Map([...byRack.entries()].sort((a, b) => a[0] - b[0]));
}

export function reportCsv(rows: ReportRow[]): string {
  const header = "node_id,duration_s,energy_J,mean_power_W,sample_count";
  const body = rows.map(
    (r) => `${r.node},${r.duration_s},${r.energy_J},${r.mean_power_W},${r.sample_count}`,
  );
  return [header, ...body].join("\n") + "\n";
}
