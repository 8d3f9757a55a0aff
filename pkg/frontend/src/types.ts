/** Wire-facing DTO shapes for the control plane's HTTP + /stream contracts. */

export interface LinkInfo {
  delay_ms: number;
  rate_kbit: number | null;
}

export type PowerState = "off" | "booting" | "on";

export interface NodeStatus {
  node_id: number;
  address: string;
  rack: number;
  role: "control" | "worker";
  power: PowerState;
  busy: boolean;
  connection: "connected" | "disconnected";
  current_uA: number;
  bus_mV: number;
  last_sample_us: number | null;
  link: LinkInfo;
}

export interface SamplePayload {
  seq: number;
  timestamp_us: number;
  current_uA: number;
  bus_mV: number;
}

export type PhaseState = "pending" | "running" | "ok" | "failed" | "skipped";

export interface Phase {
  name: string;
  status: PhaseState;
  detail: string;
}

export interface ReportRow {
  node: string;
  duration_s: number;
  energy_J: number;
  mean_power_W: number;
  sample_count: number;
  warning: boolean;
}

export interface RunJson {
  run_id: string;
  group: string;
  finished: boolean;
  ok: boolean;
  phases: Phase[];
  report: ReportRow[] | null;
  total_energy_J: number | null;
}

/** One line of /stream. Node-scoped sim events carry the node's full status
 * under payload.status; samples carry a SamplePayload. */
export interface StreamEvent {
  kind: string;
  node_id: number | null;
  timestamp_us: number;
  payload: Record<string, unknown>;
}

export interface PlanResponse {
  plan_id: string;
  transitions: number;
  duration_ms: number;
  banks: string[];
}

export interface ExperimentForm {
  group: string;
  delay_ms: number;
  rate_kbit: number | null;
  duration_s: number;
  workload: string;
}
