/** Thin HTTP client over the control-plane API. */

import type { NodeStatus, PlanResponse, RunJson } from "./types.js";

export class ApiError extends Error {
  constructor(
    public status: number,
    message: string,
  ) {
    super(message);
    this.name = "ApiError";
  }
}

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

async function decode<T>(res: Response): Promise<T> {
  const text = await res.text();
  if (!res.ok) {
    let detail = text;
    try {
      const body = JSON.parse(text) as { error?: string };
      if (body.error) detail = body.error;
    } catch {
      // keep raw body
    }
    throw new ApiError(res.status, detail || res.statusText);
  }
  return JSON.parse(text) as T;
}

export interface PowerRequest {
  state: "on" | "off";
  group?: string;
  bank?: string;
  relay_id?: number;
  stagger_ms?: number;
}

export interface ExperimentRequest {
  group: string;
  delay_ms?: number;
  rate_kbit?: number | null;
  duration_s?: number;
  workload?: string;
}

export interface PlaybookRun {
  ok: boolean;
  results: {
    host: string;
    task: string;
    status: string;
    exit_code: number | null;
    stdout: string;
    stderr: string;
  }[];
}

export class Api {
  constructor(
    private base: string = "",
    private fetchFn: FetchLike = (input, init) => fetch(input, init),
  ) {}

  getNodes(group?: string): Promise<NodeStatus[]> {
    const suffix = group ? `?group=${encodeURIComponent(group)}` : "";
    return this.fetchFn(`${this.base}/nodes${suffix}`)
      .then((r) => decode<{ nodes: NodeStatus[] }>(r))
      .then((body) => body.nodes);
  }

  getPlaybooks(): Promise<string[]> {
    return this.fetchFn(`${this.base}/playbooks`)
      .then((r) => decode<{ playbooks: string[] }>(r))
      .then((body) => body.playbooks);
  }

  runPlaybook(name: string, extraVars: Record<string, string>): Promise<PlaybookRun> {
    return this.fetchFn(`${this.base}/playbooks/run`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ name, extra_vars: extraVars }),
    }).then((r) => decode<PlaybookRun>(r));
  }

  postPower(req: PowerRequest): Promise<PlanResponse> {
    return this.fetchFn(`${this.base}/power`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(req),
    }).then((r) => decode<PlanResponse>(r));
  }

  postExperiment(req: ExperimentRequest): Promise<RunJson> {
    return this.fetchFn(`${this.base}/experiments`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(req),
    }).then((r) => decode<RunJson>(r));
  }

  getExperiment(runId: string): Promise<RunJson> {
    return this.fetchFn(`${this.base}/experiments/${runId}`).then((r) => decode<RunJson>(r));
  }
}

/** Allows at most one in-flight mutation per target key; a second call for
 * the same key while the first is pending is rejected locally. */
export class CommandGate {
  private inFlight = new Set<string>();

  busy(key: string): boolean {
    return this.inFlight.has(key);
  }

  async run<T>(key: string, fn: () => Promise<T>): Promise<T | null> {
    if (this.inFlight.has(key)) return null;
    this.inFlight.add(key);
    try {
      return await fn();
    } finally {
      this.inFlight.delete(key);
    }
  }
}
