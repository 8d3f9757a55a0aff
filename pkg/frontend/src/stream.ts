/** Reconnecting reader for the newline-delimited /stream feed. */

import type { FetchLike } from "./api.js";
import type { NodeStatus, StreamEvent } from "./types.js";

export const INITIAL_BACKOFF_MS = 500;
export const MAX_BACKOFF_MS = 10_000;

export interface StreamCallbacks {
  onEvent(ev: StreamEvent): void;
  onStale(stale: boolean): void;
  /** fresh GET /nodes snapshot fetched after a reconnect */
  onResync(nodes: NodeStatus[]): void;
}

export class StreamClient {
  private stopped = false;
  private controller: AbortController | null = null;
  backoffMs = INITIAL_BACKOFF_MS;

  constructor(
    private base: string,
    private cb: StreamCallbacks,
    private fetchFn: FetchLike = (input, init) => fetch(input, init),
  ) {}

  start(): Promise<void> {
    return this.loop();
  }

  stop(): void {
    this.stopped = true;
    this.controller?.abort();
  }

  private async loop(): Promise<void> {
    let everConnected = false;
    while (!this.stopped) {
      try {
        this.controller = new AbortController();
        const res = await this.fetchFn(`${this.base}/stream`, {
          signal: this.controller.signal,
        });
        if (!res.ok || !res.body) {
          throw new Error(`stream returned ${res.status}`);
        }
        if (everConnected) {
          // the stream sends its own snapshot, but state may have moved
          // while we were down; a fresh /nodes read closes the gap
          const nodes = await this.fetchFn(`${this.base}/nodes`)
            .then((r) => r.json() as Promise<{ nodes: NodeStatus[] }>)
            .then((body) => body.nodes);
          this.cb.onResync(nodes);
        }
        this.backoffMs = INITIAL_BACKOFF_MS;
        this.cb.onStale(false);
        everConnected = true;
        await this.read(res.body);
      } catch {
        // connect or read failed; fall through to the retry delay
      }
      if (this.stopped) return;
      this.cb.onStale(true);
      await delay(this.backoffMs);
      this.backoffMs = Math.min(this.backoffMs * 2, MAX_BACKOFF_MS);
    }
  }

  private async read(body: ReadableStream<Uint8Array>): Promise<void> {
    const reader = body.getReader();
    const decoder = new TextDecoder();
    let buf = "";
    try {
      for (;;) {
        const { done, value } = await reader.read();
        if (done) break;
        buf += decoder.decode(value, { stream: true });
        let nl: number;
        while ((nl = buf.indexOf("\n")) >= 0) {
          const line = buf.slice(0, nl).trim();
          buf = buf.slice(nl + 1);
          if (line) this.deliver(line);
        }
      }
    } finally {
      reader.releaseLock();
    }
  }

  private deliver(line: string): void {
    let ev: StreamEvent;
    try {
      ev = JSON.parse(line) as StreamEvent;
    } catch {
      return; // half-written line from a dying connection
    }
    this.cb.onEvent(ev);
  }
}

function delay(ms: number): Promise<void> {
  return new Promise((resolve) => setTimeout(resolve, ms));
}
