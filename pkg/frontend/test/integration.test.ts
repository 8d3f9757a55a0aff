/** End-to-end against a real `rackbench sim serve` process: the dashboard
 * model and DOM are driven only through the HTTP API and /stream. */
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { execSync, spawn, type ChildProcess } from "node:child_process";
import { mkdtemp, rm, writeFile } from "node:fs/promises";
import { createServer } from "node:net";
import { tmpdir } from "node:os";
import { join } from "node:path";

import { JSDOM } from "jsdom";

import { Api } from "../src/api.js";
import { applyEvent, applyLog, initialModel, type Model } from "../src/model.js";
import { StreamClient } from "../src/stream.js";
import { initialView, render, type Handlers } from "../src/ui.js";
import type { StreamEvent } from "../src/types.js";

const INVENTORY = `# one rack: 16 workers plus a control node

[odroids-testgroup]
192.168.1.[1:16] ssh_pass=odroid

[odroids-testgroup-consumer]
192.168.1.1 ssh_pass=odroid

[odroids-control]
192.168.1.42

[odroids-all-workers]
192.168.1.[1:16] ssh_pass=odroid
`;

const BOOT_MS = 500;
const STAGGER_MS = 250;

const SCENARIO = `racks = 1
boot_ms = ${BOOT_MS}
stagger_ms = ${STAGGER_MS}
sample_period_ms = 100
`;

const FAILING_WORKLOAD = `- hosts: {{ group }}
  tasks:
    - name: always fails
      shell: boom_not_a_command
`;

function hasRackbench(): boolean {
  try {
    execSync("rackbench --version", { stdio: "ignore" });
    return true;
  } catch {
    return false;
  }
}

function freePort(): Promise<number> {
  return new Promise((resolve, reject) => {
    const srv = createServer();
    srv.listen(0, "127.0.0.1", () => {
      const addr = srv.address();
      if (addr && typeof addr === "object") {
        const port = addr.port;
        srv.close(() => resolve(port));
      } else {
        srv.close(() => reject(new Error("no port")));
      }
    });
  });
}

function noopHandlers(): Handlers {
  return {
    onPower: () => undefined,
    onLaunch: () => undefined,
    onFormError: () => undefined,
    onSort: () => undefined,
    onRunPlaybook: () => undefined,
  };
}

async function waitFor(
  check: () => boolean,
  what: string,
  timeoutMs: number,
  everyMs = 100,
): Promise<void> {
  const deadline = Date.now() + timeoutMs;
  while (Date.now() < deadline) {
    if (check()) return;
    await new Promise((r) => setTimeout(r, everyMs));
  }
  throw new Error(`timed out after ${timeoutMs} ms waiting for ${what}`);
}

describe.skipIf(!hasRackbench())("dashboard against the simulated control plane", () => {
  let dir: string;
  let child: ChildProcess;
  let base: string;
  let api: Api;
  let stream: StreamClient;
  let stderrTail = "";

  // live model, fed exclusively by /stream; log keeps every event for replay
  const state: { model: Model } = { model: initialModel() };
  const log: StreamEvent[] = [];
  const staleFlips: boolean[] = [];

  const dom = new JSDOM('<!doctype html><html><body><div id="app"></div></body></html>');
  const root = dom.window.document.getElementById("app") as HTMLElement;

  function paint(): void {
    render(root, state.model, initialView(), noopHandlers());
  }

  beforeAll(async () => {
    dir = await mkdtemp(join(tmpdir(), "rbdash-"));
    await writeFile(join(dir, "inventory.ini"), INVENTORY);
    await writeFile(join(dir, "scenario.ini"), SCENARIO);
    await writeFile(join(dir, "failing_workload.yml"), FAILING_WORKLOAD);

    const port = await freePort();
    base = `http://127.0.0.1:${port}`;
    child = spawn(
      "rackbench",
      [
        "sim",
        "serve",
        "-i",
        join(dir, "inventory.ini"),
        "--scenario",
        join(dir, "scenario.ini"),
        "--http-port",
        String(port),
      ],
      { stdio: ["ignore", "ignore", "pipe"] },
    );
    child.stderr!.on("data", (chunk: Buffer) => {
      stderrTail = (stderrTail + chunk.toString()).slice(-4000);
    });

    const up = Date.now() + 15_000;
    for (;;) {
      try {
        const res = await fetch(`${base}/nodes`);
        if (res.ok) break;
      } catch {
        // not listening yet
      }
      if (Date.now() > up) {
        throw new Error(`server never came up; stderr:\n${stderrTail}`);
      }
      await new Promise((r) => setTimeout(r, 150));
    }

    api = new Api(base);
    stream = new StreamClient(base, {
      onEvent: (ev) => {
        log.push(ev);
        state.model = applyEvent(state.model, ev);
      },
      onStale: (s) => staleFlips.push(s),
      onResync: () => undefined,
    });
    void stream.start();
    await waitFor(
      () => Object.keys(state.model.tiles).length === 17,
      "the snapshot to arrive over /stream",
      10_000,
    );
  }, 30_000);

  afterAll(async () => {
    stream?.stop();
    if (child && child.exitCode === null) {
      child.kill("SIGTERM");
      await new Promise((resolve) => {
        child.once("exit", resolve);
        const t = setTimeout(resolve, 5000);
        if (typeof t === "object") t.unref();
      });
    }
    await rm(dir, { recursive: true, force: true });
  });

  it(
    "powers one rack on and 16 tiles reach On within the staggered interval",
    async () => {
      paint();
      expect(root.querySelectorAll(".tile")).toHaveLength(17);
      expect(root.querySelectorAll(".tile.power-on").length).toBeLessThanOrEqual(1);

      const started = Date.now();
      const plan = await api.postPower({
        state: "on",
        group: "odroids-testgroup",
        stagger_ms: STAGGER_MS,
      });
      expect(plan.transitions).toBe(4); // 4 relays cover the 16 workers

      await waitFor(
        () => {
          paint();
          return root.querySelectorAll(".tile.power-on").length === 17;
        },
        "all 16 worker tiles plus the control to show On",
        20_000,
      );
      const elapsed = Date.now() - started;
      // three stagger steps plus the boot window must have passed, with
      // slack for the 20 ms sim ticker and the polling quantum
      const expectedMs = 3 * STAGGER_MS + BOOT_MS;
      expect(elapsed).toBeGreaterThanOrEqual(expectedMs - 100);
      expect(elapsed).toBeLessThanOrEqual(expectedMs + 8000);

      // the sim's own clock must show the exact stagger pattern
      const powerUps = log.filter((e) => e.kind === "power-up" && e.node_id !== 142);
      expect(powerUps).toHaveLength(16);
      const times = [...new Set(powerUps.map((e) => e.timestamp_us))].sort((a, b) => a - b);
      expect(times).toHaveLength(4);
      for (let i = 1; i < times.length; i++) {
        expect(Math.abs(times[i]! - times[i - 1]! - STAGGER_MS * 1000)).toBeLessThanOrEqual(2000);
      }
      const boots = log.filter((e) => e.kind === "boot-complete" && e.node_id !== 142);
      expect(boots).toHaveLength(16);
      for (const boot of boots) {
        const up = powerUps.find((e) => e.node_id === boot.node_id)!;
        expect(Math.abs(boot.timestamp_us - up.timestamp_us - BOOT_MS * 1000)).toBeLessThanOrEqual(
          2000,
        );
      }

      // live telemetry follows: every worker tile converges on 2.5 W idle
      await waitFor(
        () => {
          paint();
          const watts = [...root.querySelectorAll(".tile.power-on .watts")].map(
            (w) => w.textContent,
          );
          return watts.filter((t) => t === "2.50 W").length >= 16;
        },
        "idle wattage to appear on the tiles",
        15_000,
      );
      expect(staleFlips).toEqual([false]); // never dropped
    },
    40_000,
  );

  it("replaying the recorded stream log reproduces an identical rendered model", () => {
    const replayA = applyLog(initialModel(), log);
    const replayB = applyLog(initialModel(), log);
    expect(JSON.stringify(replayA)).toBe(JSON.stringify(replayB));

    const domA = new JSDOM('<div id="app"></div>');
    const domB = new JSDOM('<div id="app"></div>');
    const rootA = domA.window.document.getElementById("app") as HTMLElement;
    const rootB = domB.window.document.getElementById("app") as HTMLElement;
    render(rootA, replayA, initialView(), noopHandlers());
    render(rootB, replayB, initialView(), noopHandlers());
    expect(rootA.innerHTML).toBe(rootB.innerHTML);
    expect(rootA.innerHTML.length).toBeGreaterThan(1000); // a real page, not a stub

    // and the replayed model matches what the live reducer built
    expect(JSON.stringify(replayA)).toBe(JSON.stringify(state.model));
  });

  it(
    "an experiment run ends with 5 Ok phases and a populated energy table",
    async () => {
      const run = await api.postExperiment({
        group: "odroids-testgroup",
        delay_ms: 0,
        rate_kbit: null,
        duration_s: 2,
        workload: "idle",
      });
      expect(run.run_id).toBeTruthy();

      await waitFor(
        () => state.model.run?.run_id === run.run_id && state.model.run.finished,
        "the experiment to finish (tracked via /stream)",
        60_000,
        200,
      );
      const final = state.model.run!;
      expect(final.ok).toBe(true);
      expect(final.phases.map((p) => p.status)).toEqual(["ok", "ok", "ok", "ok", "ok"]);
      expect(final.report).toHaveLength(16);
      for (const row of final.report!) {
        expect(row.sample_count).toBeGreaterThan(10);
        expect(Math.abs(row.energy_J - 5.0)).toBeLessThanOrEqual(0.25); // 2.5 W for 2 s
      }
      expect(Math.abs(final.total_energy_J! - 80.0)).toBeLessThanOrEqual(4.0);

      paint();
      expect(root.querySelectorAll(".phase-chip.phase-ok")).toHaveLength(5);
      expect(root.querySelectorAll("#energy-table tbody tr")).toHaveLength(16);
      const csv = root.querySelector("#csv-link")!.getAttribute("href")!;
      expect(csv.startsWith("data:text/csv")).toBe(true);
      expect(decodeURIComponent(csv)).toContain("\n116,");
    },
    90_000,
  );

  it(
    "a failing workload marks its phase Failed while reset still ends Ok",
    async () => {
      const run = await api.postExperiment({
        group: "odroids-testgroup",
        delay_ms: 0,
        rate_kbit: null,
        duration_s: 1,
        workload: join(dir, "failing_workload.yml"),
      });

      await waitFor(
        () => state.model.run?.run_id === run.run_id && state.model.run.finished,
        "the fault-injected experiment to finish",
        60_000,
        200,
      );
      const final = state.model.run!;
      expect(final.ok).toBe(false);
      const byName = Object.fromEntries(final.phases.map((p) => [p.name, p.status]));
      expect(byName["workload"]).toBe("failed");
      expect(byName["collect"]).toBe("skipped");
      expect(byName["reset"]).toBe("ok");

      paint();
      expect(root.querySelectorAll(".phase-chip.phase-failed")).toHaveLength(1);
      expect(root.querySelector('[data-phase="reset"]')!.getAttribute("data-status")).toBe("ok");
    },
    90_000,
  );
});
