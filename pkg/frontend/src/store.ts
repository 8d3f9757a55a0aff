/** Wires the store, stream client, and DOM renderer together. All state
 * changes funnel through Store.update so the render loop sees one consistent
 * model per animation frame. */

import { Api, ApiError, CommandGate, type PowerRequest } from "./api.js";
import {
  applyEvent,
  applyRun,
  applySnapshot,
  clearPending,
  initialModel,
  markPending,
  setStale,
  toast,
  type Model,
} from "./model.js";
import { StreamClient } from "./stream.js";
import { initialView, render, type Handlers, type ViewState } from "./ui.js";
import type { ExperimentForm } from "./types.js";

const raf: (cb: () => void) => void =
  typeof requestAnimationFrame === "function"
    ? (cb) => void requestAnimationFrame(() => cb())
    : (cb) => void setTimeout(cb, 16);

export class Store {
  model: Model = initialModel();
  view: ViewState = initialView();
  private scheduled = false;
  handlers: Handlers | null = null;

  constructor(private root: HTMLElement) {}

  update(fn: (m: Model) => Model): void {
    this.model = fn(this.model);
    this.schedule();
  }

  updateView(fn: (v: ViewState) => ViewState): void {
    this.view = fn(this.view);
    this.schedule();
  }

  private schedule(): void {
    if (this.scheduled) return;
    this.scheduled = true;
    raf(() => {
      this.scheduled = false;
      if (this.handlers) render(this.root, this.model, this.view, this.handlers);
    });
  }
}

function powerKey(req: PowerRequest): string {
  return req.group !== undefined ? `group:${req.group}` : `bank:${req.bank}:${req.relay_id}`;
}

function errorText(err: unknown): string {
  if (err instanceof ApiError) return `error ${err.status}: ${err.message}`;
  return err instanceof Error ? err.message : String(err);
}

export function makeHandlers(
  store: Store,
  api: Api,
  gate: CommandGate,
  confirmFn: (msg: string) => boolean,
): Handlers {
  return {
    onPower(req: PowerRequest): void {
      if (req.group !== undefined && !req.group) {
        store.update((m) => toast(m, "power: group name is required"));
        return;
      }
      if (req.state === "off" && req.group !== undefined) {
        if (!confirmFn(`Power OFF every node in group ${req.group}?`)) return;
      }
      void gate.run(powerKey(req), async () => {
        let marked: number[] = [];
        try {
          if (req.group !== undefined) {
            // group membership lives server-side; resolve it so the member
            // tiles can show the optimistic switching state right away
            const members = await api.getNodes(req.group).catch(() => []);
            marked = members.map((n) => n.node_id);
            store.update((m) => markPending(m, marked, req.state));
          }
          const plan = await api.postPower(req);
          store.update((m) =>
            toast(m, `plan ${plan.plan_id}: ${plan.transitions} transitions queued`),
          );
        } catch (err) {
          store.update((m) => toast(clearPending(m, marked), errorText(err)));
        }
      });
    },

    onLaunch(form: ExperimentForm): void {
      void gate.run(`experiment:${form.group}`, async () => {
        try {
          const run = await api.postExperiment({
            group: form.group,
            delay_ms: form.delay_ms,
            rate_kbit: form.rate_kbit,
            duration_s: form.duration_s,
            workload: form.workload,
          });
          store.update((m) => applyRun(m, run));
        } catch (err) {
          store.update((m) => toast(m, errorText(err)));
        }
      });
    },

    onFormError(message: string | null): void {
      store.updateView((v) => ({ ...v, formError: message }));
    },

    onSort(key): void {
      store.updateView((v) =>
        v.sortKey === key
          ? { ...v, sortDir: v.sortDir === 1 ? -1 : 1 }
          : { ...v, sortKey: key, sortDir: 1 },
      );
    },

    onRunPlaybook(name: string, extraVars: Record<string, string>): void {
      void gate.run("playbook", async () => {
        store.updateView((v) => ({ ...v, playbookResult: `running ${name}…` }));
        try {
          const out = await api.runPlaybook(name, extraVars);
          const failed = out.results.filter((r) => r.status === "failed").length;
          store.updateView((v) => ({
            ...v,
            playbookResult: out.ok
              ? `${name}: ok (${out.results.length} task results)`
              : `${name}: FAILED (${failed} failed)`,
          }));
        } catch (err) {
          store.updateView((v) => ({ ...v, playbookResult: `${name}: ${errorText(err)}` }));
        }
      });
    },
  };
}

export function boot(root: HTMLElement, base = ""): { store: Store; stream: StreamClient } {
  const api = new Api(base);
  const gate = new CommandGate();
  const store = new Store(root);
  store.handlers = makeHandlers(store, api, gate, (msg) => window.confirm(msg));

  void api
    .getPlaybooks()
    .then((names) => store.updateView((v) => ({ ...v, playbooks: names })))
    .catch(() => undefined);

  const stream = new StreamClient(base, {
    onEvent: (ev) => store.update((m) => applyEvent(m, ev)),
    onStale: (stale) => store.update((m) => setStale(m, stale)),
    onResync: (nodes) => store.update((m) => applySnapshot(m, nodes)),
  });
  void stream.start();
  store.update((m) => m); // schedule the first paint
  return { store, stream };
}
