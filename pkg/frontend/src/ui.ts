/** DOM renderer. render() rebuilds the page from (model, view) on each
 * frame; all interaction goes through the handlers, never back into the
 * model directly. */

import type { Model, SparkPoint, Tile } from "./model.js";
import { powerW, racks, reportCsv, totalPowerW } from "./model.js";
import type { PowerRequest } from "./api.js";
import type { ExperimentForm, ReportRow } from "./types.js";

export type SortKey = "node" | "duration_s" | "energy_J" | "mean_power_W" | "sample_count";

export interface ViewState {
  sortKey: SortKey;
  sortDir: 1 | -1;
  formError: string | null;
  playbooks: string[];
  playbookResult: string | null;
  groupsHint: string[];
}

export function initialView(): ViewState {
  return {
    sortKey: "node",
    sortDir: 1,
    formError: null,
    playbooks: [],
    playbookResult: null,
    groupsHint: [],
  };
}

export interface Handlers {
  onPower(req: PowerRequest): void;
  onLaunch(form: ExperimentForm): void;
  onFormError(message: string | null): void;
  onSort(key: SortKey): void;
  onRunPlaybook(name: string, extraVars: Record<string, string>): void;
}

function el<K extends keyof HTMLElementTagNameMap>(
  doc: Document,
  tag: K,
  attrs: Record<string, string> = {},
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = doc.createElement(tag);
  for (const [k, v] of Object.entries(attrs)) node.setAttribute(k, v);
  if (text !== undefined) node.textContent = text;
  return node;
}

const SVG_NS = "http://www.w3.org/2000/svg";

function sparkSvg(doc: Document, points: SparkPoint[], w: number, h: number): SVGSVGElement {
  const svg = doc.createElementNS(SVG_NS, "svg");
  svg.setAttribute("viewBox", `0 0 ${w} ${h}`);
  svg.setAttribute("class", "spark");
  svg.setAttribute("preserveAspectRatio", "none");
  if (points.length >= 2) {
    const t0 = points[0]!.t_us;
    const t1 = points[points.length - 1]!.t_us;
    const span = Math.max(t1 - t0, 1);
    let max = 0;
    for (const p of points) max = Math.max(max, p.w);
    const scale = max > 0 ? max : 1;
    const coords = points
      .map((p) => {
        const x = ((p.t_us - t0) / span) * w;
        const y = h - (p.w / scale) * (h - 1);
        return `${x.toFixed(1)},${y.toFixed(1)}`;
      })
      .join(" ");
    const line = doc.createElementNS(SVG_NS, "polyline");
    line.setAttribute("points", coords);
    svg.appendChild(line);
  }
  return svg;
}

function tileDiv(doc: Document, tile: Tile): HTMLElement {
  const { node } = tile;
  const classes = ["tile", `power-${node.power}`];
  if (tile.pending) classes.push("pending");
  if (node.connection === "connected") classes.push("connected");
  const div = el(doc, "div", {
    class: classes.join(" "),
    "data-node-id": String(node.node_id),
    "data-power": node.power,
    title: `${node.address} (${node.role})`,
  });
  div.appendChild(el(doc, "div", { class: "addr" }, node.address.split(".").slice(-1)[0]!));
  const watts =
    node.connection === "connected"
      ? `${powerW(node.current_uA, node.bus_mV).toFixed(2)} W`
      : node.power;
  div.appendChild(el(doc, "div", { class: "watts" }, tile.pending ? "switching…" : watts));
  div.appendChild(sparkSvg(doc, tile.spark, 60, 16));
  const badges = el(doc, "div", { class: "badges" });
  if (node.link.delay_ms > 0 || node.link.rate_kbit !== null) {
    const parts: string[] = [];
    if (node.link.delay_ms > 0) parts.push(`${node.link.delay_ms}ms`);
    if (node.link.rate_kbit !== null) parts.push(`${node.link.rate_kbit}k`);
    badges.appendChild(el(doc, "span", { class: "link-badge" }, parts.join(" ")));
  }
  if (node.busy) badges.appendChild(el(doc, "span", { class: "busy-badge" }, "busy"));
  div.appendChild(badges);
  return div;
}

function rackSections(doc: Document, model: Model): HTMLElement {
  const wrap = el(doc, "div", { id: "racks" });
  for (const [rackId, tiles] of racks(model)) {
    const section = el(doc, "section", { class: "rack", "data-rack": String(rackId) });
    const on = tiles.filter((t) => t.node.power === "on").length;
    section.appendChild(el(doc, "h2", {}, `rack ${rackId} (${on}/${tiles.length} on)`));
    const grid = el(doc, "div", { class: "tile-grid" });
    for (const tile of tiles) grid.appendChild(tileDiv(doc, tile));
    section.appendChild(grid);
    wrap.appendChild(section);
  }
  return wrap;
}

function aggregatePanel(doc: Document, model: Model): HTMLElement {
  const panel = el(doc, "section", { id: "aggregate", class: "panel" });
  panel.appendChild(el(doc, "h2", {}, "testbed power"));
  panel.appendChild(
    el(doc, "div", { id: "total-power" }, `${totalPowerW(model).toFixed(2)} W total`),
  );
  const svg = sparkSvg(doc, model.aggregate, 600, 60);
  svg.setAttribute("class", "spark aggregate-chart");
  panel.appendChild(svg);
  return panel;
}

function intField(input: HTMLInputElement, fallback: number): number {
  const raw = input.value.trim();
  if (raw === "") return fallback;
  return Number(raw);
}

function powerControls(doc: Document, view: ViewState, handlers: Handlers): HTMLElement {
  const panel = el(doc, "section", { id: "power-controls", class: "panel" });
  panel.appendChild(el(doc, "h2", {}, "power"));

  const groupRow = el(doc, "div", { class: "row" });
  const groupInput = el(doc, "input", {
    id: "power-group",
    list: "group-hints",
    value: view.groupsHint[0] ?? "",
    placeholder: "group name",
  });
  const hints = el(doc, "datalist", { id: "group-hints" });
  for (const g of view.groupsHint) hints.appendChild(el(doc, "option", { value: g }));
  const staggerInput = el(doc, "input", {
    id: "power-stagger",
    type: "number",
    placeholder: "stagger ms",
  });
  const onBtn = el(doc, "button", { id: "group-on" }, "group on");
  const offBtn = el(doc, "button", { id: "group-off", class: "danger" }, "group off");
  const send = (state: "on" | "off") => {
    const req: PowerRequest = { state, group: groupInput.value.trim() };
    const stagger = staggerInput.value.trim();
    if (stagger !== "") req.stagger_ms = Number(stagger);
    handlers.onPower(req);
  };
  onBtn.addEventListener("click", () => send("on"));
  offBtn.addEventListener("click", () => send("off"));
  groupRow.append(groupInput, hints, staggerInput, onBtn, offBtn);
  panel.appendChild(groupRow);

  const relayRow = el(doc, "div", { class: "row" });
  const bankInput = el(doc, "input", { id: "relay-bank", placeholder: "bank (control addr)" });
  const relayInput = el(doc, "input", {
    id: "relay-id",
    type: "number",
    min: "0",
    placeholder: "relay",
  });
  const relayOn = el(doc, "button", { id: "relay-on" }, "relay on");
  const relayOff = el(doc, "button", { id: "relay-off", class: "danger" }, "relay off");
  const sendRelay = (state: "on" | "off") =>
    handlers.onPower({
      state,
      bank: bankInput.value.trim(),
      relay_id: intField(relayInput, 0),
    });
  relayOn.addEventListener("click", () => sendRelay("on"));
  relayOff.addEventListener("click", () => sendRelay("off"));
  relayRow.append(bankInput, relayInput, relayOn, relayOff);
  panel.appendChild(relayRow);
  return panel;
}

function playbookPanel(doc: Document, view: ViewState, handlers: Handlers): HTMLElement {
  const panel = el(doc, "section", { id: "playbooks", class: "panel" });
  panel.appendChild(el(doc, "h2", {}, "playbooks"));
  const row = el(doc, "div", { class: "row" });
  const select = el(doc, "select", { id: "playbook-name" });
  for (const name of view.playbooks) select.appendChild(el(doc, "option", { value: name }, name));
  const vars = el(doc, "input", { id: "playbook-vars", placeholder: "k=v k=v" });
  const run = el(doc, "button", { id: "playbook-run" }, "run");
  run.addEventListener("click", () => {
    const extra: Record<string, string> = {};
    for (const pair of vars.value.trim().split(/\s+/).filter(Boolean)) {
      const eq = pair.indexOf("=");
      if (eq > 0) extra[pair.slice(0, eq)] = pair.slice(eq + 1);
    }
    handlers.onRunPlaybook(select.value, extra);
  });
  row.append(select, vars, run);
  panel.appendChild(row);
  if (view.playbookResult !== null) {
    panel.appendChild(el(doc, "div", { id: "playbook-result" }, view.playbookResult));
  }
  return panel;
}

export function validateExperiment(form: ExperimentForm): string | null {
  if (!form.group) return "group is required";
  if (!Number.isFinite(form.delay_ms) || form.delay_ms < 0) {
    return "delay must be a non-negative number of ms";
  }
  if (form.rate_kbit !== null && (!Number.isFinite(form.rate_kbit) || form.rate_kbit <= 0)) {
    return "rate must be a positive number of kbit/s";
  }
  if (!Number.isFinite(form.duration_s) || form.duration_s <= 0) {
    return "duration must be a positive number of seconds";
  }
  return null;
}

function experimentForm(doc: Document, view: ViewState, handlers: Handlers): HTMLElement {
  const form = el(doc, "div", { class: "row" });
  const group = el(doc, "input", {
    id: "exp-group",
    list: "group-hints",
    value: view.groupsHint[0] ?? "",
    placeholder: "group",
  });
  const delay = el(doc, "input", {
    id: "exp-delay",
    type: "number",
    value: "0",
    placeholder: "delay ms",
  });
  const rate = el(doc, "input", { id: "exp-rate", type: "number", placeholder: "rate kbit" });
  const duration = el(doc, "input", {
    id: "exp-duration",
    type: "number",
    value: "10",
    placeholder: "duration s",
  });
  const workload = el(doc, "input", { id: "exp-workload", value: "idle", placeholder: "workload" });
  const launch = el(doc, "button", { id: "exp-launch" }, "launch");
  launch.addEventListener("click", () => {
    const spec: ExperimentForm = {
      group: group.value.trim(),
      delay_ms: intField(delay, 0),
      rate_kbit: rate.value.trim() === "" ? null : Number(rate.value),
      duration_s: duration.value.trim() === "" ? 10 : Number(duration.value),
      workload: workload.value.trim() || "idle",
    };
    const err = validateExperiment(spec);
    if (err !== null) {
      handlers.onFormError(err);
      return;
    }
    handlers.onFormError(null);
    handlers.onLaunch(spec);
  });
  form.append(group, delay, rate, duration, workload, launch);
  return form;
}

const PHASE_NAMES = ["apply_links", "power_on", "workload", "collect", "reset"];

function sortedRows(rows: ReportRow[], view: ViewState): ReportRow[] {
  const key = view.sortKey;
  return [...rows].sort((a, b) => {
    const av = a[key];
    const bv = b[key];
    return (av < bv ? -1 : av > bv ? 1 : 0) * view.sortDir;
  });
}

function runPanel(doc: Document, model: Model, view: ViewState, handlers: Handlers): HTMLElement {
  const panel = el(doc, "section", { id: "experiment", class: "panel" });
  panel.appendChild(el(doc, "h2", {}, "experiment"));
  panel.appendChild(experimentForm(doc, view, handlers));
  if (view.formError !== null) {
    panel.appendChild(el(doc, "div", { class: "form-error" }, view.formError));
  }

  const run = model.run;
  if (run === null) return panel;

  const rp = el(doc, "div", { id: "run-panel" });
  rp.appendChild(
    el(
      doc,
      "div",
      { class: "run-id" },
      `run ${run.run_id} on ${run.group}` +
        (run.finished ? (run.ok ? " — ok" : " — failed") : ""),
    ),
  );
  const chips = el(doc, "div", { class: "phases" });
  for (const name of PHASE_NAMES) {
    const phase = run.phases.find((p) => p.name === name);
    const status = phase ? phase.status : "pending";
    const chip = el(
      doc,
      "span",
      { class: `phase-chip phase-${status}`, "data-phase": name, "data-status": status },
      `${name}: ${status}`,
    );
    if (phase && phase.detail) chip.setAttribute("title", phase.detail);
    chips.appendChild(chip);
  }
  rp.appendChild(chips);

  if (run.total_energy_J !== null) {
    rp.appendChild(
      el(doc, "div", { id: "run-energy" }, `total energy ${run.total_energy_J.toFixed(4)} J`),
    );
  }
  if (run.report !== null && run.report.length > 0) {
    const table = el(doc, "table", { id: "energy-table" });
    const thead = el(doc, "thead");
    const headRow = el(doc, "tr");
    const cols: [SortKey, string][] = [
      ["node", "node"],
      ["duration_s", "duration s"],
      ["energy_J", "energy J"],
      ["mean_power_W", "mean W"],
      ["sample_count", "samples"],
    ];
    for (const [key, label] of cols) {
      const mark = view.sortKey === key ? (view.sortDir > 0 ? " ▲" : " ▼") : "";
      const th = el(doc, "th", { "data-key": key }, label + mark);
      th.addEventListener("click", () => handlers.onSort(key));
      headRow.appendChild(th);
    }
    thead.appendChild(headRow);
    table.appendChild(thead);
    const tbody = el(doc, "tbody");
    for (const row of sortedRows(run.report, view)) {
      const tr = el(doc, "tr", row.warning ? { class: "warning" } : {});
      tr.appendChild(el(doc, "td", {}, String(row.node)));
      tr.appendChild(el(doc, "td", {}, row.duration_s.toFixed(3)));
      tr.appendChild(el(doc, "td", {}, row.energy_J.toFixed(4)));
      tr.appendChild(el(doc, "td", {}, row.mean_power_W.toFixed(4)));
      tr.appendChild(el(doc, "td", {}, String(row.sample_count)));
      tbody.appendChild(tr);
    }
    table.appendChild(tbody);
    rp.appendChild(table);
    const csv = el(
      doc,
      "a",
      {
        id: "csv-link",
        href: "data:text/csv;charset=utf-8," + encodeURIComponent(reportCsv(run.report)),
        download: `${run.run_id}_report.csv`,
      },
      "download csv",
    );
    rp.appendChild(csv);
  }
  panel.appendChild(rp);
  return panel;
}

export function render(
  root: HTMLElement,
  model: Model,
  view: ViewState,
  handlers: Handlers,
): void {
  const doc = root.ownerDocument;

  // the whole page is rebuilt on every frame; carry typed-in field values
  // (and focus) across so live updates do not eat user input
  const keep = new Map<string, string>();
  root.querySelectorAll<HTMLInputElement>("input[id], select[id]").forEach((node) => {
    keep.set(node.id, node.value);
  });
  const focused = doc.activeElement?.id ?? "";

  root.textContent = "";

  if (model.stale) {
    root.appendChild(
      el(doc, "div", { class: "stale-banner" }, "connection lost — reconnecting"),
    );
  }
  const toasts = el(doc, "div", { id: "toasts" });
  for (const text of model.toasts) toasts.appendChild(el(doc, "div", { class: "toast" }, text));
  root.appendChild(toasts);

  root.appendChild(aggregatePanel(doc, model));
  const controls = el(doc, "div", { class: "controls" });
  controls.appendChild(powerControls(doc, view, handlers));
  controls.appendChild(playbookPanel(doc, view, handlers));
  root.appendChild(controls);
  root.appendChild(runPanel(doc, model, view, handlers));
  root.appendChild(rackSections(doc, model));

  for (const [id, value] of keep) {
    const node = root.querySelector<HTMLInputElement>(`#${id}`);
    if (node) node.value = value;
  }
  if (focused) {
    const node = root.querySelector<HTMLElement>(`#${focused}`);
    node?.focus();
  }
}
