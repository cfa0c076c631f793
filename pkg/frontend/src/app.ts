/** Console wiring: live client map, history browser, command terminal.
 * All protocol logic lives in api.ts/history.ts/terminal.ts; this file
 * only touches the DOM.
 */

import { ApiClient, ClientEntry, MeasurementFilter } from "./api.js";
import { fitView, markerColor, markerRadius } from "./markers.js";
import { HistoryRow, loadHistory, toCsv } from "./history.js";
import { executeLine } from "./terminal.js";

const $ = <T extends HTMLElement>(id: string): T => {
  const el = document.getElementById(id);
  if (!el) throw new Error(`missing #${id}`);
  return el as T;
};

let api: ApiClient | null = null;
let pollTimer: number | null = null;

// ------------------------------------------------------------- connection

function setHealth(ok: boolean | null, detail: string): void {
  const dot = $("health");
  dot.className = ok === null ? "dot" : ok ? "dot ok" : "dot bad";
  dot.title = detail;
  $("health-text").textContent = detail;
}

async function connect(): Promise<void> {
  const base = ($("base") as HTMLInputElement).value.replace(/\/+$/, "");
  const candidate = new ApiClient(base);
  setHealth(null, "connecting...");
  try {
    await candidate.healthz();
  } catch (e) {
    setHealth(false, `unreachable: ${(e as Error).message}`);
    return;
  }
  api = candidate;
  setHealth(true, base);
  if (pollTimer !== null) window.clearInterval(pollTimer);
  pollTimer = window.setInterval(() => void refreshMap(), 2000);
  void refreshMap();
}

// -------------------------------------------------------------------- map

const SVG_NS = "http://www.w3.org/2000/svg";
const VIEW = { width: 520, height: 420, pad: 30 };

function renderMap(clients: ClientEntry[]): void {
  const svg = $("map") as unknown as SVGSVGElement;
  while (svg.lastChild) svg.removeChild(svg.lastChild);
  const placed = clients.filter((c) => c.lat !== null && c.lon !== null);
  const pts = fitView(
    placed.map((c) => [c.lat as number, c.lon as number] as const),
    VIEW,
  );
  placed.forEach((c, i) => {
    const p = pts[i]!;
    const g = document.createElementNS(SVG_NS, "g");
    const circle = document.createElementNS(SVG_NS, "circle");
    circle.setAttribute("cx", String(p.x));
    circle.setAttribute("cy", String(p.y));
    circle.setAttribute("r", String(markerRadius(c.last_rssi_dbm)));
    circle.setAttribute("fill", markerColor(c.state));
    circle.setAttribute("fill-opacity", "0.55");
    circle.setAttribute("stroke", markerColor(c.state));
    const title = document.createElementNS(SVG_NS, "title");
    title.textContent =
      `${c.device_id} (${c.state})\n` +
      `last rssi: ${c.last_rssi_dbm === null ? "n/a" : c.last_rssi_dbm.toFixed(1) + " dBm"}\n` +
      `seen t=${c.last_seen_ts.toFixed(1)}s`;
    circle.appendChild(title);
    const label = document.createElementNS(SVG_NS, "text");
    label.setAttribute("x", String(p.x));
    label.setAttribute("y", String(p.y - markerRadius(c.last_rssi_dbm) - 4));
    label.setAttribute("text-anchor", "middle");
    label.textContent = c.device_id;
    g.appendChild(circle);
    g.appendChild(label);
    svg.appendChild(g);
  });
  $("map-status").textContent =
    `${clients.length} client(s), ${placed.length} with a position`;
}

async function refreshMap(): Promise<void> {
  if (!api) return;
  try {
    renderMap(await api.clients());
  } catch (e) {
    setHealth(false, `poll failed: ${(e as Error).message}`);
  }
}

// ---------------------------------------------------------------- history

let lastRows: HistoryRow[] = [];

function readFilter(): MeasurementFilter {
  const f: MeasurementFilter = {};
  const val = (id: string) => ($(id) as HTMLInputElement).value.trim();
  if (val("f-device")) f.deviceIds = val("f-device").split(",").map((s) => s.trim());
  if (val("f-kind")) f.kinds = val("f-kind").split(",").map((s) => s.trim());
  if (val("f-t0")) f.t0 = Number(val("f-t0"));
  if (val("f-t1")) f.t1 = Number(val("f-t1"));
  if (val("f-rssi")) f.minRssiDbm = Number(val("f-rssi"));
  if (val("f-since")) f.sinceId = Number(val("f-since"));
  if (val("f-limit")) f.limit = Number(val("f-limit"));
  return f;
}

function renderRows(rows: HistoryRow[]): void {
  const body = $("history-body");
  body.textContent = "";
  for (const r of rows) {
    const tr = document.createElement("tr");
    const cells = [
      String(r.id),
      r.deviceId,
      r.ts.toFixed(3),
      r.kind,
      (r.freqHz / 1e6).toFixed(3),
      r.lat.toFixed(5),
      r.lon.toFixed(5),
      r.rssiDbm === null ? "" : r.rssiDbm.toFixed(1),
    ];
    for (const c of cells) {
      const td = document.createElement("td");
      td.textContent = c;
      tr.appendChild(td);
    }
    body.appendChild(tr);
  }
  $("history-count").textContent = `${rows.length} row(s)`;
}

async function runQuery(): Promise<void> {
  if (!api) {
    $("history-count").textContent = "not connected";
    return;
  }
  try {
    lastRows = await loadHistory(api, readFilter());
    renderRows(lastRows);
  } catch (e) {
    lastRows = [];
    renderRows([]);
    $("history-count").textContent = `query failed: ${(e as Error).message}`;
  }
}

function exportCsv(): void {
  const blob = new Blob([toCsv(lastRows)], { type: "text/csv" });
  const a = document.createElement("a");
  a.href = URL.createObjectURL(blob);
  a.download = "measurements.csv";
  a.click();
  URL.revokeObjectURL(a.href);
}

// --------------------------------------------------------------- terminal

function printLines(lines: string[]): void {
  const log = $("term-log");
  for (const line of lines) {
    const div = document.createElement("div");
    div.textContent = line;
    if (line.startsWith("error:")) div.className = "err";
    log.appendChild(div);
  }
  log.scrollTop = log.scrollHeight;
}

async function onTerminalEnter(): Promise<void> {
  const input = $("term-input") as HTMLInputElement;
  const line = input.value;
  input.value = "";
  if (line.trim() === "") return;
  printLines([`> ${line}`]);
  if (!api) {
    printLines(["error: not connected"]);
    return;
  }
  printLines(await executeLine(api, line));
}

// ------------------------------------------------------------------ setup

window.addEventListener("DOMContentLoaded", () => {
  $("connect").addEventListener("click", () => void connect());
  $("run-query").addEventListener("click", () => void runQuery());
  $("export-csv").addEventListener("click", exportCsv);
  ($("term-input") as HTMLInputElement).addEventListener("keydown", (ev) => {
    if (ev.key === "Enter") void onTerminalEnter();
  });
  const params = new URLSearchParams(window.location.search);
  const base = params.get("api");
  if (base) ($("base") as HTMLInputElement).value = base;
  void connect();
});
