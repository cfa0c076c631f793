/** Command terminal: a one-line grammar over POST /command.
 *
 *     <verb> <target> [<target> ...] [key=value ...]
 *
 * e.g. "stop dev-a dev-b", "lock dev-a freq=915e6",
 *      "rssi dev-c mode=direct interval=1 count=5".
 * Verbs are friendly aliases for the command kinds; exact kind names
 * (Stop, ReportRSSI, ...) work too. executeLine returns the lines the
 * terminal should print, so the round trip is testable without a DOM.
 */

import { ApiClient, ApiError, CommandReceipt } from "./api.js";

export interface ParsedCommand {
  kind: string;
  targets: string[];
  params?: Record<string, unknown>;
}

const VERBS: Record<string, string> = {
  stop: "Stop",
  reset: "Reset",
  lock: "Lock",
  rssi: "ReportRSSI",
  capture: "ContinuousCapture",
  trigger: "TriggeredCapture",
  tx: "Transmit",
  transmit: "Transmit",
  listen: "Listen",
  clock: "Clock",
  upload: "Upload",
  debug: "DebugMode",
};

const KNOWN_KINDS = new Set(Object.values(VERBS));

const KEY_ALIASES: Record<string, string> = {
  freq: "freq_hz",
  fs: "fs_hz",
  n: "n_samples",
  threshold: "threshold_dbm",
  power: "power_dbm",
  duration: "duration_s",
  interval: "interval_s",
  payload: "payload_hex",
  angle: "angle_only",
  span: "span_hz",
};

/** Keys whose values must stay strings even when they look numeric. */
const STRING_KEYS = new Set(["payload_hex", "line", "mode"]);

function parseValue(key: string, raw: string): unknown {
  if (STRING_KEYS.has(key)) return raw;
  if (raw === "true") return true;
  if (raw === "false") return false;
  const num = Number(raw);
  if (raw !== "" && Number.isFinite(num)) return num;
  return raw;
}

export function parseCommand(line: string): ParsedCommand {
  const tokens = line.trim().split(/\s+/).filter((t) => t.length > 0);
  if (tokens.length === 0) throw new Error("empty command");
  const verb = tokens[0]!;
  const kind = VERBS[verb.toLowerCase()] ?? verb;
  if (!KNOWN_KINDS.has(kind)) {
    throw new Error(`unknown command "${verb}"`);
  }
  const targets: string[] = [];
  const params: Record<string, unknown> = {};
  for (const tok of tokens.slice(1)) {
    const eq = tok.indexOf("=");
    if (eq > 0) {
      const rawKey = tok.slice(0, eq);
      const key = KEY_ALIASES[rawKey] ?? rawKey;
      params[key] = parseValue(key, tok.slice(eq + 1));
    } else {
      targets.push(tok);
    }
  }
  if (targets.length === 0) throw new Error(`"${verb}" needs at least one target device`);
  const out: ParsedCommand = { kind, targets };
  if (Object.keys(params).length > 0) out.params = params;
  return out;
}

export function renderReceipt(r: CommandReceipt): string[] {
  const entries = Object.entries(r.receipts);
  const acked = entries.filter(([, v]) => v === "ack").length;
  const lines = [`#${r.cmd_id} ${r.kind}: ${acked}/${entries.length} ack`];
  for (const [id, v] of entries) lines.push(`  ${id} ${v}`);
  return lines;
}

export async function executeLine(api: ApiClient, line: string): Promise<string[]> {
  if (line.trim() === "") return [];
  let cmd: ParsedCommand;
  try {
    cmd = parseCommand(line);
  } catch (e) {
    return [`error: ${(e as Error).message}`];
  }
  try {
    const receipt = await api.command(cmd.kind, cmd.targets, cmd.params);
    return renderReceipt(receipt);
  } catch (e) {
    if (e instanceof ApiError) return [`error: ${e.status} ${e.message}`];
    return [`error: ${(e as Error).message}`];
  }
}
