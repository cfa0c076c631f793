/** Measurement history browser model: fetch rows for a filter, flatten
 * them for tabular display, and export CSV. Rendering is app.ts's job;
 * everything here returns data.
 */

import type { ApiClient, Measurement, MeasurementFilter } from "./api.js";

export interface HistoryRow {
  id: number;
  deviceId: string;
  ts: number;
  kind: string;
  freqHz: number;
  lat: number;
  lon: number;
  rssiDbm: number | null;
}

export function toRow(m: Measurement): HistoryRow {
  const rssi = m.payload["rssi_dbm"];
  return {
    id: m.id,
    deviceId: m.device_id,
    ts: m.ts,
    kind: m.kind,
    freqHz: m.freq_hz,
    lat: m.lat,
    lon: m.lon,
    rssiDbm: typeof rssi === "number" ? rssi : null,
  };
}

/** One row per record the server returns, in the server's order.
 * No client-side filtering: the filter is serialized into the query
 * string and the server decides, so the row count always equals the
 * server's count for that query.
 */
export async function loadHistory(
  api: ApiClient,
  filter: MeasurementFilter = {},
): Promise<HistoryRow[]> {
  const records = await api.measurements(filter);
  return records.map(toRow);
}

const CSV_HEADER = "id,device_id,ts,kind,freq_hz,lat,lon,rssi_dbm";

function csvField(v: string): string {
  return /[",\n]/.test(v) ? `"${v.replace(/"/g, '""')}"` : v;
}

export function toCsv(rows: ReadonlyArray<HistoryRow>): string {
  const lines = [CSV_HEADER];
  for (const r of rows) {
    lines.push(
      [
        String(r.id),
        csvField(r.deviceId),
        String(r.ts),
        csvField(r.kind),
        String(r.freqHz),
        String(r.lat),
        String(r.lon),
        r.rssiDbm === null ? "" : String(r.rssiDbm),
      ].join(","),
    );
  }
  return lines.join("\n") + "\n";
}
