/** Typed client for the crowdspec HTTP API.
 *
 * The API is three endpoints: GET /clients and GET /measurements both
 * return bare JSON arrays, POST /command returns a receipt object.
 * Filter parameters mirror the server exactly; building the query
 * string lives in one place (filterToQuery) so the history browser and
 * the tests cannot drift apart.
 */

export interface ClientEntry {
  device_id: string;
  caps: string[];
  last_seen_ts: number;
  lat: number | null;
  lon: number | null;
  state: string;
  last_rssi_dbm: number | null;
}

export interface Measurement {
  id: number;
  device_id: string;
  ts: number;
  kind: string;
  freq_hz: number;
  lat: number;
  lon: number;
  payload: Record<string, unknown>;
}

export interface MeasurementFilter {
  t0?: number;
  t1?: number;
  /** match any of these device ids */
  deviceIds?: string[];
  /** match any of these record kinds (rssi, iq, trigger, rx, lock) */
  kinds?: string[];
  fminHz?: number;
  fmaxHz?: number;
  minRssiDbm?: number;
  /** [latMin, latMax, lonMin, lonMax], inclusive */
  bbox?: [number, number, number, number];
  /** only records with id strictly greater than this */
  sinceId?: number;
  limit?: number;
}

export interface CommandReceipt {
  cmd_id: number;
  kind: string;
  receipts: Record<string, "ack" | "failed">;
}

export class ApiError extends Error {
  constructor(
    readonly status: number,
    message: string,
  ) {
    super(message);
    this.name = "ApiError";
  }
}

export function filterToQuery(f: MeasurementFilter): string {
  const q = new URLSearchParams();
  if (f.t0 !== undefined) q.set("t0", String(f.t0));
  if (f.t1 !== undefined) q.set("t1", String(f.t1));
  if (f.deviceIds !== undefined && f.deviceIds.length > 0)
    q.set("device_id", f.deviceIds.join(","));
  if (f.kinds !== undefined && f.kinds.length > 0) q.set("kind", f.kinds.join(","));
  if (f.fminHz !== undefined) q.set("fmin_hz", String(f.fminHz));
  if (f.fmaxHz !== undefined) q.set("fmax_hz", String(f.fmaxHz));
  if (f.minRssiDbm !== undefined) q.set("min_rssi_dbm", String(f.minRssiDbm));
  if (f.bbox !== undefined) q.set("bbox", f.bbox.join(","));
  if (f.sinceId !== undefined) q.set("since_id", String(f.sinceId));
  if (f.limit !== undefined) q.set("limit", String(f.limit));
  return q.toString();
}

async function getJson<T>(url: string): Promise<T> {
  const resp = await fetch(url);
  const body = await resp.text();
  if (!resp.ok) {
    let detail = body;
    try {
      detail = (JSON.parse(body) as { error?: string }).error ?? body;
    } catch {
      /* not json, keep raw text */
    }
    throw new ApiError(resp.status, detail);
  }
  return JSON.parse(body) as T;
}

export class ApiClient {
  constructor(readonly base: string) {}

  async healthz(): Promise<boolean> {
    const doc = await getJson<{ ok: boolean }>(`${this.base}/healthz`);
    return doc.ok === true;
  }

  async clients(): Promise<ClientEntry[]> {
    return getJson<ClientEntry[]>(`${this.base}/clients`);
  }

  async measurements(f: MeasurementFilter = {}): Promise<Measurement[]> {
    const qs = filterToQuery(f);
    const url = qs ? `${this.base}/measurements?${qs}` : `${this.base}/measurements`;
    return getJson<Measurement[]>(url);
  }

  async command(
    kind: string,
    targets: string[],
    params?: Record<string, unknown>,
  ): Promise<CommandReceipt> {
    const resp = await fetch(`${this.base}/command`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ kind, targets, ...(params ? { params } : {}) }),
    });
    const body = await resp.text();
    if (!resp.ok) {
      let detail = body;
      try {
        detail = (JSON.parse(body) as { error?: string }).error ?? body;
      } catch {
        /* keep raw body */
      }
      throw new ApiError(resp.status, detail);
    }
    return JSON.parse(body) as CommandReceipt;
  }
}
