"""Command-and-control service.

The core is synchronous and wire-free: a measurement store (append-only
newline-delimited JSON with an in-memory index), a client registry,
high-level command dispatch to attached gateway sessions, filtered
queries, scripted scenarios, and trigger-based clock-offset estimation.

Two thin asyncio front ends expose it: a persistent TCP channel
carrying {event, payload} lines for remote gateways, and a small HTTP
API (GET /clients, GET /measurements, POST /command) for user
interfaces. The HTTP layer answers with permissive CORS headers so a
browser app served from anywhere can talk to it.
"""

import asyncio
import json
import math
import os
from dataclasses import dataclass

__all__ = [
    "MeasurementStore",
    "QueryFilter",
    "ControlServer",
    "round_robin",
    "EventChannelServer",
    "HttpApiServer",
]

SERVER_CAPS = ["rssi", "iq", "trigger", "tx", "lock", "clock"]


def validate_measurement(m: dict) -> None:
    """Raise ValueError with a reason if the record is malformed."""
    if not isinstance(m, dict):
        raise ValueError("record must be an object")
    dev = m.get("device_id")
    if not isinstance(dev, str) or not dev:
        raise ValueError("device_id missing or empty")
    for key in ("ts", "lat", "lon", "freq_hz"):
        v = m.get(key)
        if not isinstance(v, (int, float)) or isinstance(v, bool) or not math.isfinite(v):
            raise ValueError(f"{key} missing or not a finite number")
    if not -90 <= m["lat"] <= 90:
        raise ValueError("lat out of range")
    if not -180 <= m["lon"] <= 180:
        raise ValueError("lon out of range")
    if not isinstance(m.get("kind"), str) or not m["kind"]:
        raise ValueError("kind missing or empty")
    if not isinstance(m.get("payload"), dict):
        raise ValueError("payload must be an object")


class MeasurementStore:
    """Append-only measurement log with idempotent inserts.

    Records are dicts with the wire field names plus a store-assigned
    integer id. Duplicates, keyed by (device_id, ts to the millisecond,
    kind), are ignored. With a path the store journals every accepted
    record as one JSON line and reloads the journal on construction, so
    a restart answers queries identically.
    """

    def __init__(self, path=None):
        self.path = os.fspath(path) if path is not None else None
        self.records: list = []
        self._keys = set()
        self._fh = None
        if self.path is not None and os.path.exists(self.path):
            with open(self.path, encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if line:
                        rec = json.loads(line)
                        self.records.append(rec)
                        self._keys.add(self.dedup_key(rec))
        if self.path is not None:
            self._fh = open(self.path, "a", encoding="utf-8")

    def __len__(self) -> int:
        return len(self.records)

    @staticmethod
    def dedup_key(m: dict):
        return (m["device_id"], round(m["ts"] * 1000), m["kind"])

    def add(self, m: dict) -> int | None:
        """Store one record. Returns its id, or None for a duplicate."""
        validate_measurement(m)
        key = self.dedup_key(m)
        if key in self._keys:
            return None
        rec = dict(m)
        rec["id"] = (self.records[-1]["id"] + 1) if self.records else 1
        line = json.dumps(rec, sort_keys=True, allow_nan=False)
        self._keys.add(key)
        self.records.append(rec)
        if self._fh is not None:
            self._fh.write(line + "\n")
            self._fh.flush()
        return rec["id"]

    def query(self, flt: "QueryFilter") -> list:
        out = [r for r in self.records if flt.matches(r)]
        out.sort(key=lambda r: (r["ts"], r["id"]))
        if flt.limit is not None:
            out = out[: flt.limit]
        return out

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


@dataclass
class QueryFilter:
    """Conjunction of optional predicates; unset fields match anything."""

    t0: float | None = None
    t1: float | None = None
    device_ids: set | None = None
    kinds: set | None = None
    fmin_hz: float | None = None
    fmax_hz: float | None = None
    min_rssi_dbm: float | None = None
    bbox: tuple | None = None       # (lat_min, lat_max, lon_min, lon_max)
    since_id: int | None = None
    limit: int | None = None

    def __post_init__(self):
        if isinstance(self.device_ids, (list, tuple)):
            self.device_ids = set(self.device_ids)
        if isinstance(self.kinds, (list, tuple)):
            self.kinds = set(self.kinds)
        elif isinstance(self.kinds, str):
            self.kinds = {self.kinds}
        if self.t0 is not None and self.t1 is not None and self.t1 < self.t0:
            raise ValueError("inverted time range")
        if self.fmin_hz is not None and self.fmax_hz is not None and self.fmax_hz < self.fmin_hz:
            raise ValueError("inverted frequency range")
        if self.bbox is not None:
            lat_min, lat_max, lon_min, lon_max = self.bbox
            if lat_max < lat_min or lon_max < lon_min:
                raise ValueError("inverted bounding box")

    def matches(self, r: dict) -> bool:
        if self.since_id is not None and r["id"] <= self.since_id:
            return False
        if self.t0 is not None and r["ts"] < self.t0:
            return False
        if self.t1 is not None and r["ts"] > self.t1:
            return False
        if self.device_ids is not None and r["device_id"] not in self.device_ids:
            return False
        if self.kinds is not None and r["kind"] not in self.kinds:
            return False
        if self.fmin_hz is not None and r["freq_hz"] < self.fmin_hz:
            return False
        if self.fmax_hz is not None and r["freq_hz"] > self.fmax_hz:
            return False
        if self.min_rssi_dbm is not None:
            v = r["payload"].get("rssi_dbm")
            if v is None or v < self.min_rssi_dbm:
                return False
        if self.bbox is not None:
            lat_min, lat_max, lon_min, lon_max = self.bbox
            if not (lat_min <= r["lat"] <= lat_max and lon_min <= r["lon"] <= lon_max):
                return False
        return True


class ControlServer:
    """Registry, ingestion, dispatch, and scripting against attached
    gateway sessions. `now` supplies the clock used when a dispatch has
    no explicit time; simulations override it with virtual time."""

    def __init__(self, store: MeasurementStore | None = None, now=None):
        # "store or ..." would discard an empty store (len 0 is falsy)
        self.store = store if store is not None else MeasurementStore()
        self.clients: dict = {}
        self.sessions: dict = {}
        self.rejected = 0
        self.pause_count = 0
        self.acks: dict = {}
        self._cmd_seq = 0
        self.now = now or (lambda: 0.0)

    # ------------------------------------------------------------ registry

    def register_client(self, hello: dict) -> dict:
        device_id = hello.get("device_id")
        if not isinstance(device_id, str) or not device_id:
            raise ValueError("malformed hello: device_id required")
        rec = {
            "device_id": device_id,
            "caps": list(hello.get("caps", [])),
            "last_seen_ts": self.now(),
            "lat": None,
            "lon": None,
            "state": "connected",
            "last_rssi_dbm": None,
        }
        old = self.clients.get(device_id)
        if old is not None:
            rec["lat"], rec["lon"] = old["lat"], old["lon"]
            rec["last_rssi_dbm"] = old["last_rssi_dbm"]
        self.clients[device_id] = rec
        return rec

    def attach_session(self, session, t: float = 0.0) -> None:
        """Bind an in-process gateway session as a dispatch target."""
        self.sessions[session.device_id] = session
        self.register_client({"device_id": session.device_id, "caps": SERVER_CAPS})
        self.clients[session.device_id]["last_seen_ts"] = t

    def detach_session(self, device_id: str) -> None:
        self.sessions.pop(device_id, None)
        if device_id in self.clients:
            self.clients[device_id]["state"] = "disconnected"

    def heartbeat(self, device_id: str, t: float, lat: float, lon: float) -> None:
        c = self.clients.get(device_id)
        if c is None:
            c = self.register_client({"device_id": device_id})
        c["last_seen_ts"] = t
        c["lat"], c["lon"] = lat, lon
        c["state"] = "connected"

    # ----------------------------------------------------------- ingestion

    def ingest(self, m: dict) -> int | None:
        """Store one measurement; returns its id, None if duplicate or
        rejected (rejections are counted, duplicates are not)."""
        try:
            rec_id = self.store.add(m)
        except ValueError:
            self.rejected += 1
            return None
        if rec_id is not None and m["kind"] == "rssi":
            c = self.clients.get(m["device_id"])
            if c is not None:
                c["last_rssi_dbm"] = m["payload"].get("rssi_dbm")
        return rec_id

    def ingest_many(self, records) -> int:
        return sum(1 for m in records if self.ingest(m) is not None)

    def query(self, flt: QueryFilter | None = None, **kw) -> list:
        return self.store.query(flt if flt is not None else QueryFilter(**kw))

    # ------------------------------------------------------------ dispatch

    def dispatch(self, kind: str, params: dict | None, targets, t: float | None = None) -> dict:
        """Relay one command to each target; receipts partition targets
        into acks and failures."""
        targets = list(targets)
        if not targets:
            raise ValueError("empty target set")
        if t is None:
            t = self.now()
        self._cmd_seq += 1
        cmd_id = self._cmd_seq
        receipts = {}
        for target in targets:
            session = self.sessions.get(target)
            if session is None:
                receipts[target] = "failed"
                continue
            try:
                res = session.execute(kind, params, t)
                receipts[target] = "ack" if res.get("ok") else "failed"
            except Exception:
                receipts[target] = "failed"
        return {"cmd_id": cmd_id, "kind": kind, "receipts": receipts}

    # ------------------------------------------------------------- scripts

    def run_script(self, script, advance, t_end: float | None = None) -> list:
        """Dispatch a timed command list against virtual time.

        `advance(t)` moves the attached fleet forward; it is called
        before each dispatch and once more at t_end. Unknown targets
        produce failed receipts and the script carries on.
        """
        times = [e["t"] for e in script]
        if any(b < a for a, b in zip(times, times[1:])):
            raise ValueError("script times must be non-decreasing")
        report = []
        for e in script:
            advance(e["t"])
            res = self.dispatch(e["kind"], e.get("params"), e["targets"], t=e["t"])
            report.append({"t": e["t"], "targets": list(e["targets"]), **res})
        if t_end is not None:
            advance(t_end)
        return report

    # ------------------------------------------------------------- offsets

    def estimate_clock_offsets(
        self, reference_device: str, t0: float | None = None, t1: float | None = None
    ) -> dict:
        """Relative clock offsets from trigger timestamps of one event.

        Every device that armed on the same RF event stamped its trigger
        with its own clock; differences against the reference device are
        the pairwise offsets (propagation neglected: nanoseconds at
        ground scale, far below a sample period).
        """
        recs = self.store.query(QueryFilter(t0=t0, t1=t1, kinds={"trigger"}))
        first: dict = {}
        for r in recs:
            first.setdefault(r["device_id"], r["ts"])
        if reference_device not in first:
            raise ValueError("reference device has no trigger record in the window")
        if len(first) < 2:
            raise ValueError("need trigger records from at least two devices")
        ref = first[reference_device]
        return {dev: ts - ref for dev, ts in first.items()}


def round_robin(
    device_ids,
    dwell_s: float,
    freq_hz: float,
    power_dbm: float = 10.0,
    interval_s: float = 1.0,
    t0: float = 0.0,
    rssi_mode: str = "computed",
) -> list:
    """Script where nodes take turns transmitting while the rest measure.

    Each epoch stops the fleet, lights one transmitter for most of the
    dwell, and streams RSSI from everyone else. The counts are sized so
    every device is idle again before the next epoch begins.
    """
    ids = list(device_ids)
    if len(ids) < 2:
        raise ValueError("round robin needs at least two devices")
    count = max(1, int((dwell_s - 2 * interval_s) / interval_s))
    script = []
    for i, dev in enumerate(ids):
        t = t0 + i * dwell_s
        others = [d for d in ids if d != dev]
        script.append({"t": t, "kind": "Stop", "params": None, "targets": ids})
        script.append(
            {
                "t": t,
                "kind": "Transmit",
                "params": {"freq_hz": freq_hz, "power_dbm": power_dbm,
                           "duration_s": dwell_s - interval_s},
                "targets": [dev],
            }
        )
        script.append(
            {
                "t": t,
                "kind": "ReportRSSI",
                "params": {"freq_hz": freq_hz, "interval_s": interval_s,
                           "count": count, "mode": rssi_mode},
                "targets": others,
            }
        )
    return script


# --------------------------------------------------------------------------
# wire layer
# --------------------------------------------------------------------------


def _event(name: str, payload: dict) -> bytes:
    return (json.dumps({"event": name, "payload": payload}, allow_nan=False) + "\n").encode()


class _ChannelSession:
    """Dispatch target backed by a connected TCP gateway."""

    def __init__(self, device_id: str, writer: asyncio.StreamWriter):
        self.device_id = device_id
        self.writer = writer

    def execute(self, kind: str, params: dict | None, t: float) -> dict:
        if self.writer.is_closing():
            return {"ok": False, "detail": "channel closed"}
        self.writer.write(
            _event("command", {"kind": kind, "params": params, "targets": [self.device_id]})
        )
        return {"ok": True, "detail": "sent"}


class EventChannelServer:
    """Newline-delimited JSON event channel for remote gateways.

    Inbound events: hello{device_id, caps}, measurement{...},
    pause{device_id, after_index, ticks}, ack{cmd_id, device_id}.
    Outbound: command{kind, params, targets}.
    """

    def __init__(self, core: ControlServer, host: str = "127.0.0.1", port: int = 9900):
        self.core = core
        self.host = host
        self.port = port
        self._srv = None

    async def start(self) -> None:
        self._srv = await asyncio.start_server(self._handle, self.host, self.port)

    async def stop(self) -> None:
        if self._srv is not None:
            self._srv.close()
            await self._srv.wait_closed()

    async def _handle(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        device_id = None
        try:
            async for raw in _lines(reader):
                try:
                    msg = json.loads(raw)
                    name = msg["event"]
                    payload = msg.get("payload", {})
                except (ValueError, KeyError):
                    writer.write(_event("error", {"reason": "malformed event"}))
                    continue
                if device_id is None:
                    if name != "hello":
                        writer.write(_event("error", {"reason": "hello required first"}))
                        break
                    try:
                        rec = self.core.register_client(payload)
                    except ValueError as e:
                        writer.write(_event("error", {"reason": str(e)}))
                        break
                    device_id = rec["device_id"]
                    self.core.sessions[device_id] = _ChannelSession(device_id, writer)
                    writer.write(_event("welcome", {"device_id": device_id}))
                elif name == "measurement":
                    self.core.ingest(payload)
                elif name == "pause":
                    self.core.pause_count += 1
                elif name == "ack":
                    self.core.acks.setdefault(payload.get("cmd_id"), []).append(
                        payload.get("device_id")
                    )
                await writer.drain()
        finally:
            if device_id is not None and isinstance(
                self.core.sessions.get(device_id), _ChannelSession
            ):
                self.core.detach_session(device_id)
            writer.close()


async def _lines(reader: asyncio.StreamReader):
    while True:
        line = await reader.readline()
        if not line:
            return
        line = line.strip()
        if line:
            yield line


_CORS = (
    "Access-Control-Allow-Origin: *\r\n"
    "Access-Control-Allow-Methods: GET, POST, OPTIONS\r\n"
    "Access-Control-Allow-Headers: Content-Type\r\n"
)


class HttpApiServer:
    """Minimal HTTP/1.1 JSON API over asyncio streams.

    GET /clients, GET /measurements?<filters>, POST /command. One
    request per connection; everything answered with CORS headers.
    """

    def __init__(self, core: ControlServer, host: str = "127.0.0.1", port: int = 8080):
        self.core = core
        self.host = host
        self.port = port
        self._srv = None

    async def start(self) -> None:
        self._srv = await asyncio.start_server(self._handle, self.host, self.port)

    async def stop(self) -> None:
        if self._srv is not None:
            self._srv.close()
            await self._srv.wait_closed()

    async def _handle(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        try:
            request = await reader.readline()
            if not request:
                return
            try:
                method, target, _ = request.decode("latin-1").split(" ", 2)
            except ValueError:
                await self._respond(writer, 400, {"error": "bad request line"})
                return
            headers = {}
            while True:
                line = await reader.readline()
                if line in (b"\r\n", b"\n", b""):
                    break
                k, _, v = line.decode("latin-1").partition(":")
                headers[k.strip().lower()] = v.strip()
            body = b""
            n = int(headers.get("content-length", 0) or 0)
            if n:
                body = await reader.readexactly(n)
            status, doc = self._route(method.upper(), target, body)
            await self._respond(writer, status, doc)
        except (ConnectionError, asyncio.IncompleteReadError):
            pass
        finally:
            writer.close()

    def _route(self, method: str, target: str, body: bytes):
        from urllib.parse import parse_qs, urlsplit

        parts = urlsplit(target)
        path = parts.path
        if method == "OPTIONS":
            return 204, None
        if method == "GET" and path == "/clients":
            return 200, list(self.core.clients.values())
        if method == "GET" and path == "/measurements":
            q = parse_qs(parts.query)

            def one(name, conv=float):
                vals = q.get(name)
                return conv(vals[0]) if vals else None

            try:
                flt = QueryFilter(
                    t0=one("t0"),
                    t1=one("t1"),
                    device_ids=(
                        set(",".join(q["device_id"]).split(",")) if "device_id" in q else None
                    ),
                    kinds=set(",".join(q["kind"]).split(",")) if "kind" in q else None,
                    fmin_hz=one("fmin_hz"),
                    fmax_hz=one("fmax_hz"),
                    min_rssi_dbm=one("min_rssi_dbm"),
                    bbox=(
                        tuple(float(x) for x in q["bbox"][0].split(","))
                        if "bbox" in q
                        else None
                    ),
                    since_id=one("since_id", int),
                    limit=one("limit", int),
                )
            except (ValueError, TypeError) as e:
                return 400, {"error": str(e)}
            return 200, self.core.query(flt)
        if method == "POST" and path == "/command":
            try:
                doc = json.loads(body.decode("utf-8"))
                kind = doc["kind"]
                targets = doc["targets"]
            except (ValueError, KeyError) as e:
                return 400, {"error": f"bad command body: {e}"}
            try:
                return 200, self.core.dispatch(kind, doc.get("params"), targets)
            except ValueError as e:
                return 400, {"error": str(e)}
        if method == "GET" and path == "/healthz":
            return 200, {"ok": True}
        return 404, {"error": "not found"}

    async def _respond(self, writer, status: int, doc) -> None:
        reason = {200: "OK", 204: "No Content", 400: "Bad Request", 404: "Not Found"}[status]
        payload = b"" if doc is None else json.dumps(doc, allow_nan=False).encode()
        head = (
            f"HTTP/1.1 {status} {reason}\r\n"
            "Content-Type: application/json\r\n"
            f"Content-Length: {len(payload)}\r\n"
            f"{_CORS}"
            "Connection: close\r\n"
            "\r\n"
        )
        writer.write(head.encode("latin-1") + payload)
        await writer.drain()
