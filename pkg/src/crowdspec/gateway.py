"""Mobile relay between a pocket sensor and the control server.

A session owns exactly one device. It feeds the device its GPS position,
harvests the device's asynchronous outputs, annotates them into
measurement records, and either forwards them upstream immediately
(live mode) or holds them in a local log for later upload (logging
mode). It also runs the min round-trip clock discipline against the
device.

Measurement records are plain dicts with the wire field names:
device_id, ts, lat, lon, kind, freq_hz, payload. Sample packets ride
inside payloads base64-encoded so every record is JSON-clean.
"""

import base64
import math
from bisect import bisect_right
from dataclasses import dataclass

LIVE = "live"
LOGGING = "logging"


@dataclass
class UplinkTrace:
    """Cellular/WiFi availability windows; None means always up."""

    up: list | None = None

    def available(self, t: float) -> bool:
        if self.up is None:
            return True
        return any(a <= t < b for a, b in self.up)


class MobilityTrace:
    """Waypoint path with linear interpolation between fixes."""

    def __init__(self, waypoints):
        if not waypoints:
            raise ValueError("need at least one waypoint")
        times = [w[0] for w in waypoints]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("waypoint times must be strictly increasing")
        self.waypoints = [(float(t), float(lat), float(lon)) for t, lat, lon in waypoints]
        self._times = times

    @classmethod
    def static(cls, lat: float, lon: float) -> "MobilityTrace":
        return cls([(0.0, lat, lon)])

    def position(self, t: float):
        wp = self.waypoints
        if t <= wp[0][0]:
            return wp[0][1], wp[0][2]
        if t >= wp[-1][0]:
            return wp[-1][1], wp[-1][2]
        i = bisect_right(self._times, t)
        t0, lat0, lon0 = wp[i - 1]
        t1, lat1, lon1 = wp[i]
        f = (t - t0) / (t1 - t0)
        return lat0 + f * (lat1 - lat0), lon0 + f * (lon1 - lon0)


def translate_server_command(kind: str, params: dict | None) -> list | None:
    """High-level server command -> ordered device command lines.

    Returns None for commands this translator does not know; Clock and
    Upload are session-level operations and are handled by execute().
    """
    p = params or {}
    lines = []

    def tune():
        if "freq_hz" in p:
            lines.append(f"T {round(p['freq_hz'] / 1000)}")

    if kind == "ReportRSSI":
        tune()
        op = "C D" if p.get("mode", "direct") == "direct" else "C S"
        line = f"{op} {round(float(p.get('interval_s', 1.0)) * 1000)}"
        if "count" in p:
            line += f" {int(p['count'])}"
        lines.append(line)
        return lines
    if kind == "ContinuousCapture":
        tune()
        op = "C P" if p.get("angle_only") else "C M"
        lines.append(f"{op} {round(float(p['fs_hz']))} {int(p['n_samples'])}")
        return lines
    if kind == "TriggeredCapture":
        tune()
        line = f"C G {p['threshold_dbm']} {round(float(p['fs_hz']))} {int(p['n_samples'])}"
        if p.get("history"):
            line += " H"
        lines.append(line)
        return lines
    if kind == "Transmit":
        tune()
        if "payload_hex" in p:
            lines.append(f"X F {p['power_dbm']} {p['payload_hex']}")
        else:
            lines.append(f"X C {p['power_dbm']} {round(float(p['duration_s']) * 1000)}")
        return lines
    if kind == "Listen":
        tune()
        lines.append(f"V {round(float(p['duration_s']) * 1000)}")
        return lines
    if kind == "Lock":
        lines.append(f"L {round(p['freq_hz'] / 1000)}")
        return lines
    if kind == "Stop":
        return ["S"]
    if kind == "Reset":
        return ["Z"]
    if kind == "DebugMode":
        return [str(p.get("line", ""))]
    return None


class GatewaySession:
    """One device, one phone, one uplink."""

    def __init__(
        self,
        device,
        mobility: MobilityTrace,
        mode: str = LIVE,
        uplink: UplinkTrace | None = None,
        server=None,
        gps_sigma_m: float = 0.0,
        t0: float = 0.0,
    ):
        if mode not in (LIVE, LOGGING):
            raise ValueError(f"unknown mode {mode!r}")
        self.device = device
        self.mobility = mobility
        self.mode = mode
        self.uplink = uplink or UplinkTrace()
        self.server = server
        self.gps_sigma_m = gps_sigma_m
        self.log: list = []          # logging-mode buffer, append-only
        self.dropped = 0             # live records lost to uplink gaps
        self.forwarded = 0
        self.pause_events: list = [] # wire-level pause notices
        self.rng = device.world.rng_for("gateway", device.device_id)
        self._sync_seq = 0
        device.position_fn = self.position
        if server is not None:
            server.attach_session(self, t0)

    @property
    def device_id(self) -> str:
        return self.device.device_id

    def position(self, t: float):
        lat, lon = self.mobility.position(t)
        if self.gps_sigma_m > 0:
            lat += self.rng.normal(0, self.gps_sigma_m) / 111_194.93
            lon += self.rng.normal(0, self.gps_sigma_m) / (
                111_194.93 * math.cos(math.radians(lat))
            )
        return lat, lon

    # ---------------------------------------------------------- harvesting

    def _measurement(self, out) -> dict:
        lat, lon = self.position(out.ts)
        payload = dict(out.data)
        if out.kind == "iq":
            payload["packets_b64"] = [
                base64.b64encode(bytes(p)).decode("ascii") for p in payload.pop("packets")
            ]
            payload["pauses"] = [list(p) for p in payload["pauses"]]
        return {
            "device_id": self.device_id,
            "ts": float(out.ts),
            "lat": float(lat),
            "lon": float(lon),
            "kind": out.kind,
            "freq_hz": float(self.device.freq_hz),
            "payload": payload,
        }

    def poll(self, t: float) -> list:
        """Advance the device to t and route whatever it produced."""
        records = []
        for out in self.device.poll(t):
            if out.kind == "pause":
                self.pause_events.append(
                    {"device_id": self.device_id, **out.data}
                )
                continue
            records.append(self._measurement(out))
        if self.mode == LOGGING:
            self.log.extend(records)
        else:
            for r in records:
                if self.server is not None and self.uplink.available(t):
                    self.server.ingest(r)
                    self.forwarded += 1
                else:
                    self.dropped += 1
        if self.server is not None and self.uplink.available(t):
            lat, lon = self.position(t)
            self.server.heartbeat(self.device_id, t, lat, lon)
        return records

    # ------------------------------------------------------------ commands

    def send(self, line: str, t: float) -> list:
        """Raw command pass-through to the device."""
        return self.device.handle_command(line, t)

    def execute(self, kind: str, params: dict | None, t: float) -> dict:
        """Run one high-level server command, returning a receipt."""
        if kind == "Clock":
            detail = self.clock_sync(t, **(params or {}))
            return {"ok": True, "detail": detail}
        if kind == "Upload":
            t_start = (params or {}).get("t_start", -math.inf)
            if not self.uplink.available(t):
                return {"ok": False, "detail": "uplink unavailable"}
            return {"ok": True, "detail": {"uploaded": self.upload_from(t_start)}}
        lines = translate_server_command(kind, params)
        if lines is None:
            return {"ok": False, "detail": f"unknown command {kind!r}"}
        responses = []
        for line in lines:
            responses.extend(self.send(line, t))
        return {"ok": all(r.startswith("OK") for r in responses), "responses": responses}

    # ---------------------------------------------------------------- sync

    def clock_sync(self, t: float, max_attempts: int = 10, base_delay_s: float = 1e-3) -> dict:
        """Min round-trip clock discipline.

        Each attempt stamps GPS time into a probe; the attempt with the
        smallest observed RTT is committed with half that RTT as the
        one-way estimate. Delays are drawn in whole microseconds so the
        half-RTT bound survives the wire's microsecond resolution.
        """
        jitter_s = self.device.cfg.link.jitter_mean_ms * 1e-3
        best_rtt_us = None
        best_token = None
        t_k = t
        for k in range(max_attempts):
            d1_us = round(base_delay_s * 1e6)
            d2_us = round(base_delay_s * 1e6)
            if jitter_s > 0:
                d1_us += round(self.rng.exponential(jitter_s) * 1e6)
                d2_us += round(self.rng.exponential(jitter_s) * 1e6)
            token = f"s{self._sync_seq}a{k}"
            gps_us = round(t_k * 1e6)
            resp = self.device.handle_command(f"K P {gps_us} {token}", t_k + d1_us * 1e-6)
            rtt_us = d1_us + d2_us
            if resp and resp[0].startswith("OK"):
                if best_rtt_us is None or rtt_us < best_rtt_us:
                    best_rtt_us, best_token = rtt_us, token
            t_k += rtt_us * 1e-6 + 0.01
        self._sync_seq += 1
        if best_token is None:
            return {"ok": False}
        half_us = round(best_rtt_us / 2)
        self.device.handle_command(f"K C {best_token} {half_us}", t_k + base_delay_s)
        return {"ok": True, "rtt_min_s": best_rtt_us * 1e-6, "attempts": max_attempts}

    # -------------------------------------------------------------- upload

    def upload_from(self, t_start: float = -math.inf) -> int:
        """Push logged records with ts >= t_start upstream, in order.

        Idempotent: the server ignores records it has already stored.
        Returns how many the server newly accepted.
        """
        if self.server is None:
            return 0
        accepted = 0
        for r in self.log:
            if r["ts"] >= t_start:
                if self.server.ingest(r) is not None:
                    accepted += 1
        return accepted
