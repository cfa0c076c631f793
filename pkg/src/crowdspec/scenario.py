"""Scenario files: a whole experiment in one JSON document.

A scenario pins the channel, the static transmitters, the device fleet
(with mobility, backhaul links, uplink windows, batteries), a timed
command script, a seed, and a duration. Loading one builds a fleet
wired to a control server; running it advances virtual time in fixed
steps, polling every session in listed order so the measurement log
comes out byte-identical for the same seed.

Schema (version 1), all times in seconds:

    {
      "schema": 1,
      "seed": 42,
      "duration_s": 60.0,
      "step_s": 0.1,
      "channel": {"exponent_n": 3.0, "shadowing_sigma_db": 0.0, ...},
      "transmitters": [
        {"name": "beacon", "lat": .., "lon": .., "freq_hz": 915e6,
         "power_dbm": 20, "waveform": "cw", "t_start": 0, "t_end": 60}
      ],
      "devices": [
        {"device_id": "dev-0", "lat": .., "lon": ..,
         "waypoints": [[t, lat, lon], ...],        # instead of lat/lon
         "link": "le_2m_ideal" | {"rate_bps": .., "jitter_mean_ms": ..},
         "uplink": [[t_up, t_down], ...] | null,
         "mode": "live" | "logging",
         "clock_offset_s": 0.0,
         "battery": {"capacity_mah": 180, "volts": 3.7},
         "profile": {"idle_mw": 18, ...}}
      ],
      "round_robin": {"dwell_s": 10, "freq_hz": 915e6, ...},   # optional
      "script": [{"t": 0, "kind": "ReportRSSI", "params": {..},
                  "targets": ["dev-0"]}]
    }
"""

import json
import os
from dataclasses import dataclass, field

from .device import Battery, Device, DeviceConfig, PowerProfile, energy_report
from .gateway import GatewaySession, MobilityTrace, UplinkTrace
from .rfmodel import ChannelModel, FskParams, Transmitter
from .sampling import LINK_PRESETS, LinkModel, link_preset
from .server import ControlServer, MeasurementStore, round_robin
from .world import World

SCHEMA_VERSION = 1


class ScenarioError(ValueError):
    """Carries every problem found in a scenario document."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


def _parse_channel(d: dict, default_seed: int = 0) -> ChannelModel:
    kw = dict(d)
    kw.setdefault("seed", default_seed)  # shadowing follows the scenario seed
    return ChannelModel(**kw)


def _parse_link(v) -> LinkModel:
    if v is None:
        return link_preset("le_2m_ideal")
    if isinstance(v, str):
        return link_preset(v)
    return LinkModel(
        rate_bps=float(v["rate_bps"]),
        jitter_mean_ms=float(v.get("jitter_mean_ms", 0.0)),
        name=v.get("name", "custom"),
    )


def _parse_transmitter(d: dict) -> Transmitter:
    kw = dict(
        name=d["name"],
        lat=float(d["lat"]),
        lon=float(d["lon"]),
        freq_hz=float(d["freq_hz"]),
        power_dbm=float(d["power_dbm"]),
        gain_dbi=float(d.get("gain_dbi", 0.0)),
        waveform=d.get("waveform", "cw"),
        t_start=float(d.get("t_start", 0.0)),
        t_end=float(d.get("t_end", float("inf"))),
    )
    if kw["waveform"] == "fsk":
        fsk = d.get("fsk", {})
        kw["fsk"] = FskParams(
            symbol_rate=float(fsk.get("symbol_rate", 3200)),
            deviation_hz=float(fsk.get("deviation_hz", 4000)),
        )
        kw["payload"] = bytes.fromhex(d.get("payload_hex", ""))
    return Transmitter(**kw)


@dataclass
class Scenario:
    seed: int
    duration_s: float
    step_s: float
    channel: ChannelModel
    transmitters: list
    devices: list            # raw per-device dicts, validated
    script: list
    source: str = "<dict>"

    def build(self, store_path=None, server: ControlServer | None = None) -> "FleetRunner":
        world = World(channel=self.channel, seed=self.seed)
        for tx in self.transmitters:
            world.add_transmitter(tx)
        if server is None:
            server = ControlServer(store=MeasurementStore(store_path))
        sessions = []
        for d in self.devices:
            cfg = DeviceConfig(
                device_id=d["device_id"],
                clock_offset_s=float(d.get("clock_offset_s", 0.0)),
                link=_parse_link(d.get("link")),
                battery=Battery(**d["battery"]) if "battery" in d else Battery(),
                profile=PowerProfile(**d["profile"]) if "profile" in d else PowerProfile(),
            )
            dev = Device(cfg, world)
            if "waypoints" in d:
                mob = MobilityTrace([tuple(w) for w in d["waypoints"]])
            else:
                mob = MobilityTrace.static(float(d["lat"]), float(d["lon"]))
            uplink = UplinkTrace([tuple(w) for w in d["uplink"]]) if d.get("uplink") else UplinkTrace()
            sessions.append(
                GatewaySession(
                    dev, mob, mode=d.get("mode", "live"), uplink=uplink, server=server,
                    gps_sigma_m=float(d.get("gps_sigma_m", 0.0)),
                )
            )
        return FleetRunner(self, world, server, sessions)


def load_scenario(source) -> Scenario:
    """Parse and validate a scenario from a path, JSON text, or dict."""
    name = "<dict>"
    if isinstance(source, dict):
        doc = source
    elif isinstance(source, (str, os.PathLike)) and os.path.exists(source):
        name = os.fspath(source)
        with open(source, encoding="utf-8") as fh:
            doc = json.load(fh)
    else:
        try:
            doc = json.loads(source)
        except json.JSONDecodeError as e:
            raise ScenarioError(
                [f"not a scenario file path and not JSON text: {e}"]
            ) from None

    problems = []
    if doc.get("schema") != SCHEMA_VERSION:
        problems.append(f"schema: expected {SCHEMA_VERSION}, got {doc.get('schema')!r}")
    duration = float(doc.get("duration_s", 0.0))
    if duration <= 0:
        problems.append("duration_s: must be positive")
    step = float(doc.get("step_s", 0.1))
    if step <= 0:
        problems.append("step_s: must be positive")

    devices = doc.get("devices", [])
    if not devices:
        problems.append("devices: at least one required")
    seen = set()
    for i, d in enumerate(devices):
        did = d.get("device_id")
        if not did:
            problems.append(f"devices[{i}].device_id: required")
        elif did in seen:
            problems.append(f"devices[{i}].device_id: duplicate {did!r}")
        seen.add(did)
        if "waypoints" not in d and ("lat" not in d or "lon" not in d):
            problems.append(f"devices[{i}]: needs lat/lon or waypoints")
        if d.get("mode", "live") not in ("live", "logging"):
            problems.append(f"devices[{i}].mode: unknown {d.get('mode')!r}")
        link = d.get("link")
        if isinstance(link, str) and link not in LINK_PRESETS:
            problems.append(f"devices[{i}].link: unknown preset {link!r}")

    script = list(doc.get("script", []))
    if "round_robin" in doc:
        rr = dict(doc["round_robin"])
        ids = rr.pop("targets", [d.get("device_id") for d in devices])
        try:
            script = round_robin(ids, **rr) + script
        except (TypeError, ValueError) as e:
            problems.append(f"round_robin: {e}")
    script.sort(key=lambda e: e.get("t", 0.0))
    for i, e in enumerate(script):
        for key in ("t", "kind", "targets"):
            if key not in e:
                problems.append(f"script[{i}].{key}: required")
        if e.get("t", 0.0) > duration:
            problems.append(f"script[{i}].t: {e.get('t')} beyond duration {duration}")
        unknown = [x for x in e.get("targets", []) if x not in seen]
        if unknown:
            problems.append(f"script[{i}].targets: unknown devices {unknown}")

    transmitters = []
    for i, d in enumerate(doc.get("transmitters", [])):
        try:
            transmitters.append(_parse_transmitter(d))
        except (KeyError, ValueError) as e:
            problems.append(f"transmitters[{i}]: {e}")

    try:
        channel = _parse_channel(doc.get("channel", {}), int(doc.get("seed", 0)))
    except (TypeError, ValueError) as e:
        problems.append(f"channel: {e}")
        channel = ChannelModel()

    if problems:
        raise ScenarioError(problems)
    return Scenario(
        seed=int(doc.get("seed", 0)),
        duration_s=duration,
        step_s=step,
        channel=channel,
        transmitters=transmitters,
        devices=devices,
        script=script,
        source=name,
    )


class FleetRunner:
    """Steps a built fleet through virtual time, deterministically.

    Sessions are polled in listed order at fixed step boundaries; the
    server clock reads the runner's current time.
    """

    def __init__(self, scenario: Scenario, world: World, server: ControlServer, sessions: list):
        self.scenario = scenario
        self.world = world
        self.server = server
        self.sessions = sessions
        self.t = 0.0
        server.now = lambda: self.t

    def advance_to(self, t: float) -> None:
        step = self.scenario.step_s
        while self.t < t - 1e-9:
            self.t = min(round((self.t + step) / step) * step, t)
            for s in self.sessions:
                s.poll(self.t)

    def run(self) -> dict:
        report = self.server.run_script(
            self.scenario.script, self.advance_to, t_end=self.scenario.duration_s
        )
        return {"script": report, "summary": self.summary()}

    def summary(self) -> dict:
        per_device = {}
        for s in self.sessions:
            dev = s.device
            durations = dict(dev.mode_durations)
            durations[dev.mode] = durations.get(dev.mode, 0.0) + max(0.0, self.t - dev._mode_since)
            per_device[s.device_id] = {
                "energy": energy_report(durations, dev.cfg.profile, dev.cfg.battery),
                "mode_s": durations,
                "forwarded": s.forwarded,
                "dropped": s.dropped,
                "logged": len(s.log),
                "pauses": len(s.pause_events),
            }
        return {
            "t_end": self.t,
            "records_stored": len(self.server.store),
            "rejected": self.server.rejected,
            "devices": per_device,
        }
