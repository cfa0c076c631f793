"""Command line entry points.

    crowdspec serve     run the control server (optionally with a
                        simulated fleet attached, driven in real time)
    crowdspec simulate  run a scenario to completion in virtual time
    crowdspec analyze   offline analyses over measurement logs: demod,
                        align, locate, fit, query
    crowdspec version   print the package version

Analysis subcommands write delimited output (CSV/JSON) and render
matplotlib figures next to it in the chosen output directory.

Exit codes: 0 success, 1 usage or configuration problems, 2 analysis
failures (no frame found, CRC mismatch, degenerate geometry, ...).
"""

import argparse
import asyncio
import base64
import csv
import json
import math
import os
import signal
import sys
import time

import numpy as np

from . import __version__, dsp, locate, report
from .sampling import depacketize, depacketize_angles
from .scenario import ScenarioError, load_scenario
from .server import (
    ControlServer,
    EventChannelServer,
    HttpApiServer,
    MeasurementStore,
    QueryFilter,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_ANALYSIS = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def read_log(path) -> list:
    """Load newline-delimited JSON measurement records."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            rec.setdefault("id", i)
            records.append(rec)
    return records


def capture_from_measurement(rec: dict) -> dsp.Capture:
    """Rebuild a Capture from a stored iq record."""
    p = rec["payload"]
    # the payload flag decides the packet layout: an IQ sequence byte of
    # 128+ would otherwise read as the angle-only marker
    angle_only = bool(p.get("angle_only"))
    mag_parts, angle_parts = [], []
    for b64 in p["packets_b64"]:
        pkt = base64.b64decode(b64)
        if angle_only:
            _, ang = depacketize_angles(pkt)
        else:
            _, mags_pkt, ang = depacketize(pkt)
            mag_parts.append(mags_pkt)
        angle_parts.append(ang)
    if not angle_parts:
        raise ValueError("capture record holds no packets")
    angles = np.concatenate(angle_parts)
    mags = None if angle_only else np.concatenate(mag_parts)
    return dsp.Capture(
        device_id=rec["device_id"],
        t0=float(p.get("t0", rec["ts"])),
        fs_hz=float(p["fs_hz"]),
        angles=angles,
        mags=mags,
        freq_hz=float(rec.get("freq_hz", 0.0)),
    )


# ------------------------------------------------------------------- serve


def cmd_serve(args) -> int:
    store = MeasurementStore(args.store) if args.store else MeasurementStore()
    core = ControlServer(store=store)
    runner = None
    if args.scenario:
        scenario = load_scenario(args.scenario)
        runner = scenario.build(server=core)
        core.now = lambda: runner.t
    try:
        return asyncio.run(_serve_async(args, core, runner))
    except OSError as e:
        print(f"cannot bind {args.host}:{args.port}: {e}", file=sys.stderr)
        return EXIT_USAGE


async def _serve_async(args, core, runner) -> int:
    http = HttpApiServer(core, args.host, args.port)
    await http.start()
    channel = None
    if args.channel_port is not None:
        channel = EventChannelServer(core, args.host, args.channel_port)
        await channel.start()
        cport = channel._srv.sockets[0].getsockname()[1]
        print(f"event channel on {args.host}:{cport}", flush=True)
    port = http._srv.sockets[0].getsockname()[1]
    print(f"http api on {args.host}:{port}", flush=True)

    stop = asyncio.Event()
    loop = asyncio.get_running_loop()
    for sig in (signal.SIGINT, signal.SIGTERM):
        try:
            loop.add_signal_handler(sig, stop.set)
        except NotImplementedError:  # pragma: no cover - non-unix
            pass

    driver = None
    if runner is not None and args.realtime:
        driver = asyncio.create_task(_drive(runner, args.speed, stop))
    await stop.wait()
    if driver is not None:
        driver.cancel()
    await http.stop()
    if channel is not None:
        await channel.stop()
    core.store.close()
    return EXIT_OK


async def _drive(runner, speed: float, stop: asyncio.Event) -> None:
    """Advance the attached fleet at wall-clock rate."""
    scenario = runner.scenario
    script = list(scenario.script)
    idx = 0
    t0 = time.monotonic()
    try:
        while not stop.is_set():
            vt = min((time.monotonic() - t0) * speed, scenario.duration_s)
            while idx < len(script) and script[idx]["t"] <= vt:
                e = script[idx]
                idx += 1
                runner.server.dispatch(e["kind"], e.get("params"), e["targets"], t=e["t"])
            runner.advance_to(vt)
            if vt >= scenario.duration_s:
                print("scenario complete", flush=True)
                return
            await asyncio.sleep(max(scenario.step_s / speed, 0.02))
    except asyncio.CancelledError:
        pass


# ---------------------------------------------------------------- simulate


def cmd_simulate(args) -> int:
    scenario = load_scenario(args.scenario)
    os.makedirs(args.out_dir, exist_ok=True)
    store_path = os.path.join(args.out_dir, "measurements.ndjson")
    if os.path.exists(store_path):
        os.remove(store_path)
    runner = scenario.build(store_path=store_path)
    result = runner.run()
    runner.server.store.close()

    doc = {
        "scenario": os.path.basename(scenario.source),
        "seed": scenario.seed,
        **result,
    }
    summary_path = os.path.join(args.out_dir, "summary.json")
    with open(summary_path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2, allow_nan=False)
        fh.write("\n")

    if args.figures:
        rssi = [r for r in runner.server.store.records if r["kind"] == "rssi"]
        if rssi:
            report.rssi_map(rssi, os.path.join(args.out_dir, "rssi_map.png"))
    print(
        f"stored {len(runner.server.store)} records from "
        f"{len(runner.sessions)} devices into {store_path}"
    )
    return EXIT_OK


# ----------------------------------------------------------------- analyze


def _iq_records(records, device=None):
    return [
        r for r in records
        if r["kind"] == "iq" and (device is None or r["device_id"] == device)
    ]


def cmd_analyze_demod(args) -> int:
    recs = _iq_records(read_log(args.log), args.device)
    if not recs:
        print("no capture records in the log", file=sys.stderr)
        return EXIT_ANALYSIS
    if not 0 <= args.index < len(recs):
        print(f"capture index {args.index} out of range ({len(recs)} captures)", file=sys.stderr)
        return EXIT_ANALYSIS
    cap = capture_from_measurement(recs[args.index])
    os.makedirs(args.out_dir, exist_ok=True)
    png = os.path.join(args.out_dir, "demod.png")
    try:
        res = dsp.demodulate_fsk(cap)
    except dsp.CrcMismatch as e:
        report.demod_trace(cap, png)
        nbits = 0 if e.bits is None else len(e.bits)
        candidate = "" if e.payload is None else f" (payload candidate {e.payload.hex()})"
        print(f"CRC mismatch after decoding {nbits} bits{candidate}", file=sys.stderr)
        return EXIT_ANALYSIS
    except dsp.DemodError as e:
        report.demod_trace(cap, png)
        print(f"demodulation failed: {e}", file=sys.stderr)
        return EXIT_ANALYSIS
    report.demod_trace(cap, png, res)
    with open(os.path.join(args.out_dir, "frames.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(
            ["device_id", "t0", "fs_hz", "payload_hex", "freq_offset_hz",
             "symbol_rate_hz", "quality"]
        )
        w.writerow(
            [cap.device_id, cap.t0, cap.fs_hz, res.payload.hex(),
             f"{res.freq_offset_hz:.1f}", f"{res.symbol_rate_hz:.2f}", f"{res.quality:.3f}"]
        )
    print(res.payload.hex())
    return EXIT_OK


def cmd_analyze_align(args) -> int:
    device_ids = [d for part in args.devices for d in part.split(",") if d]
    if len(device_ids) < 2:
        raise UsageError("align needs at least two --devices")
    records = read_log(args.log)
    caps = []
    for dev in device_ids:
        recs = _iq_records(records, dev)
        if not recs:
            print(f"no capture for device {dev}", file=sys.stderr)
            return EXIT_ANALYSIS
        caps.append(capture_from_measurement(recs[0]))
    res = dsp.align_captures(caps)
    os.makedirs(args.out_dir, exist_ok=True)
    with open(os.path.join(args.out_dir, "alignment.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["device_id", "lag_samples", "quality"])
        for cap, lag, q in zip(caps, res.lags, res.quality):
            w.writerow([cap.device_id, lag, f"{q:.3f}"])
    report.align_traces(caps, res.lags, os.path.join(args.out_dir, "align.png"))
    for cap, lag in zip(caps, res.lags):
        print(f"{cap.device_id}: lag {lag:+.1f} samples")
    if res.unreliable:
        print("alignment unreliable: correlation peaks too weak", file=sys.stderr)
        return EXIT_ANALYSIS
    return EXIT_OK


def _read_points_csv(path, columns):
    """CSV rows by header names, falling back to positional order."""
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        sample = fh.read(1024)
        fh.seek(0)
        reader = csv.reader(fh)
        rows = [r for r in reader if r and any(c.strip() for c in r)]
    start = 0
    try:
        [float(v) for v in rows[0][: len(columns)]]
    except ValueError:
        start = 1  # header row
    if sample and start == 1:
        header = [c.strip().lower() for c in rows[0]]
        idx = [header.index(c) if c in header else i for i, c in enumerate(columns)]
    else:
        idx = list(range(len(columns)))
    for r in rows[start:]:
        out.append(tuple(float(r[i]) for i in idx))
    return out


def cmd_analyze_locate(args) -> int:
    if args.input.endswith(".csv"):
        pts = _read_points_csv(args.input, ["lat", "lon", "rssi_dbm"])
        lat = np.array([p[0] for p in pts])
        lon = np.array([p[1] for p in pts])
        rssi = np.array([p[2] for p in pts])
    else:
        recs = [r for r in read_log(args.input) if r["kind"] == "rssi"]
        if args.locked_only:
            if args.center_hz is None:
                raise UsageError("--locked-only requires --center-hz")
            recs = locate.select_locked(recs, args.center_hz, args.span_hz)
        lat = np.array([r["lat"] for r in recs])
        lon = np.array([r["lon"] for r in recs])
        rssi = np.array([r["payload"]["rssi_dbm"] for r in recs])
    try:
        res = locate.estimate_tx(
            lat, lon, rssi, discard_top_k=args.discard_top, grid_res_m=args.grid_res
        )
    except ValueError as e:
        print(f"localization failed: {e}", file=sys.stderr)
        return EXIT_ANALYSIS
    os.makedirs(args.out_dir, exist_ok=True)
    keep = np.ones(lat.size, dtype=bool)
    keep[res.discarded_idx] = False
    with open(os.path.join(args.out_dir, "points.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lat", "lon", "rssi_dbm", "used"])
        for i in range(lat.size):
            w.writerow([lat[i], lon[i], rssi[i], int(keep[i])])
    with open(os.path.join(args.out_dir, "localization.json"), "w", encoding="utf-8") as fh:
        json.dump(
            {
                "lat": res.lat, "lon": res.lon,
                "x_m": res.x_m, "y_m": res.y_m,
                "peak_rssi_dbm": res.peak_rssi_dbm,
                "points_used": res.used,
                "discarded": [int(i) for i in res.discarded_idx],
                "grid_res_m": args.grid_res,
            },
            fh, sort_keys=True, indent=2,
        )
        fh.write("\n")
    px, py = locate.to_local_xy(lat[keep], lon[keep], res.origin_lat, res.origin_lon)
    report.locate_heat(res, os.path.join(args.out_dir, "localization.png"), (px, py))
    print(f"estimate: {res.lat:.6f}, {res.lon:.6f} (peak {res.peak_rssi_dbm:.1f} dBm)")
    return EXIT_OK


def cmd_analyze_fit(args) -> int:
    if args.input.endswith(".csv"):
        pts = _read_points_csv(args.input, ["distance_m", "rssi_dbm"])
        d = np.array([p[0] for p in pts])
        rssi = np.array([p[1] for p in pts])
    else:
        if args.tx_lat is None or args.tx_lon is None:
            raise UsageError("fitting from a log needs --tx-lat and --tx-lon")
        recs = [r for r in read_log(args.input) if r["kind"] == "rssi"]
        d = np.array(
            [locate.distance_m(args.tx_lat, args.tx_lon, r["lat"], r["lon"]) for r in recs]
        )
        rssi = np.array([r["payload"]["rssi_dbm"] for r in recs])
    try:
        n, a_dbm, rms = locate.fit_path_loss(d, rssi)
    except ValueError as e:
        print(f"fit failed: {e}", file=sys.stderr)
        return EXIT_ANALYSIS
    os.makedirs(args.out_dir, exist_ok=True)
    with open(os.path.join(args.out_dir, "pairs.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["distance_m", "rssi_dbm"])
        for i in range(d.size):
            w.writerow([d[i], rssi[i]])
    with open(os.path.join(args.out_dir, "path_loss.json"), "w", encoding="utf-8") as fh:
        json.dump(
            {"exponent_n": n, "intercept_dbm": a_dbm, "rms_db": rms, "pairs": int(d.size)},
            fh, sort_keys=True, indent=2,
        )
        fh.write("\n")
    report.fit_scatter(d, rssi, n, a_dbm, rms, os.path.join(args.out_dir, "path_loss.png"))
    print(f"n={n:.3f} A={a_dbm:.2f} dBm rms={rms:.2f} dB over {d.size} pairs")
    return EXIT_OK


def cmd_analyze_query(args) -> int:
    records = read_log(args.log)
    try:
        flt = QueryFilter(
            t0=args.t0,
            t1=args.t1,
            device_ids=set(args.device) if args.device else None,
            kinds=set(args.kind) if args.kind else None,
            fmin_hz=args.fmin_hz,
            fmax_hz=args.fmax_hz,
            min_rssi_dbm=args.min_rssi_dbm,
            bbox=tuple(args.bbox) if args.bbox else None,
            since_id=args.since_id,
            limit=args.limit,
        )
    except ValueError as e:
        raise UsageError(str(e)) from None
    hits = sorted((r for r in records if flt.matches(r)), key=lambda r: (r["ts"], r["id"]))
    if flt.limit is not None:
        hits = hits[: flt.limit]
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(out)
        w.writerow(["id", "device_id", "ts", "kind", "freq_hz", "lat", "lon", "rssi_dbm"])
        for r in hits:
            w.writerow(
                [r["id"], r["device_id"], r["ts"], r["kind"], r["freq_hz"],
                 r["lat"], r["lon"], r["payload"].get("rssi_dbm", "")]
            )
    finally:
        if args.out:
            out.close()
    return EXIT_OK


# -------------------------------------------------------------------- main


def build_parser() -> _Parser:
    p = _Parser(prog="crowdspec", description=__doc__)
    sub = p.add_subparsers(dest="command")

    sp = sub.add_parser("version", help="print the package version")
    sp.set_defaults(func=lambda a: (print(__version__), EXIT_OK)[1])

    sp = sub.add_parser("serve", help="run the control server")
    sp.add_argument("--host", default="127.0.0.1")
    sp.add_argument("--port", type=int, default=8080)
    sp.add_argument("--channel-port", type=int, default=None,
                    help="also open the TCP event channel on this port")
    sp.add_argument("--store", default=None, help="measurement journal path")
    sp.add_argument("--scenario", default=None, help="attach a simulated fleet")
    sp.add_argument("--realtime", action="store_true",
                    help="drive the attached fleet at wall-clock rate")
    sp.add_argument("--speed", type=float, default=1.0,
                    help="virtual seconds per wall second in --realtime mode")
    sp.set_defaults(func=cmd_serve)

    sp = sub.add_parser("simulate", help="run a scenario in virtual time")
    sp.add_argument("scenario")
    sp.add_argument("--out-dir", default="out")
    sp.add_argument("--figures", action="store_true", help="render report figures")
    sp.set_defaults(func=cmd_simulate)

    ap = sub.add_parser("analyze", help="offline analyses over measurement logs")
    asub = ap.add_subparsers(dest="analysis")

    sp = asub.add_parser("demod", help="decode one stored capture")
    sp.add_argument("log")
    sp.add_argument("--device", default=None)
    sp.add_argument("--index", type=int, default=0)
    sp.add_argument("--out-dir", default=".")
    sp.set_defaults(func=cmd_analyze_demod)

    sp = asub.add_parser("align", help="time-align captures of one event")
    sp.add_argument("log")
    sp.add_argument("--devices", action="append", required=True,
                    help="device ids, comma separated or repeated")
    sp.add_argument("--out-dir", default=".")
    sp.set_defaults(func=cmd_analyze_align)

    sp = asub.add_parser("locate", help="estimate a transmitter position")
    sp.add_argument("input", help="measurement log or lat,lon,rssi CSV")
    sp.add_argument("--discard-top", type=int, default=3)
    sp.add_argument("--grid-res", type=float, default=2.0)
    sp.add_argument("--locked-only", action="store_true")
    sp.add_argument("--center-hz", type=float, default=None)
    sp.add_argument("--span-hz", type=float, default=10e3)
    sp.add_argument("--out-dir", default=".")
    sp.set_defaults(func=cmd_analyze_locate)

    sp = asub.add_parser("fit", help="fit the log-distance path-loss model")
    sp.add_argument("input", help="measurement log or distance,rssi CSV")
    sp.add_argument("--tx-lat", type=float, default=None)
    sp.add_argument("--tx-lon", type=float, default=None)
    sp.add_argument("--out-dir", default=".")
    sp.set_defaults(func=cmd_analyze_fit)

    sp = asub.add_parser("query", help="filter a log into CSV")
    sp.add_argument("log")
    sp.add_argument("--device", action="append")
    sp.add_argument("--kind", action="append")
    sp.add_argument("--t0", type=float)
    sp.add_argument("--t1", type=float)
    sp.add_argument("--fmin-hz", type=float)
    sp.add_argument("--fmax-hz", type=float)
    sp.add_argument("--min-rssi-dbm", type=float)
    sp.add_argument("--bbox", type=float, nargs=4,
                    metavar=("LAT_MIN", "LAT_MAX", "LON_MIN", "LON_MAX"))
    sp.add_argument("--since-id", type=int)
    sp.add_argument("--limit", type=int)
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_analyze_query)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not hasattr(args, "func"):
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ScenarioError as e:
        print("scenario problems:", file=sys.stderr)
        for problem in e.problems:
            print(f"  - {problem}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
