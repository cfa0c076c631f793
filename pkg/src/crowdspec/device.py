"""A virtual pocket-sized spectrum sensor.

The device speaks a terse ASCII control protocol (one letter opcode,
decimal arguments, newline terminated) and answers every line with
"OK ..." or "ERR <code>". Activity commands only run from idle; a busy
device NAKs anything that would start something new. Register access
and clock handling are allowed in any mode since they do not disturb
the radio.

Opcodes:
    R a [v]      register read/write
    T khz        tune (137000..950000, 1 kHz steps)
    P 1|2        PHY selection; 1M halves backhaul throughput
    C M fs n     IQ capture, magnitude+angle
    C P fs n     IQ capture, angle only
    C D ms [k]   RSSI stream, 8-bit direct readings
    C S ms [k]   RSSI stream, computed from the magnitude register
    C G thr fs n [H]   armed capture, optional pre-trigger history
    X C dbm ms   transmit a carrier
    X F dbm hex  transmit one framed 2-FSK burst
    V ms         listen for one 2-FSK frame
    L khz        scan +/-5 kHz, lock to the strongest tone
    K P us tok / K C tok us   clock probe / commit
    S            stop, from any mode
    Z            reset registers and state
"""

import math
from collections import defaultdict, deque
from dataclasses import dataclass, field

import numpy as np

from . import dsp
from .rfmodel import Transmitter
from .sampling import (
    MAG_MAX,
    MAX_FS_ANGLE,
    MAX_FS_IQ,
    LinkModel,
    link_preset,
    quantize_block,
    run_capture_pipeline,
)

IDLE = "idle"
RECEIVING = "receiving"
TRANSMITTING = "transmitting"
TRIGGERED = "triggered"
LOCKING = "locking"

LOCK_SCAN_N = 8192
LOCK_SCAN_FS = 64000.0
LOCK_SPAN_HZ = 10_000.0     # +/- 5 kHz around the tuned frequency
LOCK_MARGIN_DB = 6.0

TRIGGER_HISTORY = 81        # one buffer of look-behind


@dataclass
class PowerProfile:
    """Draw per mode, milliwatts."""

    idle_mw: float = 18.0
    receive_mw: float = 150.0
    transmit_mw: float = 180.0
    max_mw: float = 180.0

    def __post_init__(self):
        if not (0 < self.idle_mw <= min(self.receive_mw, self.transmit_mw) <= self.max_mw):
            raise ValueError("power profile must satisfy idle <= rx,tx <= max")

    def for_mode(self, mode: str) -> float:
        if mode == TRANSMITTING:
            return self.transmit_mw
        if mode == IDLE:
            return self.idle_mw
        return self.receive_mw


@dataclass
class Battery:
    capacity_mah: float = 180.0
    volts: float = 3.7

    @property
    def energy_j(self) -> float:
        return self.capacity_mah * self.volts * 3.6


def idle_lifetime_s(battery: Battery, profile: PowerProfile) -> float:
    """How long the pack lasts if the device only ever idles."""
    return battery.energy_j / (profile.idle_mw * 1e-3)


def energy_report(mode_durations: dict, profile: PowerProfile, battery: Battery | None = None) -> dict:
    """Energy ledger: joules per mode plus the idle-lifetime projection."""
    per_mode = {
        mode: profile.for_mode(mode) * 1e-3 * dur for mode, dur in mode_durations.items()
    }
    out = {"per_mode_j": per_mode, "total_j": sum(per_mode.values())}
    if battery is not None:
        out["projected_idle_lifetime_s"] = idle_lifetime_s(battery, profile)
    return out


@dataclass
class DeviceConfig:
    device_id: str
    lat: float = 0.0
    lon: float = 0.0
    tune_lo_hz: float = 137e6
    tune_hi_hz: float = 950e6
    ism_bands: tuple = ((902e6, 928e6), (433.05e6, 434.79e6))
    max_tx_dbm: float = 20.0
    rx_bw_hz: float = 52e3
    clock_offset_s: float = 0.0
    profile: PowerProfile = field(default_factory=PowerProfile)
    battery: Battery = field(default_factory=Battery)
    link: LinkModel = field(default_factory=lambda: link_preset("le_2m_ideal"))


@dataclass
class DeviceOutput:
    """One asynchronous emission: an RSSI value, a finished capture, a
    pause notice, a decoded frame, a lock result, or a trigger mark."""

    kind: str
    ts: float        # device-clock seconds
    data: dict


class Device:
    """State machine plus the capture/transmit tasks it runs."""

    def __init__(self, config: DeviceConfig, world, position_fn=None, t0: float = 0.0):
        self.cfg = config
        self.world = world
        self.position_fn = position_fn or (lambda t: (config.lat, config.lon))
        self.rng = world.rng_for("device", config.device_id)
        self.registers = bytearray(256)
        self.mode = IDLE
        self._mode_since = t0
        self.mode_durations: dict = defaultdict(float)
        self.phy = 2
        self.clock_offset_s = config.clock_offset_s
        self.lock_hz: float | None = None
        self.seq = 0
        self._task = None
        self._tx_seq = 0
        self._clock_candidates: dict = {}

    # ------------------------------------------------------------- helpers

    @property
    def device_id(self) -> str:
        return self.cfg.device_id

    @property
    def freq_hz(self) -> int:
        word = int.from_bytes(self.registers[0x0C:0x0F], "big")
        return word * 1000

    def device_time(self, t: float) -> float:
        return t + self.clock_offset_s

    def effective_link(self) -> LinkModel:
        if self.phy == 2:
            return self.cfg.link
        return LinkModel(
            rate_bps=self.cfg.link.rate_bps * 0.5,
            jitter_mean_ms=self.cfg.link.jitter_mean_ms,
            name=f"{self.cfg.link.name}@1m",
        )

    def _set_mode(self, mode: str, t: float) -> None:
        self.mode_durations[self.mode] += max(0.0, t - self._mode_since)
        self.mode = mode
        self._mode_since = t

    def _in_ism_band(self, freq_hz: float) -> bool:
        return any(lo <= freq_hz <= hi for lo, hi in self.cfg.ism_bands)

    def _rssi_from_mag(self, mag: float) -> float:
        if mag <= 0:
            return -math.inf
        return 20 * math.log10(mag / MAG_MAX) + self.world.full_scale_dbm

    # ------------------------------------------------------------ commands

    def handle_command(self, line: str, t: float) -> list[str]:
        """Process one control line at wall-clock time t."""
        tok = line.strip().split()
        if not tok:
            return ["ERR args"]
        op = tok[0].upper()
        try:
            if op == "R":
                return self._cmd_register(tok)
            if op == "K":
                return self._cmd_clock(tok, t)
            if op == "S":
                return self._cmd_stop(t)
            if op == "Z":
                return self._cmd_reset(t)
            if self.mode != IDLE:
                return ["ERR busy"]
            if op == "T":
                return self._cmd_tune(tok)
            if op == "P":
                return self._cmd_phy(tok)
            if op == "C":
                return self._cmd_capture(tok, t)
            if op == "X":
                return self._cmd_transmit(tok, t)
            if op == "V":
                return self._cmd_listen(tok, t)
            if op == "L":
                return self._cmd_lock(tok, t)
        except (ValueError, IndexError):
            return ["ERR args"]
        return ["ERR unknown"]

    def _cmd_register(self, tok) -> list[str]:
        addr = int(tok[1])
        if not 0 <= addr <= 255:
            return ["ERR range"]
        if len(tok) == 2:
            return [f"OK {self.registers[addr]}"]
        val = int(tok[2])
        if not 0 <= val <= 255:
            return ["ERR range"]
        self.registers[addr] = val
        return ["OK"]

    def _cmd_tune(self, tok) -> list[str]:
        khz_txt = tok[1]
        khz = float(khz_txt)
        if khz != int(khz):
            return ["ERR resolution"]
        khz = int(khz)
        if not self.cfg.tune_lo_hz <= khz * 1000 <= self.cfg.tune_hi_hz:
            return ["ERR range"]
        self.registers[0x0C:0x0F] = khz.to_bytes(3, "big")
        self.lock_hz = None
        return ["OK"]

    def _cmd_phy(self, tok) -> list[str]:
        phy = int(tok[1])
        if phy not in (1, 2):
            return ["ERR args"]
        self.phy = phy
        return ["OK"]

    def _cmd_capture(self, tok, t: float) -> list[str]:
        if self.freq_hz == 0:
            return ["ERR untuned"]
        sub = tok[1].upper()
        if sub in ("D", "S"):
            interval = float(tok[2]) / 1000.0
            if interval <= 0:
                return ["ERR args"]
            count = int(tok[3]) if len(tok) > 3 else None
            self._task = {
                "kind": "rssi",
                "direct": sub == "D",
                "interval": interval,
                "remaining": count,
                "next_t": t + interval,
            }
            self._set_mode(RECEIVING, t)
            return ["OK"]
        if sub in ("M", "P"):
            fs = float(tok[2])
            n = int(tok[3])
            angle_only = sub == "P"
            if fs <= 0 or fs > (MAX_FS_ANGLE if angle_only else MAX_FS_IQ):
                return ["ERR rate"]
            if n <= 0:
                return ["ERR args"]
            self._task = {
                "kind": "iq",
                "fs": fs,
                "n": n,
                "angle_only": angle_only,
                "t_start": t,
                "t_end": t + n / fs,
            }
            self._set_mode(RECEIVING, t)
            return ["OK"]
        if sub == "G":
            thr = float(tok[2])
            fs = float(tok[3])
            n = int(tok[4])
            with_history = len(tok) > 5 and tok[5].upper() == "H"
            if fs <= 0 or fs > MAX_FS_IQ:
                return ["ERR rate"]
            if n <= 0:
                return ["ERR args"]
            self._task = {
                "kind": "trigger",
                "thr": thr,
                "fs": fs,
                "n": n,
                "history": with_history,
                "scan_t": t,
                "hist": deque(maxlen=TRIGGER_HISTORY),
            }
            self._set_mode(TRIGGERED, t)
            return ["OK"]
        return ["ERR args"]

    def _cmd_transmit(self, tok, t: float) -> list[str]:
        if self.freq_hz == 0:
            return ["ERR untuned"]
        if not self._in_ism_band(self.freq_hz):
            return ["ERR band"]
        sub = tok[1].upper()
        dbm = float(tok[2])
        if dbm > self.cfg.max_tx_dbm:
            return ["ERR power"]
        lat, lon = self.position_fn(t)
        name = f"txof-{self.device_id}-{self._tx_seq}"
        self._tx_seq += 1
        if sub == "C":
            dur = float(tok[3]) / 1000.0
            if dur <= 0:
                return ["ERR args"]
            tx = Transmitter(name, lat, lon, float(self.freq_hz), dbm, t_start=t, t_end=t + dur)
        elif sub == "F":
            payload = bytes.fromhex(tok[3])
            cfg = dsp.FrameConfig()
            n_bits = dsp.frame_bits(payload, cfg).size
            dur = n_bits / cfg.fsk.symbol_rate
            tx = Transmitter(
                name, lat, lon, float(self.freq_hz), dbm,
                waveform="fsk", fsk=cfg.fsk, payload=payload,
                t_start=t, t_end=t + dur,
            )
        else:
            return ["ERR args"]
        self.world.add_transmitter(tx)
        self._task = {"kind": "tx", "t_end": tx.t_end, "name": name}
        self._set_mode(TRANSMITTING, t)
        return ["OK"]

    def _cmd_listen(self, tok, t: float) -> list[str]:
        if self.freq_hz == 0:
            return ["ERR untuned"]
        dur = float(tok[1]) / 1000.0
        if dur <= 0:
            return ["ERR args"]
        self._task = {"kind": "listen", "t_start": t, "t_end": t + dur, "fs": LOCK_SCAN_FS}
        self._set_mode(RECEIVING, t)
        return ["OK"]

    def _cmd_lock(self, tok, t: float) -> list[str]:
        khz = float(tok[1])
        if khz != int(khz):
            return ["ERR resolution"]
        if not self.cfg.tune_lo_hz <= khz * 1000 <= self.cfg.tune_hi_hz:
            return ["ERR range"]
        self.registers[0x0C:0x0F] = int(khz).to_bytes(3, "big")
        self.lock_hz = None
        self._task = {"kind": "lock", "t_end": t + LOCK_SCAN_N / LOCK_SCAN_FS}
        self._set_mode(LOCKING, t)
        return ["OK"]

    def _cmd_clock(self, tok, t: float) -> list[str]:
        sub = tok[1].upper()
        if sub == "P":
            gps_s = int(tok[2]) * 1e-6
            token = tok[3]
            self._clock_candidates[token] = (gps_s, self.device_time(t))
            return [f"OK {token}"]
        if sub == "C":
            token = tok[2]
            half_rtt_s = int(tok[3]) * 1e-6
            if token not in self._clock_candidates:
                return ["ERR args"]
            gps_s, receipt_dev = self._clock_candidates.pop(token)
            elapsed = self.device_time(t) - receipt_dev
            self.clock_offset_s = (gps_s + half_rtt_s + elapsed) - t
            self._clock_candidates.clear()
            return ["OK"]
        return ["ERR args"]

    def _end_tx_early(self, t: float) -> None:
        # truncate instead of removing: RF already on the air stays
        # visible to captures that reconstruct earlier windows
        tx = self.world.transmitters.get(self._task["name"])
        if tx is not None:
            tx.t_end = min(tx.t_end, t)

    def _cmd_stop(self, t: float) -> list[str]:
        if self._task and self._task["kind"] == "tx":
            self._end_tx_early(t)
        self._task = None
        self._set_mode(IDLE, t)
        return ["OK"]

    def _cmd_reset(self, t: float) -> list[str]:
        if self._task and self._task["kind"] == "tx":
            self._end_tx_early(t)
        self.registers = bytearray(256)
        self.phy = 2
        self.lock_hz = None
        self.seq = 0
        self._task = None
        self._clock_candidates.clear()
        self._set_mode(IDLE, t)
        return ["OK"]

    # ---------------------------------------------------------------- poll

    def poll(self, t_until: float) -> list[DeviceOutput]:
        """Advance background tasks to t_until, returning what the device
        emitted. Call with monotonically increasing times."""
        out: list[DeviceOutput] = []
        task = self._task
        if task is None:
            return out
        kind = task["kind"]
        if kind == "rssi":
            self._poll_rssi(task, t_until, out)
        elif kind == "iq":
            self._poll_iq(task, t_until, out)
        elif kind == "trigger":
            self._poll_trigger(task, t_until, out)
        elif kind == "listen":
            self._poll_listen(task, t_until, out)
        elif kind == "tx":
            if t_until >= task["t_end"]:
                # the burst record stays in the world; its t_end already
                # silences it, and late captures can still see it
                self._task = None
                self._set_mode(IDLE, task["t_end"])
        elif kind == "lock":
            if t_until >= task["t_end"]:
                self._finish_lock(task, out)
        return out

    def _poll_rssi(self, task, t_until, out) -> None:
        while task["next_t"] <= t_until:
            t = task["next_t"]
            lat, lon = self.position_fn(t)
            if task["direct"]:
                p = self.world.rssi_dbm(
                    lat, lon, self.freq_hz, t, self.cfg.rx_bw_hz, self.rng,
                    estimator_sigma_db=1.0, link_id=self.device_id,
                )
                val = int(np.clip(round(p), -128, 127))
            else:
                p = self.world.rssi_dbm(
                    lat, lon, self.freq_hz, t, self.cfg.rx_bw_hz, self.rng,
                    estimator_sigma_db=0.0, link_id=self.device_id,
                )
                amp = min(10 ** ((p - self.world.full_scale_dbm) / 20), 1.0)
                mag = round(amp * MAG_MAX)
                val = self._rssi_from_mag(mag)
                if not math.isfinite(val):
                    val = -200.0
            data = {"rssi_dbm": float(val), "direct": task["direct"]}
            if self.lock_hz is not None:
                data["locked"] = True
                data["f_locked_hz"] = self.lock_hz
            else:
                data["locked"] = False
            out.append(DeviceOutput("rssi", self.device_time(t), data))
            if task["remaining"] is not None:
                task["remaining"] -= 1
                if task["remaining"] <= 0:
                    self._task = None
                    self._set_mode(IDLE, t)
                    return
            task["next_t"] = t + task["interval"]

    def _capture_block(self, t0: float, fs: float, n: int):
        lat, lon = self.position_fn(t0)
        z = self.world.baseband(
            lat, lon, self.freq_hz, fs, t0, n, self.rng, link_id=self.device_id
        )
        return quantize_block(z)

    def _emit_iq(self, out, t0, fs, mags, angles, angle_only, extra=None) -> None:
        res = run_capture_pipeline(
            mags, angles, fs, self.effective_link(),
            angle_only=angle_only, start_seq=self.seq, rng=self.rng,
        )
        self.seq = (self.seq + len(res.packets)) % (128 if angle_only else 256)
        for p in res.pauses:
            out.append(
                DeviceOutput(
                    "pause",
                    self.device_time(t0),
                    {"after_index": p.after_sample_index, "ticks": p.ticks},
                )
            )
        data = {
            "fs_hz": fs,
            "t0": self.device_time(t0),
            "angle_only": angle_only,
            "packets": res.packets,
            "pauses": [(p.after_sample_index, p.ticks) for p in res.pauses],
            "captured": res.captured,
            "discarded": res.discarded,
        }
        if extra:
            data.update(extra)
        out.append(DeviceOutput("iq", self.device_time(t0), data))

    def _poll_iq(self, task, t_until, out) -> None:
        if t_until < task["t_end"]:
            return
        mags, angles = self._capture_block(task["t_start"], task["fs"], task["n"])
        self._emit_iq(out, task["t_start"], task["fs"], mags, angles, task["angle_only"])
        self._task = None
        self._set_mode(IDLE, task["t_end"])

    def _sample_rssi(self, mags) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.where(
                mags > 0,
                20 * np.log10(np.maximum(mags, 1) / MAG_MAX) + self.world.full_scale_dbm,
                -np.inf,
            )

    def _poll_trigger(self, task, t_until, out) -> None:
        fs = task["fs"]
        if "trig_t" not in task:
            chunk = 4 * TRIGGER_HISTORY
            while task["scan_t"] + chunk / fs <= t_until:
                t0 = task["scan_t"]
                mags, angles = self._capture_block(t0, fs, chunk)
                rssi = self._sample_rssi(mags)
                hits = np.nonzero(rssi >= task["thr"])[0]
                if hits.size == 0:
                    for pair in zip(mags, angles):
                        task["hist"].append(pair)
                    task["scan_t"] = t0 + chunk / fs
                    continue
                first = int(hits[0])
                task["trig_t"] = t0 + first / fs
                for pair in zip(mags[:first], angles[:first]):
                    task["hist"].append(pair)
                out.append(
                    DeviceOutput(
                        "trigger",
                        self.device_time(task["trig_t"]),
                        {"rssi_dbm": float(rssi[first])},
                    )
                )
                break
            if "trig_t" not in task:
                return
        # the result is delivered once the maximum capture window has
        # elapsed; the retained run may end sooner if the signal dips
        trig_t = task["trig_t"]
        n = task["n"]
        if t_until < trig_t + n / fs:
            return
        m2, a2 = self._capture_block(trig_t, fs, n)
        below = np.nonzero(self._sample_rssi(m2) < task["thr"])[0]
        keep = max(int(below[0]) if below.size else n, 1)
        m2, a2 = m2[:keep], a2[:keep]
        extra = {"trigger_ts": self.device_time(trig_t), "pretrigger": 0}
        t_first = trig_t
        if task["history"] and task["hist"]:
            hist = list(task["hist"])
            hm = np.array([h[0] for h in hist])
            ha = np.array([h[1] for h in hist])
            m2 = np.concatenate([hm, m2])
            a2 = np.concatenate([ha, a2])
            extra["pretrigger"] = len(hist)
            t_first = trig_t - len(hist) / fs
        self._emit_iq(out, t_first, fs, m2, a2, angle_only=False, extra=extra)
        self._task = None
        self._set_mode(IDLE, trig_t + keep / fs)

    def _poll_listen(self, task, t_until, out) -> None:
        if t_until < task["t_end"]:
            return
        fs = task["fs"]
        n = int(round((task["t_end"] - task["t_start"]) * fs))
        mags, angles = self._capture_block(task["t_start"], fs, n)
        try:
            res = dsp.demodulate_fsk(dsp.Capture(self.device_id, task["t_start"], fs, angles, mags))
            out.append(
                DeviceOutput(
                    "rx",
                    self.device_time(task["t_start"] + res.start_sample / fs),
                    {
                        "payload_hex": res.payload.hex(),
                        "freq_offset_hz": res.freq_offset_hz,
                    },
                )
            )
        except dsp.DemodError:
            pass
        self._task = None
        self._set_mode(IDLE, task["t_end"])

    def _finish_lock(self, task, out) -> None:
        t_end = task["t_end"]
        t0 = t_end - LOCK_SCAN_N / LOCK_SCAN_FS
        mags, angles = self._capture_block(t0, LOCK_SCAN_FS, LOCK_SCAN_N)
        z = (mags / MAG_MAX) * np.exp(2j * np.pi * angles / 1024.0)

        # detect on an averaged periodogram: averaging keeps the noise
        # maximum within a couple of dB of the median, so a 6 dB margin
        # separates tone from no-tone cleanly
        seg = 512
        nseg = LOCK_SCAN_N // seg
        pw = (np.abs(np.fft.fft(z[: nseg * seg].reshape(nseg, seg), axis=1)) ** 2 / seg).mean(axis=0)
        wf = np.fft.fftfreq(seg, 1.0 / LOCK_SCAN_FS)
        span = np.abs(wf) <= LOCK_SPAN_HZ / 2
        floor = float(np.median(pw[span]))
        idx = np.nonzero(span)[0]
        k = idx[np.argmax(pw[idx])]
        locked = pw[k] >= floor * 10 ** (LOCK_MARGIN_DB / 10)
        data = {"locked": bool(locked)}
        if locked:
            # refine on the full-length FFT near the coarse bin
            spec = np.abs(np.fft.fft(z)) ** 2 / LOCK_SCAN_N
            freqs = np.fft.fftfreq(LOCK_SCAN_N, 1.0 / LOCK_SCAN_FS)
            cand = np.nonzero(np.abs(freqs - wf[k]) <= LOCK_SCAN_FS / seg)[0]
            peak = cand[np.argmax(spec[cand])]
            km, kp = (peak - 1) % LOCK_SCAN_N, (peak + 1) % LOCK_SCAN_N
            a, b, c = (
                math.log(spec[km] + 1e-30),
                math.log(spec[peak] + 1e-30),
                math.log(spec[kp] + 1e-30),
            )
            denom = a - 2 * b + c
            delta = 0.5 * (a - c) / denom if denom != 0 else 0.0
            delta = float(np.clip(delta, -0.5, 0.5))
            f_est = (freqs[peak] + delta * LOCK_SCAN_FS / LOCK_SCAN_N) + self.freq_hz
            self.lock_hz = float(f_est)
            data["f_locked_hz"] = self.lock_hz
        out.append(DeviceOutput("lock", self.device_time(t_end), data))
        self._task = None
        self._set_mode(IDLE, t_end)
