"""Post-capture signal processing for uploaded IQ recordings.

Captures arrive as magnitude/angle sample pairs. The angle track alone
carries FM content, so demodulation starts with a frequency
discriminator over the signed 10-bit angle circle and everything
downstream (burst detection, symbol timing, bit slicing, framing)
works on instantaneous frequency in Hz.

The 2-FSK frame format mirrors what small packet radios do on the air:
an alternating preamble, a sync word, one length byte, the payload, and
a CRC-16/CCITT over length plus payload, all bits sent MSB first.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .rfmodel import FskParams
from .sampling import ANGLE_UNITS

# ------------------------------------------------------------------ errors

class DemodError(Exception):
    """Base class for demodulation failures."""


class FrameNotFound(DemodError):
    """No preamble/sync structure found in the capture."""


class CrcMismatch(DemodError):
    """Frame located and sliced, but the checksum disagrees."""

    def __init__(self, message, bits=None, payload=None):
        super().__init__(message)
        self.bits = bits
        self.payload = payload


# ------------------------------------------------------------------- types

@dataclass
class Capture:
    """One uploaded recording, ready for analysis."""

    device_id: str
    t0: float
    fs_hz: float
    angles: np.ndarray              # signed 10-bit codes
    mags: np.ndarray | None = None  # 17-bit codes, None for angle-only
    freq_hz: float = 0.0

    @classmethod
    def from_int16(cls, device_id, t0, fs_hz, mags16, angles, freq_hz=0.0):
        """Adapter for sources that store magnitude as plain uint16;
        codes are zero-extended into the native 17-bit range."""
        mags = np.asarray(mags16).astype(np.int64)
        if mags.size and (mags.min() < 0 or mags.max() > 0xFFFF):
            raise ValueError("16-bit magnitude out of range")
        return cls(device_id, t0, fs_hz, np.asarray(angles, dtype=np.int64), mags, freq_hz)


@dataclass
class FrameConfig:
    """Air-frame layout and detection knobs."""

    fsk: FskParams = field(default_factory=FskParams)
    preamble_bytes: int = 4         # 0xAA each: alternating bits
    sync_word: int = 0xD391
    # normalized preamble-tone power; a clean alternating preamble
    # scores 4/pi^2 ~ 0.40, noise stays an order of magnitude lower
    detect_threshold: float = 0.25
    max_payload: int = 255


@dataclass
class DemodResult:
    payload: bytes
    bits: np.ndarray
    freq_offset_hz: float
    symbol_rate_hz: float
    start_sample: int
    iterations: int
    quality: float


@dataclass
class AlignResult:
    lags: list            # per capture, samples relative to the reference
    quality: list         # normalized correlation peak per capture
    unreliable: list      # indices whose peak fell below the bar
    fs_hz: float


# ------------------------------------------------------------------- tools

def crc16_ccitt(data: bytes, init: int = 0xFFFF) -> int:
    """CRC-16/CCITT-FALSE: poly 0x1021, MSB first, no reflection."""
    crc = init
    for byte in data:
        crc ^= byte << 8
        for _ in range(8):
            crc = ((crc << 1) ^ 0x1021) & 0xFFFF if crc & 0x8000 else (crc << 1) & 0xFFFF
    return crc


def bytes_to_bits(data: bytes) -> np.ndarray:
    return np.unpackbits(np.frombuffer(data, dtype=np.uint8))


def bits_to_bytes(bits: np.ndarray) -> bytes:
    return np.packbits(np.asarray(bits, dtype=np.uint8)).tobytes()


def build_frame(payload: bytes, cfg: FrameConfig | None = None) -> bytes:
    """Wire frame: preamble, sync word, length byte, payload, CRC."""
    cfg = cfg or FrameConfig()
    if len(payload) > cfg.max_payload:
        raise ValueError("payload too long for one frame")
    body = bytes([len(payload)]) + payload
    crc = crc16_ccitt(body)
    return (
        b"\xaa" * cfg.preamble_bytes
        + cfg.sync_word.to_bytes(2, "big")
        + body
        + crc.to_bytes(2, "big")
    )


def frame_bits(payload: bytes, cfg: FrameConfig | None = None) -> np.ndarray:
    return bytes_to_bits(build_frame(payload, cfg))


def discriminate(angles, fs_hz: float) -> np.ndarray:
    """Instantaneous frequency in Hz from consecutive angle codes.

    Differences are unwrapped over the signed 10-bit circle (shortest
    path), so a code step of +256 per sample reads as fs/4 Hz.
    """
    angles = np.asarray(angles, dtype=np.int64)
    if angles.size < 2:
        raise ValueError("need at least two samples to discriminate")
    d = np.diff(angles)
    d = ((d + 512) % ANGLE_UNITS) - 512
    return d * (fs_hz / ANGLE_UNITS)


# --------------------------------------------------------------- detection

def detect_frame(freq: np.ndarray, fs_hz: float, cfg: FrameConfig | None = None):
    """Find the preamble by its tone at symbol_rate/2 in the frequency
    track. Returns (start_index, freq_offset_hz, quality) or None.
    """
    cfg = cfg or FrameConfig()
    sps = fs_hz / cfg.fsk.symbol_rate
    w = int(round(cfg.preamble_bytes * 8 * sps))
    if freq.size < w + 1:
        return None
    tone = np.exp(-2j * np.pi * (cfg.fsk.symbol_rate / 2.0) * np.arange(w) / fs_hz)
    corr = np.convolve(freq, tone[::-1], mode="valid")
    energy = np.convolve(freq**2, np.ones(w), mode="valid")
    with np.errstate(divide="ignore", invalid="ignore"):
        quality = np.abs(corr) ** 2 / (w * energy)
    quality = np.nan_to_num(quality)
    k0 = int(np.argmax(quality))
    q = float(quality[k0])
    if q < cfg.detect_threshold:
        return None
    # offset: mean over an even number of preamble symbols cancels the tone
    span = int(round((cfg.preamble_bytes * 8 - 2) * sps))
    offset = float(np.mean(freq[k0 : k0 + span]))
    return k0, offset, q


# ------------------------------------------------------------ demodulation

def _crossings(sig: np.ndarray) -> np.ndarray:
    """Sub-sample zero-crossing positions via linear interpolation."""
    s = np.signbit(sig)
    idx = np.nonzero(s[1:] != s[:-1])[0]
    frac = sig[idx] / (sig[idx] - sig[idx + 1])
    return idx + frac


def _fit_boundaries(xs: np.ndarray, b0: float, sps: float):
    """One least-squares pass of crossings against the boundary grid."""
    j = np.round((xs - b0) / sps)
    a = np.column_stack([np.ones_like(xs), j])
    sol, *_ = np.linalg.lstsq(a, xs, rcond=None)
    return float(sol[0]), float(sol[1]), j


def demodulate_fsk(capture: Capture, cfg: FrameConfig | None = None) -> DemodResult:
    """Recover one frame from a capture.

    Symbol timing starts from the nominal rate and is refined
    iteratively: zero crossings of the offset-corrected frequency track
    are regressed against an integer boundary grid, widening the fitted
    span each pass, until the correction drops under 0.05 symbol or ten
    passes have run. Raises FrameNotFound / CrcMismatch accordingly.
    """
    cfg = cfg or FrameConfig()
    freq = discriminate(capture.angles, capture.fs_hz)
    hit = detect_frame(freq, capture.fs_hz, cfg)
    if hit is None:
        raise FrameNotFound("no preamble tone above threshold")
    k0, offset, quality = hit

    sps = capture.fs_hz / cfg.fsk.symbol_rate
    smooth = max(1, int(sps / 6))
    f_sm = np.convolve(freq - offset, np.ones(smooth) / smooth, mode="same")

    # crossings from the preamble start to the longest possible frame
    max_bits = (cfg.preamble_bytes + 2 + 1 + cfg.max_payload + 2) * 8
    hi = min(freq.size, int(k0 + (max_bits + 2) * sps * 1.01))
    xs_all = _crossings(f_sm[k0:hi]) + k0
    if xs_all.size < cfg.preamble_bytes * 8 // 2:
        raise FrameNotFound("too few transitions for timing recovery")
    # drop crossing bursts tighter than a symbol could produce
    keep = [xs_all[0]]
    for x in xs_all[1:]:
        if x - keep[-1] >= 0.7 * sps:
            keep.append(x)
    xs_all = np.asarray(keep)

    b0 = float(xs_all[0])
    sps_est = sps
    window_syms = 40.0
    iterations = 0
    for _ in range(10):
        iterations += 1
        sel = xs_all[(xs_all - b0) / sps_est <= window_syms]
        if sel.size < 4:
            sel = xs_all[: max(4, xs_all.size // 4)]
        nb0, nsps, j = _fit_boundaries(sel, b0, sps_est)
        resid = sel - (nb0 + j * nsps)
        good = np.abs(resid) <= 0.25 * sps_est
        if good.sum() >= 4 and good.sum() < sel.size:
            nb0, nsps, _ = _fit_boundaries(sel[good], nb0, nsps)
        span = (sel[-1] - b0) / sps_est if sel.size else 1.0
        correction = abs(nb0 - b0) / sps_est + abs(nsps - sps_est) / sps_est * span
        b0, sps_est = nb0, nsps
        if window_syms < max_bits:
            window_syms *= 4
        elif correction < 0.05:
            break
    if not (0.9 * sps <= sps_est <= 1.1 * sps):
        raise FrameNotFound("symbol timing did not converge")

    # slice: bit j spans [b0 + (j-1) sps, b0 + j sps); average the middle
    first_center = b0 - sps_est / 2
    n_bits = int((freq.size - first_center) / sps_est)
    if n_bits < (cfg.preamble_bytes + 3) * 8:
        raise FrameNotFound("capture too short for a frame")
    centers = first_center + np.arange(n_bits) * sps_est
    half = max(1, int(sps_est * 0.3))
    lo = np.clip(np.round(centers - half).astype(int), 0, freq.size - 1)
    hi_i = np.clip(np.round(centers + half).astype(int) + 1, 1, freq.size)
    csum = np.concatenate([[0.0], np.cumsum(freq - offset)])
    means = (csum[hi_i] - csum[lo]) / (hi_i - lo)
    bits = (means > 0).astype(np.uint8)

    sync_bits = bytes_to_bits(cfg.sync_word.to_bytes(2, "big"))
    sync_at = None
    limit = min(n_bits - 16, (cfg.preamble_bytes + 3) * 8)
    for i in range(limit):
        if np.array_equal(bits[i : i + 16], sync_bits):
            sync_at = i
            break
    if sync_at is None:
        raise FrameNotFound("sync word not found")
    body_at = sync_at + 16
    if body_at + 8 > n_bits:
        raise FrameNotFound("frame truncated before length byte")
    length = int(bits_to_bytes(bits[body_at : body_at + 8])[0])
    end = body_at + 8 * (1 + length + 2)
    if end > n_bits:
        raise FrameNotFound("frame truncated mid-payload")
    body = bits_to_bytes(bits[body_at : body_at + 8 * (1 + length)])
    crc_got = int.from_bytes(bits_to_bytes(bits[body_at + 8 * (1 + length) : end]), "big")
    if crc16_ccitt(body) != crc_got:
        raise CrcMismatch(
            f"checksum mismatch on {length}-byte frame",
            bits=bits[sync_at:end],
            payload=body[1:],
        )
    return DemodResult(
        payload=body[1:],
        bits=bits[sync_at:end],
        freq_offset_hz=offset,
        symbol_rate_hz=capture.fs_hz / sps_est,
        start_sample=k0,
        iterations=iterations,
        quality=quality,
    )


# ---------------------------------------------------------------- aligning

def align_captures(captures, ref_index: int = 0, quality_floor: float = 0.5) -> AlignResult:
    """Relative sample offsets between captures of one emission.

    Coarse alignment comes from the capture clocks (t0), the residual
    from cross-correlating discriminated frequency tracks. The lag for
    capture i is how many samples later than the reference its record
    of the emission starts; the reference's own lag is 0.
    """
    if len(captures) < 2:
        raise ValueError("need at least two captures to align")
    fs = captures[ref_index].fs_hz
    if any(abs(c.fs_hz - fs) > 1e-9 for c in captures):
        raise ValueError("captures must share one sample rate")
    spans = [(c.t0, c.t0 + c.angles.size / fs) for c in captures]
    lo = max(s[0] for s in spans)
    hi = min(s[1] for s in spans)
    if hi <= lo:
        raise ValueError("captures do not overlap in time")

    tracks = []
    for c in captures:
        f = discriminate(c.angles, fs)
        tracks.append(f - f.mean())
    ref = tracks[ref_index]
    ref_t0 = captures[ref_index].t0

    lags, quals, bad = [], [], []
    for i, (c, trk) in enumerate(zip(captures, tracks)):
        if i == ref_index:
            lags.append(0.0)
            quals.append(1.0)
            continue
        coarse = (c.t0 - ref_t0) * fs
        corr = np.correlate(ref, trk, mode="full")
        denom = math.sqrt(float(np.dot(ref, ref)) * float(np.dot(trk, trk)))
        if denom == 0:
            raise ValueError("flat capture cannot be aligned")
        k = int(np.argmax(corr))
        q = float(corr[k] / denom)
        # peak at k means trk content sits (len(trk)-1-k) samples later
        residual = (trk.size - 1) - k
        lags.append(coarse + residual)
        quals.append(q)
        if q < quality_floor:
            bad.append(i)
    return AlignResult(lags=lags, quality=quals, unreliable=bad, fs_hz=fs)
