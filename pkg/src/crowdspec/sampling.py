"""Receiver sample handling: quantization, 3-byte compression, packets,
and the three-buffer capture pipeline with its pause bookkeeping.

The radio exposes a 17-bit magnitude and a signed 10-bit angle per sample.
Each sample is squeezed into 3 bytes for the air link: the top 14 bits
carry magnitude with its 3 noisy LSBs dropped, the bottom 10 carry the
angle two's-complement. 81 compressed samples plus a sequence byte fill
one 244-byte packet, the largest payload the link will take in one burst.

When the backhaul cannot keep up, capture pauses instead of corrupting
data: offered samples are discarded while all buffers are busy and a
16 MHz counter measures the gap, so the original timeline can be
reconstructed exactly afterwards.
"""

import math
from collections import deque
from dataclasses import dataclass
from fractions import Fraction
from typing import NamedTuple

import numpy as np

from .util import TICK_HZ, round_ticks, sample_period_ticks

MAG_MAX = (1 << 17) - 1          # 17-bit magnitude register ceiling
ANGLE_UNITS = 1024               # one turn = 1024 angle codes
PACKET_BYTES = 244
SAMPLES_PER_PACKET = 81          # 3-byte samples after the sequence byte
ANGLES_PER_PACKET = 194          # 10-bit codes, 4 pad bits at the end
ROTATE_TICKS = 352               # 22 us buffer switch at 16 MHz
MAX_FS_IQ = 64_000               # magnitude+angle ceiling, S/s
MAX_FS_ANGLE = 104_000           # angle-only ceiling, S/s


class IQSample(NamedTuple):
    magnitude: int               # 0 .. 131071
    angle: int                   # -512 .. 511, units of 2*pi/1024


@dataclass(frozen=True)
class PauseRecord:
    """Capture gap: emitted count before the gap and its length in ticks."""

    after_sample_index: int
    ticks: int


@dataclass
class LinkModel:
    """Backhaul throughput model for one device-gateway link."""

    rate_bps: float
    jitter_mean_ms: float = 0.0
    name: str = "custom"

    def drain_ticks(self) -> Fraction:
        if math.isinf(self.rate_bps):
            return Fraction(0)
        return Fraction(PACKET_BYTES * 8 * TICK_HZ) / Fraction(self.rate_bps)


LINK_PRESETS = {
    # peak effective rate on the fast PHY, bench conditions
    "le_2m_ideal": (1.30e6, 0.0),
    "le_1m_ideal": (0.65e6, 0.0),
    # carried against the body, light fading
    "pocket": (1.05e6, 0.3),
    "backpack": (1.00e6, 0.5),
    # co-channel traffic, one to four neighbouring pairs
    "interferers_1": (0.85e6, 1.0),
    "interferers_2": (0.70e6, 1.5),
    "interferers_3": (0.55e6, 2.0),
    "interferers_4": (0.45e6, 3.0),
}


def link_preset(name: str) -> LinkModel:
    try:
        rate, jitter = LINK_PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown link preset {name!r}") from None
    return LinkModel(rate_bps=rate, jitter_mean_ms=jitter, name=name)


# ---------------------------------------------------------------- quantizer

def quantize(z: complex, full_scale: float = 1.0) -> IQSample:
    """Map one complex sample to the radio's magnitude/angle registers."""
    mag = int(round(abs(z) / full_scale * MAG_MAX))
    mag = min(mag, MAG_MAX)
    code = int(round(np.angle(z) * ANGLE_UNITS / (2 * math.pi)))
    return IQSample(mag, ((code + 512) % ANGLE_UNITS) - 512)


def quantize_block(z: np.ndarray, full_scale: float = 1.0):
    """Vector form of quantize; returns (magnitudes, angles) int arrays."""
    mags = np.rint(np.abs(z) / full_scale * MAG_MAX).astype(np.int64)
    np.clip(mags, 0, MAG_MAX, out=mags)
    codes = np.rint(np.angle(z) * ANGLE_UNITS / (2 * math.pi)).astype(np.int64)
    codes = ((codes + 512) % ANGLE_UNITS) - 512
    return mags, codes


# ------------------------------------------------------------------- codec

def _check_fields(mags: np.ndarray, angles: np.ndarray) -> None:
    if mags.shape != angles.shape:
        raise ValueError("magnitude/angle length mismatch")
    if mags.size and (mags.min() < 0 or mags.max() > MAG_MAX):
        raise ValueError("magnitude outside 17-bit range")
    if angles.size and (angles.min() < -512 or angles.max() > 511):
        raise ValueError("angle outside signed 10-bit range")


def compress_block(mags, angles) -> bytes:
    """3 bytes per sample: bits 23..10 magnitude>>3, bits 9..0 angle."""
    mags = np.asarray(mags, dtype=np.int64)
    angles = np.asarray(angles, dtype=np.int64)
    _check_fields(mags, angles)
    words = ((mags >> 3) << 10) | (angles & 0x3FF)
    out = np.empty((words.size, 3), dtype=np.uint8)
    out[:, 0] = words >> 16
    out[:, 1] = (words >> 8) & 0xFF
    out[:, 2] = words & 0xFF
    return out.tobytes()


def decompress_block(buf: bytes):
    """Inverse of compress_block; magnitudes come back with the low
    3 bits zeroed, which is all the wire format retains."""
    if len(buf) % 3:
        raise ValueError("compressed blob length must be a multiple of 3")
    raw = np.frombuffer(buf, dtype=np.uint8).reshape(-1, 3).astype(np.int64)
    words = (raw[:, 0] << 16) | (raw[:, 1] << 8) | raw[:, 2]
    mags = (words >> 10) << 3
    angles = words & 0x3FF
    angles = np.where(angles >= 512, angles - ANGLE_UNITS, angles)
    return mags, angles


def compress_sample(mag: int, angle: int) -> bytes:
    return compress_block(np.array([mag]), np.array([angle]))


def decompress_sample(blob: bytes) -> IQSample:
    mags, angles = decompress_block(blob)
    if mags.size != 1:
        raise ValueError("expected exactly one 3-byte sample")
    return IQSample(int(mags[0]), int(angles[0]))


def pack_angles(angles) -> bytes:
    """Dense 10-bit packing for angle-only captures: 194 codes in
    243 bytes (4 zero pad bits close the last byte)."""
    angles = np.asarray(angles, dtype=np.int64)
    if angles.size != ANGLES_PER_PACKET:
        raise ValueError(f"angle-only payload needs {ANGLES_PER_PACKET} codes")
    if angles.min() < -512 or angles.max() > 511:
        raise ValueError("angle outside signed 10-bit range")
    codes = (angles & 0x3FF).astype(np.uint16)
    shifts = np.arange(9, -1, -1)
    bits = ((codes[:, None] >> shifts) & 1).astype(np.uint8).reshape(-1)
    bits = np.concatenate([bits, np.zeros(4, dtype=np.uint8)])
    return np.packbits(bits).tobytes()


def unpack_angles(buf: bytes) -> np.ndarray:
    if len(buf) != PACKET_BYTES - 1:
        raise ValueError("angle payload must be 243 bytes")
    bits = np.unpackbits(np.frombuffer(buf, dtype=np.uint8))
    codes = bits[: ANGLES_PER_PACKET * 10].reshape(ANGLES_PER_PACKET, 10)
    weights = 1 << np.arange(9, -1, -1)
    vals = (codes * weights).sum(axis=1).astype(np.int64)
    return np.where(vals >= 512, vals - ANGLE_UNITS, vals)


def packetize(mags, angles, seq: int) -> bytes:
    """One wire packet: sequence byte then 81 compressed samples."""
    mags = np.asarray(mags)
    if mags.size != SAMPLES_PER_PACKET:
        raise ValueError(f"packet needs exactly {SAMPLES_PER_PACKET} samples")
    return bytes([seq & 0xFF]) + compress_block(mags, angles)


def depacketize(blob: bytes):
    if len(blob) != PACKET_BYTES:
        raise ValueError(f"packet must be {PACKET_BYTES} bytes")
    mags, angles = decompress_block(blob[1:])
    return blob[0], mags, angles


def packetize_angles(angles, seq: int) -> bytes:
    """Angle-only packet: MSB of the header byte flags the mode, the
    remaining 7 bits carry the (mod 128) sequence number."""
    return bytes([0x80 | (seq & 0x7F)]) + pack_angles(angles)


def depacketize_angles(blob: bytes):
    if len(blob) != PACKET_BYTES:
        raise ValueError(f"packet must be {PACKET_BYTES} bytes")
    if not blob[0] & 0x80:
        raise ValueError("not an angle-only packet")
    return blob[0] & 0x7F, unpack_angles(blob[1:])


# ---------------------------------------------------------------- pipeline

@dataclass
class PipelineResult:
    packets: list
    pauses: list
    tail_mags: np.ndarray
    tail_angles: np.ndarray
    offered: int
    captured: int
    discarded: int
    fs_hz: float
    angle_only: bool = False


def run_capture_pipeline(
    mags,
    angles,
    fs_hz: float,
    link: LinkModel,
    n_buffers: int = 3,
    angle_only: bool = False,
    start_seq: int = 0,
    rng: np.random.Generator | None = None,
) -> PipelineResult:
    """Feed a sample stream through the rotating-buffer capture path.

    Discrete-event model, exact tick arithmetic throughout: a buffer
    fills with one packet's worth of samples, rotation hands it to the
    backhaul after a 22 us service delay, and the link drains packets
    first-in first-out at link.rate_bps. While every buffer is either
    filling or draining, newly offered samples are discarded; the gap is
    timed by a 16 MHz counter from the first discarded sample to the
    sample that resumes capture, and reported as a PauseRecord.
    """
    ceiling = MAX_FS_ANGLE if angle_only else MAX_FS_IQ
    if fs_hz > ceiling:
        raise ValueError(f"sample rate {fs_hz} above {ceiling} S/s ceiling")
    if n_buffers < 2:
        raise ValueError("pipeline needs at least two buffers")

    angles = np.asarray(angles, dtype=np.int64)
    if angle_only:
        mags = np.zeros_like(angles)
        per_packet = ANGLES_PER_PACKET
    else:
        mags = np.asarray(mags, dtype=np.int64)
        per_packet = SAMPLES_PER_PACKET
    n_offered = int(angles.size)

    period = sample_period_ticks(fs_hz)
    if period.denominator == 1:
        period = int(period)       # fast path: integer-tick sample grid
    drain = link.drain_ticks()
    jitter_scale = link.jitter_mean_ms * 1e-3 * TICK_HZ

    inflight: deque = deque()      # completion times of queued packets
    link_free = Fraction(0)
    fill_count = 0
    captured_idx: list[int] = []
    pauses: list[PauseRecord] = []
    discard_count = 0
    discarded_total = 0
    pause_start = None

    for k in range(n_offered):
        t = k * period
        while inflight and inflight[0] <= t:
            inflight.popleft()
        if len(inflight) >= n_buffers:
            if discard_count == 0:
                pause_start = t
            discard_count += 1
            discarded_total += 1
            continue
        if discard_count:
            pauses.append(
                PauseRecord(len(captured_idx), round_ticks(t - pause_start))
            )
            discard_count = 0
        captured_idx.append(k)
        fill_count += 1
        if fill_count == per_packet:
            ready = t + ROTATE_TICKS
            start = ready if ready > link_free else link_free
            extra = 0
            if jitter_scale > 0:
                if rng is None:
                    raise ValueError("jittery link model needs an rng")
                extra = int(rng.exponential(jitter_scale))
            comp = start + drain + extra
            inflight.append(comp)
            link_free = comp
            fill_count = 0

    idx = np.asarray(captured_idx, dtype=np.int64)
    cap_mags, cap_angles = mags[idx], angles[idx]
    n_full = idx.size // per_packet
    packets = []
    for j in range(n_full):
        lo, hi = j * per_packet, (j + 1) * per_packet
        if angle_only:
            packets.append(packetize_angles(cap_angles[lo:hi], start_seq + j))
        else:
            packets.append(packetize(cap_mags[lo:hi], cap_angles[lo:hi], start_seq + j))
    return PipelineResult(
        packets=packets,
        pauses=pauses,
        tail_mags=cap_mags[n_full * per_packet :],
        tail_angles=cap_angles[n_full * per_packet :],
        offered=n_offered,
        captured=idx.size,
        discarded=discarded_total,
        fs_hz=fs_hz,
        angle_only=angle_only,
    )


# ----------------------------------------------------------- reconstruction

def timeline_ticks(n_samples: int, pauses, fs_hz: float) -> np.ndarray:
    """Capture instant of each emitted sample, in 16 MHz ticks from the
    first sample. Exact when fs divides 16 MHz, else rounded per sample."""
    period = sample_period_ticks(fs_hz)
    if period.denominator == 1:
        base = np.arange(n_samples, dtype=np.int64) * int(period)
    else:
        num, den = period.numerator, period.denominator
        base = np.fromiter(
            ((2 * i * num + den) // (2 * den) for i in range(n_samples)),
            dtype=np.int64,
            count=n_samples,
        )
    if not pauses:
        return base
    afters = np.asarray([p.after_sample_index for p in pauses], dtype=np.int64)
    if np.any(np.diff(afters) < 0):
        raise ValueError("pause records out of order")
    cum = np.cumsum([p.ticks for p in pauses]).astype(np.int64)
    pos = np.searchsorted(afters, np.arange(n_samples), side="right")
    return base + np.where(pos > 0, cum[np.maximum(pos - 1, 0)], 0)


def reconstruct_timeline(packets, pauses, fs_hz: float, t0: float = 0.0):
    """Rebuild (timestamps, magnitudes, angles) from wire packets plus
    pause records. Angle-only packets yield magnitudes=None."""
    if not packets:
        return np.array([]), np.array([], dtype=np.int64), np.array([], dtype=np.int64)
    angle_only = bool(packets[0][0] & 0x80)
    wrap = 128 if angle_only else 256
    mag_parts, ang_parts = [], []
    prev_seq = None
    for blob in packets:
        if angle_only:
            seq, angs = depacketize_angles(blob)
            mag_parts = None
        else:
            seq, mags, angs = depacketize(blob)
            mag_parts.append(mags)
        if prev_seq is not None and seq != (prev_seq + 1) % wrap:
            raise ValueError(f"sequence gap: {prev_seq} -> {seq}")
        prev_seq = seq
        ang_parts.append(angs)
    angles = np.concatenate(ang_parts)
    mags = None if angle_only else np.concatenate(mag_parts)
    ticks = timeline_ticks(angles.size, pauses, fs_hz)
    return t0 + ticks / TICK_HZ, mags, angles
