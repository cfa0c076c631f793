"""Codec and capture-pipeline tests.

The pipeline checks lean on an independently written packet-level
recurrence (oracle_capture below) rather than re-running the library's
own event loop, so the two sides can only agree if the timing model is
actually right.
"""

import math
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from crowdspec.sampling import (
    ANGLES_PER_PACKET,
    LINK_PRESETS,
    MAG_MAX,
    PACKET_BYTES,
    SAMPLES_PER_PACKET,
    IQSample,
    LinkModel,
    PauseRecord,
    compress_block,
    compress_sample,
    decompress_block,
    decompress_sample,
    depacketize,
    depacketize_angles,
    link_preset,
    pack_angles,
    packetize,
    packetize_angles,
    quantize,
    quantize_block,
    reconstruct_timeline,
    run_capture_pipeline,
    timeline_ticks,
    unpack_angles,
)
from crowdspec.util import TICK_HZ

GOLDEN = Path(__file__).parent / "golden"


# ------------------------------------------------------------- oracle side

def oracle_pack3(mag, angle):
    """Reference bit packing, kept in plain python ints on purpose."""
    word = ((mag >> 3) << 10) | (angle & 0x3FF)
    return word.to_bytes(3, "big")


def oracle_capture(n_offered, fs_hz, rate_bps, n_buffers=3, per_packet=81):
    """Packet-level queueing recurrence for the three-buffer pipeline.

    Works in exact tick fractions. Returns (capture tick of every
    captured sample, pause list, discarded count). Within one packet all
    samples are consecutive arrivals because a pause can only begin when
    a buffer hands off, so a per-packet recurrence is exact.
    """
    P = Fraction(TICK_HZ) / Fraction(fs_hz)
    D = Fraction(244 * 8 * TICK_HZ) / Fraction(rate_bps)
    R = 352
    completions = []
    link_free = Fraction(0)
    ticks = []
    pauses = []
    discarded = 0
    k = 0
    while k < n_offered:
        take = min(per_packet, n_offered - k)
        ticks.extend((k + i) * P for i in range(take))
        k += take
        if take < per_packet:
            break
        fill = (k - 1) * P
        start = max(fill + R, link_free)
        comp = start + D
        completions.append(comp)
        link_free = comp
        if len(completions) >= n_buffers and k < n_offered:
            c_free = completions[len(completions) - n_buffers]
            d = math.ceil((c_free - k * P) / P)
            if d > 0:
                if k + d >= n_offered:
                    discarded += n_offered - k
                    break
                gap = d * P  # counter rounds to the nearest tick, half up
                pauses.append(
                    PauseRecord(
                        len(ticks),
                        (2 * gap.numerator + gap.denominator) // (2 * gap.denominator),
                    )
                )
                discarded += d
                k += d
    return ticks, pauses, discarded


# ------------------------------------------------------------------- codec

def test_compress_known_words():
    assert compress_sample(0, 0) == bytes.fromhex("000000")
    assert compress_sample(131071, -1) == bytes.fromhex("ffffff")
    assert compress_sample(8, 0) == bytes.fromhex("000400")
    assert decompress_sample(bytes.fromhex("000400")) == IQSample(8, 0)


def test_compress_rejects_out_of_range():
    with pytest.raises(ValueError):
        compress_sample(MAG_MAX + 1, 0)
    with pytest.raises(ValueError):
        compress_sample(0, 512)
    with pytest.raises(ValueError):
        compress_sample(0, -513)
    with pytest.raises(ValueError):
        compress_sample(-1, 0)


def test_roundtrip_masks_low_magnitude_bits():
    rng = np.random.default_rng(7)
    mags = rng.integers(0, MAG_MAX + 1, size=5000)
    angles = rng.integers(-512, 512, size=5000)
    back_m, back_a = decompress_block(compress_block(mags, angles))
    assert np.array_equal(back_m, mags & ~7)
    assert np.array_equal(back_a, angles)


def test_block_codec_agrees_with_reference_packer():
    rng = np.random.default_rng(21)
    mags = rng.integers(0, MAG_MAX + 1, size=300)
    angles = rng.integers(-512, 512, size=300)
    want = b"".join(oracle_pack3(int(m), int(a)) for m, a in zip(mags, angles))
    assert compress_block(mags, angles) == want


def test_quantizer_corner_cases():
    assert quantize(0) == IQSample(0, 0)
    assert quantize(1j) == IQSample(MAG_MAX, 256)
    assert quantize(complex(-1, 0)) == IQSample(MAG_MAX, -512)
    # saturation, not wraparound
    assert quantize(2.5) == IQSample(MAG_MAX, 0)
    mags, angles = quantize_block(np.array([0j, 1j, -1 + 0j]))
    assert list(mags) == [0, MAG_MAX, MAG_MAX]
    assert list(angles) == [0, 256, -512]


def test_golden_packets_bit_for_bit():
    zeros = packetize(np.zeros(81, int), np.zeros(81, int), 0)
    assert zeros.hex() == (GOLDEN / "packet_zeros.hex").read_text().strip()

    full = packetize(np.full(81, MAG_MAX), np.full(81, -1), 255)
    assert full.hex() == (GOLDEN / "packet_fullscale.hex").read_text().strip()

    mags = np.array([(i * 1619) % 131072 for i in range(81)])
    angles = np.array([((i * 37 + 100) % 1024) - 512 for i in range(81)])
    ramp = packetize(mags, angles, 7)
    assert ramp.hex() == (GOLDEN / "packet_ramp.hex").read_text().strip()
    seq, back_m, back_a = depacketize(ramp)
    assert seq == 7
    assert np.array_equal(back_m, mags & ~7)
    assert np.array_equal(back_a, angles)

    codes = np.array([((i * 11 + 3) % 1024) - 512 for i in range(194)])
    blob = packetize_angles(codes, 5)
    assert blob.hex() == (GOLDEN / "packet_angle_ramp.hex").read_text().strip()
    seq, back = depacketize_angles(blob)
    assert seq == 5
    assert np.array_equal(back, codes)


def test_packet_framing_errors():
    with pytest.raises(ValueError):
        packetize(np.zeros(80, int), np.zeros(80, int), 0)
    with pytest.raises(ValueError):
        depacketize(b"\x00" * 243)
    with pytest.raises(ValueError):
        depacketize_angles(packetize(np.zeros(81, int), np.zeros(81, int), 0))


def test_angle_packing_density():
    # 194 ten-bit codes in 243 bytes, nothing lost
    rng = np.random.default_rng(3)
    codes = rng.integers(-512, 512, size=ANGLES_PER_PACKET)
    packed = pack_angles(codes)
    assert len(packed) == PACKET_BYTES - 1
    assert np.array_equal(unpack_angles(packed), codes)


# ---------------------------------------------------------------- pipeline

def fast_link():
    return LinkModel(rate_bps=math.inf, name="infinite")


def test_empty_source():
    res = run_capture_pipeline([], [], 64000, link_preset("le_2m_ideal"))
    assert res.packets == [] and res.pauses == []
    assert res.offered == res.captured == res.discarded == 0


def test_infinite_link_never_pauses():
    n = 81 * 40 + 17
    rng = np.random.default_rng(11)
    mags = rng.integers(0, MAG_MAX + 1, size=n)
    angles = rng.integers(-512, 512, size=n)
    res = run_capture_pipeline(mags, angles, 64000, fast_link())
    assert res.pauses == []
    assert len(res.packets) == 40
    assert res.tail_mags.size == 17
    assert res.captured == n and res.discarded == 0


def test_rate_ceilings_enforced():
    with pytest.raises(ValueError):
        run_capture_pipeline([], [], 64001, fast_link())
    with pytest.raises(ValueError):
        run_capture_pipeline([], [], 104001, fast_link(), angle_only=True)
    # angle-only is allowed beyond the IQ ceiling
    res = run_capture_pipeline(None, np.zeros(194, int), 104000, fast_link(), angle_only=True)
    assert len(res.packets) == 1


def test_sequence_numbers_wrap():
    n = 81 * 10
    res = run_capture_pipeline(
        np.zeros(n, int), np.zeros(n, int), 64000, fast_link(), start_seq=250
    )
    seqs = [p[0] for p in res.packets]
    assert seqs == [250, 251, 252, 253, 254, 255, 0, 1, 2, 3]
    n = 194 * 4
    res = run_capture_pipeline(
        None, np.zeros(n, int), 104000, fast_link(), angle_only=True, start_seq=126
    )
    assert [p[0] & 0x7F for p in res.packets] == [126, 127, 0, 1]
    assert all(p[0] & 0x80 for p in res.packets)


def test_no_pauses_below_link_rate():
    # 40 kS/s at 3 bytes/sample is 0.96 Mbps, under a 1.3 Mbps drain
    n = 40000  # one second
    res = run_capture_pipeline(
        np.zeros(n, int), np.zeros(n, int), 40000, link_preset("le_2m_ideal")
    )
    assert res.pauses == []
    assert res.captured == n


def test_pauses_match_oracle_exactly():
    # 64 kS/s produces 1.54 Mbps against a 1.3 Mbps drain: must pause
    fs, rate = 64000, 1.3e6
    n = 64000  # one second
    rng = np.random.default_rng(5)
    mags = rng.integers(0, MAG_MAX + 1, size=n)
    angles = rng.integers(-512, 512, size=n)
    res = run_capture_pipeline(mags, angles, fs, LinkModel(rate_bps=rate))
    assert len(res.pauses) > 0
    want_ticks, want_pauses, want_disc = oracle_capture(n, fs, rate)
    assert res.pauses == want_pauses
    assert res.discarded == want_disc
    assert res.captured + res.discarded == res.offered
    got = timeline_ticks(len(res.packets) * 81, res.pauses, fs)
    assert np.array_equal(got, np.array(want_ticks[: got.size], dtype=np.int64))


def test_conservation_across_random_rates():
    rng = np.random.default_rng(42)
    for _ in range(8):
        fs = int(rng.integers(20000, 64001))
        rate = float(rng.integers(400_000, 2_000_000))
        n = int(rng.integers(500, 20000))
        res = run_capture_pipeline(
            np.zeros(n, int), np.zeros(n, int), fs, LinkModel(rate_bps=rate)
        )
        assert res.captured + res.discarded == res.offered
        assert res.captured == len(res.packets) * 81 + res.tail_mags.size
        _, want_pauses, want_disc = oracle_capture(n, fs, rate)
        assert res.pauses == want_pauses
        assert res.discarded == want_disc


def test_reconstruct_gaps_are_period_or_larger():
    fs, rate = 64000, 1.3e6
    n = 64000
    res = run_capture_pipeline(np.zeros(n, int), np.zeros(n, int), fs, LinkModel(rate))
    ts, mags, angles = reconstruct_timeline(res.packets, res.pauses, fs, t0=2.0)
    assert ts[0] == 2.0
    gaps = np.diff(timeline_ticks(mags.size, res.pauses, fs))
    period = TICK_HZ // fs
    assert gaps.min() == period
    assert np.all((gaps == period) | (gaps > period))
    by_pause = {p.after_sample_index: p.ticks for p in res.pauses}
    for i in np.nonzero(gaps != period)[0]:
        assert gaps[i + 1 - 1] == period + by_pause[i + 1]


def test_reconstruct_rejects_bad_input():
    n = 81 * 3
    res = run_capture_pipeline(np.zeros(n, int), np.zeros(n, int), 64000, fast_link())
    with pytest.raises(ValueError):
        reconstruct_timeline([res.packets[0], res.packets[2]], [], 64000)
    with pytest.raises(ValueError):
        timeline_ticks(100, [PauseRecord(50, 10), PauseRecord(20, 10)], 64000)


def test_link_presets():
    assert link_preset("le_2m_ideal").rate_bps == pytest.approx(1.3e6)
    assert link_preset("le_1m_ideal").rate_bps == pytest.approx(0.65e6)
    for name in LINK_PRESETS:
        assert link_preset(name).rate_bps > 0
    with pytest.raises(ValueError):
        link_preset("tin-can-string")


def test_jittered_link_still_conserves():
    n = 81 * 200
    rng = np.random.default_rng(9)
    res = run_capture_pipeline(
        np.zeros(n, int), np.zeros(n, int), 64000, link_preset("pocket"), rng=rng
    )
    assert res.captured + res.discarded == res.offered
