"""Small shared helpers: deterministic RNG streams and tick arithmetic."""

import hashlib
from fractions import Fraction

import numpy as np

# Everything time-critical in the capture path is counted in ticks of a
# 16 MHz reference so independent implementations can agree exactly.
TICK_HZ = 16_000_000


def stream_rng(seed: int, *labels) -> np.random.Generator:
    """A Generator whose stream depends only on (seed, labels).

    Labels are hashed through sha256 so device ids and similar strings
    give stable, platform-independent streams.
    """
    words = []
    for lab in labels:
        digest = hashlib.sha256(repr(lab).encode()).digest()
        words.extend(int.from_bytes(digest[i : i + 4], "big") for i in range(0, 16, 4))
    return np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, *words]))


def sample_period_ticks(fs_hz: float) -> Fraction:
    """Sample period as an exact fraction of 16 MHz ticks."""
    if fs_hz <= 0:
        raise ValueError("sample rate must be positive")
    return Fraction(TICK_HZ) / Fraction(fs_hz)


def round_ticks(t: Fraction) -> int:
    """Nearest-integer tick count (ties away from zero)."""
    if isinstance(t, int):
        return t
    num, den = t.numerator, t.denominator
    if num >= 0:
        return (2 * num + den) // (2 * den)
    return -((-2 * num + den) // (2 * den))
