"""Propagation and waveform models for the simulated RF world.

Log-distance path loss with optional per-link lognormal shadowing,
plus baseband synthesis for the two waveforms the fleet cares about:
continuous-wave markers and 2-FSK data bursts.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .util import stream_rng

C_M_PER_S = 299_792_458.0


def free_space_pl0(freq_hz: float, d0_m: float = 1.0) -> float:
    """Free-space loss at the reference distance, dB."""
    if freq_hz <= 0 or d0_m <= 0:
        raise ValueError("frequency and reference distance must be positive")
    return 20.0 * math.log10(4.0 * math.pi * d0_m * freq_hz / C_M_PER_S)


@dataclass
class ChannelModel:
    """Log-distance channel: pl = pl0 + 10 n log10(d/d0) + shadow(link)."""

    pl0_db: float = field(default_factory=lambda: free_space_pl0(910e6))
    d0_m: float = 1.0
    exponent_n: float = 3.0
    shadowing_sigma_db: float = 0.0
    noise_floor_dbm: float = -100.0
    hard_floor_dbm: float = -150.0
    seed: int = 0

    def __post_init__(self):
        if self.d0_m <= 0:
            raise ValueError("reference distance must be positive")
        if self.exponent_n < 1:
            raise ValueError("path-loss exponent below 1 is unphysical")
        if self.shadowing_sigma_db < 0:
            raise ValueError("shadowing sigma must be non-negative")

    def shadowing_db(self, link_id) -> float:
        """One lognormal-shadowing draw per link, stable across calls."""
        if link_id is None or self.shadowing_sigma_db == 0:
            return 0.0
        rng = stream_rng(self.seed, "shadow", link_id)
        return float(rng.normal(0.0, self.shadowing_sigma_db))

    def path_loss_db(self, d_m: float, link_id=None) -> float:
        if d_m < 0:
            raise ValueError("distance must be non-negative")
        d = max(d_m, self.d0_m)  # coincident endpoints clamp to d0
        return (
            self.pl0_db
            + 10.0 * self.exponent_n * math.log10(d / self.d0_m)
            + self.shadowing_db(link_id)
        )

    def received_power_dbm(
        self,
        tx_power_dbm: float,
        d_m: float,
        tx_gain_dbi: float = 0.0,
        rx_gain_dbi: float = 0.0,
        link_id=None,
    ) -> float:
        p = tx_power_dbm + tx_gain_dbi + rx_gain_dbi - self.path_loss_db(d_m, link_id)
        return max(p, self.hard_floor_dbm)


@dataclass
class FskParams:
    """2-FSK air parameters: bit 1 rides +deviation, bit 0 rides -deviation."""

    symbol_rate: float = 3200.0
    deviation_hz: float = 4000.0


@dataclass
class Transmitter:
    """A signal source placed in the simulated world."""

    name: str
    lat: float
    lon: float
    freq_hz: float
    power_dbm: float
    gain_dbi: float = 0.0
    waveform: str = "cw"            # "cw" or "fsk"
    fsk: FskParams | None = None
    payload: bytes = b""            # framed by the dsp layer when fsk
    t_start: float = 0.0
    t_end: float = math.inf


def synth_cw(
    freq_offset_hz: float,
    fs_hz: float,
    n_samples: int,
    amplitude: float = 1.0,
    phase0: float = 0.0,
) -> np.ndarray:
    """Complex tone at a given offset from the tuned frequency."""
    if abs(freq_offset_hz) >= fs_hz / 2:
        raise ValueError("tone offset outside the sampled bandwidth")
    k = np.arange(n_samples)
    return amplitude * np.exp(1j * (phase0 + 2 * np.pi * freq_offset_hz * k / fs_hz))


def synth_fsk(
    bits,
    params: FskParams,
    fs_hz: float,
    amplitude: float = 1.0,
    freq_offset_hz: float = 0.0,
    phase0: float = 0.0,
) -> np.ndarray:
    """Continuous-phase 2-FSK with a rectangular pulse.

    The phase accumulates 2*pi*(offset +/- deviation)/fs per sample, so
    there are no phase discontinuities at symbol edges. Sample i belongs
    to bit floor(i * symbol_rate / fs).
    """
    bits = np.asarray(bits, dtype=np.int8)
    if bits.size == 0:
        return np.zeros(0, dtype=complex)
    if params.deviation_hz + abs(freq_offset_hz) >= fs_hz / 2:
        raise ValueError("deviation plus offset exceeds the sampled bandwidth")
    n = math.ceil(bits.size * fs_hz / params.symbol_rate)
    i = np.arange(n)
    sym = np.minimum((i * params.symbol_rate / fs_hz).astype(np.int64), bits.size - 1)
    f_inst = freq_offset_hz + np.where(bits[sym] > 0, 1.0, -1.0) * params.deviation_hz
    phase = phase0 + 2 * np.pi * np.cumsum(f_inst) / fs_hz
    # cumsum applies each increment to the sample *after* the step starts
    phase = np.concatenate([[phase0], phase[:-1]])
    return amplitude * np.exp(1j * phase)


def add_noise(
    stream: np.ndarray,
    target_power_dbm: float,
    noise_floor_dbm: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Add complex white Gaussian noise so the per-sample SNR equals
    target_power_dbm - noise_floor_dbm. A floor of -inf is a no-op."""
    if math.isinf(noise_floor_dbm) and noise_floor_dbm < 0:
        return stream
    power = float(np.mean(np.abs(stream) ** 2))
    if power == 0:
        raise ValueError("cannot scale noise against an all-zero stream")
    snr = 10 ** ((target_power_dbm - noise_floor_dbm) / 10)
    sigma = math.sqrt(power / snr / 2)
    noise = rng.normal(0, sigma, stream.size) + 1j * rng.normal(0, sigma, stream.size)
    return stream + noise


def noise_only(
    n_samples: int,
    noise_floor_dbm: float,
    full_scale_dbm: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Receiver hiss with no signal present, scaled so that a tone at
    full_scale_dbm would have unit amplitude."""
    p_lin = 10 ** ((noise_floor_dbm - full_scale_dbm) / 10)
    sigma = math.sqrt(p_lin / 2)
    return rng.normal(0, sigma, n_samples) + 1j * rng.normal(0, sigma, n_samples)
