"""The simulated RF environment a virtual sensor lives in.

One World owns the channel model and the set of transmitters currently
on the air. Receivers ask it two questions: "what power would I see"
(fast path, used for RSSI reporting at scale) and "give me baseband
samples" (full path, used for IQ capture and demodulation). Phase is
derived from absolute time so chunked synthesis stays continuous.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import dsp
from .locate import distance_m
from .rfmodel import ChannelModel, Transmitter, synth_fsk
from .util import stream_rng

# scenarios run one transmitter per frequency; co-channel interference
# synthesis is out of scope for this model


@dataclass
class World:
    channel: ChannelModel = field(default_factory=ChannelModel)
    seed: int = 0
    full_scale_dbm: float = -10.0   # received power that saturates the ADC
    transmitters: dict = field(default_factory=dict)

    def add_transmitter(self, tx: Transmitter) -> None:
        self.transmitters[tx.name] = tx
        self._burst_cache = getattr(self, "_burst_cache", {})
        self._burst_cache.pop(tx.name, None)

    def remove_transmitter(self, name: str) -> None:
        self.transmitters.pop(name, None)

    def visible_tx(self, freq_hz: float, t0: float, t1: float, bw_hz: float):
        """Transmitters on the air in [t0, t1) whose carrier falls in band.

        A point query (t0 == t1) means "on the air at this instant" and
        includes the start instant itself.
        """
        out = []
        for tx in self.transmitters.values():
            if abs(tx.freq_hz - freq_hz) >= bw_hz / 2:
                continue
            if t1 > t0:
                live = tx.t_start < t1 and tx.t_end > t0
            else:
                live = tx.t_start <= t0 < tx.t_end
            if live:
                out.append(tx)
        return out

    def received_power_dbm(self, tx: Transmitter, rx_lat, rx_lon, link_id=None) -> float:
        d = distance_m(tx.lat, tx.lon, rx_lat, rx_lon)
        return self.channel.received_power_dbm(
            tx.power_dbm, d, tx_gain_dbi=tx.gain_dbi, link_id=link_id
        )

    def carrier_power_dbm(self, rx_lat, rx_lon, freq_hz, t, bw_hz, link_id=None) -> float:
        """Strongest in-band carrier power at the receiver, or -inf."""
        txs = self.visible_tx(freq_hz, t, t, bw_hz)
        if not txs:
            return -math.inf
        return max(self.received_power_dbm(tx, rx_lat, rx_lon, link_id) for tx in txs)

    def rssi_dbm(
        self,
        rx_lat,
        rx_lon,
        freq_hz,
        t,
        bw_hz,
        rng: np.random.Generator,
        estimator_sigma_db: float = 1.0,
        link_id=None,
    ) -> float:
        """Channel power as an RSSI estimator would report it: signal and
        noise floor summed, plus estimator jitter. No transmitter on the
        air leaves readings clustered at the noise floor."""
        p_sig = self.carrier_power_dbm(rx_lat, rx_lon, freq_hz, t, bw_hz, link_id)
        total = 10 * math.log10(10 ** (p_sig / 10) + 10 ** (self.channel.noise_floor_dbm / 10))
        if estimator_sigma_db > 0:
            total += float(rng.normal(0.0, estimator_sigma_db))
        return total

    def _burst_waveform(self, tx: Transmitter, tuned_hz: float, fs_hz: float):
        """Baseband waveform of an FSK burst, cached per (tx, tune, fs)."""
        cache = getattr(self, "_burst_cache", None)
        if cache is None:
            cache = self._burst_cache = {}
        key = (tx.name, tuned_hz, fs_hz)
        if key not in cache:
            bits = dsp.frame_bits(tx.payload, dsp.FrameConfig(fsk=tx.fsk))
            cache[key] = synth_fsk(bits, tx.fsk, fs_hz, freq_offset_hz=tx.freq_hz - tuned_hz)
        return cache[key]

    def baseband(
        self,
        rx_lat,
        rx_lon,
        freq_hz: float,
        fs_hz: float,
        t0: float,
        n_samples: int,
        rng: np.random.Generator,
        link_id=None,
    ) -> np.ndarray:
        """Complex samples at the receiver, amplitude 1.0 == full scale.

        The strongest in-band transmitter is synthesized; receiver noise
        at the channel's floor is always present.
        """
        p_fs = self.full_scale_dbm
        floor = self.channel.noise_floor_dbm
        sigma = math.sqrt(10 ** ((floor - p_fs) / 10) / 2)
        out = rng.normal(0, sigma, n_samples) + 1j * rng.normal(0, sigma, n_samples)

        t1 = t0 + n_samples / fs_hz
        txs = self.visible_tx(freq_hz, t0, t1, fs_hz)
        if not txs:
            return out
        tx = max(txs, key=lambda tr: self.received_power_dbm(tr, rx_lat, rx_lon, link_id))
        p_rx = self.received_power_dbm(tx, rx_lat, rx_lon, link_id)
        amp = 10 ** ((p_rx - p_fs) / 20)
        offset = tx.freq_hz - freq_hz

        if tx.waveform == "cw":
            # phase tied to absolute time: chunked reads stay continuous
            k = np.arange(n_samples)
            tt = (t0 - tx.t_start) + k / fs_hz
            live = (tt >= 0) & (t0 + k / fs_hz < tx.t_end)
            out += np.where(live, amp * np.exp(2j * np.pi * offset * tt), 0)
            return out
        if tx.waveform == "fsk":
            wave = self._burst_waveform(tx, freq_hz, fs_hz)
            i0 = int(round((t0 - tx.t_start) * fs_hz))
            lo = max(0, -i0)
            hi = min(n_samples, wave.size - i0)
            if hi > lo:
                out[lo:hi] += amp * wave[i0 + lo : i0 + hi]
            return out
        raise ValueError(f"unknown waveform {tx.waveform!r}")

    def rng_for(self, *labels) -> np.random.Generator:
        return stream_rng(self.seed, *labels)
