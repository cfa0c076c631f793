"""Figure rendering for analysis reports.

Everything draws through the Agg backend straight to files; no display
is ever required. Each function returns the path it wrote.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .dsp import discriminate

DPI = 110


def rssi_map(records, path) -> str:
    """Measurement positions colored by level, one marker set per device."""
    fig, ax = plt.subplots(figsize=(7, 6))
    devices = sorted({r["device_id"] for r in records})
    markers = "osD^vP*X<>"
    sc = None
    for i, dev in enumerate(devices):
        pts = [r for r in records if r["device_id"] == dev]
        lon = [r["lon"] for r in pts]
        lat = [r["lat"] for r in pts]
        rssi = [r["payload"].get("rssi_dbm", np.nan) for r in pts]
        sc = ax.scatter(
            lon, lat, c=rssi, s=36, marker=markers[i % len(markers)],
            label=dev, vmin=min(rssi, default=-110), vmax=max(rssi, default=-40),
        )
    if sc is not None:
        fig.colorbar(sc, ax=ax, label="RSSI (dBm)")
    ax.set_xlabel("longitude (deg)")
    ax.set_ylabel("latitude (deg)")
    ax.set_title(f"{len(records)} measurements, {len(devices)} devices")
    if devices:
        ax.legend(loc="best", fontsize=8)
    ax.ticklabel_format(useOffset=False)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return str(path)


def locate_heat(result, path, points_xy=None) -> str:
    """Interpolated field, survey points, and the argmax estimate."""
    fig, ax = plt.subplots(figsize=(7, 6))
    mesh = ax.pcolormesh(
        result.grid_x, result.grid_y, result.grid_rssi, shading="nearest", cmap="viridis"
    )
    fig.colorbar(mesh, ax=ax, label="interpolated RSSI (dBm)")
    if points_xy is not None:
        px, py = points_xy
        ax.plot(px, py, "w.", ms=5, label="survey points")
    ax.plot(result.x_m, result.y_m, "r*", ms=16, label="estimate")
    ax.set_xlabel("x (m east)")
    ax.set_ylabel("y (m north)")
    ax.set_title(f"peak {result.peak_rssi_dbm:.1f} dBm at ({result.x_m:.1f}, {result.y_m:.1f}) m")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return str(path)


def fit_scatter(d_m, rssi_dbm, n, a_dbm, rms_db, path) -> str:
    """Distance/RSSI cloud with the fitted log-distance line."""
    d_m = np.asarray(d_m, dtype=float)
    rssi_dbm = np.asarray(rssi_dbm, dtype=float)
    fig, ax = plt.subplots(figsize=(7, 5))
    ax.semilogx(d_m, rssi_dbm, "o", ms=4, alpha=0.6, label="measurements")
    dd = np.geomspace(d_m.min(), d_m.max(), 200)
    ax.semilogx(dd, a_dbm - 10 * n * np.log10(dd), "r-",
                label=f"fit: n={n:.2f}, A={a_dbm:.1f} dBm, rms={rms_db:.1f} dB")
    ax.set_xlabel("distance (m)")
    ax.set_ylabel("RSSI (dBm)")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(loc="best")
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return str(path)


def demod_trace(capture, path, result=None) -> str:
    """Instantaneous frequency of a capture, with the decoded frame span."""
    f = discriminate(capture.angles, capture.fs_hz)
    t_ms = np.arange(f.size) / capture.fs_hz * 1e3
    fig, ax = plt.subplots(figsize=(9, 4))
    ax.plot(t_ms, f, lw=0.7)
    if result is not None:
        n_sym = len(result.bits) * capture.fs_hz / result.symbol_rate_hz
        ax.axvspan(
            result.start_sample / capture.fs_hz * 1e3,
            (result.start_sample + n_sym) / capture.fs_hz * 1e3,
            color="tab:orange", alpha=0.2,
            label=f"frame: {len(result.payload)} B, offset {result.freq_offset_hz:+.0f} Hz",
        )
        ax.axhline(result.freq_offset_hz, color="tab:red", lw=0.8, ls="--")
        ax.legend(loc="best", fontsize=8)
    ax.set_xlabel("time (ms)")
    ax.set_ylabel("frequency (Hz)")
    ax.set_title(f"{capture.device_id}: {capture.angles.size} samples at {capture.fs_hz:.0f} S/s")
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return str(path)


def align_traces(captures, lags, path) -> str:
    """Discriminator traces after applying the estimated lags."""
    fig, ax = plt.subplots(figsize=(9, 4))
    for cap, lag in zip(captures, lags):
        f = discriminate(cap.angles, cap.fs_hz)
        t_ms = (np.arange(f.size) - lag) / cap.fs_hz * 1e3
        ax.plot(t_ms, f, lw=0.7, alpha=0.8, label=f"{cap.device_id} (lag {lag:+.0f})")
    ax.set_xlabel("aligned time (ms)")
    ax.set_ylabel("frequency (Hz)")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return str(path)
