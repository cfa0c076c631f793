"""Transmitter geolocation from georeferenced RSSI measurements.

The approach is deliberately simple: project everything onto a local
tangent plane, discard the few strongest readings (they saturate near
the source and drag a linear surface around), fit a piecewise-linear
RSSI surface over the Delaunay triangulation of the rest, and take the
hottest grid node as the estimate. A least-squares log-distance fit
covers the "how fast does it fall off" question.
"""

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import LinearNDInterpolator
from scipy.spatial import QhullError

EARTH_RADIUS_M = 6_371_000.0


def to_local_xy(lat, lon, origin_lat: float, origin_lon: float):
    """Equirectangular projection, metres east/north of the origin."""
    lat = np.asarray(lat, dtype=float)
    lon = np.asarray(lon, dtype=float)
    x = np.radians(lon - origin_lon) * EARTH_RADIUS_M * np.cos(np.radians(origin_lat))
    y = np.radians(lat - origin_lat) * EARTH_RADIUS_M
    return x, y


def from_local_xy(x, y, origin_lat: float, origin_lon: float):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    lat = origin_lat + np.degrees(y / EARTH_RADIUS_M)
    lon = origin_lon + np.degrees(x / (EARTH_RADIUS_M * np.cos(np.radians(origin_lat))))
    return lat, lon


def distance_m(lat1, lon1, lat2, lon2) -> float:
    x, y = to_local_xy(lat2, lon2, float(lat1), float(lon1))
    return float(np.hypot(x, y))


def interpolate_rssi(x, y, rssi):
    """Piecewise-linear interpolant over the measurement triangulation.

    Returns a callable (x, y) -> dB value, NaN outside the convex hull.
    """
    pts = np.column_stack([np.asarray(x, float), np.asarray(y, float)])
    if pts.shape[0] < 3:
        raise ValueError("need at least 3 points to triangulate")
    try:
        return LinearNDInterpolator(pts, np.asarray(rssi, float))
    except QhullError as e:
        raise ValueError(f"degenerate measurement geometry: {e}") from None


@dataclass
class LocalizationResult:
    lat: float
    lon: float
    x_m: float
    y_m: float
    origin_lat: float
    origin_lon: float
    peak_rssi_dbm: float
    used: int
    discarded_idx: np.ndarray
    grid_x: np.ndarray
    grid_y: np.ndarray
    grid_rssi: np.ndarray   # shape (len(grid_y), len(grid_x)), NaN off-hull


def estimate_tx(
    lat,
    lon,
    rssi_dbm,
    discard_top_k: int = 3,
    grid_res_m: float = 2.0,
    margin_frac: float = 0.10,
) -> LocalizationResult:
    """Locate a transmitter as the hottest node of the interpolated grid.

    The strongest discard_top_k readings are dropped first. The grid
    spans the used points' bounding box plus a margin; ties at the peak
    resolve to the first node in row-major (y, x) order. The estimate
    is invariant to adding a constant to every RSSI value.
    """
    lat = np.asarray(lat, float)
    lon = np.asarray(lon, float)
    rssi = np.asarray(rssi_dbm, float)
    if not (lat.size == lon.size == rssi.size):
        raise ValueError("lat/lon/rssi length mismatch")
    if discard_top_k < 0 or grid_res_m <= 0:
        raise ValueError("bad discard count or grid resolution")
    if lat.size - discard_top_k < 3:
        raise ValueError("not enough measurements left after discarding")

    order = np.argsort(-rssi, kind="stable")
    drop = order[:discard_top_k]
    keep = np.setdiff1d(np.arange(rssi.size), drop)

    origin_lat = float(np.mean(lat[keep]))
    origin_lon = float(np.mean(lon[keep]))
    x, y = to_local_xy(lat[keep], lon[keep], origin_lat, origin_lon)
    surf = interpolate_rssi(x, y, rssi[keep])

    mx = (x.max() - x.min()) * margin_frac
    my = (y.max() - y.min()) * margin_frac
    gx = np.arange(x.min() - mx, x.max() + mx + grid_res_m, grid_res_m)
    gy = np.arange(y.min() - my, y.max() + my + grid_res_m, grid_res_m)
    xx, yy = np.meshgrid(gx, gy)
    zz = surf(xx, yy)
    if np.all(np.isnan(zz)):
        raise ValueError("grid too coarse for the measurement hull")

    flat = np.nanargmax(zz)
    iy, ix = np.unravel_index(flat, zz.shape)
    est_lat, est_lon = from_local_xy(gx[ix], gy[iy], origin_lat, origin_lon)
    return LocalizationResult(
        lat=float(est_lat),
        lon=float(est_lon),
        x_m=float(gx[ix]),
        y_m=float(gy[iy]),
        origin_lat=origin_lat,
        origin_lon=origin_lon,
        peak_rssi_dbm=float(zz[iy, ix]),
        used=int(keep.size),
        discarded_idx=np.sort(drop),
        grid_x=gx,
        grid_y=gy,
        grid_rssi=zz,
    )


def fit_path_loss(d_m, rssi_dbm):
    """Least-squares fit of rssi = A - 10 n log10(d).

    Returns (n, A, rms_residual_db).
    """
    d = np.asarray(d_m, float)
    rssi = np.asarray(rssi_dbm, float)
    if d.size != rssi.size or d.size < 2:
        raise ValueError("need matching arrays of at least 2 pairs")
    if np.any(d <= 0):
        raise ValueError("distances must be positive")
    logd = np.log10(d)
    if np.ptp(logd) == 0:
        raise ValueError("all pairs at one distance: slope is undefined")
    slope, intercept = np.polyfit(logd, rssi, 1)
    resid = rssi - (slope * logd + intercept)
    return -slope / 10.0, float(intercept), float(np.sqrt(np.mean(resid**2)))


def select_locked(records, center_hz: float, span_hz: float = 10e3, floor_dbm: float | None = None):
    """Keep only RSSI records usable for localization: frequency-locked,
    inside the scan span around center_hz, and above the floor if given."""
    out = []
    for r in records:
        if r.get("kind") != "rssi":
            continue
        p = r.get("payload", {})
        if not p.get("locked", True):
            continue
        f = p.get("f_locked_hz", r.get("freq_hz"))
        if f is None or abs(f - center_hz) > span_hz / 2:
            continue
        v = p.get("rssi_dbm")
        if v is None or (floor_dbm is not None and v < floor_dbm):
            continue
        out.append(r)
    return out
