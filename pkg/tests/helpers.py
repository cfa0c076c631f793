"""Shared synthetic-scenario builders for the test suite.

These stay independent of the library's channel code on purpose: truth
fields are computed from the bare log-distance formula so the tests
cannot inherit a bug from the code they check.
"""

import math

import numpy as np

EARTH_R = 6_371_000.0


def xy_to_latlon(x, y, lat0=40.4, lon0=-111.88):
    lat = lat0 + np.degrees(np.asarray(y, float) / EARTH_R)
    lon = lon0 + np.degrees(np.asarray(x, float) / (EARTH_R * math.cos(math.radians(lat0))))
    return lat, lon


def survey_points(rng, half_m=85.0):
    """A 30-point measurement walk over a square site.

    Ten points form a close pass around the suspected source (the walk
    route crosses it), the other twenty cover the wider site at random.
    """
    radii = np.array([1.0, 1.3, 1.7, 2.2, 2.5, 5.0, 8.5, 14.0, 20.0, 25.0])
    theta = rng.uniform(0, 2 * math.pi, radii.size)
    near_x = radii * np.cos(theta)
    near_y = radii * np.sin(theta)
    far_x = rng.uniform(-half_m, half_m, 20)
    far_y = rng.uniform(-half_m, half_m, 20)
    return np.concatenate([near_x, far_x]), np.concatenate([near_y, far_y])


def field_rssi(x, y, tx_xy=(0.0, 0.0), exponent=3.0, a_dbm=-20.0, sigma_db=0.0, rng=None):
    """Log-distance truth field with optional i.i.d. shadowing."""
    d = np.hypot(np.asarray(x) - tx_xy[0], np.asarray(y) - tx_xy[1])
    d = np.maximum(d, 1.0)
    vals = a_dbm - 10.0 * exponent * np.log10(d)
    if sigma_db > 0:
        vals = vals + rng.normal(0.0, sigma_db, vals.shape)
    return vals
