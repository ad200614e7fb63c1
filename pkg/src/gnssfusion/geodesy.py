"""WGS84 coordinate conversions, local ENU frames, Earth-rotation correction.

ECEF points are plain length-3 numpy arrays in meters (frame E: z along the
Earth rotation axis, x toward the prime meridian). Geodetic angles are radians.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .constants import EARTH_ROTATION_RATE, WGS84_A, WGS84_B, WGS84_E2
from .errors import InvalidTravelTime, NearGeocenter

# Plausible ECEF norms for validation (not enforced by constructors).
SATELLITE_NORM_RANGE = (6.2e6, 2.7e7)
RECEIVER_NORM_RANGE = (6.3e6, 6.5e6)


@dataclass(frozen=True)
class GeodeticPoint:
    """Latitude/longitude [rad] and height above the WGS84 ellipsoid [m]."""

    latitude: float
    longitude: float
    height: float

    def __post_init__(self):
        if not (-np.pi / 2 <= self.latitude <= np.pi / 2):
            raise ValueError(f"latitude {self.latitude} outside [-pi/2, pi/2]")
        if not (-np.pi < self.longitude <= np.pi):
            raise ValueError(f"longitude {self.longitude} outside (-pi, pi]")
        if not np.isfinite(self.height):
            raise ValueError("height must be finite")


@dataclass(frozen=True)
class EnuFrame:
    """Local east/north/up frame at an ECEF origin.

    ``rotation`` maps ECEF deltas to ENU coordinates (rows are the east,
    north and up unit vectors).
    """

    origin: np.ndarray
    rotation: np.ndarray

    def to_enu(self, point_ecef: np.ndarray) -> np.ndarray:
        return self.rotation @ (np.asarray(point_ecef, dtype=float) - self.origin)

    def horizontal_error(self, point_ecef: np.ndarray, reference_ecef: np.ndarray) -> float:
        d = self.rotation @ (np.asarray(point_ecef, dtype=float) - np.asarray(reference_ecef, dtype=float))
        return float(np.hypot(d[0], d[1]))


def ecef_norm_ok(p: np.ndarray, kind: str = "receiver") -> bool:
    """Validation helper: is |p| in the plausible range for the point kind?"""
    lo, hi = SATELLITE_NORM_RANGE if kind == "satellite" else RECEIVER_NORM_RANGE
    n = float(np.linalg.norm(p))
    return np.all(np.isfinite(p)) and lo <= n <= hi


def geodetic_to_ecef(g: GeodeticPoint) -> np.ndarray:
    """Closed-form WGS84 geodetic -> ECEF."""
    sin_lat, cos_lat = np.sin(g.latitude), np.cos(g.latitude)
    n = WGS84_A / np.sqrt(1.0 - WGS84_E2 * sin_lat * sin_lat)
    return np.array([
        (n + g.height) * cos_lat * np.cos(g.longitude),
        (n + g.height) * cos_lat * np.sin(g.longitude),
        (n * (1.0 - WGS84_E2) + g.height) * sin_lat,
    ])


def _geodetic_arrays(p: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized ECEF -> (lat, lon, h) via Bowring start + fixed-point refinement.

    ``p`` is (n, 3). Iterates until the height update drops below 1e-9 m.
    """
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    s = np.hypot(x, y)
    lon = np.where(s > 0.0, np.arctan2(y, x), 0.0)

    # Bowring initial latitude from the reduced latitude.
    ep2 = (WGS84_A**2 - WGS84_B**2) / WGS84_B**2
    u = np.arctan2(z * WGS84_A, s * WGS84_B)
    lat = np.arctan2(z + ep2 * WGS84_B * np.sin(u) ** 3,
                     s - WGS84_E2 * WGS84_A * np.cos(u) ** 3)

    h = np.zeros_like(lat)
    for _ in range(10):
        sin_lat = np.sin(lat)
        n = WGS84_A / np.sqrt(1.0 - WGS84_E2 * sin_lat * sin_lat)
        cos_lat = np.cos(lat)
        h_new = np.where(
            np.abs(cos_lat) > 1e-8,
            s / np.maximum(cos_lat, 1e-300) - n,
            np.abs(z) - WGS84_B,
        )
        lat = np.arctan2(z, s * (1.0 - WGS84_E2 * n / (n + h_new)))
        if np.max(np.abs(h_new - h)) < 1e-9:
            h = h_new
            break
        h = h_new
    # Exact poles: pin longitude to 0 and latitude sign from z.
    pole = s == 0.0
    if np.any(pole):
        lat = np.where(pole, np.sign(z) * np.pi / 2, lat)
    return lat, lon, h


def ecef_to_geodetic(p: np.ndarray) -> GeodeticPoint:
    """Inverse of :func:`geodetic_to_ecef`; rejects near-geocenter input."""
    p = np.asarray(p, dtype=float)
    if np.linalg.norm(p) <= 1e5:
        raise NearGeocenter(f"|p| = {np.linalg.norm(p):.1f} m is too close to the geocenter")
    lat, lon, h = _geodetic_arrays(p.reshape(1, 3))
    return GeodeticPoint(float(lat[0]), float(lon[0]), float(h[0]))


def local_axes(lat: np.ndarray, lon: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """East, north, up unit vectors in ECEF for arrays of geodetic angles."""
    sin_lat, cos_lat = np.sin(lat), np.cos(lat)
    sin_lon, cos_lon = np.sin(lon), np.cos(lon)
    east = np.stack([-sin_lon, cos_lon, np.zeros_like(lon)], axis=-1)
    north = np.stack([-sin_lat * cos_lon, -sin_lat * sin_lon, cos_lat], axis=-1)
    up = np.stack([cos_lat * cos_lon, cos_lat * sin_lon, sin_lat], axis=-1)
    return east, north, up


def enu_frame_at(origin: GeodeticPoint) -> EnuFrame:
    east, north, up = local_axes(np.array([origin.latitude]), np.array([origin.longitude]))
    rotation = np.vstack([east[0], north[0], up[0]])
    return EnuFrame(origin=geodetic_to_ecef(origin), rotation=rotation)


def receiver_geometry(p: np.ndarray) -> dict:
    """Per-row geodetic quantities needed by observation models.

    Returns up vectors plus the gradient ingredients of the geodetic normal:
    d(up)/d(p) = north north^T / (M + h) + east east^T / (N + h), with M and N
    the meridian and prime-vertical curvature radii.
    """
    p = np.atleast_2d(np.asarray(p, dtype=float))
    lat, lon, h = _geodetic_arrays(p)
    east, north, up = local_axes(lat, lon)
    sin_lat = np.sin(lat)
    w = np.sqrt(1.0 - WGS84_E2 * sin_lat * sin_lat)
    n_rad = WGS84_A / w
    m_rad = WGS84_A * (1.0 - WGS84_E2) / w**3
    return {
        "lat": lat, "lon": lon, "h": h,
        "east": east, "north": north, "up": up,
        "inv_m_h": 1.0 / (m_rad + h), "inv_n_h": 1.0 / (n_rad + h),
    }


def sagnac_correct(sat_pos: np.ndarray, travel_time: float) -> np.ndarray:
    """Rotate a transmit-time satellite position about z by -omega_e * tau.

    Compensates the Earth rotation during signal flight so the position is
    expressed in the ECEF frame at reception time.
    """
    if not (0.0 <= travel_time < 0.2):
        raise InvalidTravelTime(f"travel time {travel_time} s outside [0, 0.2)")
    return sagnac_correct_many(np.asarray(sat_pos, dtype=float).reshape(1, 3),
                               np.array([travel_time]))[0]


def sagnac_correct_many(sat_pos: np.ndarray, travel_time: np.ndarray) -> np.ndarray:
    """Vectorized :func:`sagnac_correct` without the range check."""
    ang = -EARTH_ROTATION_RATE * np.asarray(travel_time, dtype=float)
    c, s = np.cos(ang), np.sin(ang)
    x, y, z = sat_pos[:, 0], sat_pos[:, 1], sat_pos[:, 2]
    return np.stack([c * x - s * y, s * x + c * y, z], axis=-1)
