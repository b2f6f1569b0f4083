"""Unit-sphere geometry helpers (lon/lat conversion, arcs, distances)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EARTH_RADIUS_KM = 6371.0


@dataclass(frozen=True)
class GeoPoint:
    """A point on the sphere in degrees."""

    lat: float
    lon: float

    def __post_init__(self):
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"latitude {self.lat} outside [-90, 90]")
        if not -180.0 <= self.lon < 180.0:
            # normalise instead of rejecting: 180 is the same meridian as -180
            object.__setattr__(self, "lon", wrap_lon(self.lon))

    def unit_vector(self) -> np.ndarray:
        return lonlat_to_xyz(self.lon, self.lat)

    @classmethod
    def from_vector(cls, s) -> "GeoPoint":
        lon, lat = xyz_to_lonlat(np.asarray(s, dtype=float))
        return cls(lat=float(lat), lon=float(lon))


def wrap_lon(lon):
    """Map longitudes into [-180, 180)."""
    return (np.asarray(lon, dtype=float) + 180.0) % 360.0 - 180.0


def lonlat_to_xyz(lon, lat) -> np.ndarray:
    """Unit vectors for longitude/latitude in degrees; output shape (..., 3)."""
    lon = np.radians(np.asarray(lon, dtype=float))
    lat = np.radians(np.asarray(lat, dtype=float))
    c = np.cos(lat)
    return np.stack([c * np.cos(lon), c * np.sin(lon), np.sin(lat)], axis=-1)


def xyz_to_lonlat(s):
    """Inverse of :func:`lonlat_to_xyz`; returns (lon, lat) in degrees."""
    s = np.asarray(s, dtype=float)
    x, y, z = s[..., 0], s[..., 1], s[..., 2]
    lat = np.degrees(np.arctan2(z, np.hypot(x, y)))
    lon = wrap_lon(np.degrees(np.arctan2(y, x)))
    return lon, lat


def normalize(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def arc_length(a, b) -> np.ndarray:
    """Great-circle angle between unit vectors, stable for tiny and large angles."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    cross = np.linalg.norm(np.cross(a, b), axis=-1)
    dot = np.sum(a * b, axis=-1)
    return np.arctan2(cross, dot)


def point_arc_distance(p, a, b) -> np.ndarray:
    """Angular distance from points ``p`` to great-circle arcs ``a``-``b``.

    Broadcasts over leading axes. Arcs are the minor arcs between their end
    points; degenerate arcs (a == b) reduce to point distances.
    """
    p = np.asarray(p, dtype=float)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    w = np.cross(a, b)
    wn = np.linalg.norm(w, axis=-1, keepdims=True)
    degenerate = wn[..., 0] < 1e-15
    w = w / np.where(wn < 1e-15, 1.0, wn)
    pw = np.sum(p * w, axis=-1)
    # foot of the perpendicular lies inside the arc iff it is between a and b
    q = p - pw[..., None] * w
    inside = (np.sum(np.cross(a, q) * w, axis=-1) >= 0) & (np.sum(np.cross(q, b) * w, axis=-1) >= 0)
    perp = np.arcsin(np.clip(np.abs(pw), 0.0, 1.0))
    ends = np.minimum(arc_length(p, a), arc_length(p, b))
    return np.where(inside & ~degenerate, perp, ends)


def random_sphere_points(rng: np.random.Generator, n: int) -> np.ndarray:
    """Uniform points on the unit sphere, shape (n, 3)."""
    return normalize(rng.standard_normal((n, 3)))
