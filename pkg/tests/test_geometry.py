import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from spherespde.geometry import (
    GeoPoint,
    arc_length,
    lonlat_to_xyz,
    point_arc_distance,
    random_sphere_points,
    wrap_lon,
    xyz_to_lonlat,
)

lats = st.floats(-89.0, 89.0)
lons = st.floats(-180.0, 179.999)


@given(lats, lons)
def test_unit_vector_norm(lat, lon):
    assert abs(np.linalg.norm(GeoPoint(lat, lon).unit_vector()) - 1.0) <= 1e-12


@given(lats, lons)
def test_round_trip(lat, lon):
    back = GeoPoint.from_vector(GeoPoint(lat, lon).unit_vector())
    assert abs(back.lat - lat) <= 1e-9
    dlon = (back.lon - lon + 180.0) % 360.0 - 180.0
    assert abs(dlon) <= 1e-9


def test_geopoint_rejects_bad_latitude():
    with pytest.raises(ValueError):
        GeoPoint(91.0, 0.0)


def test_longitude_is_wrapped():
    assert GeoPoint(0.0, 180.0).lon == -180.0
    np.testing.assert_allclose(wrap_lon([190.0, -190.0, 540.0]), [-170.0, 170.0, -180.0])


def test_arc_length_known_values():
    a = lonlat_to_xyz(0.0, 0.0)
    assert arc_length(a, lonlat_to_xyz(90.0, 0.0)) == pytest.approx(np.pi / 2)
    assert arc_length(a, lonlat_to_xyz(0.0, 90.0)) == pytest.approx(np.pi / 2)
    assert arc_length(a, -a) == pytest.approx(np.pi)
    # tiny angles stay accurate where arccos of the dot product would not
    b = lonlat_to_xyz(np.degrees(1e-9), 0.0)
    assert arc_length(a, b) == pytest.approx(1e-9, rel=1e-6)


@given(st.integers(0, 2**32 - 1))
def test_point_arc_distance_matches_dense_sampling(seed):
    rng = np.random.default_rng(seed)
    a, b, p = random_sphere_points(rng, 3)
    # dense sampling of the minor arc is an independent oracle
    ang = arc_length(a, b)
    t = np.linspace(0.0, 1.0, 4001)[:, None]
    w = np.sin((1 - t) * ang) * a + np.sin(t * ang) * b
    pts = w / np.linalg.norm(w, axis=1, keepdims=True)
    brute = arc_length(pts, p).min()
    assert point_arc_distance(p, a, b) == pytest.approx(brute, abs=ang / 4000 + 1e-12)


def test_xyz_to_lonlat_poles():
    lon, lat = xyz_to_lonlat(np.array([[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]]))
    np.testing.assert_allclose(lat, [90.0, -90.0])


def test_random_points_are_unit():
    p = random_sphere_points(np.random.default_rng(0), 100)
    np.testing.assert_allclose(np.linalg.norm(p, axis=1), 1.0, atol=1e-14)
