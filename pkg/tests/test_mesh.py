import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from spherespde.errors import CapacityError, FormatError, InputError
from spherespde.geometry import EARTH_RADIUS_KM, arc_length, lonlat_to_xyz, random_sphere_points, xyz_to_lonlat
from spherespde.mesh import (
    BUFFER,
    CONUS_BOX,
    LAND,
    SEA,
    RegionMap,
    SphereMesh,
    build_geodesic,
    build_icosphere,
    build_mesh,
    count_in_box,
    load_mesh,
    refine_region,
    save_mesh,
    tag_regions,
)

FOUR_PI = 4.0 * np.pi


def check_invariants(mesh: SphereMesh):
    assert abs(mesh.areas.sum() - FOUR_PI) <= 1e-6
    assert np.all(mesh.areas > 0)
    # three edge records per triangle; each edge joins two distinct triangles
    counts = np.bincount(mesh.edge_tris.ravel(), minlength=mesh.n_triangles)
    assert np.all(counts == 3)
    assert np.all(mesh.edge_tris[:, 0] < mesh.edge_tris[:, 1])
    ev = mesh.vertices[mesh.edge_vertices]
    np.testing.assert_allclose(arc_length(ev[:, 0], ev[:, 1]), mesh.edge_lengths, atol=1e-10)
    n = mesh.edge_normals
    np.testing.assert_allclose(np.linalg.norm(n, axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(np.sum(n * mesh.edge_midpoints, axis=1), 0.0, atol=1e-12)
    # the normal seen from k, rebuilt from the edge plane, is the antipode of the stored one
    w = np.cross(ev[:, 0], ev[:, 1])
    w /= np.linalg.norm(w, axis=1, keepdims=True)
    ck = mesh.centroids[mesh.edge_tris[:, 1]]
    nk = np.where((np.sum(w * ck, axis=1) > 0)[:, None], -w, w)
    np.testing.assert_allclose(nk, -n, atol=1e-8)
    ci = mesh.centroids[mesh.edge_tris[:, 0]]
    assert np.all(np.sum((ck - ci) * n, axis=1) > 0)
    assert mesh.is_connected()


@pytest.mark.parametrize("s, n_tri", [(0, 20), (1, 80), (2, 320), (3, 1280)])
def test_icosphere_counts(s, n_tri):
    mesh = build_icosphere(s)
    assert mesh.n_triangles == n_tri == 20 * 4**s
    check_invariants(mesh)


def test_icosahedron_has_12_vertices():
    assert build_icosphere(0).n_vertices == 12


def test_subdivision_overflow():
    with pytest.raises(CapacityError):
        build_icosphere(9)
    with pytest.raises(InputError):
        build_icosphere(-1)


@pytest.mark.parametrize("f", [1, 2, 3, 5, 7])
def test_geodesic_counts(f):
    mesh = build_geodesic(f)
    assert mesh.n_triangles == 20 * f * f
    check_invariants(mesh)


def test_geodesic_power_of_two_matches_icosphere():
    a, b = build_geodesic(4), build_icosphere(2)
    assert a.n_triangles == b.n_triangles
    assert a.areas.sum() == pytest.approx(b.areas.sum(), abs=1e-9)


def test_refine_conus(ico2):
    out = refine_region(ico2, CONUS_BOX, 1)
    assert out.n_triangles > 320
    check_invariants(out)


def test_refine_zero_levels_is_identity(ico2):
    out = refine_region(ico2, CONUS_BOX, 0)
    np.testing.assert_array_equal(out.triangles, ico2.triangles)


def test_refine_errors(ico2):
    with pytest.raises(InputError):
        refine_region(ico2, (-100, -90, 40, 40), 1)
    with pytest.raises(InputError):
        refine_region(ico2, CONUS_BOX, 5)


def test_refine_antimeridian_box():
    out = refine_region(build_icosphere(1), (170.0, -170.0, -20.0, 20.0), 2)
    check_invariants(out)
    assert out.n_triangles > 80


def test_application_mesh_counts():
    mesh = build_mesh("geodesic:6+refine:3@conus")
    check_invariants(mesh)
    assert abs(mesh.n_triangles - 2340) <= 0.15 * 2340
    assert abs(count_in_box(mesh) - 1134) <= 0.15 * 1134


def test_build_mesh_errors():
    with pytest.raises(InputError):
        build_mesh("cube:3")
    with pytest.raises(InputError):
        build_mesh("geodesic:3+smooth:1")


def test_tag_ocean(ico2):
    tagged = tag_regions(ico2, RegionMap.ocean())
    assert np.all(tagged.region == SEA)


def test_tag_hemisphere_no_buffer(ico2):
    tagged = tag_regions(ico2, RegionMap.hemisphere(0.0))
    _, lat = xyz_to_lonlat(ico2.centroids)
    np.testing.assert_array_equal(tagged.region == LAND, lat > 0)
    assert not np.any(tagged.region == BUFFER)


def test_tag_hemisphere_buffer_matches_brute_force():
    mesh = build_icosphere(3)
    tagged = tag_regions(mesh, RegionMap.hemisphere(500.0))
    # brute force: distance from every centroid to a dense sampling of the equator
    eq = lonlat_to_xyz(np.linspace(-180, 180, 20001), np.zeros(20001))
    d = np.array([arc_length(eq, c).min() for c in mesh.centroids]) * EARTH_RADIUS_KM
    _, lat = xyz_to_lonlat(mesh.centroids)
    np.testing.assert_array_equal(tagged.region == BUFFER, d <= 500.0)
    nonbuf = tagged.region != BUFFER
    np.testing.assert_array_equal(tagged.region[nonbuf] == LAND, lat[nonbuf] > 0)
    # buffer cells govern as their nearest non-buffer domain
    assert set(np.unique(tagged.domain)) <= {SEA, LAND}


def test_buffer_is_monotone_in_width():
    mesh = build_icosphere(3)
    sets = [tag_regions(mesh, RegionMap.world(w)).region == BUFFER for w in (0.0, 100.0, 300.0, 800.0)]
    for narrow, wide in zip(sets[:-1], sets[1:]):
        assert np.all(wide[narrow])


def test_open_ring_is_rejected():
    ring = [(0, 0), (10, 0), (10, 10), (0, 10)]
    with pytest.raises(FormatError):
        RegionMap(polygons=[[ring]])


def test_geojson_polygon_and_holes():
    outer = [[-10, -10], [10, -10], [10, 10], [-10, 10], [-10, -10]]
    hole = [[-2, -2], [2, -2], [2, 2], [-2, 2], [-2, -2]]
    rm = RegionMap.from_geojson({"type": "Feature", "geometry": {"type": "Polygon", "coordinates": [outer, hole]}},
                                buffer_width_km=0.0)
    np.testing.assert_array_equal(rm.is_land([5.0, 0.0, 20.0], [5.0, 0.0, 0.0]), [True, False, False])


def test_world_map_tags_known_points():
    rm = RegionMap.world(0.0)
    lon = np.array([-100.0, 20.0, -150.0, 80.0])
    lat = np.array([40.0, 0.0, 0.0, -30.0])  # US, Congo basin, Pacific, Indian Ocean
    np.testing.assert_array_equal(rm.is_land(lon, lat), [True, True, False, False])
    assert len(rm.coast_pieces(max_step_deg=360.0)) <= 1000


def test_tagging_is_deterministic(ico2):
    a = tag_regions(ico2, RegionMap.world())
    b = tag_regions(ico2, RegionMap.world())
    np.testing.assert_array_equal(a.region, b.region)
    assert abs(a.areas.sum() - FOUR_PI) <= 1e-6


def test_locate_centroid(ico2):
    assert ico2.locate(ico2.centroids[7])[0] == 7
    np.testing.assert_array_equal(ico2.locate(ico2.centroids), np.arange(ico2.n_triangles))


def _barycentric_scan(mesh, p, tol=1e-12):
    """Lowest-index triangle whose cone contains ``p`` (independent of the library test)."""
    for t, (a, b, c) in enumerate(mesh.vertices[mesh.triangles]):
        lam = np.linalg.solve(np.column_stack([a, b, c]), p)
        if np.all(lam >= -tol):
            return t
    raise AssertionError("point not covered")


def test_locate_matches_exhaustive_scan():
    mesh = refine_region(build_icosphere(2), CONUS_BOX, 1)
    pts = random_sphere_points(np.random.default_rng(3), 1000)
    got = mesh.locate(pts)
    expect = np.array([_barycentric_scan(mesh, p) for p in pts])
    np.testing.assert_array_equal(got, expect)
    assert all(mesh.contains(t, p) for t, p in zip(got, pts))


@given(st.floats(-89.9, 89.9), st.floats(-180, 179.9))
def test_locate_contains(lat, lon):
    mesh = build_icosphere(2)
    p = lonlat_to_xyz(lon, lat)
    assert mesh.contains(mesh.locate(p)[0], p)


def test_locate_shared_vertex_takes_lowest_index(ico2):
    v = ico2.vertices[0]
    owners = np.flatnonzero(np.any(ico2.triangles == 0, axis=1))
    assert ico2.locate(v)[0] == owners.min()


def test_save_load_round_trip(tmp_path, world_mesh_small):
    path = tmp_path / "m.txt"
    save_mesh(world_mesh_small, path)
    back = load_mesh(path)
    np.testing.assert_array_equal(back.triangles, world_mesh_small.triangles)
    np.testing.assert_allclose(back.vertices, world_mesh_small.vertices, atol=0)
    np.testing.assert_array_equal(back.region, world_mesh_small.region)
    np.testing.assert_array_equal(back.domain, world_mesh_small.domain)
    np.testing.assert_allclose(back.edge_lengths, world_mesh_small.edge_lengths, atol=0)
    header = path.read_text().splitlines()[:2]
    assert header[1] == f"counts {back.n_vertices} {back.n_triangles} {back.n_edges}"


def test_load_rejects_foreign_file(tmp_path):
    p = tmp_path / "x.txt"
    p.write_text("hello\n")
    with pytest.raises(FormatError):
        load_mesh(p)


def test_nonconforming_mesh_rejected():
    mesh = build_icosphere(0)
    with pytest.raises(FormatError):
        SphereMesh.from_triangles(mesh.vertices, mesh.triangles[:-1])


def test_whole_buffer_rejected(ico2):
    with pytest.raises(InputError):
        tag_regions(ico2, RegionMap.hemisphere(30000.0))
