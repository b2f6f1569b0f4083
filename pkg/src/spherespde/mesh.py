"""Geodesic triangulations of the unit sphere.

A :class:`SphereMesh` stores vertices, triangles and the derived cell
geometry used by the finite-volume assembly: centroids, spherical areas
and one record per interior edge (every edge is shared by exactly two
triangles, the sphere has no boundary).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.sparse import csgraph, csr_matrix
from scipy.spatial import cKDTree

from .errors import CapacityError, FormatError, InputError
from .geometry import (
    EARTH_RADIUS_KM,
    arc_length,
    lonlat_to_xyz,
    normalize,
    point_arc_distance,
    xyz_to_lonlat,
)

SEA, LAND, BUFFER = 0, 1, 2
REGION_NAMES = ("sea", "land", "buffer")
MAX_SUBDIVISIONS = 8
MAX_REFINE_LEVELS = 4

# CONUS bounding box (lon_min, lon_max, lat_min, lat_max)
CONUS_BOX = (-125.0, -66.5, 24.5, 49.5)


def _readonly(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(eq=False)
class SphereMesh:
    """Conforming triangulation of the sphere with finite-volume geometry.

    Attributes
    ----------
    vertices : (V, 3) unit vectors
    triangles : (T, 3) vertex indices, counter-clockwise seen from outside
    centroids : (T, 3) normalised barycentres
    areas : (T,) spherical areas in steradians
    edge_tris : (E, 2) adjacent triangles ``(i, k)`` with ``i < k``
    edge_lengths : (E,) great-circle length of the shared edge
    edge_normals : (E, 3) unit normal of the edge at its midpoint, tangent
        to the sphere and pointing out of triangle ``i``
    edge_midpoints : (E, 3) unit midpoint of the edge
    tri_edges : (T, 3) edge id of local edge ``j`` = (v_j, v_{j+1})
    region : (T,) region code (SEA/LAND/BUFFER) or None when untagged
    domain : (T,) governing land/sea domain; equals ``region`` outside the
        buffer, and the nearest non-buffer tag inside it
    """

    vertices: np.ndarray
    triangles: np.ndarray
    centroids: np.ndarray
    areas: np.ndarray
    edge_tris: np.ndarray
    edge_lengths: np.ndarray
    edge_normals: np.ndarray
    edge_midpoints: np.ndarray
    tri_edges: np.ndarray
    edge_vertices: np.ndarray
    region: np.ndarray | None = None
    domain: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_triangles(cls, vertices, triangles, region=None, domain=None, meta=None) -> "SphereMesh":
        v = normalize(np.asarray(vertices, dtype=float))
        tri = np.array(triangles, dtype=np.int64)
        if tri.ndim != 2 or tri.shape[1] != 3:
            raise FormatError("triangles must be an (T, 3) index array")
        a, b, c = v[tri[:, 0]], v[tri[:, 1]], v[tri[:, 2]]
        triple = np.einsum("ij,ij->i", a, np.cross(b, c))
        flip = triple < 0
        if flip.any():
            tri[flip] = tri[flip][:, [0, 2, 1]]
            a, b, c = v[tri[:, 0]], v[tri[:, 1]], v[tri[:, 2]]
            triple = np.abs(triple)
        denom = 1.0 + np.einsum("ij,ij->i", a, b) + np.einsum("ij,ij->i", b, c) + np.einsum("ij,ij->i", c, a)
        areas = 2.0 * np.arctan2(triple, denom)
        if np.any(areas <= 0):
            raise FormatError("degenerate triangle with zero area")
        centroids = normalize(a + b + c)

        nv = len(v)
        half = np.stack([tri, np.roll(tri, -1, axis=1)], axis=-1).reshape(-1, 2)
        lo, hi = half.min(axis=1), half.max(axis=1)
        keys = lo * nv + hi
        uniq, inv, counts = np.unique(keys, return_inverse=True, return_counts=True)
        if np.any(counts != 2):
            raise FormatError("mesh is not conforming: every edge must be shared by exactly two triangles")
        order = np.argsort(inv, kind="stable")
        pair_tris = (order // 3).reshape(-1, 2)
        edge_tris = np.sort(pair_tris, axis=1)
        edge_vertices = np.stack([uniq // nv, uniq % nv], axis=1)
        ea, eb = v[edge_vertices[:, 0]], v[edge_vertices[:, 1]]
        lengths = arc_length(ea, eb)
        mids = normalize(ea + eb)
        w = normalize(np.cross(ea, eb))
        sign = np.where(np.einsum("ij,ij->i", w, centroids[edge_tris[:, 0]]) < 0, 1.0, -1.0)
        normals = w * sign[:, None]

        mesh = cls(
            vertices=_readonly(v),
            triangles=_readonly(tri),
            centroids=_readonly(centroids),
            areas=_readonly(areas),
            edge_tris=_readonly(edge_tris),
            edge_lengths=_readonly(lengths),
            edge_normals=_readonly(normals),
            edge_midpoints=_readonly(mids),
            tri_edges=_readonly(inv.reshape(-1, 3)),
            edge_vertices=_readonly(edge_vertices),
            meta=dict(meta or {}),
        )
        if region is not None:
            mesh = mesh.with_regions(region, domain)
        return mesh

    # -- basic properties -------------------------------------------------
    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_edges(self) -> int:
        return len(self.edge_tris)

    @property
    def tagged(self) -> bool:
        return self.region is not None

    @cached_property
    def centroid_distances(self) -> np.ndarray:
        """Great-circle distance between the two centroids of each edge."""
        c = self.centroids
        return arc_length(c[self.edge_tris[:, 0]], c[self.edge_tris[:, 1]])

    @cached_property
    def adjacency(self) -> csr_matrix:
        i, k = self.edge_tris[:, 0], self.edge_tris[:, 1]
        n = self.n_triangles
        ones = np.ones(len(i))
        return csr_matrix((np.r_[ones, ones], (np.r_[i, k], np.r_[k, i])), shape=(n, n))

    def is_connected(self) -> bool:
        ncomp, _ = csgraph.connected_components(self.adjacency, directed=False)
        return ncomp == 1

    def centroid_lonlat(self):
        return xyz_to_lonlat(self.centroids)

    def with_regions(self, region, domain=None) -> "SphereMesh":
        region = np.asarray(region, dtype=np.int8)
        if region.shape != (self.n_triangles,):
            raise InputError("region tags must have one entry per triangle")
        if domain is None:
            domain = _nearest_domain(self.centroids, region)
        domain = np.asarray(domain, dtype=np.int8)
        return SphereMesh(
            vertices=self.vertices,
            triangles=self.triangles,
            centroids=self.centroids,
            areas=self.areas,
            edge_tris=self.edge_tris,
            edge_lengths=self.edge_lengths,
            edge_normals=self.edge_normals,
            edge_midpoints=self.edge_midpoints,
            tri_edges=self.tri_edges,
            edge_vertices=self.edge_vertices,
            region=_readonly(region),
            domain=_readonly(domain),
            meta=dict(self.meta),
        )

    def with_uniform_region(self, name: str = "sea") -> "SphereMesh":
        code = REGION_NAMES.index(name)
        if code == BUFFER:
            raise InputError("a mesh cannot be entirely buffer")
        return self.with_regions(np.full(self.n_triangles, code, dtype=np.int8))

    def region_counts(self) -> dict:
        if self.region is None:
            return {}
        return {name: int(np.sum(self.region == code)) for code, name in enumerate(REGION_NAMES)}

    # -- point location ---------------------------------------------------
    @cached_property
    def _centroid_tree(self) -> cKDTree:
        return cKDTree(self.centroids)

    def contains(self, t: int, p) -> bool:
        """Exact spherical point-in-triangle test (closed triangle)."""
        return bool(_contains(self.vertices[self.triangles[[t]]], np.asarray(p, float)[None, :])[0])

    def locate(self, points, k: int = 16) -> np.ndarray:
        """Triangle index containing each point; ties go to the lowest index.

        ``points`` is an (N, 3) array of unit vectors or a single vector.
        """
        p = normalize(np.atleast_2d(np.asarray(points, dtype=float)))
        k = min(k, self.n_triangles)
        _, cand = self._centroid_tree.query(p, k=k)
        cand = np.asarray(cand).reshape(len(p), k)
        tv = self.vertices[self.triangles[cand]]  # (N, k, 3, 3)
        inside = _contains(tv.reshape(-1, 3, 3), np.repeat(p, k, axis=0)).reshape(len(p), k)
        big = np.iinfo(np.int64).max
        best = np.where(inside, cand, big).min(axis=1)
        missing = np.flatnonzero(best == big)
        for i in missing:
            best[i] = self._locate_exhaustive(p[i])
        return best

    def _locate_exhaustive(self, p) -> int:
        tv = self.vertices[self.triangles]
        hit = np.flatnonzero(_contains(tv, np.broadcast_to(p, (self.n_triangles, 3))))
        if len(hit) == 0:
            # numerically outside every triangle (cannot happen beyond round-off)
            return int(self._centroid_tree.query(p)[1])
        return int(hit.min())


def _contains(tv, p, tol: float = 1e-12) -> np.ndarray:
    a, b, c = tv[:, 0], tv[:, 1], tv[:, 2]
    s1 = np.einsum("ij,ij->i", p, np.cross(a, b))
    s2 = np.einsum("ij,ij->i", p, np.cross(b, c))
    s3 = np.einsum("ij,ij->i", p, np.cross(c, a))
    front = np.einsum("ij,ij->i", p, a + b + c) > 0
    return (s1 >= -tol) & (s2 >= -tol) & (s3 >= -tol) & front


NEAREST_TIE_TOL = 1e-12


def nearest_nonbuffer(centroids, region, points) -> np.ndarray:
    """Index of the non-buffer triangle whose centroid is nearest each point.

    Equidistant centroids (within ``NEAREST_TIE_TOL``) resolve to the lowest
    triangle index, so symmetric meshes get a reproducible answer.
    """
    keep = np.flatnonzero(region != BUFFER)
    if len(keep) == 0:
        raise InputError("every triangle is buffer; no land/sea domain to inherit")
    pts = np.atleast_2d(points)
    k = min(8, len(keep))
    dist, idx = cKDTree(centroids[keep]).query(pts, k=k)
    dist, idx = dist.reshape(len(pts), k), idx.reshape(len(pts), k)
    cand = np.where(dist <= dist[:, :1] + NEAREST_TIE_TOL, keep[idx], np.iinfo(np.int64).max)
    return cand.min(axis=1)


def _nearest_domain(centroids, region) -> np.ndarray:
    domain = region.astype(np.int8).copy()
    buf = region == BUFFER
    if buf.any():
        domain[buf] = region[nearest_nonbuffer(centroids, region, centroids[buf])]
    return domain


# -- construction --------------------------------------------------------

def _icosahedron():
    lat = np.degrees(np.arctan(0.5))
    upper = lonlat_to_xyz(72.0 * np.arange(5), np.full(5, lat))
    lower = lonlat_to_xyz(36.0 + 72.0 * np.arange(5), np.full(5, -lat))
    v = np.vstack([[0.0, 0.0, 1.0], upper, lower, [0.0, 0.0, -1.0]])
    faces = []
    for k in range(5):
        u0, u1 = 1 + k, 1 + (k + 1) % 5
        l0, l1 = 6 + k, 6 + (k + 1) % 5
        faces += [(0, u0, u1), (u0, l0, u1), (u1, l0, l1), (11, l1, l0)]
    return v, np.array(faces)


def build_icosphere(subdivisions: int) -> SphereMesh:
    """Icosahedron refined ``subdivisions`` times by 4-way edge bisection."""
    if subdivisions < 0 or int(subdivisions) != subdivisions:
        raise InputError("subdivisions must be a non-negative integer")
    if subdivisions > MAX_SUBDIVISIONS:
        raise CapacityError(f"subdivisions={subdivisions} exceeds the limit of {MAX_SUBDIVISIONS}")
    v, f = _icosahedron()
    mesh = SphereMesh.from_triangles(v, f, meta={"kind": "icosphere", "subdivisions": 0})
    for s in range(int(subdivisions)):
        mesh = _refine_marked(mesh, np.ones(mesh.n_triangles, dtype=bool))
    mesh.meta.update(kind="icosphere", subdivisions=int(subdivisions))
    return mesh


def build_geodesic(frequency: int) -> SphereMesh:
    """Class-I geodesic sphere: each icosahedron face split into ``frequency**2`` triangles.

    ``frequency = 2**s`` gives the same counts as :func:`build_icosphere`;
    other frequencies give meshes of ``20 * frequency**2`` triangles
    (e.g. 500 for frequency 5, 2,000 for frequency 10).
    """
    f = int(frequency)
    if f < 1 or f != frequency:
        raise InputError("frequency must be a positive integer")
    if 20 * f * f > 20 * 4**MAX_SUBDIVISIONS:
        raise CapacityError("geodesic frequency too large")
    iv, faces = _icosahedron()
    index: dict = {}
    verts: list = []

    def vid(weights):
        key = tuple(sorted((int(k), int(w)) for k, w in weights if w > 0))
        got = index.get(key)
        if got is None:
            got = index[key] = len(verts)
            verts.append(sum(w * iv[k] for k, w in key) / f)
        return got

    tris = []
    for a, b, c in faces:
        grid = {}
        for i in range(f + 1):
            for j in range(f + 1 - i):
                grid[i, j] = vid([(a, f - i - j), (b, i), (c, j)])
        for i in range(f):
            for j in range(f - i):
                tris.append((grid[i, j], grid[i + 1, j], grid[i, j + 1]))
                if i + j < f - 1:
                    tris.append((grid[i + 1, j], grid[i + 1, j + 1], grid[i, j + 1]))
    return SphereMesh.from_triangles(np.array(verts), np.array(tris), meta={"kind": "geodesic", "frequency": f})


def _refine_marked(mesh: SphereMesh, red: np.ndarray) -> SphereMesh:
    """One level of red-green refinement of the triangles flagged ``red``."""
    red = red.copy()
    tri_edges = mesh.tri_edges
    while True:
        split = np.zeros(mesh.n_edges, dtype=bool)
        split[tri_edges[red].ravel()] = True
        nsplit = split[tri_edges].sum(axis=1)
        promote = (~red) & (nsplit >= 2)
        if not promote.any():
            break
        red |= promote
    split_ids = np.flatnonzero(split)
    nv = mesh.n_vertices
    mid_index = np.full(mesh.n_edges, -1, dtype=np.int64)
    mid_index[split_ids] = nv + np.arange(len(split_ids))
    ev = mesh.edge_vertices[split_ids]
    new_v = normalize(mesh.vertices[ev[:, 0]] + mesh.vertices[ev[:, 1]])
    vertices = np.vstack([mesh.vertices, new_v])

    tri = mesh.triangles
    m = mid_index[tri_edges]  # (T, 3) midpoint of local edge j or -1
    out = []
    keep = (~red) & (nsplit == 0)
    out.append(tri[keep])
    r = np.flatnonzero(red)
    a, b, c = tri[r, 0], tri[r, 1], tri[r, 2]
    mab, mbc, mca = m[r, 0], m[r, 1], m[r, 2]
    out += [np.stack(t, axis=1) for t in ((a, mab, mca), (mab, b, mbc), (mca, mbc, c), (mab, mbc, mca))]
    g = np.flatnonzero((~red) & (nsplit == 1))
    j = np.argmax(m[g] >= 0, axis=1)
    v0 = tri[g, j]
    v1 = tri[g, (j + 1) % 3]
    v2 = tri[g, (j + 2) % 3]
    mm = m[g, j]
    out += [np.stack((v0, mm, v2), axis=1), np.stack((mm, v1, v2), axis=1)]
    return SphereMesh.from_triangles(vertices, np.vstack(out), meta=dict(mesh.meta))


def _in_box(mesh: SphereMesh, box) -> np.ndarray:
    lon_min, lon_max, lat_min, lat_max = box
    lon, lat = mesh.centroid_lonlat()
    in_lat = (lat >= lat_min) & (lat <= lat_max)
    if lon_min <= lon_max:
        in_lon = (lon >= lon_min) & (lon <= lon_max)
    else:  # box crossing the antimeridian
        in_lon = (lon >= lon_min) | (lon <= lon_max)
    return in_lat & in_lon


def refine_region(mesh: SphereMesh, box, levels: int) -> SphereMesh:
    """Refine triangles whose centroid falls in a lon/lat box.

    Each level splits the flagged triangles into four and closes the
    refinement with green bisections of the neighbours so that no hanging
    nodes remain. ``box`` is ``(lon_min, lon_max, lat_min, lat_max)`` in
    degrees; ``lon_min > lon_max`` denotes a box crossing the antimeridian.
    """
    lon_min, lon_max, lat_min, lat_max = map(float, box)
    if not lat_min < lat_max or lon_min == lon_max:
        raise InputError(f"empty refinement box {box}")
    if levels < 0 or levels > MAX_REFINE_LEVELS:
        raise InputError(f"levels must be in [0, {MAX_REFINE_LEVELS}]")
    if levels == 0:
        return mesh
    out = mesh
    for _ in range(int(levels)):
        flag = _in_box(out, box)
        if not flag.any():
            break
        out = _refine_marked(out, flag)
    out.meta.update(refine_box=list(map(float, box)), refine_levels=int(levels))
    if mesh.tagged:
        # refined meshes are re-tagged by the caller; keep them untagged here
        pass
    return out


def count_in_box(mesh: SphereMesh, box=CONUS_BOX) -> int:
    return int(_in_box(mesh, box).sum())


def build_mesh(spec: str) -> SphereMesh:
    """Build a mesh from a short text spec.

    ``icosphere:S``, ``geodesic:F`` and the variable-resolution form
    ``geodesic:F+refine:LEVELS@lon_min,lon_max,lat_min,lat_max`` (any base
    spec may be refined; ``conus`` is accepted as a box alias).
    """
    parts = spec.split("+")
    kind, _, arg = parts[0].partition(":")
    if kind == "icosphere":
        mesh = build_icosphere(int(arg))
    elif kind == "geodesic":
        mesh = build_geodesic(int(arg))
    else:
        raise InputError(f"unknown mesh kind {kind!r}")
    for extra in parts[1:]:
        what, _, rest = extra.partition(":")
        if what != "refine":
            raise InputError(f"unknown mesh modifier {what!r}")
        lv, _, boxtxt = rest.partition("@")
        box = CONUS_BOX if boxtxt in ("", "conus") else tuple(float(x) for x in boxtxt.split(","))
        mesh = refine_region(mesh, box, int(lv))
    mesh.meta["spec"] = spec
    return mesh


# -- regions -------------------------------------------------------------

@dataclass
class RegionMap:
    """Land polygons in lon/lat and a coastal buffer width.

    ``polygons`` is a list of polygons, each a list of closed rings (outer
    ring first, then holes). A point is land if it falls inside any polygon
    under the even-odd rule applied to that polygon's rings. Ring edges are
    straight lines in lon/lat, as in GeoJSON.
    """

    polygons: list
    buffer_width_km: float = 200.0

    def __post_init__(self):
        polys = []
        for poly in self.polygons:
            rings = []
            for r in poly:
                r = np.asarray(r, dtype=float)
                if r.ndim != 2 or r.shape[1] != 2 or len(r) < 4:
                    raise FormatError("each ring needs at least 4 (lon, lat) positions")
                if not np.array_equal(r[0], r[-1]):
                    raise FormatError("polygon ring is not closed (first position must equal last)")
                rings.append(r)
            polys.append(rings)
        self.polygons = polys
        if self.buffer_width_km < 0:
            raise InputError("buffer width must be non-negative")

    @property
    def rings(self) -> list:
        return [r for poly in self.polygons for r in poly]

    @classmethod
    def ocean(cls) -> "RegionMap":
        return cls(polygons=[], buffer_width_km=0.0)

    @classmethod
    def hemisphere(cls, buffer_width_km: float = 0.0, north: bool = True) -> "RegionMap":
        lat = 90.0 if north else -90.0
        ring = [(-180.0, 0.0), (180.0, 0.0), (180.0, lat), (-180.0, lat), (-180.0, 0.0)]
        return cls(polygons=[[ring]], buffer_width_km=buffer_width_km)

    @classmethod
    def from_geojson(cls, source, buffer_width_km: float = 200.0) -> "RegionMap":
        if isinstance(source, (str, Path)):
            data = json.loads(Path(source).read_text())
        else:
            data = source
        feats = data["features"] if data.get("type") == "FeatureCollection" else [data]
        polygons = []
        for ft in feats:
            geom = ft.get("geometry", ft)
            if geom["type"] == "Polygon":
                polygons.append(geom["coordinates"])
            elif geom["type"] == "MultiPolygon":
                polygons.extend(geom["coordinates"])
            else:
                raise FormatError(f"unsupported geometry {geom['type']}")
        return cls(polygons=polygons, buffer_width_km=buffer_width_km)

    @classmethod
    def world(cls, buffer_width_km: float = 200.0) -> "RegionMap":
        """Coarse world coastline shipped with the package."""
        path = Path(__file__).with_name("data") / "coastlines.geojson"
        return cls.from_geojson(path, buffer_width_km=buffer_width_km)

    def is_land(self, lon, lat) -> np.ndarray:
        lon = np.asarray(lon, dtype=float)
        lat = np.asarray(lat, dtype=float)
        land = np.zeros(lon.shape, dtype=bool)
        for poly in self.polygons:
            inside = np.zeros(lon.shape, dtype=bool)
            for r in poly:
                for (xa, ya), (xb, yb) in zip(r[:-1], r[1:]):
                    if ya == yb:
                        continue
                    crosses = (ya > lat) != (yb > lat)
                    xint = xa + (lat - ya) * (xb - xa) / (yb - ya)
                    inside ^= crosses & (lon < xint)
            land |= inside
        return land

    def coast_pieces(self, max_step_deg: float = 1.0):
        """Coastline as short great-circle arcs, shape (S, 2, 3).

        Ring edges lying on the antimeridian seam or on a pole line are
        cut artefacts, not coastline, and are skipped.
        """
        pieces = []
        for r in self.rings:
            for (xa, ya), (xb, yb) in zip(r[:-1], r[1:]):
                if abs(xa) == 180.0 and xa == xb:
                    continue
                if abs(ya) == 90.0 and ya == yb:
                    continue
                n = max(1, int(np.ceil(max(abs(xb - xa), abs(yb - ya)) / max_step_deg)))
                t = np.linspace(0.0, 1.0, n + 1)
                pts = lonlat_to_xyz(xa + t * (xb - xa), ya + t * (yb - ya))
                pieces.append(np.stack([pts[:-1], pts[1:]], axis=1))
        if not pieces:
            return np.zeros((0, 2, 3))
        return np.concatenate(pieces)

    def coast_distance_km(self, points, pieces=None, chunk: int = 2048) -> np.ndarray:
        """Great-circle distance (km) from each point to the nearest coastline piece.

        Only pieces whose midpoint is within ``buffer_width`` plus the piece
        half-length are examined; points with no candidate get ``inf``.
        """
        p = np.atleast_2d(points)
        if pieces is None:
            pieces = self.coast_pieces()
        out = np.full(len(p), np.inf)
        if len(pieces) == 0 or self.buffer_width_km <= 0:
            return out
        mids = normalize(pieces[:, 0] + pieces[:, 1])
        half = 0.5 * arc_length(pieces[:, 0], pieces[:, 1]).max()
        ang = self.buffer_width_km / EARTH_RADIUS_KM + half + 1e-9
        radius = 2.0 * np.sin(min(ang, np.pi) / 2.0)
        cands = cKDTree(mids).query_ball_point(p, r=radius)
        rows = np.repeat(np.arange(len(p)), [len(c) for c in cands])
        cols = np.fromiter((j for c in cands for j in c), dtype=np.int64, count=len(rows))
        for s in range(0, len(rows), chunk * 64):
            rr, cc = rows[s:s + chunk * 64], cols[s:s + chunk * 64]
            d = point_arc_distance(p[rr], pieces[cc, 0], pieces[cc, 1]) * EARTH_RADIUS_KM
            np.minimum.at(out, rr, d)
        return out

    def classify(self, points) -> np.ndarray:
        """Region code (SEA/LAND/BUFFER) of each unit vector."""
        p = np.atleast_2d(points)
        lon, lat = xyz_to_lonlat(p)
        code = np.where(self.is_land(lon, lat), LAND, SEA).astype(np.int8)
        if self.buffer_width_km > 0 and self.rings:
            d = self.coast_distance_km(p)
            code[d <= self.buffer_width_km] = BUFFER
        return code


def tag_regions(mesh: SphereMesh, region_map: RegionMap) -> SphereMesh:
    """Tag each triangle land, sea or buffer from its centroid."""
    region = region_map.classify(mesh.centroids)
    if np.all(region == BUFFER):
        raise InputError("buffer covers the whole mesh")
    out = mesh.with_regions(region)
    out.meta["buffer_width_km"] = float(region_map.buffer_width_km)
    return out


# -- text format -------------------------------------------------------

MESH_MAGIC = "spherespde-mesh 1"


def save_mesh(mesh: SphereMesh, path) -> None:
    """Write a mesh in the plain-text exchange format.

    Layout: a magic line, ``counts V T E``, then V lines ``v x y z``,
    T lines ``t a b c region domain`` (``-`` when untagged) and E lines
    ``e i k length nx ny nz mx my mz``.
    """
    lines = [MESH_MAGIC, f"counts {mesh.n_vertices} {mesh.n_triangles} {mesh.n_edges}"]
    lines += [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices]
    for t, (a, b, c) in enumerate(mesh.triangles):
        if mesh.region is None:
            tag = "- -"
        else:
            tag = f"{REGION_NAMES[mesh.region[t]]} {REGION_NAMES[mesh.domain[t]]}"
        lines.append(f"t {a} {b} {c} {tag}")
    for (i, k), ln, n, m in zip(mesh.edge_tris, mesh.edge_lengths, mesh.edge_normals, mesh.edge_midpoints):
        lines.append(
            f"e {i} {k} {ln:.17g} {n[0]:.17g} {n[1]:.17g} {n[2]:.17g} {m[0]:.17g} {m[1]:.17g} {m[2]:.17g}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def load_mesh(path) -> SphereMesh:
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != MESH_MAGIC:
        raise FormatError("not a spherespde mesh file")
    verts, tris, region, domain = [], [], [], []
    for ln in text[1:]:
        tok = ln.split()
        if not tok:
            continue
        if tok[0] == "v":
            verts.append([float(x) for x in tok[1:4]])
        elif tok[0] == "t":
            tris.append([int(x) for x in tok[1:4]])
            region.append(tok[4])
            domain.append(tok[5])
    tagged = all(r != "-" for r in region)
    mesh = SphereMesh.from_triangles(np.array(verts), np.array(tris))
    if tagged and region:
        mesh = mesh.with_regions(
            [REGION_NAMES.index(r) for r in region], [REGION_NAMES.index(d) for d in domain]
        )
    return mesh
