"""Triangle meshes, surface sampling, procedural shapes and augmentation.

Point clouds are plain ``(P, 3)`` float64 arrays throughout the package.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import ContractError, GeometryError

GRAVITY_AXIS = 1  # +Y
DEFAULT_MARGIN = 0.05


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    _areas: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) == 0:
            raise GeometryError("mesh has no triangles")
        if self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices):
            raise GeometryError("triangle index out of range")
        if not np.isfinite(self.vertices).all():
            raise GeometryError("mesh vertices must be finite")

    @property
    def corners(self) -> np.ndarray:
        """(T, 3, 3) triangle corner positions."""
        return self.vertices[self.triangles]

    @property
    def face_areas(self) -> np.ndarray:
        if self._areas is None:
            c = self.corners
            cross = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])
            self._areas = 0.5 * np.linalg.norm(cross, axis=1)
        return self._areas

    @property
    def area(self) -> float:
        return float(self.face_areas.sum())

    def validate(self) -> None:
        if not self.area > 0:
            raise GeometryError("mesh has zero total surface area")

    def transformed(self, matrix: np.ndarray, offset=(0.0, 0.0, 0.0)) -> "TriangleMesh":
        return TriangleMesh(self.vertices @ np.asarray(matrix).T + np.asarray(offset), self.triangles.copy())


def sample_surface(mesh: TriangleMesh, count: int, rng_seed: int | np.random.Generator) -> np.ndarray:
    """Draw ``count`` points uniformly by area from the mesh surface."""
    if count < 1:
        raise ContractError("count must be >= 1")
    mesh.validate()
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    cum = np.cumsum(mesh.face_areas)
    pick = rng.random(count) * cum[-1]
    face = np.searchsorted(cum, pick, side="right")
    # zero-area faces never own a half-open interval of the cumulative sum
    face = np.minimum(face, len(cum) - 1)
    u = rng.random(count)
    v = rng.random(count)
    su = np.sqrt(u)
    c = mesh.corners[face]
    w0 = (1.0 - su)[:, None]
    w1 = (su * (1.0 - v))[:, None]
    w2 = (su * v)[:, None]
    return w0 * c[:, 0] + w1 * c[:, 1] + w2 * c[:, 2]


# -- procedural shapes ---------------------------------------------------------

SHAPE_KINDS = ("sphere", "torus", "box")


def _uv_grid(n_u: int, n_v: int, wrap_v: bool) -> np.ndarray:
    """Quad-grid triangulation indices over (n_u x n_v) vertices, wrapping along u."""
    tris = []
    v_cells = n_v if wrap_v else n_v - 1
    for i in range(n_u):
        i2 = (i + 1) % n_u
        for j in range(v_cells):
            j2 = (j + 1) % n_v
            a, b, c, d = i * n_v + j, i2 * n_v + j, i2 * n_v + j2, i * n_v + j2
            tris.append((a, b, c))
            tris.append((a, c, d))
    return np.array(tris, dtype=np.int64)


def _sphere(radius: float, resolution: int) -> TriangleMesh:
    n_lat = resolution
    n_lon = 2 * resolution
    theta = np.pi * np.arange(1, n_lat) / n_lat  # interior rings
    phi = 2 * np.pi * np.arange(n_lon) / n_lon
    th, ph = np.meshgrid(theta, phi, indexing="ij")
    ring = np.stack([np.sin(th) * np.cos(ph), np.cos(th), np.sin(th) * np.sin(ph)], axis=-1).reshape(-1, 3)
    top, bottom = len(ring), len(ring) + 1
    verts = np.vstack([ring, [[0, 1, 0], [0, -1, 0]]]) * radius
    tris = []
    for i in range(n_lat - 2):
        for j in range(n_lon):
            j2 = (j + 1) % n_lon
            a, b = i * n_lon + j, i * n_lon + j2
            c, d = (i + 1) * n_lon + j2, (i + 1) * n_lon + j
            tris += [(a, c, b), (a, d, c)]
    last = (n_lat - 2) * n_lon
    for j in range(n_lon):
        j2 = (j + 1) % n_lon
        tris.append((top, j, j2))
        tris.append((bottom, last + j2, last + j))
    return TriangleMesh(verts, np.array(tris))


def _torus(major: float, minor: float, resolution: int) -> TriangleMesh:
    n_major = 2 * resolution
    n_minor = resolution
    a = 2 * np.pi * np.arange(n_major) / n_major
    b = 2 * np.pi * np.arange(n_minor) / n_minor
    aa, bb = np.meshgrid(a, b, indexing="ij")
    rad = major + minor * np.cos(bb)
    verts = np.stack([rad * np.cos(aa), minor * np.sin(bb), rad * np.sin(aa)], axis=-1).reshape(-1, 3)
    return TriangleMesh(verts, _uv_grid(n_major, n_minor, wrap_v=True))


def _box(extents) -> TriangleMesh:
    h = np.asarray(extents, dtype=np.float64) / 2.0
    signs = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], dtype=np.float64)
    verts = signs * h
    # vertex id = 4*ix + 2*iy + iz
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    tris = []
    for a, b, c, d in quads:
        tris += [(a, b, c), (a, c, d)]
    return TriangleMesh(verts, np.array(tris))


def yaw_matrix(angle: float) -> np.ndarray:
    """Rotation about the +Y axis."""
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def procedural_shape(kind: str, params: dict, resolution: int = 32) -> TriangleMesh:
    """Watertight triangulation of a parametric shape.

    sphere: ``radius``; torus: ``major``, ``minor`` (ring in the XZ plane);
    box: ``extents`` (full edge lengths), optional ``yaw``. Every kind accepts
    an optional ``center``.
    """
    if resolution < 4:
        raise GeometryError("resolution must be >= 4")
    center = np.asarray(params.get("center", (0.0, 0.0, 0.0)), dtype=np.float64)
    if kind == "sphere":
        r = float(params["radius"])
        if not r > 0:
            raise GeometryError("sphere radius must be positive")
        mesh = _sphere(r, resolution)
    elif kind == "torus":
        big, small = float(params["major"]), float(params["minor"])
        if not (big > 0 and small > 0):
            raise GeometryError("torus radii must be positive")
        if not small < big:
            raise GeometryError("torus minor radius must be smaller than the major radius")
        mesh = _torus(big, small, resolution)
    elif kind == "box":
        ext = np.asarray(params["extents"], dtype=np.float64)
        if ext.shape != (3,) or not np.all(ext > 0):
            raise GeometryError("box extents must be three positive lengths")
        mesh = _box(ext)
        yaw = float(params.get("yaw", 0.0))
        if yaw:
            mesh = mesh.transformed(yaw_matrix(yaw))
    else:
        raise GeometryError(f"unknown shape kind {kind!r}; expected one of {SHAPE_KINDS}")
    if np.any(center):
        mesh = TriangleMesh(mesh.vertices + center, mesh.triangles)
    return mesh


def analytic_area(kind: str, params: dict) -> float:
    if kind == "sphere":
        return 4.0 * math.pi * float(params["radius"]) ** 2
    if kind == "torus":
        return 4.0 * math.pi ** 2 * float(params["major"]) * float(params["minor"])
    if kind == "box":
        x, y, z = (float(e) for e in params["extents"])
        return 2.0 * (x * y + y * z + x * z)
    raise GeometryError(f"unknown shape kind {kind!r}")


def random_shape_params(kind: str, rng: np.random.Generator, reach: float = 0.9) -> dict:
    """Random parameters whose surface stays within ``reach`` of the Y axis and the XZ plane.

    The XZ radial bound keeps shapes inside the domain under any gravity-axis
    rotation.
    """
    if kind == "sphere":
        r = rng.uniform(0.4, 0.8)
        extent_xz, extent_y = r, r
        params: dict = {"radius": r}
    elif kind == "torus":
        big = rng.uniform(0.4, 0.65)
        small = rng.uniform(0.1, 0.25)
        extent_xz, extent_y = big + small, small
        params = {"major": big, "minor": small}
    elif kind == "box":
        ext = rng.uniform(0.5, 1.2, size=3)
        extent_xz, extent_y = 0.5 * math.hypot(ext[0], ext[2]), 0.5 * ext[1]
        params = {"extents": ext.tolist(), "yaw": rng.uniform(0.0, math.pi / 2)}
    else:
        raise GeometryError(f"unknown shape kind {kind!r}")
    slack_xz = max(reach - extent_xz, 0.0)
    slack_y = max(reach - extent_y, 0.0)
    rho = slack_xz * math.sqrt(rng.random())
    ang = rng.uniform(0.0, 2 * math.pi)
    params["center"] = [rho * math.cos(ang), rng.uniform(-slack_y, slack_y), rho * math.sin(ang)]
    return params


# -- normalization and augmentation -----------------------------------------

def normalize(mesh: TriangleMesh, margin: float = DEFAULT_MARGIN) -> TriangleMesh:
    """Center and scale into [-1, 1]^3 so any gravity-axis rotation stays inside.

    The scale uses the larger of the XZ radial extent and the |Y| extent, not
    per-axis bounds.
    """
    mesh.validate()
    v = mesh.vertices
    center = 0.5 * (v.min(axis=0) + v.max(axis=0))
    c = v - center
    radial = np.sqrt(c[:, 0] ** 2 + c[:, 2] ** 2).max()
    height = np.abs(c[:, 1]).max()
    extent = max(radial, height)
    if not extent > 0:
        raise GeometryError("degenerate mesh extent")
    return TriangleMesh(c * ((1.0 - margin) / extent), mesh.triangles.copy())


def rotate_gravity_axis(cloud: np.ndarray, angle: float) -> np.ndarray:
    """Rotate points about the +Y axis by ``angle`` radians."""
    cloud = np.asarray(cloud, dtype=np.float64)
    return cloud @ yaw_matrix(angle).T


# -- point to mesh distance --------------------------------------------------

def _closest_on_triangles(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Closest points on triangles (a, b, c) to points p, all arrays (M, 3), row-paired.

    Voronoi-region walk over vertices, edges and face.
    """
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)

    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    out = np.empty_like(p)
    done = np.zeros(len(p), dtype=bool)

    def assign(mask, value):
        nonlocal done
        m = mask & ~done
        out[m] = value[m] if value.ndim == 2 else value
        done |= m

    assign((d1 <= 0) & (d2 <= 0), a)
    assign((d3 >= 0) & (d4 <= d3), b)
    with np.errstate(divide="ignore", invalid="ignore"):
        m = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
        t = np.where(m, d1 / np.where(d1 - d3 != 0, d1 - d3, 1.0), 0.0)
        assign(m, a + t[:, None] * ab)
        assign((d6 >= 0) & (d5 <= d6), c)
        m = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
        t = np.where(m, d2 / np.where(d2 - d6 != 0, d2 - d6, 1.0), 0.0)
        assign(m, a + t[:, None] * ac)
        m = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
        den = (d4 - d3) + (d5 - d6)
        t = np.where(m, (d4 - d3) / np.where(den != 0, den, 1.0), 0.0)
        assign(m, b + t[:, None] * (c - b))
        denom = va + vb + vc
        safe = np.where(denom != 0, denom, 1.0)
        v = vb / safe
        w = vc / safe
        assign(np.ones(len(p), dtype=bool), a + ab * v[:, None] + ac * w[:, None])
    return out


def _pair_distances(points: np.ndarray, corners: np.ndarray) -> np.ndarray:
    q = _closest_on_triangles(points, corners[:, 0], corners[:, 1], corners[:, 2])
    return np.linalg.norm(points - q, axis=1)


def point_distances_brute(cloud: np.ndarray, mesh: TriangleMesh, chunk: int = 1 << 20) -> np.ndarray:
    """Exact per-point distance to the mesh by scanning every triangle."""
    cloud = np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    corners = mesh.corners
    n_tri = len(corners)
    rows = max(1, chunk // n_tri)
    out = np.empty(len(cloud))
    for s in range(0, len(cloud), rows):
        pts = cloud[s:s + rows]
        p = np.repeat(pts, n_tri, axis=0)
        c = np.tile(corners, (len(pts), 1, 1))
        out[s:s + rows] = _pair_distances(p, c).reshape(len(pts), n_tri).min(axis=1)
    return out


def point_distances_tree(cloud: np.ndarray, mesh: TriangleMesh) -> np.ndarray:
    """Exact per-point distance, pruning triangles with a centroid KD-tree.

    A triangle can only beat the current bound ``ub`` if its centroid lies
    within ``ub + r_max`` of the point, where ``r_max`` is the largest
    centroid-to-corner radius, so the minimum over candidates equals the
    brute-force minimum.
    """
    cloud = np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    corners = mesh.corners
    centroids = corners.mean(axis=1)
    r_max = float(np.linalg.norm(corners - centroids[:, None], axis=2).max())
    tree = cKDTree(centroids)
    _, nearest = tree.query(cloud)
    ub = _pair_distances(cloud, corners[nearest])
    out = np.empty(len(cloud))
    for i, (pt, bound) in enumerate(zip(cloud, ub)):
        cand = tree.query_ball_point(pt, bound + r_max * (1 + 1e-9) + 1e-12)
        cand = np.asarray(cand, dtype=np.intp)
        d = _pair_distances(np.broadcast_to(pt, (len(cand), 3)).copy(), corners[cand])
        out[i] = d.min()
    return out


def point_to_mesh_distance(cloud: np.ndarray, mesh: TriangleMesh, method: str = "tree") -> tuple[float, float]:
    """Population mean and standard deviation of point-to-surface distances."""
    cloud = np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    if len(cloud) == 0:
        raise ContractError("point_to_mesh_distance needs a non-empty cloud")
    if method == "brute":
        d = point_distances_brute(cloud, mesh)
    elif method == "tree":
        d = point_distances_tree(cloud, mesh)
    else:
        raise ContractError(f"unknown method {method!r}")
    return float(d.mean()), float(d.std())


def procedural_dataset(families: Sequence[str], count: int, seed: int,
                       resolution: int = 24) -> list[tuple[str, dict, TriangleMesh]]:
    """``count`` random shapes per family, as (family, params, mesh), family-major order."""
    rng = np.random.default_rng(seed)
    out = []
    for kind in families:
        for _ in range(count):
            params = random_shape_params(kind, rng)
            out.append((kind, params, procedural_shape(kind, params, resolution)))
    return out
