"""Depth-map triangulation, two-sided scan fusion and height normalization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Camera, ContractError, DepthMap, backproject

FRONT = 0
BACK = 1

MIN_TRIANGLE_AREA = 1e-12
DEFAULT_DISCONTINUITY = 0.03


class InvariantError(ValueError):
    """Front/back depth ordering violated; ``pixels`` lists (u, v) offenders."""

    def __init__(self, message, pixels=()):
        super().__init__(message)
        self.pixels = list(pixels)


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    """Indexed triangle mesh with a per-vertex front/back source tag."""

    vertices: np.ndarray
    triangles: np.ndarray
    source: np.ndarray | None = None

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64).reshape(-1, 3)
        t = np.array(self.triangles, dtype=np.int64).reshape(-1, 3)
        s = (
            np.zeros(len(v), dtype=np.uint8)
            if self.source is None
            else np.array(self.source, dtype=np.uint8).reshape(-1)
        )
        if len(s) != len(v):
            raise ContractError(f"{len(s)} source tags for {len(v)} vertices")
        if len(t) and (t.min() < 0 or t.max() >= len(v)):
            raise ContractError("triangle index out of range")
        for a in (v, t, s):
            a.flags.writeable = False
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        object.__setattr__(self, "source", s)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def is_empty(self) -> bool:
        return self.n_vertices == 0

    def corners(self):
        v, t = self.vertices, self.triangles
        return v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]

    def face_normals(self) -> np.ndarray:
        """Unnormalized (area-weighted x2) face normals following the winding."""
        a, b, c = self.corners()
        return np.cross(b - a, c - a)

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_normals(), axis=1)

    def area(self) -> float:
        return float(self.face_areas().sum())

    def signed_volume(self) -> float:
        a, b, c = self.corners()
        return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)

    def with_vertices(self, vertices) -> "TriangleMesh":
        return TriangleMesh(vertices, self.triangles, self.source)

    def referenced(self) -> np.ndarray:
        """Boolean mask of vertices used by at least one triangle."""
        used = np.zeros(self.n_vertices, dtype=bool)
        used[self.triangles.ravel()] = True
        return used

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)


def triangulate_depth(
    depth: DepthMap, cam: Camera, discontinuity_ratio: float = DEFAULT_DISCONTINUITY
) -> TriangleMesh:
    """Mesh a depth map: one vertex per valid pixel, two triangles per valid quad.

    A 2x2 pixel quad is meshed only when all four pixels are valid and
    ``max / min`` of its depths is at most ``1 + discontinuity_ratio``. The
    quad is split along its shorter 3D diagonal (ties use the
    top-left/bottom-right one). Faces wind toward the camera. Vertices are
    numbered row-major over valid pixels; triangles are emitted in row-major
    quad order.
    """
    if discontinuity_ratio < 0:
        raise ContractError("discontinuity_ratio must be non-negative")
    grid = backproject(depth, cam)
    m = depth.mask
    h, w = m.shape
    index = -np.ones((h, w), dtype=np.int64)
    index[m] = np.arange(int(m.sum()))
    vertices = grid.points[m]
    if h < 2 or w < 2 or len(vertices) == 0:
        return TriangleMesh(vertices, np.zeros((0, 3), dtype=np.int64))

    z = depth.filled(1.0)
    i00, i01 = index[:-1, :-1], index[:-1, 1:]
    i10, i11 = index[1:, :-1], index[1:, 1:]
    quad_ok = (i00 >= 0) & (i01 >= 0) & (i10 >= 0) & (i11 >= 0)
    zq = np.stack([z[:-1, :-1], z[:-1, 1:], z[1:, :-1], z[1:, 1:]])
    quad_ok &= zq.max(axis=0) <= (1.0 + discontinuity_ratio) * zq.min(axis=0)

    P = grid.points
    d_main = np.linalg.norm(P[1:, 1:] - P[:-1, :-1], axis=-1)
    d_anti = np.linalg.norm(P[1:, :-1] - P[:-1, 1:], axis=-1)
    use_main = d_main <= d_anti

    sel = quad_ok.ravel()
    a, b, c, d = (x.ravel()[sel] for x in (i00, i01, i10, i11))
    main = use_main.ravel()[sel]
    # winding (p00, p10, p11) / (p00, p11, p01) faces the camera
    t1 = np.where(main[:, None], np.stack([a, c, d], 1), np.stack([a, c, b], 1))
    t2 = np.where(main[:, None], np.stack([a, d, b], 1), np.stack([b, c, d], 1))
    tris = np.stack([t1, t2], axis=1).reshape(-1, 3)

    mesh = TriangleMesh(vertices, tris)
    keep = mesh.face_areas() > MIN_TRIANGLE_AREA
    return TriangleMesh(vertices, tris[keep])


def check_ordering(front: DepthMap, back: DepthMap) -> None:
    """Raise :class:`InvariantError` where back depth lies in front of front depth."""
    both = front.mask & back.mask
    bad = both & (back.values < front.values)
    if bad.any():
        pixels = [(int(c), int(r)) for r, c in np.argwhere(bad)]
        head = ", ".join(f"(u={u}, v={v})" for u, v in pixels[:10])
        raise InvariantError(
            f"back depth < front depth at {len(pixels)} pixel(s): {head}", pixels
        )


@dataclass(frozen=True, eq=False)
class ScanPair:
    front: DepthMap
    back: DepthMap
    cam: Camera

    def __post_init__(self):
        if self.front.shape != self.cam.shape or self.back.shape != self.cam.shape:
            raise ContractError("front/back/camera dimensions differ")


def fuse_scan(scan: ScanPair, discontinuity_ratio: float = DEFAULT_DISCONTINUITY) -> TriangleMesh:
    """Concatenate the front mesh and the winding-flipped back mesh.

    No seam stitching: the silhouette stays open.
    """
    check_ordering(scan.front, scan.back)
    fm = triangulate_depth(scan.front, scan.cam, discontinuity_ratio)
    bm = triangulate_depth(scan.back, scan.cam, discontinuity_ratio)
    verts = np.concatenate([fm.vertices, bm.vertices])
    tris = np.concatenate([fm.triangles, bm.triangles[:, ::-1] + fm.n_vertices])
    source = np.concatenate(
        [np.full(fm.n_vertices, FRONT, np.uint8), np.full(bm.n_vertices, BACK, np.uint8)]
    )
    return TriangleMesh(verts, tris, source)


def vertical_extent(mesh: TriangleMesh) -> float:
    """Extent along the image-up axis (camera -y)."""
    y = mesh.vertices[:, 1]
    return float(y.max() - y.min())


def scale_about(mesh: TriangleMesh, factor: float, center) -> TriangleMesh:
    center = np.asarray(center, dtype=np.float64)
    return mesh.with_vertices(center + factor * (mesh.vertices - center))


def scale_to_height(mesh: TriangleMesh, target_height: float):
    """Uniformly scale about the vertex centroid to the given vertical extent.

    Returns ``(scaled_mesh, factor)``; ``scale_about(scaled, 1 / factor,
    centroid)`` undoes it, and the centroid is unchanged by the scaling.
    """
    if mesh.is_empty():
        raise ContractError("scale_to_height: empty mesh")
    if not target_height > 0:
        raise ContractError("target_height must be positive")
    height = vertical_extent(mesh)
    if not height > 0:
        raise ContractError("scale_to_height: mesh has zero height")
    factor = target_height / height
    return scale_about(mesh, factor, mesh.vertices.mean(axis=0)), factor
