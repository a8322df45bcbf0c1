"""Point-to-mesh distances, bidirectional mesh error and scan alignment."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, replace

import numpy as np

from . import _backend
from .geometry import ContractError
from .meshing import BACK, FRONT, TriangleMesh

log = logging.getLogger(__name__)

LEAF_SIZE = 4


class EmptyMeshError(ValueError):
    pass


class NonConvergenceError(RuntimeError):
    """Alignment error grew for several consecutive iterations."""

    def __init__(self, message, best_fit):
        super().__init__(message)
        self.best_fit = best_fit


class AabbTree:
    """Bounding-volume hierarchy over a mesh's triangles, stored as flat arrays.

    Node ``n`` has box ``lo[n]``/``hi[n]``; internal nodes have child ids in
    ``left``/``right``, leaves have ``left == -1`` and own the triangles
    ``order[start[n] : start[n] + count[n]]``.
    """

    def __init__(self, mesh: TriangleMesh, leaf_size: int = LEAF_SIZE):
        if mesh.n_triangles == 0:
            raise EmptyMeshError("cannot build a tree over a mesh without triangles")
        self.mesh = mesh
        a, b, c = mesh.corners()
        tri_lo = np.minimum(np.minimum(a, b), c)
        tri_hi = np.maximum(np.maximum(a, b), c)
        centroids = (a + b + c) / 3.0

        n_tri = mesh.n_triangles
        order = np.arange(n_tri)
        lo, hi, left, right, start, count = [], [], [], [], [], []
        stack = [(0, n_tri, -1, 0)]  # (begin, end, parent, side)
        while stack:
            s, e, parent, side = stack.pop()
            node = len(lo)
            idx = order[s:e]
            lo.append(tri_lo[idx].min(axis=0))
            hi.append(tri_hi[idx].max(axis=0))
            left.append(-1)
            right.append(-1)
            start.append(s)
            count.append(e - s)
            if parent >= 0:
                (left if side == 0 else right)[parent] = node
            if e - s <= leaf_size:
                continue
            cen = centroids[idx]
            extent = cen.max(axis=0) - cen.min(axis=0)
            axis = int(np.argmax(extent))
            if extent[axis] == 0:
                continue
            half = (e - s) // 2
            part = np.argpartition(cen[:, axis], half, kind="introselect")
            order[s:e] = idx[part]
            mid = s + half
            count[node] = 0
            stack.append((mid, e, node, 1))
            stack.append((s, mid, node, 0))
        self.lo = np.ascontiguousarray(lo, dtype=np.float64)
        self.hi = np.ascontiguousarray(hi, dtype=np.float64)
        self.left = np.asarray(left, dtype=np.int64)
        self.right = np.asarray(right, dtype=np.int64)
        self.start = np.asarray(start, dtype=np.int64)
        self.count = np.asarray(count, dtype=np.int64)
        self.order = order

    @property
    def n_nodes(self) -> int:
        return len(self.lo)

    def leaves(self) -> np.ndarray:
        return np.flatnonzero(self.left < 0)

    def query(self, points, backend=None):
        """Closest surface points for each row of ``points``.

        Returns ``(distance, closest_point, triangle_index)`` arrays.
        """
        pts = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
        kernels = _backend if backend is None else backend
        mesh = self.mesh
        return kernels.closest_points_bvh(
            np.ascontiguousarray(mesh.vertices),
            np.ascontiguousarray(mesh.triangles),
            self.lo, self.hi, self.left, self.right, self.start, self.count,
            self.order, pts,
        )


def point_to_mesh_distance(p, mesh: TriangleMesh, tree: AabbTree | None = None):
    """Euclidean distance from ``p`` to the closest point on ``mesh``.

    Returns ``(distance, closest_point, triangle_index)``.
    """
    if mesh.n_triangles == 0:
        raise EmptyMeshError("point_to_mesh_distance: empty mesh")
    tree = tree or AabbTree(mesh)
    d, cp, tri = tree.query(np.asarray(p, dtype=np.float64)[None, :])
    return float(d[0]), cp[0], int(tri[0])


def mesh_distances(points, mesh: TriangleMesh, tree: AabbTree | None = None) -> np.ndarray:
    if mesh.n_triangles == 0:
        raise EmptyMeshError("mesh has no triangles")
    tree = tree or AabbTree(mesh)
    return tree.query(points)[0]


def bidirectional_error(
    a: TriangleMesh, b: TriangleMesh, weight_by_count: bool = False
) -> float:
    """Mean vertex-to-surface distance in both directions, in millimeters.

    Only vertices referenced by a triangle take part; isolated vertices are
    not part of either surface. By default each direction's mean counts equally; ``weight_by_count``
    pools all vertices of both meshes instead.
    """
    if a.n_triangles == 0 or b.n_triangles == 0:
        raise EmptyMeshError("bidirectional_error needs two non-empty meshes")
    dab = mesh_distances(a.vertices[a.referenced()], b)
    dba = mesh_distances(b.vertices[b.referenced()], a)
    if weight_by_count:
        # pool in a canonical order so the result is symmetric in (a, b)
        pooled = np.sort(np.concatenate([dab, dba]))
        return 1000.0 * float(np.mean(pooled))
    return 1000.0 * 0.5 * (float(np.mean(dab)) + float(np.mean(dba)))


@dataclass
class SimilarityFit:
    """``x = scale * (v_b - pivot) + pivot + translation`` for scan vertex ``v``.

    ``v_b`` is ``v`` for front vertices and
    ``back_pivot + back_scale * (v - back_pivot)`` for back vertices.
    ``pivot`` is the centroid of the scan vertices, ``back_pivot`` the
    centroid of the front-tagged vertices. ``final_error`` is in millimeters.
    """

    translation: np.ndarray
    scale: float = 1.0
    back_scale: float | None = None
    final_error: float = float("nan")
    iterations: int = 0

    @classmethod
    def identity(cls, opt_back: bool = False) -> "SimilarityFit":
        return cls(np.zeros(3), 1.0, 1.0 if opt_back else None)

    def __post_init__(self):
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not self.scale > 0:
            raise ContractError("scale must be positive")
        if self.back_scale is not None and not self.back_scale > 0:
            raise ContractError("back_scale must be positive")


def _pivots(scan: TriangleMesh):
    pivot = scan.vertices.mean(axis=0)
    front = scan.source == FRONT
    back_pivot = scan.vertices[front].mean(axis=0) if front.any() else pivot
    return pivot, back_pivot


def apply_fit(scan: TriangleMesh, fit: SimilarityFit) -> TriangleMesh:
    pivot, back_pivot = _pivots(scan)
    v = scan.vertices
    if fit.back_scale is not None:
        is_back = (scan.source == BACK)[:, None]
        v = np.where(is_back, back_pivot + fit.back_scale * (v - back_pivot), v)
    return scan.with_vertices(fit.scale * (v - pivot) + pivot + fit.translation)


# relative weight of point-to-point rows next to point-to-plane rows
POINT_WEIGHT = 0.1


def _gauss_newton(scan, fit, used_a, targets_a, normals_a, bary_tris, bary_w, targets_b, normals_b,
                  opt_back, steps=5):
    """Refine (t, s, beta) on fixed correspondences.

    Direction a: transformed scan vertices ``used_a`` against its closest reference
    point. Direction b: the barycentric point on the transformed scan
    closest to each reference vertex. Each pair contributes a point-to-plane
    row along the surface normal plus a down-weighted point-to-point block;
    each direction is averaged, matching the metric.
    """
    pivot, back_pivot = _pivots(scan)
    V = scan.vertices
    is_back = scan.source == BACK
    t = fit.translation.copy()
    s = fit.scale
    beta = fit.back_scale if opt_back else 1.0
    n_par = 5 if opt_back else 4

    def rows(X, dS, dB, target, normal, w):
        n = len(X)
        J3 = np.zeros((n, 3, n_par))
        J3[:, :, 0:3] = np.eye(3)
        J3[:, :, 3] = dS
        if opt_back:
            J3[:, :, 4] = dB
        r3 = X - target
        r_pl = np.einsum("ij,ij->i", normal, r3)
        J_pl = np.einsum("ij,ijk->ik", normal, J3)
        r = np.concatenate([r_pl, POINT_WEIGHT * r3.reshape(-1)])
        J = np.concatenate([J_pl, POINT_WEIGHT * J3.reshape(-1, n_par)])
        return r * w, J * w

    wa = 1.0 / np.sqrt(len(targets_a))
    wb = 1.0 / np.sqrt(len(targets_b))
    comb = lambda A: np.einsum("ij,ijk->ik", bary_w, A[bary_tris])  # noqa: E731
    for _ in range(steps):
        vb = np.where(is_back[:, None], back_pivot + beta * (V - back_pivot), V)
        X = s * (vb - pivot) + pivot + t
        dS = vb - pivot
        dB = np.where(is_back[:, None], s * (V - back_pivot), 0.0)
        ra, Ja = rows(X[used_a], dS[used_a], dB[used_a], targets_a, normals_a, wa)
        rb, Jb = rows(comb(X), comb(dS), comb(dB), targets_b, normals_b, wb)
        delta, *_ = np.linalg.lstsq(np.concatenate([Ja, Jb]), -np.concatenate([ra, rb]), rcond=None)
        t = t + delta[0:3]
        s = s + delta[3]
        if opt_back:
            beta = beta + delta[4]
        if s <= 0 or beta <= 0:
            return None
        if np.max(np.abs(delta)) < 1e-12:
            break
    return SimilarityFit(t, s, beta if opt_back else None)


def _unit_face_normals(mesh: TriangleMesh, tri_index: np.ndarray) -> np.ndarray:
    n = mesh.face_normals()[tri_index]
    return n / np.linalg.norm(n, axis=1, keepdims=True)


def _barycentric(p, a, b, c):
    v0, v1, v2 = b - a, c - a, p - a
    d00 = np.einsum("ij,ij->i", v0, v0)
    d01 = np.einsum("ij,ij->i", v0, v1)
    d11 = np.einsum("ij,ij->i", v1, v1)
    d20 = np.einsum("ij,ij->i", v2, v0)
    d21 = np.einsum("ij,ij->i", v2, v1)
    den = d00 * d11 - d01 * d01
    v = (d11 * d20 - d01 * d21) / den
    w = (d00 * d21 - d01 * d20) / den
    return np.stack([1.0 - v - w, v, w], axis=1)


def fit_similarity(
    scan: TriangleMesh,
    reference: TriangleMesh,
    opt_back: bool = False,
    init: SimilarityFit | None = None,
    max_iters: int = 50,
    tol_mm: float = 1e-4,
) -> SimilarityFit:
    """Align ``scan`` to ``reference`` with translation, scale and optional back scale.

    Alternates closest-point correspondences in both directions with a
    Gauss-Newton solve on squared residuals, until the bidirectional error
    improves by less than ``tol_mm`` or ``max_iters`` is reached. The best
    fit seen is returned, so the result is never worse than ``init``.
    Raises :class:`NonConvergenceError` (carrying the best fit) when the
    error grows five iterations in a row.
    """
    if scan.n_triangles == 0 or reference.n_triangles == 0:
        raise EmptyMeshError("fit_similarity needs two non-empty meshes")
    if opt_back and not np.any(scan.source == BACK):
        raise ContractError("opt_back requires back-tagged scan vertices")
    fit = init or SimilarityFit.identity(opt_back)
    if opt_back and fit.back_scale is None:
        fit = replace(fit, back_scale=1.0)
    if not opt_back:
        fit = replace(fit, back_scale=None)

    ref_tree = AabbTree(reference)
    scan_used = scan.referenced()
    ref_points = reference.vertices[reference.referenced()]

    def evaluate(f):
        moved = apply_fit(scan, f)
        tree = AabbTree(moved)
        da, cpa, tria = ref_tree.query(moved.vertices[scan_used])
        db, cpb, trib = tree.query(ref_points)
        err = 1000.0 * 0.5 * (float(np.mean(da)) + float(np.mean(db)))
        return err, moved, (cpa, tria, cpb, trib)

    err, moved, corr = evaluate(fit)
    best = replace(fit, final_error=err, iterations=0)
    prev = err
    worse_streak = 0
    for it in range(1, max_iters + 1):
        cpa, tria, cpb, trib = corr
        tris = scan.triangles[trib]
        mv = moved.vertices
        bw = _barycentric(cpb, mv[tris[:, 0]], mv[tris[:, 1]], mv[tris[:, 2]])
        new = _gauss_newton(
            scan, fit, scan_used, cpa, _unit_face_normals(reference, tria),
            tris, bw, ref_points, _unit_face_normals(moved, trib), opt_back,
        )
        if new is None:
            break
        fit = new
        err, moved, corr = evaluate(fit)
        log.debug("fit_similarity iter %d: %.6f mm", it, err)
        if err < best.final_error:
            best = replace(fit, final_error=err, iterations=it)
        if err > prev:
            worse_streak += 1
            if worse_streak >= 5:
                raise NonConvergenceError(
                    f"alignment error increased {worse_streak} iterations in a row", best
                )
        else:
            worse_streak = 0
        if abs(prev - err) < tol_mm:
            break
        prev = err
    return best


def format_report(rows, variants, fmt: str = "text") -> str:
    """Render per-subject errors in millimeters as a table.

    ``rows`` is a sequence of ``(subject_id, {variant: error_mm})``;
    ``variants`` fixes the column order. Missing values render as ``-``.
    """
    header = ["Subject ID"] + ["FAX (mm)" if v == "baseline" else f"FAX (mm) ({v})" for v in variants]
    body = [
        [str(sid)] + [("-" if vals.get(v) is None else f"{vals[v]:.2f}") for v in variants]
        for sid, vals in rows
    ]
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(body)
        return buf.getvalue()
    if fmt != "text":
        raise ContractError(f"unknown report format {fmt!r}")
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    line = lambda cells: " | ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(cells, widths)))  # noqa: E731
    rule = "-+-".join("-" * w for w in widths)
    out = [line(header), rule] + [line(r) for r in body]
    return "\n".join(out) + "\n"
