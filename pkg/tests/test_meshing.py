import itertools

import numpy as np
import pytest

from conftest import small_cam
from depthscan.geometry import Camera, ContractError, DepthMap, backproject
from depthscan.meshing import (
    BACK,
    FRONT,
    InvariantError,
    ScanPair,
    TriangleMesh,
    fuse_scan,
    scale_about,
    scale_to_height,
    triangulate_depth,
    vertical_extent,
)
from depthscan.synth import SyntheticScene, render_depth_gt


def _plane(h, w, z=2.0):
    return DepthMap.full(np.full((h, w), z))


def test_single_quad():
    cam = small_cam(2, 2)
    m = triangulate_depth(_plane(2, 2), cam)
    assert (m.n_vertices, m.n_triangles) == (4, 2)


def test_center_hole_kills_every_quad():
    mask = np.ones((3, 3), bool)
    mask[1, 1] = False
    m = triangulate_depth(DepthMap(np.where(mask, 2.0, 0.0), mask), small_cam(3, 3))
    assert (m.n_vertices, m.n_triangles) == (8, 0)


def test_brute_force_quad_enumeration(rng):
    # hand oracle: count quads whose four pixels are valid
    mask = rng.random((7, 9)) > 0.25
    m = triangulate_depth(DepthMap(np.where(mask, 2.0, 0.0), mask), small_cam(7, 9))
    quads = sum(
        all(mask[r + dr, c + dc] for dr, dc in itertools.product((0, 1), repeat=2))
        for r in range(6)
        for c in range(8)
    )
    assert m.n_triangles == 2 * quads
    assert m.n_vertices == mask.sum()
    assert np.all(m.triangles < mask.sum())


def test_front_winding_faces_camera(sphere64):
    cam, _, front, _, _ = sphere64
    m = triangulate_depth(front, cam)
    fn = m.face_normals()
    assert np.all(fn[:, 2] < 0)


def test_shorter_diagonal_and_tie_rule():
    cam = Camera.centered(10.0, 2, 2)
    tie = triangulate_depth(_plane(2, 2), cam)
    # vertices row-major 0 1 / 2 3; the tie uses the 0-3 diagonal
    assert all(0 in t and 3 in t for t in tie.triangles.tolist())
    z = np.array([[2.0, 2.0], [2.0, 2.04]])
    m = triangulate_depth(DepthMap.full(z), cam)
    P = backproject(DepthMap.full(z), cam).points
    main = np.linalg.norm(P[1, 1] - P[0, 0]) <= np.linalg.norm(P[1, 0] - P[0, 1])
    shared = (0, 3) if main else (1, 2)
    assert all(shared[0] in t and shared[1] in t for t in m.triangles.tolist())


def test_discontinuity_skips_quad():
    z = np.full((2, 3), 2.0)
    z[:, 2] = 2.5
    m = triangulate_depth(DepthMap.full(z), small_cam(2, 3), 0.03)
    assert m.n_triangles == 2
    assert triangulate_depth(DepthMap.full(z), small_cam(2, 3), 0.3).n_triangles == 4


def test_empty_mask_gives_empty_mesh():
    d = DepthMap(np.zeros((4, 4)), np.zeros((4, 4), bool))
    m = triangulate_depth(d, small_cam(4, 4))
    assert m.is_empty() and m.n_triangles == 0


def test_row_major_ordering(rng):
    z = 2.0 + 0.01 * rng.random((6, 6))
    mask = rng.random((6, 6)) > 0.2
    cam = small_cam(6, 6)
    m = triangulate_depth(DepthMap(np.where(mask, z, 0.0), mask), cam)
    P = backproject(DepthMap(np.where(mask, z, 0.0), mask), cam).points
    assert np.array_equal(m.vertices, P[mask])
    # first vertex of each triangle is non-decreasing in quad order
    assert np.all(np.diff(m.triangles.min(axis=1)) >= 0)


def _sphere_patch_area(cam, quads, r, dist, order=4):
    """Gauss-Legendre integral of the sphere's area element over covered pixel squares.

    Through a pinhole, surface area per image area is t^2 f / |d|^3 / |n . d_hat|
    for ray ``d``, hit distance ``t`` and surface normal ``n``.
    """
    x, w = np.polynomial.legendre.leggauss(order)
    x, w = 0.5 * (x + 1), 0.5 * w
    rows, cols = np.nonzero(quads)
    c = np.array([0.0, 0.0, dist])
    total = 0.0
    for a, wa in zip(x, w):
        for b, wb in zip(x, w):
            d = np.stack([cols + a - cam.cx, rows + b - cam.cy, np.full(len(rows), cam.focal_px)], -1)
            R = np.linalg.norm(d, axis=-1)
            dh = d / R[:, None]
            bq = dh @ c
            t = bq - np.sqrt(bq**2 - (dist**2 - r**2))
            n = (t[:, None] * dh - c) / r
            total += wa * wb * np.sum(t * t * cam.focal_px / R**3 / np.abs(np.sum(n * dh, -1)))
    return total


def _cap_mask(front, cam, dist, r, deg):
    P = backproject(front, cam).points
    cos = -(P[..., 2] - dist) / r
    return front.mask & (cos >= np.cos(np.radians(deg)))


def test_cap_area_analytic():
    r, dist, deg = 0.5, 2.0, 45.0
    cam = Camera.centered(800.0, 512, 512)
    front, _, _ = render_depth_gt(SyntheticScene("sphere_cap", radius=r), cam)
    m_ = _cap_mask(front, cam, dist, r, deg)
    mesh = triangulate_depth(DepthMap(np.where(m_, front.values, 0.0), m_), cam)
    cap = 2 * np.pi * r * r * (1 - np.cos(np.radians(deg)))
    assert abs(mesh.area() / cap - 1) < 0.02


def test_cap_area_matches_covered_patch(sphere64):
    cam, _, front, _, _ = sphere64
    m_ = _cap_mask(front, cam, 2.0, 0.5, 45.0)
    mesh = triangulate_depth(DepthMap(np.where(m_, front.values, 0.0), m_), cam)
    quads = m_[:-1, :-1] & m_[1:, :-1] & m_[:-1, 1:] & m_[1:, 1:]
    assert mesh.n_triangles == 2 * quads.sum()
    assert abs(mesh.area() / _sphere_patch_area(cam, quads, 0.5, 2.0) - 1) < 2e-3


def test_slab():
    h, w = 5, 7
    cam = small_cam(h, w)
    m = fuse_scan(ScanPair(_plane(h, w, 2.0), _plane(h, w, 2.2), cam))
    assert m.n_vertices == 2 * h * w
    assert np.sum(m.source == FRONT) == h * w and np.sum(m.source == BACK) == h * w
    fn = m.face_normals()
    back_faces = np.all(m.source[m.triangles] == BACK, axis=1)
    assert np.all(fn[~back_faces, 2] < 0) and np.all(fn[back_faces, 2] > 0)


def test_equal_front_back_zero_volume(rng):
    cam = small_cam(8, 8)
    z = 2.0 + 0.05 * rng.random((8, 8))
    d = DepthMap.full(z)
    m = fuse_scan(ScanPair(d, d, cam))
    assert abs(m.signed_volume()) < 1e-15


def test_ordering_violation_lists_pixels():
    cam = small_cam(4, 4)
    back = np.full((4, 4), 2.2)
    back[1, 3] = 1.9
    with pytest.raises(InvariantError) as exc:
        fuse_scan(ScanPair(_plane(4, 4), DepthMap.full(back), cam))
    assert exc.value.pixels == [(3, 1)]


def test_ellipsoid_bbox_within_pixel_footprint():
    cam = Camera.centered(200.0, 128, 128)
    scene = SyntheticScene("ellipsoid", axes=(0.3, 0.5, 0.2))
    front, back, _ = render_depth_gt(scene, cam)
    m = fuse_scan(ScanPair(front, back, cam))
    lo, hi = m.bounds()
    center = np.array([0.0, 0.0, 2.0])
    foot = hi[2] / cam.focal_px  # one pixel at the farthest depth
    assert np.all(np.abs(hi[:2] - (center[:2] + [0.3, 0.5])) < foot)
    assert np.all(np.abs(lo[:2] - (center[:2] - [0.3, 0.5])) < foot)


def test_back_faces_point_outward():
    cam = Camera.centered(160.0, 96, 96)
    scene = SyntheticScene("ellipsoid")
    front, back, _ = render_depth_gt(scene, cam)
    m = fuse_scan(ScanPair(front, back, cam))
    back_faces = np.all(m.source[m.triangles] == BACK, axis=1)
    a, b, c = m.corners()
    centroid = (a + b + c) / 3
    ax = np.array(scene.axes)
    outward = (centroid - [0.0, 0.0, 2.0]) / ax**2  # ellipsoid gradient
    fn = m.face_normals()
    ok = np.sum(fn * outward, axis=1) > 0
    assert ok[back_faces].mean() >= 0.99
    assert ok[~back_faces].mean() >= 0.99


def test_scale_to_height():
    rng = np.random.default_rng(5)
    v = rng.normal(size=(30, 3))
    v[:, 1] *= 1.75 / np.ptp(v[:, 1])
    m = TriangleMesh(v, [[0, 1, 2]])
    same, f = scale_to_height(m, 1.75)
    assert f == pytest.approx(1.0, abs=1e-15)
    half = m.with_vertices(v * 0.5)
    doubled, f = scale_to_height(half, 1.75)
    assert f == pytest.approx(2.0, rel=1e-14)
    d0 = np.linalg.norm(half.vertices[:, None] - half.vertices[None], axis=-1)
    d1 = np.linalg.norm(doubled.vertices[:, None] - doubled.vertices[None], axis=-1)
    assert np.allclose(d1, 2 * d0, rtol=1e-13, atol=1e-15)
    assert vertical_extent(doubled) == pytest.approx(1.75, rel=1e-14)


def test_scale_to_height_roundtrip(rng):
    v = rng.normal(size=(50, 3))
    m = TriangleMesh(v, [[0, 1, 2]])
    centroid = v.mean(axis=0)
    s, f = scale_to_height(m, 1.3)
    back = scale_about(s, 1 / f, centroid)
    assert np.max(np.abs(back.vertices - v)) < 1e-12


def test_scale_to_height_errors():
    with pytest.raises(ContractError):
        scale_to_height(TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3))), 1.0)
    flat = TriangleMesh([[0, 0, 0], [1, 0, 0], [0, 0, 1]], [[0, 1, 2]])
    with pytest.raises(ContractError):
        scale_to_height(flat, 1.0)


def test_mesh_validates_indices():
    with pytest.raises(ContractError):
        TriangleMesh([[0, 0, 0]], [[0, 0, 1]])
