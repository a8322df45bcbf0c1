import math

import numpy as np
import pytest

from conftest import small_cam, smooth_depth
from depthscan.geometry import CONSTANT_NORMAL, ContractError, DepthMap, NormalMap, delta_normals
from depthscan.losses import (
    BCE_EPS,
    EmptyDomainError,
    LossWeights,
    full_loss,
    l1_depth_loss,
    l1_normals_loss,
    mask_bce_loss,
)
from depthscan.synth import SyntheticScene, render_depth_gt


def _fd(f, x, mask=None, h=1e-6):
    g = np.zeros_like(x)
    idx = zip(*np.nonzero(mask)) if mask is not None else np.ndindex(x.shape)
    for i in idx:
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def test_normals_loss_self_consistent(rng):
    cam = small_cam(12, 12)
    d = smooth_depth(rng, 12, 12, holes=True)
    loss, grad = l1_normals_loss(d, delta_normals(d, cam), cam)
    assert loss == 0.0
    assert np.all(grad == 0.0)


def test_normals_loss_plane_vs_constant():
    cam = small_cam(8, 8)
    d = DepthMap.full(np.full((8, 8), 3.0))
    target = NormalMap(np.tile(CONSTANT_NORMAL, (8, 8, 1)), np.ones((8, 8), bool))
    assert l1_normals_loss(d, target, cam)[0] == 0.0


def test_normals_loss_gradient_vs_sphere_target(rng):
    cam = small_cam(12, 12, f=10.0)
    scene = SyntheticScene("sphere_cap", radius=1.2, translation=(0.0, 0.0, -3.0))
    _, _, target = render_depth_gt(scene, cam)
    d = smooth_depth(rng, 12, 12, base=2.5, amp=0.2)
    d = DepthMap(np.where(target.mask, d.values, 0.0), target.mask)
    loss, grad = l1_normals_loss(d, target, cam)
    f = lambda z: l1_normals_loss(DepthMap(z, d.mask), target, cam)[0]  # noqa: E731
    g_fd = _fd(f, d.filled(0.0), d.mask, h=1e-7)
    assert loss > 0
    assert np.linalg.norm(grad - g_fd) / np.linalg.norm(g_fd) < 1e-3


def test_normals_loss_empty_domain():
    cam = small_cam(4, 4)
    d = DepthMap(np.ones((4, 4)), np.zeros((4, 4), bool))
    with pytest.raises(EmptyDomainError):
        l1_normals_loss(d, delta_normals(DepthMap.full(np.ones((4, 4))), cam), cam)


def test_normals_loss_scale_invariant(rng):
    cam = small_cam(10, 10)
    d = smooth_depth(rng, 10, 10)
    target = delta_normals(smooth_depth(rng, 10, 10), cam)
    a = l1_normals_loss(d, target, cam)[0]
    b = l1_normals_loss(d.scaled(7.3), target, cam)[0]
    assert a == pytest.approx(b, rel=1e-12, abs=1e-15)


def test_depth_loss_basic(rng):
    d = smooth_depth(rng, 6, 7)
    assert l1_depth_loss(d, d)[0] == 0.0
    shifted = DepthMap(d.values + 0.01, d.mask)
    assert l1_depth_loss(shifted, d)[0] == pytest.approx(0.01, abs=1e-15)


def test_depth_loss_brute_force(rng):
    a = smooth_depth(rng, 9, 11, holes=True)
    b = smooth_depth(rng, 9, 11, holes=True)
    loss, grad = l1_depth_loss(a, b)
    total, n = 0.0, 0
    for r in range(9):
        for c in range(11):
            if a.mask[r, c] and b.mask[r, c]:
                total += abs(a.values[r, c] - b.values[r, c])
                n += 1
    assert loss == pytest.approx(total / n, abs=1e-12)
    f = lambda z: l1_depth_loss(DepthMap(z, a.mask), b)[0]  # noqa: E731
    g_fd = _fd(f, a.filled(0.0), a.mask & b.mask)
    assert np.max(np.abs(grad - g_fd)) / np.max(np.abs(g_fd)) < 1e-5


def test_bce_half_is_ln2(rng):
    t = rng.random((5, 5)) > 0.5
    assert mask_bce_loss(np.full((5, 5), 0.5), t)[0] == pytest.approx(math.log(2), abs=1e-15)


def test_bce_perfect_prediction_floor(rng):
    t = rng.random((6, 6)) > 0.5
    loss, grad = mask_bce_loss(t.astype(float), t)
    assert 0 <= loss <= -math.log(1 - BCE_EPS) + 1e-15
    assert np.all(grad == 0.0)


def test_bce_gradient(rng):
    t = rng.random((5, 6)) > 0.5
    p = rng.uniform(0.05, 0.95, (5, 6))
    loss, grad = mask_bce_loss(p, t)
    g_fd = _fd(lambda x: mask_bce_loss(x, t)[0], p)
    assert np.max(np.abs(grad - g_fd)) / np.max(np.abs(g_fd)) < 1e-5


def test_bce_shape_mismatch():
    with pytest.raises(ContractError):
        mask_bce_loss(np.zeros((2, 3)), np.zeros((3, 2), bool))


def test_weights_validation():
    with pytest.raises(ContractError):
        LossWeights(-1.0, 1.0, 1.0)
    with pytest.raises(ContractError):
        LossWeights(0.0, 0.0, 0.0)
    assert LossWeights() == LossWeights(1.0, 1.0, 1.0)


def _instance(rng, h=10, w=10):
    cam = small_cam(h, w)
    sides = []
    for base in (2.0, 2.3):
        pred = smooth_depth(rng, h, w, base=base, holes=True)
        gt = smooth_depth(rng, h, w, base=base)
        sides.append((pred, delta_normals(gt, cam), gt))
    mp = rng.uniform(0.01, 0.99, (h, w))
    mt = rng.random((h, w)) > 0.5
    return cam, sides[0], sides[1], mp, mt


def test_full_loss_matches_per_term_oracle(rng):
    cam, front, back, mp, mt = _instance(rng)
    rep = full_loss(front, back, mp, mt, cam, LossWeights(1.0, 1.0, 1.0))
    oracle = (
        l1_depth_loss(front[0], front[2])[0]
        + l1_depth_loss(back[0], back[2])[0]
        + l1_normals_loss(front[0], front[1], cam)[0]
        + l1_normals_loss(back[0], back[1], cam)[0]
        + mask_bce_loss(mp, mt)[0]
    )
    assert rep.total == pytest.approx(oracle, abs=1e-9)
    assert rep.per_term["vgg_normals_front"] == 0.0 == rep.per_term["vgg_normals_back"]
    expected_count = int((front[0].mask & front[2].mask).sum() + (back[0].mask & back[2].mask).sum())
    assert rep.valid_pixel_count == expected_count


def test_full_loss_zero_at_targets(rng):
    cam = small_cam(8, 8)
    sides = []
    for base in (2.0, 2.4):
        d = smooth_depth(rng, 8, 8, base=base)
        sides.append((d, delta_normals(d, cam), d))
    m = rng.random((8, 8)) > 0.5
    rep = full_loss(sides[0], sides[1], m.astype(float), m, cam)
    assert 0.0 <= rep.total <= -math.log(1 - BCE_EPS) + 1e-15


def test_full_loss_linear_in_weights(rng):
    cam, front, back, mp, mt = _instance(rng)
    base = full_loss(front, back, mp, mt, cam, LossWeights(1.0, 1.0, 1.0))
    no_n = full_loss(front, back, mp, mt, cam, LossWeights(1.0, 0.0, 1.0))
    t = base.per_term
    assert no_n.total == t["depth_front"] + t["depth_back"] + t["mask"]
    doubled = full_loss(front, back, mp, mt, cam, LossWeights(1.0, 2.0, 1.0))
    contrib = t["normals_front"] + t["normals_back"]
    assert doubled.total - base.total == pytest.approx(contrib, rel=1e-12)


def test_no_depth_term_scale_invariant(rng):
    cam, front, back, mp, mt = _instance(rng)
    w = LossWeights(0.0, 1.0, 1.0)
    a = full_loss(front, back, mp, mt, cam, w).total
    s = 3.7
    f2 = (front[0].scaled(s),) + front[1:]
    b2 = (back[0].scaled(s),) + back[1:]
    assert full_loss(f2, b2, mp, mt, cam, w).total == pytest.approx(a, rel=1e-12)
