import numpy as np
import pytest

from conftest import small_cam
from depthscan.geometry import CONSTANT_NORMAL, Camera, ContractError, DepthMap, NormalMap, delta_normals
from depthscan.integrate import (
    IntegratorConfig,
    SingularNormalsError,
    integrate_depth,
    mask_components,
    optimal_scale,
    poisson_integrate_ortho,
    relative_rms_after_scale,
)
from depthscan.losses import EmptyDomainError, l1_normals_loss
from depthscan.synth import SyntheticScene, render_depth_gt


def _ortho_normals(zx, zy):
    """Camera-facing unit normals of a height field z(x, y) with +z away from the viewer."""
    n = np.stack([zx, zy, -np.ones_like(zx)], axis=-1)
    return n / np.linalg.norm(n, axis=-1, keepdims=True)


def test_config_validation():
    for kw in (dict(max_iters=0), dict(step_size=0.0), dict(step_decay=0.0), dict(step_decay=1.5),
               dict(init_depth=-1.0), dict(anchor=((0, 0), 0.0))):
        with pytest.raises(ContractError):
            IntegratorConfig(**kw)


def test_plane_with_anchor():
    cam = small_cam(16, 16)
    target = NormalMap(np.tile(CONSTANT_NORMAL, (16, 16, 1)), np.ones((16, 16), bool))
    cfg = IntegratorConfig(anchor=((8, 8), 2.0), init_depth=1.3, max_iters=200)
    res = integrate_depth(target, target.mask, cam, cfg)
    assert np.max(np.abs(res.depth.values - 2.0)) < 1e-4
    assert res.depth.values[8, 8] == 2.0


def test_generator_is_a_zero_of_the_loss():
    cam = Camera.centered(100.0, 48, 48)
    front, _, _ = render_depth_gt(SyntheticScene("ellipsoid"), cam)
    loss, grad = l1_normals_loss(front, delta_normals(front, cam), cam)
    assert loss == 0.0 and np.all(grad == 0)


@pytest.fixture(scope="module")
def cap32():
    cam = Camera.centered(60.0, 32, 32)
    front, _, _ = render_depth_gt(SyntheticScene("sphere_cap", radius=0.45), cam)
    return cam, front


@pytest.fixture(scope="module")
def cap32_result(cap32):
    cam, front = cap32
    cfg = IntegratorConfig(anchor=((16, 16), 1.7))
    return integrate_depth(delta_normals(front, cam), front.mask, cam, cfg)


def test_small_cap_recovered(cap32, cap32_result):
    _, front = cap32
    assert cap32_result.converged
    assert relative_rms_after_scale(cap32_result.depth, front) < 1e-3


def test_anchor_exactly_preserved(cap32_result):
    assert cap32_result.depth.values[16, 16] == 1.7
    assert cap32_result.anchors == [((16, 16), 1.7)]


def test_gauge_scaling_keeps_loss(cap32, cap32_result):
    cam, front = cap32
    target = delta_normals(front, cam)
    a = l1_normals_loss(cap32_result.depth, target, cam)[0]
    b = l1_normals_loss(cap32_result.depth.scaled(3.1), target, cam)[0]
    assert a == pytest.approx(b, rel=1e-9, abs=1e-14)


def test_history_monotone(cap32_result):
    h = np.asarray(cap32_result.history)
    assert np.all(np.diff(h) <= 0)


def test_deterministic(cap32):
    cam, front = cap32
    cfg = IntegratorConfig(max_iters=300)
    target = delta_normals(front, cam)
    a = integrate_depth(target, front.mask, cam, cfg)
    b = integrate_depth(target, front.mask, cam, cfg)
    assert a.depth.values.tobytes() == b.depth.values.tobytes()
    assert a.iterations == b.iterations


def test_disconnected_components_get_own_gauge():
    cam = small_cam(16, 24)
    d_true = np.full((16, 24), 2.0)
    v, u = np.mgrid[0:16, 0:24]
    d_true = d_true + 0.05 * np.sin(u / 4.0) + 0.03 * np.cos(v / 5.0)
    mask = np.zeros((16, 24), bool)
    mask[2:14, 1:10] = True
    mask[2:14, 13:23] = True
    truth = DepthMap(np.where(mask, d_true, 0.0), mask)
    target = delta_normals(truth, cam)
    res = integrate_depth(target, mask, cam, IntegratorConfig(init_depth=1.0))
    assert res.n_components == 2
    labels, _ = mask_components(mask)
    for (u0, v0), depth in res.anchors:
        assert res.depth.values[v0, u0] == depth == 1.0
    for lab in (1, 2):
        sel = labels == lab
        e, r = res.depth.values[sel], truth.values[sel]
        s = optimal_scale(e, r)
        assert np.sqrt(np.mean((e - s * r) ** 2)) / r.mean() < 1e-3


def test_empty_mask():
    cam = small_cam(8, 8)
    target = NormalMap(np.tile(CONSTANT_NORMAL, (8, 8, 1)), np.ones((8, 8), bool))
    with pytest.raises(EmptyDomainError):
        integrate_depth(target, np.zeros((8, 8), bool), cam)


def test_anchor_off_mask_rejected():
    cam = small_cam(8, 8)
    mask = np.ones((8, 8), bool)
    mask[0, 0] = False
    target = NormalMap(np.tile(CONSTANT_NORMAL, (8, 8, 1)), mask)
    with pytest.raises(ContractError):
        integrate_depth(target, mask, cam, IntegratorConfig(anchor=((0, 0), 2.0)))


def test_optimal_scale_closed_form(rng):
    r = rng.uniform(1, 2, 50)
    assert optimal_scale(3.0 * r, r) == pytest.approx(3.0, rel=1e-14)


# ---------------------------------------------------------------- Poisson


def test_poisson_constant_normals():
    n = NormalMap(np.tile(CONSTANT_NORMAL, (10, 12, 1)), np.ones((10, 12), bool))
    relief = poisson_integrate_ortho(n, n.mask, 0.01)
    assert np.max(np.abs(relief.values)) < 1e-15


def test_poisson_tilted_plane_exact():
    a, b, pitch = 0.3, -0.2, 0.01
    v, u = np.mgrid[0:32, 0:32] * pitch
    truth = a * u + b * v
    n = NormalMap(_ortho_normals(np.full_like(u, a), np.full_like(u, b)), np.ones((32, 32), bool))
    relief = poisson_integrate_ortho(n, n.mask, pitch)
    err = relief.values - truth
    assert np.max(np.abs(err - err.mean())) < 1e-6
    assert abs(relief.values.mean()) < 1e-12


def test_poisson_sinusoid_relief():
    amp, period, pitch, size = 0.02, 1.28, 0.01, 64
    v, u = np.mgrid[0:size, 0:size] * pitch
    k = 2 * np.pi / period
    truth = amp * np.sin(k * u) * np.sin(k * v)
    zx = amp * k * np.cos(k * u) * np.sin(k * v)
    zy = amp * k * np.sin(k * u) * np.cos(k * v)
    n = NormalMap(_ortho_normals(zx, zy), np.ones((size, size), bool))
    relief = poisson_integrate_ortho(n, n.mask, pitch)
    err = relief.values - truth
    assert np.sqrt(np.mean((err - err.mean()) ** 2)) < 1e-3 * amp


def test_poisson_singular_normals():
    vals = np.tile(CONSTANT_NORMAL, (6, 6, 1))
    vals[2, 3] = [1.0, 0.0, -1e-4]
    vals[2, 3] /= np.linalg.norm(vals[2, 3])
    n = NormalMap(vals, np.ones((6, 6), bool))
    with pytest.raises(SingularNormalsError) as exc:
        poisson_integrate_ortho(n, n.mask, 0.01)
    assert exc.value.pixels == [(2, 3)]
    assert "u=3, v=2" in str(exc.value)


def test_poisson_components_zero_mean():
    mask = np.zeros((10, 10), bool)
    mask[:, :4] = True
    mask[:, 6:] = True
    v, u = np.mgrid[0:10, 0:10] * 0.1
    n = NormalMap(_ortho_normals(np.full_like(u, 0.2), np.zeros_like(u)), mask)
    relief = poisson_integrate_ortho(n, mask, 0.1)
    assert abs(relief.values[:, :4].mean()) < 1e-14
    assert abs(relief.values[:, 6:].mean()) < 1e-14
    assert relief.as_depth(5.0).values[mask].min() > 0
