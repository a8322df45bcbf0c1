import numpy as np
import pytest

from depthscan.geometry import Camera, DepthMap
from depthscan.synth import SyntheticScene, render_depth_gt


def smooth_depth(rng, h, w, base=2.0, amp=0.1, holes=False):
    """Random low-frequency depth field, optionally with a few invalid pixels."""
    v, u = np.mgrid[0:h, 0:w] / max(h, w)
    z = np.full((h, w), base)
    for _ in range(3):
        a, b, c, d = rng.uniform(0.5, 3.0, 4)
        z += amp * rng.uniform(-1, 1) * np.sin(a * u + b) * np.cos(c * v + d)
    mask = np.ones((h, w), bool)
    if holes:
        mask[rng.integers(0, h, 3), rng.integers(0, w, 3)] = False
    return DepthMap(np.where(mask, z, 0.0), mask)


def small_cam(h, w, f=None):
    return Camera.centered(f if f is not None else 1.2 * max(h, w), w, h)


@pytest.fixture(scope="session")
def sphere64():
    cam = Camera.centered(100.0, 64, 64)
    scene = SyntheticScene("sphere_cap", radius=0.5, translation=(0.0, 0.0, -2.0))
    front, back, normals = render_depth_gt(scene, cam)
    return cam, scene, front, back, normals


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def acceptance_log(request):
    """Record one PASS/FAIL line per acceptance criterion for the terminal summary."""
    lines = request.config.__dict__.setdefault("_acceptance_lines", [])

    def record(label, ok, detail):
        line = f"[acceptance] {label}: {'PASS' if ok else 'FAIL'} ({detail})"
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.__dict__.get("_acceptance_lines")
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
