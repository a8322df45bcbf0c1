"""Analytic ground-truth scenes rendered by exact ray casting.

Scene placement follows an OpenGL-style world (camera at the origin looking
down -z, +y up); depth maps are then expressed in the camera convention of
:mod:`depthscan.geometry` (+z forward, +y down).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .geometry import Camera, ContractError, DepthMap, NormalMap

KINDS = ("plane", "slanted_plane", "sphere_cap", "ellipsoid", "sinusoid_relief")

# placement sampling ranges: translation in meters, Euler angles in degrees
TRANSLATION_RANGE = {"x": (-0.5, 0.5), "y": (0.0, 0.4), "z": (-2.2, -1.5)}
ROTATION_RANGE = {"x": (-9.0, 35.0), "y": (-7.0, 7.0), "z": (-2.0, 2.0)}

_GL_TO_CV = np.diag([1.0, -1.0, -1.0])


def euler_yxz(degrees) -> np.ndarray:
    """Rotation applying the y angle first, then x, then z."""
    ax, ay, az = np.radians(np.asarray(degrees, dtype=np.float64))
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ rx @ ry


@dataclass
class SyntheticScene:
    """Analytic surface in its local frame plus a rigid placement.

    Shape parameters used per kind:

    - ``plane``: local ``z = 0``.
    - ``slanted_plane``: local ``z = slope[0] * x + slope[1] * y``.
    - ``sphere_cap``: sphere of ``radius``.
    - ``ellipsoid``: semi-axes ``axes``.
    - ``sinusoid_relief``: ``z = amplitude * sin(2 pi x / period) * sin(2 pi y / period)``.

    The local +z axis faces the camera under the identity rotation.
    """

    kind: str
    radius: float = 0.5
    axes: tuple = (0.3, 0.5, 0.2)
    slope: tuple = (0.3, 0.2)
    amplitude: float = 0.02
    period: float = 0.25
    translation: tuple = (0.0, 0.0, -2.0)
    rotation_deg: tuple = (0.0, 0.0, 0.0)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown scene kind {self.kind!r}; expected one of {KINDS}")
        if self.radius <= 0 or min(self.axes) <= 0 or self.period <= 0:
            raise ContractError("radius, axes and period must be positive")
        if self.amplitude < 0:
            raise ContractError("amplitude must be non-negative")
        self.translation = tuple(float(v) for v in self.translation)
        self.rotation_deg = tuple(float(v) for v in self.rotation_deg)
        self.axes = tuple(float(v) for v in self.axes)
        self.slope = tuple(float(v) for v in self.slope)

    @classmethod
    def random(cls, kind: str, rng: np.random.Generator, **shape) -> "SyntheticScene":
        """Scene with placement drawn uniformly from the documented ranges."""
        t = tuple(rng.uniform(*TRANSLATION_RANGE[k]) for k in "xyz")
        r = tuple(rng.uniform(*ROTATION_RANGE[k]) for k in "xyz")
        return cls(kind, translation=t, rotation_deg=r, **shape)

    def to_dict(self) -> dict:
        return asdict(self)

    def camera_transform(self):
        """(M, o) mapping local points to camera frame: ``p_cam = M @ p + o``."""
        M = _GL_TO_CV @ euler_yxz(self.rotation_deg)
        o = _GL_TO_CV @ np.asarray(self.translation)
        return M, o


def _solve_quadratic(a, b, c):
    disc = b * b - 4 * a * c
    hit = disc >= 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    # numerically stable pair of roots
    qv = -0.5 * (b + np.copysign(sq, b))
    with np.errstate(divide="ignore", invalid="ignore"):
        r1 = qv / a
        r2 = c / qv
    t1 = np.minimum(r1, r2)
    t2 = np.maximum(r1, r2)
    return hit, t1, t2


def _intersect(scene: SyntheticScene, o, d):
    """Ray parameters of first/last hits in local coordinates.

    ``o`` (3,) is the camera origin and ``d`` (N, 3) the ray directions, both
    in the local frame. Returns (t_front, t_back, front_ok, back_ok, local_normal).
    """
    n = len(d)
    nan = np.full(n, np.nan)
    kind = scene.kind
    if kind in ("plane", "slanted_plane"):
        a, b = scene.slope if kind == "slanted_plane" else (0.0, 0.0)
        denom = d[:, 2] - a * d[:, 0] - b * d[:, 1]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (a * o[0] + b * o[1] - o[2]) / denom
        ok = np.isfinite(t) & (t > 0)
        normal = np.broadcast_to(np.array([-a, -b, 1.0]), (n, 3))
        return t, nan, ok, np.zeros(n, bool), normal
    if kind in ("sphere_cap", "ellipsoid"):
        axes = np.full(3, scene.radius) if kind == "sphere_cap" else np.asarray(scene.axes)
        os_, ds = o / axes, d / axes
        A = np.sum(ds * ds, axis=1)
        B = 2 * ds @ os_
        C = os_ @ os_ - 1.0
        hit, t1, t2 = _solve_quadratic(A, B, C)
        front_ok = hit & (t1 > 0)
        back_ok = hit & (t2 > 0) & front_ok
        p = o + t1[:, None] * d
        normal = p / axes**2
        return t1, t2, front_ok, back_ok, normal
    # sinusoid relief: Newton from the carrier-plane hit
    k = 2 * np.pi / scene.period
    A = scene.amplitude
    with np.errstate(divide="ignore", invalid="ignore"):
        t = -o[2] / d[:, 2]
    ok = np.isfinite(t) & (t > 0)
    t = np.where(ok, t, 0.0)
    for _ in range(50):
        p = o + t[:, None] * d
        sx, cx_ = np.sin(k * p[:, 0]), np.cos(k * p[:, 0])
        sy, cy_ = np.sin(k * p[:, 1]), np.cos(k * p[:, 1])
        g = p[:, 2] - A * sx * sy
        dg = d[:, 2] - A * k * (cx_ * sy * d[:, 0] + sx * cy_ * d[:, 1])
        step = np.where(ok, g / dg, 0.0)
        t = t - step
        if np.max(np.abs(step)) < 1e-15:
            break
    p = o + t[:, None] * d
    residual = np.abs(p[:, 2] - A * np.sin(k * p[:, 0]) * np.sin(k * p[:, 1]))
    ok &= (t > 0) & (residual < 1e-12)
    gx = A * k * np.cos(k * p[:, 0]) * np.sin(k * p[:, 1])
    gy = A * k * np.sin(k * p[:, 0]) * np.cos(k * p[:, 1])
    normal = np.stack([-gx, -gy, np.ones(n)], axis=1)
    return t, nan, ok, np.zeros(n, bool), normal


def render_depth_gt(scene: SyntheticScene, cam: Camera):
    """Ray-cast ``scene`` through ``cam``.

    Returns ``(front, back, normals_front)``: depth of the nearest and farthest
    hit along each pixel ray, and the analytic unit normal at the front hit
    oriented toward the camera (z <= 0). Pixels that miss are masked out.
    """
    M, o = scene.camera_transform()
    if o[2] <= 0:
        raise ContractError(f"scene origin is behind the camera (z={o[2]:.3f})")

    rays = cam.rays().reshape(-1, 3)
    # camera-frame ray p = t * r has depth t, so t carries over unchanged
    o_local = M.T @ (-o)
    d_local = rays @ M
    t1, t2, front_ok, back_ok, n_local = _intersect(scene, o_local, d_local)
    if not front_ok.any():
        raise ContractError("scene is not visible: no pixel ray hits the surface")

    h, w = cam.shape
    front_vals = np.where(front_ok, t1, 1.0).reshape(h, w)
    back_vals = np.where(back_ok, t2, 1.0).reshape(h, w)
    n_cam = np.asarray(n_local) @ M.T
    n_cam = n_cam / np.linalg.norm(n_cam, axis=1, keepdims=True)
    n_cam = np.where((n_cam[:, 2] > 0)[:, None], -n_cam, n_cam)
    front = DepthMap(front_vals, front_ok.reshape(h, w))
    back = DepthMap(back_vals, back_ok.reshape(h, w))
    normals = NormalMap.from_vectors(n_cam.reshape(h, w, 3), front.mask)
    return front, back, normals
