"""Pinhole camera, depth/normal grids and the depth-to-normals operator.

Conventions: right-handed camera frame, +x right, +y down (image rows),
+z along the optical axis. Depth is the positive distance along +z.
Normals are oriented toward the camera, so valid normals have ``z <= 0``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _backend

#: Normal written wherever depth is not valid or cannot be differentiated.
CONSTANT_NORMAL = np.array([0.0, 0.0, -1.0])


class ContractError(ValueError):
    """Inputs violate a documented precondition (shape, range, mask)."""


@dataclass(frozen=True)
class Camera:
    focal_px: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not self.focal_px > 0:
            raise ContractError(f"focal_px must be positive, got {self.focal_px}")
        if self.width <= 0 or self.height <= 0:
            raise ContractError(f"bad image size {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ContractError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height}"
            )

    @classmethod
    def default(cls) -> "Camera":
        """720 px focal length on a 720x960 portrait image."""
        return cls.centered(720.0, 720, 960)

    @classmethod
    def centered(cls, focal_px: float, width: int, height: int) -> "Camera":
        return cls(float(focal_px), width / 2.0, height / 2.0, int(width), int(height))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def rays(self) -> np.ndarray:
        """(H, W, 3) grid of ray directions scaled to unit z."""
        v, u = np.mgrid[0 : self.height, 0 : self.width].astype(np.float64)
        return np.stack(
            [(u - self.cx) / self.focal_px, (v - self.cy) / self.focal_px, np.ones_like(u)],
            axis=-1,
        )

    def project(self, points: np.ndarray) -> np.ndarray:
        """Pixel coordinates (u, v) of camera-frame points, shape (..., 2)."""
        points = np.asarray(points, dtype=np.float64)
        z = points[..., 2]
        return np.stack(
            [self.focal_px * points[..., 0] / z + self.cx, self.focal_px * points[..., 1] / z + self.cy],
            axis=-1,
        )

    def to_dict(self) -> dict:
        return {
            "focal_px": self.focal_px,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
        }


def _check_grid(values: np.ndarray, mask: np.ndarray, channels: int | None):
    if mask.dtype != np.bool_:
        raise ContractError(f"mask must be boolean, got {mask.dtype}")
    if mask.ndim != 2:
        raise ContractError(f"mask must be 2-D, got shape {mask.shape}")
    expected = mask.shape if channels is None else mask.shape + (channels,)
    if values.shape != expected:
        raise ContractError(f"values shape {values.shape} does not match {expected}")


@dataclass(frozen=True, eq=False)
class DepthMap:
    """Per-pixel depth in meters with a validity mask.

    Values at masked-out pixels are carried but never read.
    """

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        mask = np.array(self.mask, dtype=bool)
        _check_grid(values, mask, None)
        valid = values[mask]
        if not np.all(np.isfinite(valid)):
            raise ContractError("depth contains NaN or Inf at valid pixels")
        if np.any(valid <= 0):
            raise ContractError("depth must be positive at valid pixels")
        values.flags.writeable = False
        mask.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)

    @classmethod
    def full(cls, values) -> "DepthMap":
        values = np.asarray(values, dtype=np.float64)
        return cls(values, np.ones(values.shape, dtype=bool))

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape

    def scaled(self, s: float) -> "DepthMap":
        return DepthMap(self.values * s, self.mask)

    def filled(self, fill: float = 0.0) -> np.ndarray:
        """Copy of the depth values with masked-out pixels set to ``fill``."""
        return np.where(self.mask, self.values, fill)


@dataclass(frozen=True, eq=False)
class NormalMap:
    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        mask = np.array(self.mask, dtype=bool)
        _check_grid(values, mask, 3)
        norms = np.linalg.norm(values[mask], axis=-1)
        if not np.all(np.abs(norms - 1.0) <= 1e-6):
            raise ContractError("normals must have unit length at valid pixels")
        # masked-out pixels always carry the constant normal
        values[~mask] = CONSTANT_NORMAL
        values.flags.writeable = False
        mask.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)

    @classmethod
    def from_vectors(cls, vectors, mask) -> "NormalMap":
        """Normalize ``vectors`` on ``mask`` and write the constant normal elsewhere."""
        vectors = np.asarray(vectors, dtype=np.float64)
        mask = np.asarray(mask, dtype=bool)
        out = np.broadcast_to(CONSTANT_NORMAL, vectors.shape).copy()
        v = vectors[mask]
        out[mask] = v / np.linalg.norm(v, axis=-1, keepdims=True)
        return cls(out, mask)

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape


@dataclass(frozen=True, eq=False)
class PointGrid:
    points: np.ndarray
    mask: np.ndarray


def _check_camera(shape, cam: Camera):
    if tuple(shape) != cam.shape:
        raise ContractError(f"grid shape {tuple(shape)} does not match camera {cam.shape}")


def backproject(depth: DepthMap, cam: Camera) -> PointGrid:
    """Lift every pixel to camera-frame 3D using the pinhole model."""
    _check_camera(depth.shape, cam)
    z = depth.filled(0.0)
    points = cam.rays() * z[..., None]
    return PointGrid(points, depth.mask.copy())


def delta_normals(depth: DepthMap, cam: Camera) -> NormalMap:
    """Per-pixel normals from back-projected neighbor differences.

    Central differences where both neighbors along an axis are valid,
    one-sided toward the single valid neighbor otherwise. Pixels lacking a
    valid neighbor along either axis, and all invalid pixels, receive
    :data:`CONSTANT_NORMAL`. The output mask is the input mask.
    """
    _check_camera(depth.shape, cam)
    normals = _backend.delta_forward(
        np.ascontiguousarray(depth.filled(0.0)),
        np.ascontiguousarray(depth.mask, dtype=np.uint8),
        float(cam.focal_px),
        float(cam.cx),
        float(cam.cy),
    )
    return NormalMap(normals, depth.mask)


def delta_normals_vjp(depth: DepthMap, cam: Camera, cotangent) -> np.ndarray:
    """Gradient of ``<cotangent, delta_normals(depth)>`` with respect to depth.

    The orientation flip is treated as locally constant. Pixels whose normal
    is the constant fallback contribute nothing. Entries at masked-out
    pixels are zero.
    """
    _check_camera(depth.shape, cam)
    cotangent = np.asarray(cotangent, dtype=np.float64)
    if cotangent.shape != depth.shape + (3,):
        raise ContractError(f"cotangent shape {cotangent.shape} does not match {depth.shape + (3,)}")
    return _backend.delta_vjp(
        np.ascontiguousarray(depth.filled(0.0)),
        np.ascontiguousarray(depth.mask, dtype=np.uint8),
        float(cam.focal_px),
        float(cam.cx),
        float(cam.cy),
        np.ascontiguousarray(cotangent),
    )


def angular_error_deg(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Angle in degrees between unit-vector grids ``a`` and ``b``."""
    cos = np.clip(np.sum(a * b, axis=-1), -1.0, 1.0)
    return np.degrees(np.arccos(cos))


def interior_mask(mask: np.ndarray, band: int = 2) -> np.ndarray:
    """Valid pixels at least ``band`` pixels (4-neighborhood steps) from any invalid pixel or the border."""
    inner = np.asarray(mask, dtype=bool).copy()
    for _ in range(band):
        padded = np.pad(inner, 1, constant_values=False)
        inner = (
            inner
            & padded[:-2, 1:-1]
            & padded[2:, 1:-1]
            & padded[1:-1, :-2]
            & padded[1:-1, 2:]
        )
    return inner
