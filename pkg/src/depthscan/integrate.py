"""Depth recovery from normal maps.

:func:`integrate_depth` optimizes a perspective depth grid so that its
normals match a target, which fixes the surface up to one scale factor per
connected region. :func:`poisson_integrate_ortho` is the classical
orthographic least-squares integrator, kept as an independent check.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy import ndimage

from .geometry import (
    Camera,
    ContractError,
    DepthMap,
    NormalMap,
    delta_normals,
    delta_normals_vjp,
)
from .losses import EmptyDomainError, l1_normals_loss

log = logging.getLogger(__name__)

MOMENTUM = 0.9
_WINDOW = 10


@dataclass(frozen=True)
class IntegratorConfig:
    """Settings for :func:`integrate_depth`.

    ``step_size`` is dimensionless: each pixel's update is preconditioned by
    ``(depth / focal_px) ** 2`` times the valid-pixel count, so the same value
    works across image sizes, focal lengths and scene distances.
    ``smoothing`` is the Charbonnier width used for the optimized surrogate
    ``sqrt(r**2 + smoothing**2) - smoothing``; 0 optimizes the plain L1
    subgradient. ``anchor`` is ``((u, v), depth)`` with ``u`` the column.
    """

    max_iters: int = 6000
    step_size: float = 2e-3
    step_decay: float = 0.7
    convergence_tol: float = 1e-13
    init_depth: float = 2.0
    anchor: tuple | None = None
    smoothing: float = 1e-3

    def __post_init__(self):
        if self.max_iters < 1:
            raise ContractError("max_iters must be >= 1")
        if not self.step_size > 0:
            raise ContractError("step_size must be positive")
        if not 0 < self.step_decay <= 1:
            raise ContractError("step_decay must lie in (0, 1]")
        if not self.init_depth > 0:
            raise ContractError("init_depth must be positive")
        if self.smoothing < 0:
            raise ContractError("smoothing must be non-negative")
        if self.anchor is not None:
            (u, v), d = self.anchor
            if not d > 0:
                raise ContractError("anchor depth must be positive")


@dataclass
class IntegrationResult:
    depth: DepthMap
    loss: float
    iterations: int
    converged: bool
    n_components: int
    anchors: list = field(default_factory=list)
    history: list = field(default_factory=list, repr=False)


def mask_components(mask: np.ndarray):
    """4-connected components of ``mask`` as (labels, count)."""
    labels, n = ndimage.label(mask, structure=[[0, 1, 0], [1, 1, 1], [0, 1, 0]])
    return labels, n


def _component_anchor(comp: np.ndarray) -> tuple[int, int]:
    """Valid pixel (row, col) closest to the component centroid, ties row-major."""
    rows, cols = np.nonzero(comp)
    d2 = (rows - rows.mean()) ** 2 + (cols - cols.mean()) ** 2
    k = int(np.argmin(d2))
    return int(rows[k]), int(cols[k])


def _surrogate(z, mask, target, cam, count, eps):
    dm = DepthMap(z, mask)
    r = delta_normals(dm, cam).values - target
    r[~mask] = 0.0
    if eps == 0:
        return float(np.sum(np.abs(r))) / count, delta_normals_vjp(dm, cam, np.sign(r) / count)
    q = np.sqrt(r * r + eps * eps)
    return float(np.sum(q - eps)) / count, delta_normals_vjp(dm, cam, r / q / count)


def integrate_depth(
    target: NormalMap, mask, cam: Camera, cfg: IntegratorConfig = IntegratorConfig()
) -> IntegrationResult:
    """Recover depth whose normals match ``target`` on ``mask``.

    Momentum gradient descent from a constant depth. A step that raises the
    objective is rolled back, the momentum cleared and the step multiplied
    by ``cfg.step_decay``. After every accepted step each connected
    component is rescaled so its anchor pixel keeps its anchor depth; the
    normals are invariant to that rescaling, so it only fixes the gauge.
    Components are anchored independently, at ``cfg.anchor`` for the
    component containing it and at the centroid pixel with
    ``cfg.init_depth`` otherwise.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != cam.shape or target.shape != cam.shape:
        raise ContractError(f"mask {mask.shape} / target {target.shape} do not match camera {cam.shape}")
    mask = mask & target.mask
    if not mask.any():
        raise EmptyDomainError("integrate_depth: empty mask")

    labels, n_comp = mask_components(mask)
    anchors = []
    user_label = None
    if cfg.anchor is not None:
        (u, v), d = cfg.anchor
        if not (0 <= v < cam.height and 0 <= u < cam.width) or not mask[v, u]:
            raise ContractError(f"anchor pixel (u={u}, v={v}) is not a valid pixel")
        user_label = labels[v, u]
    for lab in range(1, n_comp + 1):
        if lab == user_label:
            (u, v), d = cfg.anchor
            anchors.append(((int(v), int(u)), float(d), lab))
        else:
            anchors.append((_component_anchor(labels == lab), float(cfg.init_depth), lab))
    if n_comp > 1:
        log.info("integrate_depth: %d disconnected components, each with its own scale", n_comp)

    comp_index = [labels == lab for _, _, lab in anchors]

    def fix_gauge(z):
        for sel, ((r, c), d, _) in zip(comp_index, anchors):
            z[sel] *= d / z[r, c]
            z[r, c] = d  # exact, whatever the rounding of the product
        return z

    z = np.where(mask, cfg.init_depth, 1.0)
    z = fix_gauge(z)
    target_vals = np.array(target.values)
    count = int(mask.sum())
    eps = cfg.smoothing
    step = cfg.step_size
    precond_scale = count / cam.focal_px**2

    velocity = np.zeros_like(z)
    loss, grad = _surrogate(z, mask, target_vals, cam, count, eps)
    best = [loss]
    history = [loss]
    converged = False
    it = 0
    for it in range(1, cfg.max_iters + 1):
        velocity = MOMENTUM * velocity - step * precond_scale * z * z * grad
        velocity[~mask] = 0.0
        cand = z + velocity
        if np.any(cand[mask] <= 0):
            new_loss = np.inf
        else:
            cand = fix_gauge(cand)
            new_loss, new_grad = _surrogate(cand, mask, target_vals, cam, count, eps)
        if new_loss > loss or not np.isfinite(new_loss):
            velocity[:] = 0.0
            step *= cfg.step_decay
        else:
            z, loss, grad = cand, new_loss, new_grad
        best.append(loss)
        history.append(loss)
        if it >= _WINDOW and best[-1 - _WINDOW] - best[-1] < cfg.convergence_tol:
            converged = True
            break

    depth = DepthMap(np.where(mask, z, 1.0), mask)
    l1, _ = l1_normals_loss(depth, NormalMap(target.values, mask), cam)
    return IntegrationResult(
        depth=depth,
        loss=l1,
        iterations=it,
        converged=converged,
        n_components=n_comp,
        anchors=[((c, r), d) for (r, c), d, _ in anchors],
        history=history,
    )


def optimal_scale(estimate: np.ndarray, reference: np.ndarray) -> float:
    """Least-squares ``s`` minimizing ``|estimate - s * reference|``."""
    estimate = np.asarray(estimate, dtype=np.float64).ravel()
    reference = np.asarray(reference, dtype=np.float64).ravel()
    return float(estimate @ reference / (reference @ reference))


def relative_rms_after_scale(estimate: DepthMap, reference: DepthMap) -> float:
    """RMS(estimate - s * reference) / mean(reference) over the shared mask, s optimal."""
    dom = estimate.mask & reference.mask
    e = estimate.values[dom]
    r = reference.values[dom]
    s = optimal_scale(e, r)
    return float(np.sqrt(np.mean((e - s * r) ** 2)) / np.mean(r))


class SingularNormalsError(ValueError):
    """Normals too close to grazing for the orthographic slope model."""

    def __init__(self, pixels):
        self.pixels = pixels
        head = ", ".join(f"(u={c}, v={r})" for r, c in pixels[:10])
        more = f" and {len(pixels) - 10} more" if len(pixels) > 10 else ""
        super().__init__(f"|n_z| < 1e-3 at {len(pixels)} pixel(s): {head}{more}")


def poisson_integrate_ortho(target: NormalMap, mask, pixel_pitch: float) -> "ReliefMap":
    """Orthographic least-squares integration of a normal map.

    Slopes ``p = -n_x / n_z`` and ``q = -n_y / n_z`` give one equation per
    pair of 4-adjacent valid pixels,
    ``z[b] - z[a] = pitch * (slope[a] + slope[b]) / 2``. The normal
    equations are solved per connected component with one pixel pinned,
    then each component is shifted to zero mean. Zero-mean heights are not
    valid depths, hence the :class:`ReliefMap` return type.
    """
    mask = np.asarray(mask, dtype=bool) & target.mask
    if not mask.any():
        raise EmptyDomainError("poisson_integrate_ortho: empty mask")
    if not pixel_pitch > 0:
        raise ContractError("pixel_pitch must be positive")
    n = target.values
    nz = n[..., 2]
    bad = mask & (np.abs(nz) < 1e-3)
    if bad.any():
        raise SingularNormalsError([tuple(map(int, rc)) for rc in np.argwhere(bad)])
    safe_nz = np.where(mask, nz, -1.0)
    p = -n[..., 0] / safe_nz
    q = -n[..., 1] / safe_nz

    idx = -np.ones(mask.shape, dtype=np.int64)
    idx[mask] = np.arange(mask.sum())
    rows, cols, rhs = [], [], []
    # horizontal pairs (u, u+1), then vertical pairs (v, v+1)
    for slope, a_sl, b_sl in (
        (p, (slice(None), slice(0, -1)), (slice(None), slice(1, None))),
        (q, (slice(0, -1), slice(None)), (slice(1, None), slice(None))),
    ):
        pair = mask[a_sl] & mask[b_sl]
        ia = idx[a_sl][pair]
        ib = idx[b_sl][pair]
        rows.append(ia)
        cols.append(ib)
        rhs.append(0.5 * pixel_pitch * (slope[a_sl][pair] + slope[b_sl][pair]))
    ia = np.concatenate(rows)
    ib = np.concatenate(cols)
    g = np.concatenate(rhs)
    m_eq = len(g)
    n_var = int(mask.sum())
    A = sp.csr_matrix(
        (np.concatenate([-np.ones(m_eq), np.ones(m_eq)]),
         (np.concatenate([np.arange(m_eq)] * 2), np.concatenate([ia, ib]))),
        shape=(m_eq, n_var),
    )
    AtA = (A.T @ A).tocsc()
    Atg = A.T @ g

    labels, n_comp = mask_components(mask)
    lab_flat = labels[mask]
    z = np.zeros(n_var)
    for lab in range(1, n_comp + 1):
        sel = np.flatnonzero(lab_flat == lab)
        if len(sel) > 1:
            # pin the first pixel of the component, solve the rest directly
            free = sel[1:]
            sub = AtA[free][:, free]
            z[free] = spla.splu(sub.tocsc()).solve(Atg[free])
        z[sel] -= z[sel].mean()

    out = np.zeros(mask.shape)
    out[mask] = z
    return ReliefMap(out, mask)


@dataclass(frozen=True, eq=False)
class ReliefMap:
    """Relative heights along the optical axis, defined up to a constant."""

    values: np.ndarray
    mask: np.ndarray

    def as_depth(self, offset: float) -> DepthMap:
        """Absolute depth map placing the zero level at ``offset`` meters."""
        return DepthMap(np.where(self.mask, self.values + offset, 1.0), self.mask)
