"""Geometry losses on depth, normals and mask, with analytic gradients.

Every loss returns ``(value, gradient)`` where the gradient is taken with
respect to the prediction and has the prediction's grid shape.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Camera, ContractError, DepthMap, NormalMap, delta_normals, delta_normals_vjp

BCE_EPS = 1e-7


class EmptyDomainError(ValueError):
    """No pixel is valid in both prediction and target."""


@dataclass(frozen=True)
class LossWeights:
    lambda_d: float = 1.0
    lambda_n: float = 1.0
    lambda_msk: float = 1.0

    def __post_init__(self):
        w = (self.lambda_d, self.lambda_n, self.lambda_msk)
        if min(w) < 0:
            raise ContractError(f"loss weights must be non-negative, got {w}")
        if max(w) == 0:
            raise ContractError("at least one loss weight must be positive")


@dataclass
class LossReport:
    total: float
    per_term: dict
    valid_pixel_count: int
    gradients: dict = field(default_factory=dict, repr=False)


def _domain(a: np.ndarray, b: np.ndarray, what: str) -> np.ndarray:
    if a.shape != b.shape:
        raise ContractError(f"{what}: mask shapes differ {a.shape} vs {b.shape}")
    dom = a & b
    if not dom.any():
        raise EmptyDomainError(f"{what}: prediction and target share no valid pixel")
    return dom


def l1_normals_loss(pred_depth: DepthMap, target: NormalMap, cam: Camera):
    """Mean per-pixel L1 distance between ``delta_normals(pred_depth)`` and ``target``.

    The per-pixel distance sums the three absolute component differences.
    Averaged over pixels valid in both masks.
    """
    dom = _domain(pred_depth.mask, target.mask, "l1_normals_loss")
    n = delta_normals(pred_depth, cam).values
    diff = n - target.values
    count = int(dom.sum())
    loss = float(np.sum(np.abs(diff[dom]))) / count
    cot = np.where(dom[..., None], np.sign(diff), 0.0) / count
    grad = delta_normals_vjp(pred_depth, cam, cot)
    return loss, grad


def l1_depth_loss(pred: DepthMap, target: DepthMap):
    """Mean absolute depth difference over pixels valid in both maps."""
    dom = _domain(pred.mask, target.mask, "l1_depth_loss")
    diff = np.where(dom, pred.filled(0.0) - target.filled(0.0), 0.0)
    count = int(dom.sum())
    loss = float(np.sum(np.abs(diff[dom]))) / count
    return loss, np.sign(diff) / count


def mask_bce_loss(pred_mask_prob, target_mask):
    """Mean binary cross-entropy over all pixels, probabilities clamped to [eps, 1 - eps]."""
    p_raw = np.asarray(pred_mask_prob, dtype=np.float64)
    t = np.asarray(target_mask, dtype=bool)
    if p_raw.shape != t.shape:
        raise ContractError(f"mask shapes differ {p_raw.shape} vs {t.shape}")
    p = np.clip(p_raw, BCE_EPS, 1.0 - BCE_EPS)
    n = p.size
    loss = float(-np.sum(np.where(t, np.log(p), np.log1p(-p)))) / n
    inside = (p_raw > BCE_EPS) & (p_raw < 1.0 - BCE_EPS)
    grad = np.where(inside, np.where(t, -1.0 / p, 1.0 / (1.0 - p)), 0.0) / n
    return loss, grad


def full_loss(front, back, mask_pred, mask_target, cam: Camera, w: LossWeights = LossWeights()) -> LossReport:
    """Weighted sum of depth, normal and mask terms for both sides.

    ``front`` and ``back`` are ``(pred_depth, target_normals, target_depth)``.
    The perceptual normal term is carried as a structural zero. Gradients in
    the report are already weighted: ``depth_front``/``depth_back`` are with
    respect to the predicted depths, ``mask`` to the mask probabilities.
    """
    terms = {}
    grads = {}
    count = 0
    for side, (pred, target_n, target_d) in (("front", front), ("back", back)):
        ld, gd = l1_depth_loss(pred, target_d)
        ln, gn = l1_normals_loss(pred, target_n, cam)
        terms[f"depth_{side}"] = ld
        terms[f"normals_{side}"] = ln
        terms[f"vgg_normals_{side}"] = 0.0
        grads[f"depth_{side}"] = w.lambda_d * gd + w.lambda_n * gn
        count += int((pred.mask & target_d.mask).sum())
    terms["mask"], gm = mask_bce_loss(mask_pred, mask_target)
    grads["mask"] = w.lambda_msk * gm
    total = (
        w.lambda_d * (terms["depth_front"] + terms["depth_back"])
        + w.lambda_n * (terms["normals_front"] + terms["normals_back"])
        + w.lambda_msk * terms["mask"]
    )
    return LossReport(float(total), terms, count, grads)
