"""Training losses: focal, L1 box regression, chamfer, and their weighted sum.

Every loss returns ``(value, gradient)`` so training code can chain the
gradient straight into backpropagation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

__all__ = [
    "FocalConfig",
    "JointLossWeights",
    "focal_loss",
    "l1_box_loss",
    "nearest_neighbors",
    "chamfer",
    "joint_loss",
    "PROB_FLOOR",
    "BOX_PARAM_DIM",
]

PROB_FLOOR = 1e-12
BOX_PARAM_DIM = 10


@dataclass(frozen=True)
class FocalConfig:
    alpha: float = 0.25
    beta: float = 2.0

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.beta < 0.0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")


@dataclass(frozen=True)
class JointLossWeights:
    w_sem: float = 1.0
    w_det: float = 1.0
    w_surf: float = 1.0

    def __post_init__(self):
        w = (self.w_sem, self.w_det, self.w_surf)
        if min(w) < 0:
            raise ValueError("loss weights must be non-negative")
        if max(w) == 0:
            raise ValueError("at least one loss weight must be positive")


def focal_loss(probs, cfg: FocalConfig = FocalConfig()):
    """Summed focal loss ``-alpha (1 - p)^beta log p`` over voxels.

    ``probs`` holds the predicted probability of the correct class per voxel.
    Values in ``(0, PROB_FLOOR)`` are clamped up to the floor; values that
    are not in ``(0, 1]`` raise ``ValueError``.
    """
    p = np.asarray(probs, dtype=np.float64)
    if np.any(~np.isfinite(p)) or np.any(p <= 0.0) or np.any(p > 1.0):
        raise ValueError("probabilities must lie in (0, 1]")
    clamped = p < PROB_FLOOR
    p = np.maximum(p, PROB_FLOOR)
    a, b = cfg.alpha, cfg.beta
    q = 1.0 - p
    logp = np.log(p)
    loss = float(np.sum(-a * q**b * logp))
    if b == 0.0:
        dmod = np.zeros_like(p)
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            dmod = np.where(q > 0.0, b * q ** (b - 1.0) * logp, 0.0)
    grad = a * (dmod - q**b / p)
    grad = np.where(clamped, 0.0, grad)
    return loss, grad


def l1_box_loss(pred, gt):
    """Mean over boxes of the summed absolute parameter error.

    Rows are ``(x, y, z, qx, qy, qz, qw, h, w, d)``.
    """
    pred = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    gt = np.atleast_2d(np.asarray(gt, dtype=np.float64))
    if pred.shape[0] != gt.shape[0]:
        raise ValueError(f"box count mismatch: {pred.shape[0]} vs {gt.shape[0]}")
    if pred.shape[1] != gt.shape[1]:
        raise ValueError("box parameter dimension mismatch")
    n = pred.shape[0]
    if n == 0:
        return 0.0, np.zeros_like(pred)
    diff = pred - gt
    return float(np.abs(diff).sum() / n), np.sign(diff) / n


def nearest_neighbors(X, Y, tree=None):
    """Index into ``Y`` of each point's nearest neighbour and the squared
    distance, recomputed exactly from the coordinates."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if tree is None:
        tree = cKDTree(Y)
    _, idx = tree.query(X, k=1)
    idx = np.asarray(idx, dtype=np.int64)
    if np.any(idx >= len(Y)):
        # the tree reports len(Y) when every distance overflows
        raise ValueError("nearest-neighbour search overflowed")
    d2 = np.sum((X - Y[idx]) ** 2, axis=1)
    return idx, d2


def chamfer(X, Y, return_grad: bool = True, tree_y=None):
    """Symmetric chamfer distance (sum of squared nearest-neighbour
    distances both ways) and its gradient with respect to ``X``.

    Nearest-neighbour assignments are held fixed when differentiating.
    ``tree_y`` may pass a prebuilt k-d tree over ``Y``.
    """
    X = np.asarray(getattr(X, "points", X), dtype=np.float64)
    Y = np.asarray(getattr(Y, "points", Y), dtype=np.float64)
    if len(X) == 0 or len(Y) == 0:
        raise ValueError("chamfer distance needs two non-empty point sets")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
        raise ValueError("chamfer distance needs finite coordinates")
    ix, dxy = nearest_neighbors(X, Y, tree_y)
    iy, dyx = nearest_neighbors(Y, X)
    value = float(dxy.sum() + dyx.sum())
    if not return_grad:
        return value
    grad = 2.0 * (X - Y[ix])
    np.add.at(grad, iy, 2.0 * (X[iy] - Y))
    return value, grad


def joint_loss(sem, det, surf, w: JointLossWeights = JointLossWeights()):
    vals = (float(sem), float(det), float(surf))
    if not all(np.isfinite(v) for v in vals):
        raise ValueError("loss terms must be finite")
    return w.w_sem * vals[0] + w.w_det * vals[1] + w.w_surf * vals[2]
