"""Cross-task consistency: box rasterization, axis projections, Dice,
the projection consistency loss, IoU, and the IoU-gated suppression loss.

The predicted box always enters these losses as a constant teacher signal;
gradients flow only into the predicted mask probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .res import res_loss

DICE_EPS = 1e-6


def _round_half_up(v: float) -> int:
    return int(np.floor(v + 0.5))


def rasterize(box, h: int, w: int) -> np.ndarray:
    """Binary (h, w) mask of an (x, y, w, h) box, half-up pixel rounding,
    clamped to the image. Degenerate boxes yield an empty mask."""
    x, y, bw, bh = box
    x0 = max(0, _round_half_up(x))
    y0 = max(0, _round_half_up(y))
    x1 = min(w, _round_half_up(x + bw))
    y1 = min(h, _round_half_up(y + bh))
    mask = np.zeros((h, w), dtype=np.uint8)
    if x1 > x0 and y1 > y0:
        mask[y0:y1, x0:x1] = 1
    return mask


def project_x(mask: Tensor) -> Tensor:
    """Columnwise max: (H, W) -> (W,). Differentiable via the max subgradient."""
    return ag.tmax(mask, axis=0)


def project_y(mask: Tensor) -> Tensor:
    """Rowwise max: (H, W) -> (H,)."""
    return ag.tmax(mask, axis=1)


def dice(p: Tensor, q: Tensor, eps: float = DICE_EPS) -> Tensor:
    """1 - 2*sum(pq) / (sum(p^2) + sum(q^2) + eps) on equal-length vectors."""
    if p.shape != q.shape:
        raise ag.ShapeError(f"dice: shapes {p.shape} and {q.shape} differ")
    if eps <= 0:
        raise ValueError("dice: eps must be positive")
    num = ag.tsum(ag.mul(p, q)) * 2.0
    den = ag.tsum(ag.mul(p, p)) + ag.tsum(ag.mul(q, q)) + eps
    return 1.0 - ag.div(num, den)


def scl_loss(probs: Tensor, box, eps: float = DICE_EPS) -> Tensor:
    """Dice between axis projections of the predicted mask and of the
    box-derived mask; the box mask is constant."""
    h, w = probs.shape
    box_mask = Tensor(rasterize(box, h, w).astype(probs.dtype))
    lx = dice(project_x(probs), project_x(box_mask), eps)
    ly = dice(project_y(probs), project_y(box_mask), eps)
    return ag.add(lx, ly)


def binarize(probs: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return (probs >= threshold).astype(np.uint8)


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of equal-shape binary masks. Both empty -> 1,
    exactly one empty -> 0."""
    if a.shape != b.shape:
        raise ag.ShapeError(f"iou: shapes {a.shape} and {b.shape} differ")
    a = a.astype(bool)
    b = b.astype(bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


@dataclass
class GateState:
    iou: float
    alpha: float
    open: bool


def gate_state(probs: np.ndarray, box, pseudo_mask: np.ndarray, alpha: float,
               gate_source: str = "predicted_mask") -> GateState:
    """IoU gate against the rasterized box; inclusive at the threshold."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    h, w = probs.shape
    if gate_source == "predicted_mask":
        ref = binarize(probs)
    elif gate_source == "pseudo_mask":
        ref = pseudo_mask
    else:
        raise ValueError(f"unknown gate_source {gate_source!r}")
    value = iou(ref, rasterize(box, h, w))
    return GateState(iou=value, alpha=alpha, open=value >= alpha)


def isl_loss(probs: Tensor, box, pseudo_mask: np.ndarray, alpha: float,
             gate_source: str = "predicted_mask") -> tuple[Tensor, GateState]:
    """Gated segmentation loss: res_loss(probs, pseudo) when the IoU gate is
    open, a constant zero otherwise. The gate never carries gradient: a
    closed gate returns a graph-free zero, so parameter gradients are
    exactly zero."""
    state = gate_state(probs.data, box, pseudo_mask, alpha, gate_source)
    if state.open:
        return res_loss(probs, pseudo_mask), state
    return Tensor(np.zeros((), dtype=probs.dtype)), state
