"""Segmentation branch: a noisy ground-truth oracle standing in for a
promptable segmenter, the dilated-conv mask decoder, and the pixel-mean BCE
training loss."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import autograd as ag
from .autograd import Tensor
from .features import linear_map

PROB_EPS = 1e-7
ASPP_DILATIONS = (1, 2, 4)
MASK_THRESHOLD = 0.5


@dataclass
class OracleConfig:
    """Noise model for the pseudo-mask oracle; probabilities must sum to 1."""
    p_clean: float = 1.0
    p_dilate: float = 0.0
    p_erode: float = 0.0
    p_distractor: float = 0.0
    radius: int = 1
    seed: int = 0

    def validate(self) -> None:
        probs = (self.p_clean, self.p_dilate, self.p_erode, self.p_distractor)
        if any(p < 0 or p > 1 for p in probs):
            raise ValueError(f"oracle probabilities must be in [0,1], got {probs}")
        if abs(sum(probs) - 1.0) > 1e-9:
            raise ValueError(f"oracle probabilities must sum to 1, got {sum(probs)}")
        if self.radius not in (1, 2):
            raise ValueError(f"oracle radius must be 1 or 2, got {self.radius}")


@dataclass
class PseudoMask:
    mask: np.ndarray  # (H, W) uint8
    mode: str
    prompt_box: tuple


@dataclass
class MaskPred:
    probs: np.ndarray  # (H, W) in [0, 1]

    @property
    def binary(self) -> np.ndarray:
        return (self.probs >= MASK_THRESHOLD).astype(np.uint8)


def _box_iou(a, b) -> float:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    ix = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    iy = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = ix * iy
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def oracle_mask(scene, prompt_box, config: OracleConfig,
                entropy: tuple[int, ...] = ()) -> PseudoMask:
    """Pseudo mask for the object best matching the prompt box.

    The target is the object whose gt box has max IoU with the prompt (ties
    to the lower index; zero IoU with every object yields an empty mask).
    The sampled noise mode mimics promptable-segmenter failures: masks that
    spill past the box or cover only part of the object, or that absorb an
    overlapping neighbor."""
    config.validate()
    h, w = scene.image.shape[:2]
    ious = [_box_iou(obj.gt_box, prompt_box) for obj in scene.objects]
    best = int(np.argmax(ious)) if ious else -1
    if best < 0 or ious[best] == 0.0:
        return PseudoMask(np.zeros((h, w), dtype=np.uint8), "empty", tuple(prompt_box))

    rng = np.random.default_rng(np.random.SeedSequence((config.seed,) + tuple(entropy)))
    mode = rng.choice(
        ["clean", "dilate", "erode", "distractor"],
        p=[config.p_clean, config.p_dilate, config.p_erode, config.p_distractor])
    gt = scene.objects[best].gt_mask.astype(bool)
    r = config.radius
    if mode == "clean":
        mask = gt
    elif mode == "dilate":
        mask = ndimage.binary_dilation(gt, iterations=r)
    elif mode == "erode":
        mask = ndimage.binary_erosion(gt, iterations=r)
    else:  # distractor: absorb the neighbor overlapping the prompt region most
        from .consistency import rasterize  # local import avoids a module cycle
        x, y, bw, bh = prompt_box
        grown = rasterize((x - r, y - r, bw + 2 * r, bh + 2 * r), h, w).astype(bool)
        neighbor = None
        best_overlap = 0
        for i, obj in enumerate(scene.objects):
            if i == best:
                continue
            overlap = int((obj.gt_mask.astype(bool) & grown).sum())
            if overlap > best_overlap:
                best_overlap = overlap
                neighbor = obj
        mask = gt.copy()
        if neighbor is not None:
            mask |= neighbor.gt_mask.astype(bool) & grown
    return PseudoMask(mask.astype(np.uint8), str(mode), tuple(prompt_box))


# ---------------------------------------------------------------------------
# decoder


def init_aspp(rng: np.random.Generator, dim: int, text_dim: int,
              channels: int = 16, dtype=np.float64) -> dict[str, Tensor]:
    params = {
        "aspp.fuse.w": Tensor((rng.standard_normal((text_dim, dim))
                               * np.sqrt(1.0 / text_dim)).astype(dtype),
                              requires_grad=True),
        "aspp.fuse.b": Tensor(np.ones(dim, dtype=dtype), requires_grad=True),
    }
    for d in ASPP_DILATIONS:
        params[f"aspp.w{d}"] = Tensor(
            (rng.standard_normal((3, 3, dim, channels))
             * np.sqrt(2.0 / (9 * dim))).astype(dtype), requires_grad=True)
        params[f"aspp.b{d}"] = Tensor(np.zeros(channels, dtype=dtype),
                                      requires_grad=True)
    mix_in = channels * len(ASPP_DILATIONS)
    params["aspp.mix.w"] = Tensor(
        (rng.standard_normal((mix_in, 1)) * np.sqrt(1.0 / mix_in)).astype(dtype),
        requires_grad=True)
    params["aspp.mix.b"] = Tensor(np.zeros(1, dtype=dtype), requires_grad=True)
    return params


def aspp_decode(feat: Tensor, text_vec: Tensor, params: dict[str, Tensor],
                out_hw: tuple[int, int]) -> Tensor:
    """Mask probabilities (B, H, W) from a (B, h, w, D) grid and (B, d_t) text.

    The text vector gates the grid elementwise through a learned channel map,
    then parallel 3x3 convs at dilations 1/2/4 (spatial extent preserved) are
    mixed 1x1, upsampled to the image and squashed."""
    bsz, _, _, dim = feat.shape
    gate = ag.add(ag.matmul(text_vec, params["aspp.fuse.w"]), params["aspp.fuse.b"])
    gate = ag.reshape(gate, (bsz, 1, 1, dim))
    fused = ag.mul(feat, gate)
    branches = [ag.relu(ag.conv2d(fused, params[f"aspp.w{d}"], params[f"aspp.b{d}"],
                                  dilation=d))
                for d in ASPP_DILATIONS]
    mixed = linear_map(ag.concat(branches, axis=3),
                       params["aspp.mix.w"], params["aspp.mix.b"])
    up = ag.bilinear_resize(mixed, out_hw[0], out_hw[1])
    return ag.sigmoid(ag.reshape(up, (bsz, out_hw[0], out_hw[1])))


def res_loss(probs: Tensor, target: np.ndarray) -> Tensor:
    """Pixel-mean binary cross-entropy against a binary pseudo mask.

    Probabilities are clamped to [1e-7, 1-1e-7] before the logs."""
    if probs.shape != target.shape:
        raise ag.ShapeError(
            f"res_loss: prediction {probs.shape} vs target {target.shape}")
    o = ag.clamp(probs, PROB_EPS, 1.0 - PROB_EPS)
    m = Tensor(target.astype(probs.dtype))
    inv = Tensor((1.0 - target).astype(probs.dtype))
    ll = ag.add(ag.mul(m, ag.log(o)), ag.mul(inv, ag.log(1.0 - o)))
    return -ag.tmean(ll)


def write_pgm(mask: np.ndarray, path) -> None:
    """Binary (P5) PGM export for visual inspection of masks."""
    h, w = mask.shape
    data = (mask.astype(np.uint8) * 255).tobytes()
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + data)
