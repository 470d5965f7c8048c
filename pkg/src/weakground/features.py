"""Visual feature bank: trainable pyramid encoder, fixed descriptor encoders,
top-down fusion, and the dynamic per-task feature ensemble.

Three sources feed the bank: a small strided conv stack (trained during
detector pretraining, then frozen), per-patch color-histogram descriptors,
and per-pixel edge/region descriptors. The two descriptor encoders are pure
functions of the image and never receive gradients, standing in for frozen
foundation-model backbones.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from . import autograd as ag
from .autograd import Tensor

STRIDE_DIVISOR = 32
DARK_CHANNELS = (12, 16, 24, 32, 40)  # after each stride-2 conv; last three are f1..f3
DINO_PATCH = 8
DINO_CHANNELS = 11  # 8 color-bin fractions + mean RGB
SAM_STRIDE = 4
SAM_CHANNELS = 8  # gradient magnitude, 4 directional gradients, 3 region-hash dims

BANK_CHANNELS = {"dark": DARK_CHANNELS[2], "dino": DINO_CHANNELS, "sam": SAM_CHANNELS}


class ConfigurationError(ValueError):
    pass


def _he_normal(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def linear_map(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Per-location channel map of a (B, H, W, Cin) grid, i.e. a 1x1 conv."""
    bsz, h, wd, cin = x.shape
    flat = ag.reshape(x, (bsz * h * wd, cin))
    out = ag.add(ag.matmul(flat, w), b)
    return ag.reshape(out, (bsz, h, wd, w.shape[1]))


# ---------------------------------------------------------------------------
# trainable pyramid encoder


def init_dark(rng: np.random.Generator, dtype=np.float64) -> dict[str, Tensor]:
    params = {}
    cin = 3
    for i, cout in enumerate(DARK_CHANNELS):
        params[f"dark.w{i}"] = Tensor(_he_normal(rng, (3, 3, cin, cout), 9 * cin, dtype),
                                      requires_grad=True)
        params[f"dark.b{i}"] = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
        cin = cout
    return params


def encode_dark(images: Tensor, params: dict[str, Tensor]) -> tuple[Tensor, Tensor, Tensor]:
    """Multi-scale maps at strides 8/16/32 from a (B, H, W, 3) batch."""
    _, h, w, _ = images.shape
    if h % STRIDE_DIVISOR or w % STRIDE_DIVISOR:
        raise ValueError(
            f"encode_dark: image size {h}x{w} requires divisibility by {STRIDE_DIVISOR}")
    x = images
    outs = []
    for i in range(len(DARK_CHANNELS)):
        x = ag.relu(ag.conv2d(x, params[f"dark.w{i}"], params[f"dark.b{i}"], stride=2))
        outs.append(x)
    return outs[2], outs[3], outs[4]


def init_fpn(rng: np.random.Generator, dim: int, dtype=np.float64) -> dict[str, Tensor]:
    params = {}
    for i, cin in enumerate(DARK_CHANNELS[2:], start=1):
        params[f"fpn.w{i}"] = Tensor(_he_normal(rng, (cin, dim), cin, dtype),
                                     requires_grad=True)
        params[f"fpn.b{i}"] = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)
    return params


def fpn_fuse(feats: tuple[Tensor, Tensor, Tensor],
             params: dict[str, Tensor]) -> tuple[Tensor, Tensor, Tensor]:
    """Top-down pathway: project each level to the shared width, then add
    upsampled coarser levels into finer ones."""
    f1, f2, f3 = feats
    p3 = linear_map(f3, params["fpn.w3"], params["fpn.b3"])
    p2 = linear_map(f2, params["fpn.w2"], params["fpn.b2"])
    p2 = ag.add(p2, ag.bilinear_resize(p3, f2.shape[1], f2.shape[2]))
    p1 = linear_map(f1, params["fpn.w1"], params["fpn.b1"])
    p1 = ag.add(p1, ag.bilinear_resize(p2, f1.shape[1], f1.shape[2]))
    if not (p1.shape[3] == p2.shape[3] == p3.shape[3]):
        raise ConfigurationError("fpn_fuse: projected channel widths disagree")
    return p1, p2, p3


# ---------------------------------------------------------------------------
# fixed descriptor encoders (pure numpy; never trained)


def _color_bins(image: np.ndarray) -> np.ndarray:
    """RGB-octant bin index per pixel: 4*(r>=.5) + 2*(g>=.5) + (b>=.5)."""
    q = (image >= 0.5).astype(np.int64)
    return q[..., 0] * 4 + q[..., 1] * 2 + q[..., 2]


def encode_dino(image: np.ndarray) -> np.ndarray:
    """Per-patch color histograms: (H/8, W/8, 11) for an (H, W, 3) image."""
    h, w, _ = image.shape
    if h % DINO_PATCH or w % DINO_PATCH:
        raise ValueError(f"encode_dino: image size {h}x{w} requires divisibility "
                         f"by {DINO_PATCH}")
    ph, pw = h // DINO_PATCH, w // DINO_PATCH
    bins = _color_bins(image)
    onehot = np.zeros((h, w, 8), dtype=np.float64)
    np.put_along_axis(onehot, bins[..., None], 1.0, axis=2)
    grouped = onehot.reshape(ph, DINO_PATCH, pw, DINO_PATCH, 8)
    hist = grouped.mean(axis=(1, 3))
    mean_rgb = image.astype(np.float64).reshape(
        ph, DINO_PATCH, pw, DINO_PATCH, 3).mean(axis=(1, 3))
    return np.concatenate([hist, mean_rgb], axis=2)


def _region_hash(label: np.ndarray) -> np.ndarray:
    """Deterministic 3-dim embedding in [0, 1) per region label."""
    out = np.empty(label.shape + (3,), dtype=np.float64)
    for k, mult in enumerate((12.9898, 78.233, 37.719)):
        v = np.sin((label + 1.0) * mult) * 43758.5453
        out[..., k] = v - np.floor(v)
    return out


def encode_sam(image: np.ndarray) -> np.ndarray:
    """Edge/region descriptors at stride 4: (H/4, W/4, 8)."""
    h, w, _ = image.shape
    if h % SAM_STRIDE or w % SAM_STRIDE:
        raise ValueError(f"encode_sam: image size {h}x{w} requires divisibility "
                         f"by {SAM_STRIDE}")
    gray = image.astype(np.float64).mean(axis=2)
    gx = np.gradient(gray, axis=1)
    gy = np.gradient(gray, axis=0)
    pad = np.pad(gray, 1, mode="edge")
    d1 = (pad[2:, 2:] - pad[:-2, :-2]) / (2.0 * np.sqrt(2.0))
    d2 = (pad[2:, :-2] - pad[:-2, 2:]) / (2.0 * np.sqrt(2.0))
    mag = np.sqrt(gx * gx + gy * gy)

    bins = _color_bins(image)
    labels = np.zeros((h, w), dtype=np.int64)
    offset = 0
    for v in np.unique(bins):
        lab, n = ndimage.label(bins == v)
        labels[lab > 0] = lab[lab > 0] + offset
        offset += n
    region = _region_hash(labels.astype(np.float64))

    full = np.concatenate([mag[..., None], gx[..., None], gy[..., None],
                           d1[..., None], d2[..., None], region], axis=2)
    s = SAM_STRIDE
    return full.reshape(h // s, s, w // s, s, 8).mean(axis=(1, 3))


# ---------------------------------------------------------------------------
# dynamic per-task feature ensemble


def init_dvfe(rng: np.random.Generator, task: str, sources, dim: int,
              dtype=np.float64) -> dict[str, Tensor]:
    """Weight projection plus one channel adapter per bank source."""
    params = {
        f"dvfe.{task}.wt": Tensor(
            (rng.standard_normal((dim, len(sources))) * 0.01).astype(dtype),
            requires_grad=True),
    }
    for src in sources:
        cin = BANK_CHANNELS[src]
        params[f"dvfe.{task}.{src}.w"] = Tensor(
            _he_normal(rng, (cin, dim), cin, dtype), requires_grad=True)
        params[f"dvfe.{task}.{src}.b"] = Tensor(np.zeros(dim, dtype=dtype),
                                                requires_grad=True)
    return params


def dvfe_weights(base_map: Tensor, wt: Tensor) -> Tensor:
    """Softmax source weights from the task's base feature map.

    The map is global-average-pooled over space before the projection, so
    each image gets one weight vector per task.
    """
    if base_map.shape[3] != wt.shape[0]:
        raise ConfigurationError(
            f"dvfe_weights: feature width {base_map.shape[3]} vs projection "
            f"rows {wt.shape[0]}")
    pooled = ag.tmean(base_map, axes=(1, 2))
    return ag.softmax(ag.matmul(pooled, wt), axis=1)


def dvfe_combine(entries: list[Tensor], adapters: list[tuple[Tensor, Tensor]],
                 weights: Tensor, out_hw: tuple[int, int],
                 residual_base: Tensor | None = None) -> Tensor:
    """Convex combination of adapted bank entries on the task grid.

    Each entry is channel-mapped then bilinearly resized to `out_hw`; entry i
    is scaled by weights[:, i]. With `residual_base` the base map is added
    back (the residual ensemble variant).
    """
    n_b = len(entries)
    if len(adapters) != n_b or weights.shape[1] != n_b:
        raise ConfigurationError(
            f"dvfe_combine: {n_b} entries vs {len(adapters)} adapters and "
            f"{weights.shape[1]} weights")
    oh, ow = out_hw
    dim = adapters[0][0].shape[1]
    combined = None
    for i, (entry, (w, b)) in enumerate(zip(entries, adapters)):
        adapted = ag.bilinear_resize(linear_map(entry, w, b), oh, ow)
        if adapted.shape[1:] != (oh, ow, dim):
            raise ConfigurationError(
                f"dvfe_combine: adapter output {adapted.shape} does not match "
                f"task grid {(oh, ow, dim)}")
        onehot = np.zeros((1, n_b), dtype=weights.dtype)
        onehot[0, i] = 1.0
        wi = ag.tsum(ag.mul(weights, Tensor(onehot)), axes=(1,))
        wi = ag.reshape(wi, (weights.shape[0], 1, 1, 1))
        term = ag.mul(adapted, wi)
        combined = term if combined is None else ag.add(combined, term)
    if residual_base is not None:
        combined = ag.add(combined, residual_base)
    return combined
