"""Box branch primitives: text encoding, anchor/text projections and
similarities, top-k selection, the anchor-text contrastive loss, YOLO-style
box decoding, and class-agnostic detector pretraining.

One anchor per grid cell with a single square prior of half the stride; the
offsets head is trained only during pretraining and stays frozen afterwards,
so in the weak phase each cell's decoded box is a fixed property of the
scene and learning reduces to picking the right cell.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import features
from .autograd import Tensor
from .optim import Adam, cosine_lr
from .scenes import Dataset, VOCAB

NEG_MASK = -1e9
LOGIT_CLIP = 1e-4


class DivergenceError(RuntimeError):
    pass


@dataclass
class BoxPred:
    """A decoded box in pixels with its provenance."""
    x: float
    y: float
    w: float
    h: float
    cell: int
    score: float

    @property
    def box(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.w, self.h)


# ---------------------------------------------------------------------------
# text encoding


def init_text(rng: np.random.Generator, text_dim: int,
              vocab_size: int = len(VOCAB), dtype=np.float64) -> dict[str, Tensor]:
    return {
        "text.embed": Tensor((rng.standard_normal((vocab_size, text_dim))
                              / np.sqrt(text_dim)).astype(dtype), requires_grad=True),
        "text.w": Tensor((rng.standard_normal((text_dim, text_dim))
                          / np.sqrt(text_dim)).astype(dtype), requires_grad=True),
        "text.b": Tensor(np.zeros(text_dim, dtype=dtype), requires_grad=True),
    }


def token_weights(token_lists, vocab_size: int, dtype) -> np.ndarray:
    """Row i averages image i's token embeddings: mean pooling as a matmul."""
    out = np.zeros((len(token_lists), vocab_size), dtype=dtype)
    for i, tokens in enumerate(token_lists):
        if len(tokens) == 0:
            raise ValueError("encode_text: empty token sequence")
        for t in tokens:
            if not 0 <= t < vocab_size:
                raise ValueError(f"encode_text: unknown token id {t}")
            out[i, t] += 1.0 / len(tokens)
    return out


def encode_text_batch(token_lists, params: dict[str, Tensor]) -> Tensor:
    """(B, d_t) embeddings: linear map of mean-pooled token embeddings.

    Mean pooling makes the encoding order-invariant, which fits the
    attribute-token expressions."""
    embed = params["text.embed"]
    weights = Tensor(token_weights(token_lists, embed.shape[0], embed.dtype))
    pooled = ag.matmul(weights, embed)
    return ag.add(ag.matmul(pooled, params["text.w"]), params["text.b"])


def encode_text(tokens, params: dict[str, Tensor]) -> Tensor:
    return ag.reshape(encode_text_batch([tokens], params), (params["text.w"].shape[1],))


# ---------------------------------------------------------------------------
# similarities


def init_contrastive(rng: np.random.Generator, dim: int, text_dim: int,
                     contrast_dim: int, dtype=np.float64) -> dict[str, Tensor]:
    # pure linear maps; an anchor-side bias would shift all of an item's
    # candidate scores together, which softmax cross-entropy ignores
    return {
        "proj.anchor.w": Tensor((rng.standard_normal((dim, contrast_dim))
                                 / np.sqrt(dim)).astype(dtype), requires_grad=True),
        "proj.text.w": Tensor((rng.standard_normal((text_dim, contrast_dim))
                               / np.sqrt(text_dim)).astype(dtype), requires_grad=True),
    }


def _l2_normalize(x: Tensor, axis: int) -> Tensor:
    sq = ag.tsum(ag.mul(x, x), axes=(axis,))
    inv = ag.exp(ag.mul(ag.log(ag.add(sq, Tensor(np.full(sq.shape, 1e-12,
                                                         dtype=x.dtype)))),
                        Tensor(np.asarray(-0.5, dtype=x.dtype))))
    shape = list(x.shape)
    shape[axis] = 1
    return ag.mul(x, ag.reshape(inv, shape))


def project_anchors(grid: Tensor, params: dict[str, Tensor],
                    cosine: bool = False) -> Tensor:
    """(B, h, w, D) anchor grid -> (B, cells, C) projected anchor features."""
    bsz, h, w, dim = grid.shape
    if dim != params["proj.anchor.w"].shape[0]:
        raise features.ConfigurationError(
            f"anchor projection expects width {params['proj.anchor.w'].shape[0]}, "
            f"got {dim}")
    flat = ag.reshape(grid, (bsz * h * w, dim))
    proj = ag.matmul(flat, params["proj.anchor.w"])
    proj = ag.reshape(proj, (bsz, h * w, proj.shape[1]))
    return _l2_normalize(proj, axis=2) if cosine else proj


def project_text(text_feat: Tensor, params: dict[str, Tensor],
                 cosine: bool = False) -> Tensor:
    proj = ag.matmul(text_feat, params["proj.text.w"])
    return _l2_normalize(proj, axis=1) if cosine else proj


def similarities(anchor_proj: Tensor, text_proj: Tensor) -> Tensor:
    """Dot-product scores: (B, cells, C) x (B, C) -> (B, cells)."""
    if anchor_proj.shape[2] != text_proj.shape[1]:
        raise features.ConfigurationError(
            f"similarities: contrastive dims {anchor_proj.shape[2]} vs "
            f"{text_proj.shape[1]}")
    bsz, cells, cdim = anchor_proj.shape
    t = ag.reshape(text_proj, (bsz, 1, cdim))
    return ag.tsum(ag.mul(anchor_proj, t), axes=(2,))


def topk_select(scores: np.ndarray, k: int) -> list[int]:
    """Indices of the k best cells, descending score, ties to lower index."""
    n = scores.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"topk_select: k={k} out of range for {n} cells")
    return [int(i) for i in np.argsort(-scores, kind="stable")[:k]]


# ---------------------------------------------------------------------------
# anchor-text contrastive loss


def atc_from_scores(pos_scores: Tensor, neg_scores: Tensor, neg_valid: np.ndarray,
                    tau: float, include_positive: bool = True) -> Tensor:
    """Mean InfoNCE from precomputed similarity scores.

    `neg_scores` is (B, K) with `neg_valid` marking real negatives; invalid
    slots are masked out of the log-sum-exp. By default the positive is part
    of the denominator; `include_positive=False` reproduces the printed
    indicator form, which may go negative."""
    if tau <= 0:
        raise ValueError(f"atc: temperature must be positive, got {tau}")
    if neg_valid.ndim != 2 or not neg_valid.any(axis=1).all():
        raise ValueError("atc: every item needs a non-empty negative set")
    bsz = pos_scores.shape[0]
    dtype = pos_scores.dtype
    mask = np.where(neg_valid, 0.0, NEG_MASK).astype(dtype)
    z_neg = ag.add(ag.mul(neg_scores, Tensor(np.asarray(1.0 / tau, dtype=dtype))),
                   Tensor(mask))
    pos = ag.mul(pos_scores, Tensor(np.asarray(1.0 / tau, dtype=dtype)))
    if include_positive:
        z = ag.concat([ag.reshape(pos, (bsz, 1)), z_neg], axis=1)
    else:
        z = z_neg
    m = ag.tmax(z, axis=1)
    shifted = ag.sub(z, ag.reshape(m, (bsz, 1)))
    lse = ag.add(m, ag.log(ag.tsum(ag.exp(shifted), axes=(1,))))
    return ag.tmean(ag.sub(lse, pos))


def atc_loss(items, tau: float, include_positive: bool = True) -> Tensor:
    """InfoNCE over explicit per-item features.

    `items` is a sequence of (positive anchor feature (C,), text feature (C,),
    negative anchor features (M, C)); scores are raw dot products."""
    if tau <= 0:
        raise ValueError(f"atc: temperature must be positive, got {tau}")
    losses = []
    for pos_feat, text_feat, neg_feats in items:
        if neg_feats.shape[0] == 0:
            raise ValueError("atc: every item needs a non-empty negative set")
        pos = ag.reshape(ag.tsum(ag.mul(pos_feat, text_feat)), (1,))
        negs = ag.matmul(neg_feats, text_feat)
        inv_tau = Tensor(np.asarray(1.0 / tau, dtype=pos.dtype))
        z = ag.mul(ag.concat([pos, negs]) if include_positive else negs, inv_tau)
        m = ag.tmax(z, axis=0)
        lse = ag.add(m, ag.log(ag.tsum(ag.exp(ag.sub(z, ag.broadcast_to(
            ag.reshape(m, (1,)), z.shape))))))
        losses.append(ag.sub(lse, ag.reshape(ag.mul(pos, inv_tau), ())))
    total = losses[0]
    for l in losses[1:]:
        total = ag.add(total, l)
    return ag.mul(total, Tensor(np.asarray(1.0 / len(losses), dtype=total.dtype)))


# ---------------------------------------------------------------------------
# box decoding


def _sigmoid(v):
    return 1.0 / (1.0 + np.exp(-v))


def anchor_prior(stride: int) -> tuple[float, float]:
    return (stride / 2.0, stride / 2.0)


def decode_box(cell_rc: tuple[int, int], offsets, prior, stride: int,
               image_hw: tuple[int, int]) -> tuple[float, float, float, float]:
    """(x, y, w, h) from cell offsets: sigmoid center within the cell,
    exponential size on the prior, clamped to the image."""
    row, col = cell_rc
    tx, ty, tw, th = (float(v) for v in offsets)
    ih, iw = image_hw
    cx = (col + _sigmoid(tx)) * stride
    cy = (row + _sigmoid(ty)) * stride
    w = prior[0] * np.exp(tw)
    h = prior[1] * np.exp(th)
    x = np.clip(cx - w / 2.0, 0.0, iw - 1.0)
    y = np.clip(cy - h / 2.0, 0.0, ih - 1.0)
    w = float(np.clip(w, 1.0, iw - x))
    h = float(np.clip(h, 1.0, ih - y))
    return (float(x), float(y), w, h)


def encode_box(box, cell_rc: tuple[int, int], prior, stride: int) -> np.ndarray:
    """Inverse of decode_box for pretraining targets (center clipped just
    inside the cell so the logit stays finite)."""
    x, y, w, h = box
    row, col = cell_rc
    px = np.clip((x + w / 2.0) / stride - col, LOGIT_CLIP, 1.0 - LOGIT_CLIP)
    py = np.clip((y + h / 2.0) / stride - row, LOGIT_CLIP, 1.0 - LOGIT_CLIP)
    return np.array([np.log(px / (1.0 - px)), np.log(py / (1.0 - py)),
                     np.log(w / prior[0]), np.log(h / prior[1])])


def decode_all_cells(offsets: np.ndarray, grid_hw: tuple[int, int], stride: int,
                     image_hw: tuple[int, int]) -> np.ndarray:
    """Decode every cell's box from an (cells, 4) offset array."""
    gh, gw = grid_hw
    prior = anchor_prior(stride)
    boxes = np.zeros((gh * gw, 4))
    for r in range(gh):
        for c in range(gw):
            boxes[r * gw + c] = decode_box((r, c), offsets[r * gw + c], prior,
                                           stride, image_hw)
    return boxes


# ---------------------------------------------------------------------------
# detector pretraining (class-agnostic; no expressions involved)


def init_det_head(rng: np.random.Generator, dim: int, dtype=np.float64) -> dict[str, Tensor]:
    return {
        "det.w": Tensor((rng.standard_normal((dim, 5)) * 0.01).astype(dtype),
                        requires_grad=True),
        "det.b": Tensor(np.zeros(5, dtype=dtype), requires_grad=True),
    }


def det_head(p3: Tensor, params: dict[str, Tensor]) -> Tensor:
    """(B, h, w, D) -> (B, cells, 5): tx, ty, tw, th, objectness logit."""
    bsz, h, w, dim = p3.shape
    flat = ag.reshape(p3, (bsz * h * w, dim))
    out = ag.add(ag.matmul(flat, params["det.w"]), params["det.b"])
    return ag.reshape(out, (bsz, h * w, 5))


def pretrain_targets(scene, grid_hw: tuple[int, int], stride: int):
    """Objectness is 1 exactly at cells containing a gt box center; the
    regression target is the center-containing object nearest the cell
    center (ties to the lower object index)."""
    gh, gw = grid_hw
    prior = anchor_prior(stride)
    obj = np.zeros(gh * gw)
    boxes = np.zeros((gh * gw, 4))
    owners: dict[int, list[int]] = {}
    for i, o in enumerate(scene.objects):
        cx, cy = o.center()
        r = min(int(cy // stride), gh - 1)
        c = min(int(cx // stride), gw - 1)
        owners.setdefault(r * gw + c, []).append(i)
    for cell, idxs in owners.items():
        obj[cell] = 1.0
        r, c = divmod(cell, gw)
        cell_center = ((c + 0.5) * stride, (r + 0.5) * stride)
        best = min(idxs, key=lambda i: (
            (scene.objects[i].center()[0] - cell_center[0]) ** 2
            + (scene.objects[i].center()[1] - cell_center[1]) ** 2, i))
        boxes[cell] = encode_box(scene.objects[best].gt_box, (r, c), prior, stride)
    return obj, boxes


def _smooth_l1(x: Tensor) -> Tensor:
    absx = ag.add(ag.relu(x), ag.relu(-x))
    quad = (np.abs(x.data) < 1.0).astype(x.dtype)
    quad_t = Tensor(quad)
    lin_t = Tensor(1.0 - quad)
    return ag.add(ag.mul(quad_t, ag.mul(ag.mul(x, x),
                                        Tensor(np.asarray(0.5, dtype=x.dtype)))),
                  ag.mul(lin_t, ag.sub(absx, Tensor(np.asarray(0.5, dtype=x.dtype)))))


def _bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    p = ag.clamp(ag.sigmoid(logits), 1e-7, 1.0 - 1e-7)
    t = Tensor(targets.astype(p.dtype))
    inv = Tensor((1.0 - targets).astype(p.dtype))
    return -ag.tmean(ag.add(ag.mul(t, ag.log(p)), ag.mul(inv, ag.log(1.0 - p))))


def pretrain_detector(dataset: Dataset, params: dict[str, Tensor], *,
                      epochs: int, lr: float = 2e-3, batch_size: int = 16,
                      box_weight: float = 5.0, seed: int = 0,
                      dtype=np.float64) -> list[float]:
    """Train the pyramid encoder, top-down fusion and offsets head with an
    objectness + box-regression objective, then freeze everything.

    Returns per-epoch mean losses. Zero epochs leaves params untouched
    (still frozen on return)."""
    scenes_list = [p.scene for p in dataset.train]
    image_size = scenes_list[0].height
    stride = features.STRIDE_DIVISOR
    grid = (image_size // stride, image_size // stride)

    opt = Adam(params, lr=lr)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 9101)))
    history = []
    step = 0
    for epoch in range(epochs):
        opt.lr = cosine_lr(lr, epoch, max(epochs, 1))
        order = rng.permutation(len(scenes_list))
        epoch_losses = []
        for start in range(0, len(order), batch_size):
            batch = [scenes_list[i] for i in order[start:start + batch_size]]
            images = Tensor(np.stack([s.image for s in batch]).astype(dtype))
            f = features.encode_dark(images, params)
            _, _, p3 = features.fpn_fuse(f, params)
            preds = det_head(p3, params)

            obj_t = np.stack([pretrain_targets(s, grid, stride)[0] for s in batch])
            box_t = np.stack([pretrain_targets(s, grid, stride)[1] for s in batch])
            cells = grid[0] * grid[1]
            obj_logits = ag.reshape(
                ag.tsum(ag.mul(preds, Tensor(np.eye(5, dtype=dtype)[4]
                                             .reshape(1, 1, 5))), axes=(2,)),
                (len(batch), cells))
            loss = _bce_with_logits(obj_logits, obj_t)

            pos = obj_t.reshape(len(batch), cells, 1)
            if pos.sum() > 0:
                sel = np.concatenate([np.eye(5, dtype=dtype)[:4].T], axis=0)
                off = ag.matmul(ag.reshape(preds, (len(batch) * cells, 5)),
                                Tensor(sel))
                off = ag.reshape(off, (len(batch), cells, 4))
                diff = ag.sub(off, Tensor(box_t.astype(dtype)))
                sl1 = ag.mul(_smooth_l1(diff), Tensor(pos.astype(dtype)))
                box_loss = ag.mul(ag.tsum(sl1),
                                  Tensor(np.asarray(1.0 / (pos.sum() * 4), dtype=dtype)))
                loss = ag.add(loss, ag.mul(box_loss,
                                           Tensor(np.asarray(box_weight, dtype=dtype))))

            if not np.isfinite(loss.data):
                raise DivergenceError(f"pretraining diverged at step {step} (seed {seed})")
            opt.zero_grad()
            ag.backward(loss)
            opt.step()
            epoch_losses.append(loss.item())
            step += 1
        history.append(float(np.mean(epoch_losses)))
    for p in params.values():
        p.requires_grad = False
    return history
