"""Model assembly: parameter initialization, frozen-path scene caches, and
the batched weak-phase forward shared by training, gradcheck and evaluation.

After detector pretraining the pyramid encoder, top-down fusion and offsets
head are frozen, so every scene's fused maps, bank entries and per-cell
decoded boxes are constants of the weak phase; they are computed once and
cached. Weak training updates only the ensemble weights and adapters, the
text encoder, the contrastive projections and the mask decoder.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import features, rec, res
from .autograd import Tensor
from .config import Config
from .scenes import Pair

FROZEN_PREFIXES = ("dark.", "fpn.", "det.")


@dataclass
class Model:
    config: Config
    frozen: dict[str, Tensor]
    params: dict[str, Tensor]

    def all_params(self) -> dict[str, Tensor]:
        return {**self.frozen, **self.params}


def init_frozen(rng: np.random.Generator, cfg: Config) -> dict[str, Tensor]:
    dtype = cfg.dtype
    params = {}
    params.update(features.init_dark(rng, dtype))
    params.update(features.init_fpn(rng, cfg.feature_dim, dtype))
    params.update(rec.init_det_head(rng, cfg.feature_dim, dtype))
    return params


def init_weak(rng: np.random.Generator, cfg: Config) -> dict[str, Tensor]:
    dtype = cfg.dtype
    params = {}
    if cfg.dvfe:
        params.update(features.init_dvfe(rng, "rec", cfg.bank_sources,
                                         cfg.feature_dim, dtype))
        params.update(features.init_dvfe(rng, "res", cfg.bank_sources,
                                         cfg.feature_dim, dtype))
    params.update(rec.init_text(rng, cfg.text_dim, dtype=dtype))
    params.update(rec.init_contrastive(rng, cfg.feature_dim, cfg.text_dim,
                                       cfg.contrast_dim, dtype))
    params.update(res.init_aspp(rng, cfg.feature_dim, cfg.text_dim,
                                cfg.aspp_channels, dtype))
    return params


def build_model(cfg: Config) -> Model:
    cfg.validate()
    frozen = init_frozen(np.random.default_rng(np.random.SeedSequence((cfg.seed, 11))),
                         cfg)
    params = init_weak(np.random.default_rng(np.random.SeedSequence((cfg.seed, 13))),
                       cfg)
    return Model(config=cfg, frozen=frozen, params=params)


def grid_shapes(cfg: Config) -> dict[str, tuple[int, int]]:
    s = cfg.data.image_size
    return {"rec": (s // 32, s // 32), "res": (s // 8, s // 8)}


# ---------------------------------------------------------------------------
# frozen-path caches


@dataclass
class SceneCache:
    fh1: np.ndarray            # fused stride-8 map (h1, w1, D)
    fh3: np.ndarray            # fused stride-32 map (h3, w3, D)
    gap1: np.ndarray           # spatial mean of fh1, (D,)
    gap3: np.ndarray           # spatial mean of fh3, (D,)
    bank: dict[str, np.ndarray]
    cell_boxes: np.ndarray     # (cells, 4) decoded box per stride-32 cell


def precompute_caches(pairs: list[Pair], frozen: dict[str, Tensor],
                      cfg: Config, batch: int = 32) -> list[SceneCache]:
    dtype = cfg.dtype
    image_size = cfg.data.image_size
    stride = features.STRIDE_DIVISOR
    grid = (image_size // stride, image_size // stride)
    caches: list[SceneCache] = []
    with ag.no_grad():
        for start in range(0, len(pairs), batch):
            chunk = pairs[start:start + batch]
            images = Tensor(np.stack([p.scene.image for p in chunk]).astype(dtype))
            f1, f2, f3 = features.encode_dark(images, frozen)
            p1, _, p3 = features.fpn_fuse((f1, f2, f3), frozen)
            offsets = rec.det_head(p3, frozen).data[..., :4]
            for i, pair in enumerate(chunk):
                bank = {}
                if "dark" in cfg.bank_sources:
                    bank["dark"] = f1.data[i].astype(dtype)
                if "dino" in cfg.bank_sources:
                    bank["dino"] = features.encode_dino(pair.scene.image).astype(dtype)
                if "sam" in cfg.bank_sources:
                    bank["sam"] = features.encode_sam(pair.scene.image).astype(dtype)
                caches.append(SceneCache(
                    fh1=p1.data[i], fh3=p3.data[i],
                    gap1=p1.data[i].mean(axis=(0, 1)),
                    gap3=p3.data[i].mean(axis=(0, 1)),
                    bank=bank,
                    cell_boxes=rec.decode_all_cells(offsets[i], grid, stride,
                                                    (image_size, image_size))))
    return caches


# ---------------------------------------------------------------------------
# weak-phase forward


@dataclass
class WeakOut:
    scores: Tensor        # (B, cells)
    anchor_proj: Tensor   # (B, cells, C)
    text_proj: Tensor     # (B, C)
    probs: Tensor         # (B, H, W) mask probabilities
    rec_weights: Tensor | None
    res_weights: Tensor | None


def _task_grid(task: str, caches: list[SceneCache], model: Model,
               out_hw: tuple[int, int]) -> tuple[Tensor, Tensor | None]:
    cfg = model.config
    dtype = cfg.dtype
    base_np = np.stack([(c.fh3 if task == "rec" else c.fh1) for c in caches])
    base = Tensor(base_np.astype(dtype))
    if not cfg.dvfe:
        return base, None
    gap = Tensor(np.stack([(c.gap3 if task == "rec" else c.gap1)
                           for c in caches]).astype(dtype))
    weights = ag.softmax(ag.matmul(gap, model.params[f"dvfe.{task}.wt"]), axis=1)
    entries = [Tensor(np.stack([c.bank[s] for c in caches]))
               for s in cfg.bank_sources]
    adapters = [(model.params[f"dvfe.{task}.{s}.w"],
                 model.params[f"dvfe.{task}.{s}.b"]) for s in cfg.bank_sources]
    combined = features.dvfe_combine(entries, adapters, weights, out_hw,
                                     residual_base=base if cfg.dvfe_residual else None)
    return combined, weights


def weak_forward(caches: list[SceneCache], token_lists, model: Model) -> WeakOut:
    cfg = model.config
    grids = grid_shapes(cfg)
    image_size = cfg.data.image_size

    text_feat = rec.encode_text_batch(token_lists, model.params)

    rec_grid, rec_w = _task_grid("rec", caches, model, grids["rec"])
    anchor_proj = rec.project_anchors(rec_grid, model.params, cosine=cfg.cosine_sim)
    text_proj = rec.project_text(text_feat, model.params, cosine=cfg.cosine_sim)
    scores = rec.similarities(anchor_proj, text_proj)

    res_grid, res_w = _task_grid("res", caches, model, grids["res"])
    probs = res.aspp_decode(res_grid, text_feat, model.params,
                            (image_size, image_size))
    return WeakOut(scores=scores, anchor_proj=anchor_proj, text_proj=text_proj,
                   probs=probs, rec_weights=rec_w, res_weights=res_w)


def select_cells(scores: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-row argmax cell and top-k cells (ties to the lower index)."""
    top = np.stack([rec.topk_select(row, k) for row in scores])
    return top[:, 0], top


def predict(pair: Pair, model: Model, cache: SceneCache) -> tuple[rec.BoxPred, res.MaskPred]:
    """Inference for one pair: the box decoded at the argmax-similarity cell
    plus the thresholded mask."""
    with ag.no_grad():
        out = weak_forward([cache], [pair.expression.tokens], model)
    cell = int(rec.topk_select(out.scores.data[0], 1)[0])
    x, y, w, h = (float(v) for v in cache.cell_boxes[cell])
    box = rec.BoxPred(x, y, w, h, cell=cell, score=float(out.scores.data[0, cell]))
    return box, res.MaskPred(probs=out.probs.data[0])
