"""Training orchestration: loss assembly, the optimizer loop, evaluation,
and run artifacts (config echo, per-epoch log, checkpoints, results)."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import checkpoint, consistency, rec, res
from .autograd import Tensor
from .config import Config, from_dict, to_dict, to_json
from .model import (Model, SceneCache, build_model, init_frozen, init_weak,
                    precompute_caches, select_cells, weak_forward)
from .optim import Adam, cosine_lr
from .scenes import Dataset

LOG_HEADER = ("epoch,l_atc,l_res_raw,l_scl,l_inc,gate_open_frac,l_total,"
              "rec_acc,res_miou,lr")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class LossBundle:
    l_atc: float
    l_res_raw: float
    l_scl: float
    l_inc: float
    gate_open_fraction: float
    l_total: float


@dataclass
class BatchDecisions:
    """Values-level dispatch of one batch: which cells were selected, the
    boxes they decode to, the oracle masks and the gate states. Frozen and
    replayed during gradcheck so the checked function stays smooth."""
    pos_cells: np.ndarray
    topk_cells: np.ndarray
    boxes: np.ndarray
    pseudo: np.ndarray
    pseudo_modes: list[str]
    gates: np.ndarray


def _scale(t: Tensor, s: float) -> Tensor:
    return ag.mul(t, Tensor(np.asarray(s, dtype=t.dtype)))


def _dice_batch(p: Tensor, q: np.ndarray, eps: float) -> Tensor:
    """Per-row dice of (B, N) predictions against constant rows q."""
    qt = Tensor(q.astype(p.dtype))
    num = _scale(ag.tsum(ag.mul(p, qt), axes=(1,)), 2.0)
    qsq = (q * q).sum(axis=1) + eps
    den = ag.add(ag.tsum(ag.mul(p, p), axes=(1,)), Tensor(qsq.astype(p.dtype)))
    return ag.sub(Tensor(np.ones(p.shape[0], dtype=p.dtype)), ag.div(num, den))


def make_decisions(pairs, caches, out, cfg: Config, epoch: int, pair_ids,
                   pseudo_store: dict | None = None) -> BatchDecisions:
    bsz = len(pairs)
    pos_cells, topk_cells = select_cells(out.scores.data, cfg.top_k)
    boxes = np.stack([caches[i].cell_boxes[pos_cells[i]] for i in range(bsz)])
    pseudo, modes = [], []
    for i, pair in enumerate(pairs):
        pid = int(pair_ids[i]) if pair_ids is not None else i
        if pseudo_store is not None and pid in pseudo_store:
            mask, mode = pseudo_store[pid]
        else:
            pm = res.oracle_mask(pair.scene, tuple(boxes[i]), cfg.oracle,
                                 entropy=(epoch, pid))
            mask, mode = pm.mask, pm.mode
            if pseudo_store is not None:
                pseudo_store[pid] = (mask, mode)
        pseudo.append(mask)
        modes.append(mode)
    pseudo_arr = np.stack(pseudo)
    if cfg.isl:
        gates = np.array([
            consistency.gate_state(out.probs.data[i], boxes[i], pseudo_arr[i],
                                   cfg.alpha, cfg.gate_source).open
            for i in range(bsz)])
    else:
        gates = np.ones(bsz, dtype=bool)
    return BatchDecisions(pos_cells=pos_cells, topk_cells=topk_cells, boxes=boxes,
                          pseudo=pseudo_arr, pseudo_modes=modes, gates=gates)


def total_loss(pairs, caches, model: Model, *, epoch: int = 0, pair_ids=None,
               decisions: BatchDecisions | None = None,
               pseudo_store: dict | None = None
               ) -> tuple[LossBundle, Tensor, BatchDecisions]:
    """Full weak-phase forward and loss assembly for one batch.

    Returns the bundle of scalar loss values, the total-loss graph tensor,
    and the dispatch decisions actually used (pass them back in to hold the
    discrete selections fixed, e.g. for finite-difference checks)."""
    cfg = model.config
    bsz = len(pairs)
    if bsz < 2:
        raise ValueError("contrastive loss requires negatives (batch size >= 2)")
    dtype = cfg.dtype
    out = weak_forward(caches, [p.expression.tokens for p in pairs], model)
    if decisions is None:
        decisions = make_decisions(pairs, caches, out, cfg, epoch, pair_ids,
                                   pseudo_store)
    cells = out.scores.shape[1]
    k = cfg.top_k

    # anchor-text contrastive term
    pos_onehot = np.zeros((bsz, cells), dtype=dtype)
    pos_onehot[np.arange(bsz), decisions.pos_cells] = 1.0
    pos_scores = ag.tsum(ag.mul(out.scores, Tensor(pos_onehot)), axes=(1,))
    sel = np.zeros((bsz * k, bsz * cells), dtype=dtype)
    for j in range(bsz):
        for t in range(k):
            sel[j * k + t, j * cells + decisions.topk_cells[j, t]] = 1.0
    cdim = out.anchor_proj.shape[2]
    flat = ag.reshape(out.anchor_proj, (bsz * cells, cdim))
    cand = ag.reshape(ag.matmul(Tensor(sel), flat), (1, bsz * k, cdim))
    text3 = ag.reshape(out.text_proj, (bsz, 1, cdim))
    neg_scores = ag.tsum(ag.mul(cand, text3), axes=(2,))
    valid = np.ones((bsz, bsz * k), dtype=bool)
    for i in range(bsz):
        valid[i, i * k:(i + 1) * k] = False
    if cfg.neg_pool == "top1":
        keep = np.zeros_like(valid)
        keep[:, ::k] = True
        valid &= keep
    l_atc = rec.atc_from_scores(pos_scores, neg_scores, valid, cfg.temperature,
                                include_positive=not cfg.atc_literal)

    # segmentation terms against the oracle pseudo masks
    o = ag.clamp(out.probs, res.PROB_EPS, 1.0 - res.PROB_EPS)
    m = Tensor(decisions.pseudo.astype(dtype))
    inv = Tensor((1.0 - decisions.pseudo).astype(dtype))
    ll = ag.add(ag.mul(m, ag.log(o)), ag.mul(inv, ag.log(1.0 - o)))
    bce_vec = _scale(ag.tmean(ll, axes=(1, 2)), -1.0)
    l_res_raw = ag.tmean(bce_vec)
    gates_f = decisions.gates.astype(dtype)
    l_inc = ag.tmean(ag.mul(bce_vec, Tensor(gates_f)))

    l_scl = None
    if cfg.scl:
        h, w = out.probs.shape[1], out.probs.shape[2]
        box_masks = np.stack([consistency.rasterize(b, h, w).astype(dtype)
                              for b in decisions.boxes])
        px = ag.tmax(out.probs, axis=1)   # columnwise: (B, W)
        py = ag.tmax(out.probs, axis=2)   # rowwise: (B, H)
        dx = _dice_batch(px, box_masks.max(axis=1), consistency.DICE_EPS)
        dy = _dice_batch(py, box_masks.max(axis=2), consistency.DICE_EPS)
        l_scl = ag.tmean(ag.add(dx, dy))

    total = ag.add(_scale(l_atc, cfg.lambda_atc), _scale(l_inc, cfg.lambda_inc))
    if l_scl is not None:
        total = ag.add(total, _scale(l_scl, cfg.lambda_scl))
    if cfg.lambda_res != 0.0:
        total = ag.add(total, _scale(l_res_raw, cfg.lambda_res))

    bundle = LossBundle(
        l_atc=l_atc.item(), l_res_raw=l_res_raw.item(),
        l_scl=l_scl.item() if l_scl is not None else 0.0,
        l_inc=l_inc.item(),
        gate_open_fraction=float(decisions.gates.mean()),
        l_total=total.item())
    return bundle, total, decisions


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class PairRecord:
    pred_box: tuple
    rec_iou: float
    rec_hit: bool
    res_iou: float
    gate_open: bool


@dataclass
class EvalReport:
    rec_acc: float
    res_miou: float
    records: list[PairRecord] = field(default_factory=list)


def evaluate_pairs(model: Model, pairs, caches, batch_size: int = 64) -> EvalReport:
    cfg = model.config
    h = w = cfg.data.image_size
    records: list[PairRecord] = []
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start:start + batch_size]
        chunk_caches = caches[start:start + batch_size]
        with ag.no_grad():
            out = weak_forward(chunk_caches, [p.expression.tokens for p in chunk],
                               model)
        pos_cells, _ = select_cells(out.scores.data, 1)
        for i, pair in enumerate(chunk):
            box = tuple(float(v) for v in chunk_caches[i].cell_boxes[pos_cells[i]])
            target = pair.scene.objects[pair.expression.target_index]
            pred_raster = consistency.rasterize(box, h, w)
            rec_iou = consistency.iou(pred_raster,
                                      consistency.rasterize(target.gt_box, h, w))
            probs = out.probs.data[i]
            pred_mask = consistency.binarize(probs)
            res_iou = consistency.iou(pred_mask, target.gt_mask)
            gate = consistency.iou(pred_mask, pred_raster) >= cfg.alpha
            records.append(PairRecord(pred_box=box, rec_iou=rec_iou,
                                      rec_hit=rec_iou > 0.5, res_iou=res_iou,
                                      gate_open=gate))
    rec_acc = float(np.mean([r.rec_hit for r in records])) if records else 0.0
    res_miou = float(np.mean([r.res_iou for r in records])) if records else 0.0
    return EvalReport(rec_acc=rec_acc, res_miou=res_miou, records=records)


def evaluate(model: Model, dataset: Dataset, split: str,
             caches: list[SceneCache] | None = None) -> EvalReport:
    pairs = dataset.split(split)
    if not pairs:
        raise ValueError(f"split {split!r} is absent from the dataset")
    if caches is None:
        caches = precompute_caches(pairs, model.frozen, model.config)
    return evaluate_pairs(model, pairs, caches)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model: Model
    log_rows: list[dict]
    final: dict[str, EvalReport]
    out_dir: Path | None


def _fmt(v: float) -> str:
    return repr(float(v))


def pretrain(cfg: Config, dataset: Dataset):
    """Initialize and pretrain the frozen detector pathway."""
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 11)))
    frozen = init_frozen(rng, cfg)
    rec.pretrain_detector(dataset, frozen, epochs=cfg.pretrain_epochs,
                          lr=cfg.pretrain_lr, batch_size=cfg.batch_size,
                          seed=cfg.seed, dtype=cfg.dtype)
    return frozen


def train(cfg: Config, dataset: Dataset, out_dir=None,
          frozen: dict[str, Tensor] | None = None,
          caches: dict[str, list[SceneCache]] | None = None,
          log=None) -> TrainResult:
    cfg.validate()
    if frozen is None:
        frozen = pretrain(cfg, dataset)
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 13)))
    params = init_weak(rng, cfg)
    model = Model(config=cfg, frozen=frozen, params=params)

    eval_split = "val" if dataset.val else "test"
    if caches is None:
        caches = {}
    for split in ("train", eval_split, "test"):
        if split not in caches and dataset.split(split):
            caches[split] = precompute_caches(dataset.split(split), frozen, cfg)

    if out_dir is not None:
        out_dir = Path(out_dir)
        (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        (out_dir / "config.json").write_text(to_json(cfg))
        (out_dir / "dataset_ref.json").write_text(
            _dataset_ref(dataset))

    opt = Adam(model.params, lr=cfg.learning_rate)
    train_pairs = dataset.train
    train_caches = caches["train"]
    pseudo_store: dict | None = None
    log_rows: list[dict] = []
    step = 0
    for epoch in range(cfg.epochs):
        opt.lr = cosine_lr(cfg.learning_rate, epoch, max(cfg.epochs, 1))
        order = np.random.default_rng(
            np.random.SeedSequence((cfg.seed, 17, epoch))).permutation(len(train_pairs))
        if (cfg.freeze_pseudo_after is not None
                and epoch >= cfg.freeze_pseudo_after and pseudo_store is None):
            pseudo_store = {}
        sums = np.zeros(6)
        n_batches = 0
        for start in range(0, len(order), cfg.batch_size):
            ids = order[start:start + cfg.batch_size]
            if len(ids) < 2:
                continue
            pairs = [train_pairs[i] for i in ids]
            pcaches = [train_caches[i] for i in ids]
            bundle, total, _ = total_loss(
                pairs, pcaches, model, epoch=epoch, pair_ids=ids,
                pseudo_store=pseudo_store)
            if not np.isfinite(bundle.l_total):
                raise TrainingDiverged(
                    f"non-finite loss at step {step} (seed {cfg.seed}): {bundle}")
            opt.zero_grad()
            ag.backward(total)
            opt.step()
            sums += (bundle.l_atc, bundle.l_res_raw, bundle.l_scl, bundle.l_inc,
                     bundle.gate_open_fraction, bundle.l_total)
            n_batches += 1
            step += 1
        means = sums / max(n_batches, 1)
        report = evaluate_pairs(model, dataset.split(eval_split), caches[eval_split])
        row = {"epoch": epoch, "l_atc": means[0], "l_res_raw": means[1],
               "l_scl": means[2], "l_inc": means[3], "gate_open_frac": means[4],
               "l_total": means[5], "rec_acc": report.rec_acc,
               "res_miou": report.res_miou, "lr": opt.lr}
        log_rows.append(row)
        if log is not None:
            log(f"epoch {epoch}: total {means[5]:.4f} rec {report.rec_acc:.3f} "
                f"res {report.res_miou:.3f}")
        if out_dir is not None:
            checkpoint.save(out_dir / "checkpoints" / f"epoch{epoch}.ckpt",
                            {k: t.data for k, t in model.all_params().items()},
                            meta={"config": to_dict(cfg), "epoch": epoch})

    final = {}
    for split in ("val", "test"):
        if dataset.split(split):
            final[split] = evaluate_pairs(model, dataset.split(split),
                                          caches[split])
    if out_dir is not None:
        checkpoint.save(out_dir / "checkpoints" / "final.ckpt",
                        {k: t.data for k, t in model.all_params().items()},
                        meta={"config": to_dict(cfg), "epoch": cfg.epochs})
        _write_log(out_dir / "log.csv", log_rows)
        _write_results(out_dir / "results.csv", final)
    return TrainResult(model=model, log_rows=log_rows, final=final,
                       out_dir=out_dir)


def _dataset_ref(dataset: Dataset) -> str:
    return json.dumps({"seed": dataset.seed, "config": dataset.config,
                       "counts": dataset.counts()}, sort_keys=True, indent=2) + "\n"


def _write_log(path, rows) -> None:
    lines = [LOG_HEADER]
    for r in rows:
        lines.append(",".join([str(r["epoch"])] + [
            _fmt(r[k]) for k in ("l_atc", "l_res_raw", "l_scl", "l_inc",
                                 "gate_open_frac", "l_total", "rec_acc",
                                 "res_miou", "lr")]))
    Path(path).write_text("\n".join(lines) + "\n")


def _write_results(path, final: dict[str, EvalReport]) -> None:
    lines = ["split,rec_acc,res_miou"]
    for split in ("val", "test"):
        if split in final:
            lines.append(f"{split},{_fmt(final[split].rec_acc)},"
                         f"{_fmt(final[split].res_miou)}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_model(path) -> Model:
    """Rebuild a Model from a checkpoint (architecture from the embedded
    config echo, weights cast to the configured dtype)."""
    tensors, meta = checkpoint.load(path)
    cfg = from_dict(meta["config"])
    m = build_model(cfg)
    for name, t in m.all_params().items():
        if name not in tensors:
            raise checkpoint.CheckpointError(f"checkpoint missing tensor {name!r}")
        if tuple(tensors[name].shape) != t.shape:
            raise checkpoint.CheckpointError(
                f"checkpoint tensor {name!r} has shape {tensors[name].shape}, "
                f"expected {t.shape}")
        t.data = tensors[name].astype(cfg.dtype)
    for t in m.frozen.values():
        t.requires_grad = False
    return m
