"""Ablation runner: named grids over component toggles, bank subsets and
gate thresholds, repeated over seeds, summarized as CSV.

The detector pretraining stage is independent of every grid dimension, so
it runs once per seed and is shared across that seed's cells. A cell that
raises is marked failed in the results table; the remaining cells continue.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import train as training
from .config import Config, apply_overrides
from .model import precompute_caches
from .scenes import Dataset

RESULTS_HEADER = "cell_id,dvfe,scl,isl,alpha,seed,rec_acc,res_miou"
SUMMARY_HEADER = ("cell_id,dvfe,scl,isl,alpha,n_seeds,"
                  "rec_acc_mean,rec_acc_std,res_miou_mean,res_miou_std")


@dataclass
class Cell:
    cell_id: str
    overrides: dict

    def apply(self, cfg: Config) -> Config:
        return apply_overrides(cfg, [f"{k}={v}" for k, v in self.overrides.items()])


def component_grid() -> list[Cell]:
    return [
        Cell("baseline", {"dvfe": "false", "scl": "false", "isl": "false"}),
        Cell("dvfe", {"dvfe": "true", "scl": "false", "isl": "false"}),
        Cell("dvfe_scl", {"dvfe": "true", "scl": "true", "isl": "false"}),
        Cell("dvfe_scl_isl", {"dvfe": "true", "scl": "true", "isl": "true"}),
    ]


def ccm_grid() -> list[Cell]:
    cells = []
    for scl in (False, True):
        for isl in (False, True):
            name = "ccm_" + ("scl" if scl else "noscl") + ("_isl" if isl else "_noisl")
            cells.append(Cell(name, {"scl": str(scl).lower(),
                                     "isl": str(isl).lower()}))
    return cells


def alpha_grid(alphas=(0.1, 0.2, 0.3, 0.4)) -> list[Cell]:
    return [Cell(f"alpha_{a}", {"alpha": str(a), "scl": "true", "isl": "true"})
            for a in alphas]


def bank_grid() -> list[Cell]:
    subsets = [("dark",), ("dark", "dino"), ("dark", "dino", "sam")]
    return [Cell("bank_" + "_".join(s),
                 {"bank_sources": "[" + ",".join(f'"{x}"' for x in s) + "]"})
            for s in subsets]


GRIDS = {"components": component_grid, "ccm": ccm_grid, "alpha": alpha_grid,
         "bank": bank_grid}


@dataclass
class CellResult:
    cell: Cell
    seed: int
    rec_acc: float | None
    res_miou: float | None
    failed: bool = False


def _cell_flags(cfg: Config) -> tuple[str, str, str, str]:
    return (str(cfg.dvfe).lower(), str(cfg.scl).lower(), str(cfg.isl).lower(),
            repr(float(cfg.alpha)))


def _safe_flags(base: Config, cell: Cell) -> tuple[str, str, str, str]:
    try:
        return _cell_flags(cell.apply(base))
    except Exception:  # a cell whose overrides do not even parse
        return _cell_flags(base)


def run_ablation(base: Config, dataset: Dataset, cells: list[Cell],
                 seeds, out_dir=None, log=None) -> list[CellResult]:
    results: list[CellResult] = []
    for seed in seeds:
        seed_cfg = apply_overrides(base, [f"seed={int(seed)}"])
        frozen = training.pretrain(seed_cfg, dataset)
        caches = {split: precompute_caches(dataset.split(split), frozen, seed_cfg)
                  for split in ("train", "val", "test") if dataset.split(split)}
        for cell in cells:
            try:
                cfg = apply_overrides(cell.apply(base), [f"seed={int(seed)}"])
                # bank subsets change which sources are cached per scene
                cell_caches = caches
                if cfg.bank_sources != seed_cfg.bank_sources:
                    cell_caches = {s: precompute_caches(dataset.split(s), frozen, cfg)
                                   for s in caches}
                out = (Path(out_dir) / f"{cell.cell_id}_seed{seed}"
                       if out_dir is not None else None)
                r = training.train(cfg, dataset, out_dir=out, frozen=frozen,
                                   caches=dict(cell_caches))
                report = r.final["test"]
                results.append(CellResult(cell, seed, report.rec_acc,
                                          report.res_miou))
                if log:
                    log(f"{cell.cell_id} seed {seed}: rec {report.rec_acc:.3f} "
                        f"res {report.res_miou:.3f}")
            except Exception as e:  # mark the cell failed, keep going
                results.append(CellResult(cell, seed, None, None, failed=True))
                if log:
                    log(f"{cell.cell_id} seed {seed}: FAILED ({e})")
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "results.csv").write_text(results_csv(base, results))
        (out_dir / "summary.csv").write_text(summary_csv(base, results))
    return results


def results_csv(base: Config, results: list[CellResult]) -> str:
    lines = [RESULTS_HEADER]
    for r in results:
        dvfe, scl, isl, alpha = _safe_flags(base, r.cell)
        rec = "failed" if r.failed else repr(float(r.rec_acc))
        res = "failed" if r.failed else repr(float(r.res_miou))
        lines.append(f"{r.cell.cell_id},{dvfe},{scl},{isl},{alpha},{r.seed},{rec},{res}")
    return "\n".join(lines) + "\n"


def summary_csv(base: Config, results: list[CellResult]) -> str:
    lines = [SUMMARY_HEADER]
    by_cell: dict[str, list[CellResult]] = {}
    order = []
    for r in results:
        if r.cell.cell_id not in by_cell:
            order.append(r.cell.cell_id)
        by_cell.setdefault(r.cell.cell_id, []).append(r)
    for cid in order:
        rs = [r for r in by_cell[cid] if not r.failed]
        dvfe, scl, isl, alpha = _safe_flags(base, by_cell[cid][0].cell)
        if rs:
            rec = np.array([r.rec_acc for r in rs])
            res = np.array([r.res_miou for r in rs])
            stats = [repr(float(v)) for v in
                     (rec.mean(), rec.std(), res.mean(), res.std())]
        else:
            stats = ["failed"] * 4
        lines.append(f"{cid},{dvfe},{scl},{isl},{alpha},{len(rs)}," + ",".join(stats))
    return "\n".join(lines) + "\n"


def seed_means(base: Config, results: list[CellResult]) -> dict[str, dict[str, float]]:
    """cell_id -> {'rec_acc': mean, 'res_miou': mean} over non-failed seeds."""
    out: dict[str, dict[str, float]] = {}
    by_cell: dict[str, list[CellResult]] = {}
    for r in results:
        if not r.failed:
            by_cell.setdefault(r.cell.cell_id, []).append(r)
    for cid, rs in by_cell.items():
        out[cid] = {"rec_acc": float(np.mean([r.rec_acc for r in rs])),
                    "res_miou": float(np.mean([r.res_miou for r in rs]))}
    return out
