"""Command-line entry point.

Subcommands: gen-data, pretrain-det, train, eval, ablate, gradcheck.
Exit codes: 0 success, 1 usage error (unknown flags/keys), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import ablation, checkpoint, config as config_mod, gradchecks, scenes, train
from .autograd import Tensor
from .config import Config, ConfigError


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _load_config(args) -> Config:
    cfg = config_mod.load(args.config) if args.config else Config()
    cfg.validate()
    if args.set:
        cfg = config_mod.apply_overrides(cfg, args.set)
    return cfg


def _add_common(p):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="config override (dotted keys for nested sections)")


def _load_dataset(path):
    return scenes.load(path)


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    if args.seed is not None:
        cfg = config_mod.apply_overrides(cfg, [f"data.seed={args.seed}"])
    if args.count is not None:
        cfg = config_mod.apply_overrides(cfg, [f"data.count={args.count}"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    d = cfg.data
    dataset = scenes.generate(d.seed, d.count, image_size=d.image_size,
                              min_objects=d.min_objects, max_objects=d.max_objects,
                              split_fractions=d.split_fractions)
    path = out / "dataset.wgl"
    scenes.save(dataset, path)
    print(f"wrote {path} ({dataset.counts()})")
    return 0


def cmd_pretrain_det(args) -> int:
    cfg = _load_config(args)
    dataset = _load_dataset(args.data)
    frozen = train.pretrain(cfg, dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "detector.ckpt"
    checkpoint.save(path, {k: t.data for k, t in frozen.items()},
                    meta={"config": config_mod.to_dict(cfg), "stage": "detector"})
    print(f"wrote {path}")
    return 0


def _load_detector(path, cfg: Config):
    tensors, _ = checkpoint.load(path)
    frozen = {}
    for name, arr in tensors.items():
        frozen[name] = Tensor(arr.astype(cfg.dtype), requires_grad=False)
    return frozen


def cmd_train(args) -> int:
    cfg = _load_config(args)
    dataset = _load_dataset(args.data)
    frozen = _load_detector(args.detector, cfg) if args.detector else None
    result = train.train(cfg, dataset, out_dir=args.out, frozen=frozen,
                         log=lambda s: print(s, flush=True))
    for split, report in result.final.items():
        print(f"{split}: rec_acc {report.rec_acc:.4f} res_miou {report.res_miou:.4f}")
    return 0


def cmd_eval(args) -> int:
    model = train.load_model(args.checkpoint)
    dataset = _load_dataset(args.data)
    report = train.evaluate(model, dataset, args.split)
    print(f"{args.split}: rec_acc {report.rec_acc:.4f} res_miou {report.res_miou:.4f}")
    if args.out:
        Path(args.out).write_text(json.dumps(
            {"split": args.split, "rec_acc": report.rec_acc,
             "res_miou": report.res_miou}, indent=2) + "\n")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    dataset = _load_dataset(args.data)
    if args.grid not in ablation.GRIDS:
        raise UsageError(f"unknown grid {args.grid!r}; "
                         f"choose from {sorted(ablation.GRIDS)}")
    cells = ablation.GRIDS[args.grid]()
    seeds = list(range(1, args.seeds + 1))
    ablation.run_ablation(cfg, dataset, cells, seeds, out_dir=args.out,
                          log=lambda s: print(s, flush=True))
    print(f"wrote {Path(args.out) / 'results.csv'}")
    return 0


def cmd_gradcheck(args) -> int:
    reports = gradchecks.run_all(n_instances=args.instances)
    payload = [json.loads(r.to_json()) for r in reports]
    text = json.dumps(payload, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    failures = [r for r in reports if not r.passed]
    for r in reports:
        status = "ok" if r.passed else "FAIL"
        print(f"{status:4s} {r.op}: max_rel_err {r.max_rel_err:.3e} "
              f"({r.n_checked} coords)")
    return 0 if not failures else 2


def build_parser() -> _Parser:
    parser = _Parser(prog="weakground",
                     description="weakly supervised box+mask grounding "
                                 "on synthetic scenes")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate and serialize a dataset")
    _add_common(p)
    p.add_argument("--seed", type=int, help="dataset seed")
    p.add_argument("--count", type=int, help="total number of pairs")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain-det", help="pretrain the class-agnostic detector")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset file")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_pretrain_det)

    p = sub.add_parser("train", help="weakly supervised training run")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset file")
    p.add_argument("--detector", help="pretrained detector checkpoint "
                                      "(pretrains in-run when omitted)")
    p.add_argument("--out", required=True, help="run output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset file")
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--out", help="optional JSON report path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation grid over seeds")
    _add_common(p)
    p.add_argument("--grid", required=True,
                   help=f"grid name: {sorted(ablation.GRIDS)}")
    p.add_argument("--seeds", type=int, default=5, help="number of seeds (1..N)")
    p.add_argument("--data", required=True, help="dataset file")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference checks of all losses")
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--out", help="optional JSON report path")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # runtime failure
        print(f"failed: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
