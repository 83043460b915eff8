"""Command line entry point: ``saliency-peft <command>``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from ..backbone import freeze_partition
from ..metrics import MetricsReport
from ..model import SaliencyModel
from ..peft import count_trained_params
from .config import RunConfig
from .data import make_blob_corpus
from .training import evaluate, predict, train


def _train(args):
    cfg = RunConfig.load(args.config)
    if args.data:
        cfg.paths.train_data = args.data
    if args.out:
        cfg.paths.out_dir = args.out
    if args.steps is not None:
        cfg.steps = args.steps
    result = train(cfg)
    first, last = result.losses[0][2], result.losses[-1][2]
    print(f"trained {cfg.steps} steps: total loss {first:.4f} -> {last:.4f}")
    print(f"checkpoint: {result.checkpoint}")
    print(f"step log:   {result.log_path}")


def _evaluate(args):
    report = evaluate(args.checkpoint, args.data, args.out)
    print(f"images {report.n_images} (excluded from F: {report.n_excluded_f})")
    print(f"MAE    {report.mae:.4f}")
    print(f"max F  {report.max_f:.4f}")
    print(f"max E  {report.max_e:.4f}")
    print(f"S      {report.s_measure:.4f}")


def _predict(args):
    print(predict(args.checkpoint, args.image, args.out))


def _params(args):
    cfg = RunConfig.load(args.config)
    model = SaliencyModel(cfg.model_config())
    report = count_trained_params(model, freeze_partition(model))
    print(report.to_json() if args.json else report.table())


def _curves(args):
    MetricsReport.read_json(args.report).write_curves(args.out)
    print(f"wrote fm_curve.csv and pr_curve.csv to {args.out}")


def _make_corpus(args):
    print(make_blob_corpus(args.out, args.n, args.size, args.seed))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="saliency-peft", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train side modules and decoder")
    p.add_argument("--config", required=True)
    p.add_argument("--data", help="override paths.train_data")
    p.add_argument("--out", help="override paths.out_dir")
    p.add_argument("--steps", type=int)
    p.set_defaults(func=_train)

    p = sub.add_parser("evaluate", help="metrics for a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="directory for report.json and curve CSVs")
    p.set_defaults(func=_evaluate)

    p = sub.add_parser("predict", help="write a saliency map for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_predict)

    p = sub.add_parser("params", help="trained parameter counts for a config")
    p.add_argument("--config", required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=_params)

    p = sub.add_parser("curves", help="F-measure and PR curve CSVs from a report")
    p.add_argument("--report", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_curves)

    p = sub.add_parser("make-corpus", help="write a synthetic blob dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=50)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_make_corpus)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        args.func(args)
    except (ValueError, OSError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
