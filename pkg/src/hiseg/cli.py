"""Command-line interface: dataset generation, training, evaluation,
self-verification and log reporting."""

from __future__ import annotations

import argparse
import os
import sys

from . import data as data_mod
from .config import RunConfig, load_config
from .errors import HisegError
from .trainer import (
    full_metric_report,
    load_model_from_checkpoint,
    parse_record,
    render_metric_table,
    train,
    write_pgm,
)


def _cmd_gen_data(args) -> int:
    dataset = data_mod.generate(
        seed=args.seed, n=args.n, height=args.size, width=args.size,
        num_classes=args.classes, tail_ratio=args.tail_ratio, split=args.split)
    data_mod.write_dataset(dataset, args.out)
    counts = ",".join(str(int(c)) for c in dataset.manifest.class_pixel_counts)
    print(f"wrote {args.out}: n={args.n} size={args.size} classes={args.classes} freq={counts}")
    return 0


def _cmd_train(args) -> int:
    cfg = load_config(args.config)
    train_data = data_mod.read_dataset(args.data)
    eval_data = data_mod.read_dataset(args.eval_data) if args.eval_data else None
    result = train(cfg, train_data, eval_data, args.out, resume=args.resume)
    last = result["records"][-1] if result["records"] else None
    if last is not None:
        print(f"finished at epoch {last.epoch}: loss={last.loss!r} eval_dice={last.eval_dice!r}")
    print(f"log: {result['log']}")
    print(f"checkpoint: {result['checkpoint']}")
    return 0


def _cmd_eval(args) -> int:
    cfg = load_config(args.config) if args.config else None
    model, cfg, meta = load_model_from_checkpoint(args.checkpoint, cfg)
    dataset = data_mod.read_dataset(args.data)
    report, preds = full_metric_report(model, dataset, hd_variant=args.hd_variant)
    table = render_metric_table(report, fmt=args.format)
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            fh.write(table)
    sys.stdout.write(table)
    if args.dump_masks:
        os.makedirs(args.dump_masks, exist_ok=True)
        for i, pred in enumerate(preds):
            write_pgm(os.path.join(args.dump_masks, f"pred_{i:04d}.pgm"), pred,
                      dataset.manifest.num_classes)
        print(f"wrote {len(preds)} mask dumps to {args.dump_masks}")
    return 0


def _cmd_verify(args) -> int:
    from .verify import run_suite

    cfg = load_config(args.config) if args.config else RunConfig()
    results = run_suite(cfg, seeds=args.seeds)
    for res in results:
        print(res.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


def _cmd_report(args) -> int:
    with open(args.log, "r", encoding="utf-8") as fh:
        records = [parse_record(line) for line in fh if line.strip()]
    if not records:
        print("empty log")
        return 1
    keys = ["epoch", "lambda_w", "loss_stage1", "loss_stage2", "loss", "eval_dice", "lr"]
    if args.format == "csv":
        print(",".join(keys))
        for rec in records:
            print(",".join("" if rec.get(k) is None else repr(rec[k]) if k != "epoch"
                           else str(rec[k]) for k in keys))
    else:
        widths = {k: max(len(k), 12) for k in keys}
        print(" ".join(k.rjust(widths[k]) for k in keys))
        for rec in records:
            cells = []
            for k in keys:
                v = rec.get(k)
                if v is None:
                    cells.append("-".rjust(widths[k]))
                elif k == "epoch":
                    cells.append(str(v).rjust(widths[k]))
                else:
                    cells.append(f"{v:.6f}".rjust(widths[k]))
            print(" ".join(cells))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hiseg",
                                     description="two-stage hierarchical segmentation at desk scale")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic long-tailed dataset")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--tail-ratio", type=float, default=0.4)
    p.add_argument("--split", default="train")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_gen_data)

    p = sub.add_parser("train", help="train from a config and dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--eval-data", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--report", default=None)
    p.add_argument("--format", choices=("text", "csv"), default="text")
    p.add_argument("--hd-variant", choices=("avg", "max"), default="avg")
    p.add_argument("--dump-masks", default=None)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("verify", help="run the property/verification suite")
    p.add_argument("--config", default=None)
    p.add_argument("--seeds", type=int, default=20)
    p.set_defaults(fn=_cmd_verify)

    p = sub.add_parser("report", help="render a training log as a table")
    p.add_argument("--log", required=True)
    p.add_argument("--format", choices=("text", "csv"), default="text")
    p.set_defaults(fn=_cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except HisegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
