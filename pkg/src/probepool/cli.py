"""Command-line entry points: synth / train / eval / hpo / report.

Relative paths are resolved against PROBEPOOL_STORE_DIR (stores) and
PROBEPOOL_OUT_DIR (everything written) when those are set. Contract
violations (bad dims, malformed files, unknown heads) exit nonzero.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .errors import ProbePoolError
from .heads import HEAD_KINDS, load_checkpoint, save_checkpoint
from .objective import AslConfig
from .probe import TrainConfig, evaluate, train
from .report import WIN_RULES, emit_table, emit_win_matrix, parse_result_csv, win_matrix
from .search import SearchSpace, run_search, write_journal
from .store import SynthSpec, load_dataset, write_synthetic_store

_RUN_LOG_HEADER = "epoch\tstep\tlr\tloss\tval_metric"


def _store_path(path: str) -> str:
    base = os.environ.get("PROBEPOOL_STORE_DIR")
    if base and not os.path.isabs(path):
        return os.path.join(base, path)
    return path


def _out_path(path: str) -> str:
    base = os.environ.get("PROBEPOOL_OUT_DIR")
    if base and not os.path.isabs(path):
        return os.path.join(base, path)
    return path


def _write_run_log(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_RUN_LOG_HEADER + "\n")
        for epoch, step, lr, loss, val in rows:
            lr_s = repr(lr) if lr != "" else ""
            loss_s = repr(loss) if loss != "" else ""
            val_s = repr(val) if val != "" else ""
            fh.write(f"{epoch}\t{step}\t{lr_s}\t{loss_s}\t{val_s}\n")


def _add_head_arg(parser):
    parser.add_argument("--head", required=True, choices=HEAD_KINDS, help="pooling head kind")


def _add_hyper_args(parser):
    parser.add_argument("--prototypes-per-class", type=int, default=20)
    parser.add_argument("--hidden-units", type=int, default=512)
    parser.add_argument("--conv-kernel", type=int, default=3)
    parser.add_argument("--conv-channels", type=int, default=256)
    parser.add_argument("--attn-heads", type=int, default=4)
    parser.add_argument("--attn-queries", type=int, default=1)


def _head_hyper(args) -> dict:
    return {
        "mlp": {"hidden_units": args.hidden_units},
        "conv": {"conv_kernel": args.conv_kernel, "conv_channels": args.conv_channels},
        "mhca": {"attn_heads": args.attn_heads},
        "abmilp": {"attn_queries": args.attn_queries},
        "proto": {"prototypes_per_class": args.prototypes_per_class},
        "protobin": {"prototypes_per_class": args.prototypes_per_class},
    }.get(args.head, {})


def _cmd_synth(args) -> int:
    spec = SynthSpec(
        num_classes=args.classes,
        embed_dim=args.embed_dim,
        time_bins=args.time_bins,
        freq_bins=args.freq_bins,
        min_labels=args.min_labels,
        max_labels=args.max_labels,
        event_footprint=args.footprint,
        noise_sigma=args.noise_sigma,
        correlation_rho=args.rho,
        seed=args.seed,
    )
    out = _out_path(args.out)
    n = write_synthetic_store(out, spec, args.records, split=args.split)
    print(f"wrote {args.records} records ({n} bytes) to {out}")
    return 0


def _cmd_train(args) -> int:
    train_ds = load_dataset(_store_path(args.store))
    val_ds = load_dataset(_store_path(args.val_store)) if args.val_store else None
    cfg = TrainConfig(
        head=args.head,
        lr=args.lr,
        weight_decay=args.wd,
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=args.seed,
        metric=args.metric,
        asl=AslConfig(),
        head_hyper=_head_hyper(args),
    )
    head, params, result, log_rows = train(train_ds, val_ds, cfg)
    out = _out_path(args.out)
    save_checkpoint(out, head, params)
    if args.log:
        _write_run_log(_out_path(args.log), log_rows)
    if result.final_val_metric is not None:
        print(f"final val {args.metric}: {result.final_val_metric:.6f}")
    print(f"checkpoint written to {out}")
    return 0


def _cmd_eval(args) -> int:
    ds = load_dataset(_store_path(args.store))
    head, params = load_checkpoint(_store_path(args.checkpoint))
    value = evaluate(ds, head, params, args.metric)
    print(f"{args.metric}: {value:.6f}")
    return 0


def _cmd_hpo(args) -> int:
    train_ds = load_dataset(_store_path(args.train_store))
    val_ds = load_dataset(_store_path(args.val_store)) if args.val_store else None
    test_ds = load_dataset(_store_path(args.test_store))
    base_cfg = TrainConfig(
        head=args.head,
        batch_size=args.batch_size,
        metric=args.metric,
        head_hyper=_head_hyper(args),
    )
    records, final, head_obj, params, _ = run_search(
        train_ds,
        val_ds,
        test_ds,
        head=args.head,
        master_seed=args.seed,
        k=args.top_k,
        n_trials=args.trials,
        n_sobol=args.sobol_trials,
        space=SearchSpace(),
        base_cfg=base_cfg,
    )
    out_dir = _out_path(args.out_dir)
    os.makedirs(out_dir, exist_ok=True)
    write_journal(os.path.join(out_dir, "journal.tsv"), records)
    save_checkpoint(os.path.join(out_dir, "winner.ckpt"), head_obj, params)
    rows = [
        f"{args.dataset},{args.backbone},{args.head},{final.val_mean!r},{final.val_sd!r},"
        f"{len(final.seed_metrics)},val_{args.metric}",
        f"{args.dataset},{args.backbone},{args.head},{final.test_metric!r},0.0,1,"
        f"test_{args.metric}",
    ]
    with open(os.path.join(out_dir, "result.csv"), "w", encoding="utf-8") as fh:
        fh.write("dataset,backbone,method,mean,sd,seeds,metric_name\n")
        fh.write("\n".join(rows) + "\n")
    print(
        f"winner lr={final.lr:.6g} wd={final.wd:.6g} "
        f"val {args.metric}={final.val_mean:.4f}+-{final.val_sd:.4f} "
        f"test {args.metric}={final.test_metric:.4f}"
    )
    print(f"journal, winner checkpoint, and result.csv written to {out_dir}")
    return 0


def _cmd_report(args) -> int:
    cells = []
    for path in args.results:
        with open(_store_path(path), encoding="utf-8") as fh:
            cells.extend(parse_result_csv(fh.read()))
    if args.metric_name:
        cells = [c for c in cells if c.metric_name == args.metric_name]
    if args.win_matrix:
        wm = win_matrix(cells, rule=args.win_rule)
        sys.stdout.write(emit_win_matrix(wm, fmt=args.format))
    else:
        sys.stdout.write(emit_table(cells, fmt=args.format))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="probepool",
        description="Pooling probes over cached frozen-encoder token maps",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic planted-event store")
    p.add_argument("--out", required=True)
    p.add_argument("--records", type=int, required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--embed-dim", type=int, default=64)
    p.add_argument("--time-bins", type=int, default=16)
    p.add_argument("--freq-bins", type=int, default=4)
    p.add_argument("--min-labels", type=int, default=2)
    p.add_argument("--max-labels", type=int, default=4)
    p.add_argument("--footprint", type=int, default=1)
    p.add_argument("--noise-sigma", type=float, default=0.1)
    p.add_argument("--rho", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="train one probe on a store")
    p.add_argument("--store", required=True)
    p.add_argument("--val-store")
    _add_head_arg(p)
    p.add_argument("--lr", type=float, required=True)
    p.add_argument("--wd", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--metric", choices=("map", "accuracy"), default="map")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="run log path (TSV)")
    _add_hyper_args(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a store")
    p.add_argument("--store", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--metric", choices=("map", "accuracy"), default="map")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("hpo", help="two-stage hyperparameter search + final test run")
    p.add_argument("--train-store", required=True)
    p.add_argument("--val-store")
    p.add_argument("--test-store", required=True)
    _add_head_arg(p)
    p.add_argument("--seed", type=int, required=True, help="master seed")
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--sobol-trials", type=int, default=25)
    p.add_argument("--top-k", type=int, default=3)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--metric", choices=("map", "accuracy"), default="map")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--dataset", default="synthetic")
    p.add_argument("--backbone", default="planted")
    _add_hyper_args(p)
    p.set_defaults(func=_cmd_hpo)

    p = sub.add_parser("report", help="render result tables or win matrices")
    p.add_argument("--results", nargs="+", required=True)
    p.add_argument("--format", choices=("csv", "markdown"), default="markdown")
    p.add_argument("--win-matrix", action="store_true")
    p.add_argument("--win-rule", choices=WIN_RULES, default="opponent-sd")
    p.add_argument("--metric-name")
    p.set_defaults(func=_cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ProbePoolError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
