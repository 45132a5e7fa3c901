"""Command-line entry point.

Exit codes: 0 ok, 1 usage, 2 I/O, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from . import data as datagen
from .gradcheck import format_report, run_suite
from .network import LayerError, NetworkSpec, builtin, parse_spec, propagate, replace_resizers
from .train import (
    CheckpointError,
    MetricsRow,
    NumericalError,
    TrainConfig,
    checkpoint_load,
    checkpoint_save,
    evaluate,
    read_metrics,
    train,
    write_metrics,
)


EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3
BUILTIN_ARCHS = ("tiny3", "tiny5")

log = logging.getLogger("dynopool")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def resolve_arch(arch: str, data: datagen.Dataset) -> NetworkSpec:
    """A built-in name sized for ``data``, or a path to a spec text file.

    Fixed pools and strided convolutions in a spec file become resizers.
    """
    c, h, w = data.shape
    if arch in BUILTIN_ARCHS:
        return builtin(arch, c, data.num_classes, (h, w))
    path = Path(arch)
    if not path.exists():
        raise UsageError(f"unknown arch {arch!r}: not one of {BUILTIN_ARCHS} and no such file")
    spec = replace_resizers(parse_spec(path.read_text()))
    if (spec.in_channels, *spec.input_size) != (c, h, w) or spec.num_classes != data.num_classes:
        raise UsageError(f"arch {arch} expects input {(spec.in_channels, *spec.input_size)} with "
                         f"{spec.num_classes} classes; data is {(c, h, w)} with {data.num_classes}")
    return spec


def _config(args) -> TrainConfig:
    return TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr_weights=args.lr_weights,
        lr_alpha=args.lr_alpha,
        lam=args.lam,
        seed=args.seed,
        schedule=args.schedule,
        freeze_alpha=args.freeze_alpha,
        shards=args.shards,
    )


# ------------------------------------------------------------------ commands
def cmd_gen(args) -> int:
    if args.size % 2 and args.transform in ("tile", "large"):
        raise UsageError(f"odd size {args.size}: the {args.transform} transform halves the image exactly")
    ds = datagen.generate(args.transform, args.seed, args.n, args.k, args.size)
    datagen.save(ds, args.out)
    n, c, h, w = ds.images.shape
    print(f"N={n} shape={c}x{h}x{w} K={ds.num_classes} -> {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    ds = datagen.load(args.data)
    spec = resolve_arch(args.arch, ds)
    cfg = _config(args)
    state = checkpoint_load(args.resume, spec, cfg.seed) if args.resume else None

    def persist(st):
        write_metrics(st.metrics, args.metrics)
        if args.ckpt:
            checkpoint_save(st, args.ckpt)

    state = train(spec, ds, cfg, state, on_epoch=persist)
    persist(state)
    last = state.metrics[-1]
    print(f"epoch {last.epoch}: eval_acc={last.eval_acc:.4f} gmacs={last.gmacs:.6g}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ds = datagen.load(args.data)
    spec = resolve_arch(args.arch, ds)
    state = checkpoint_load(args.ckpt, spec)
    loss, acc = evaluate(spec, state.params, ds)
    gmacs = propagate(spec, state.params.scales).ledger.current_gmacs()
    print(f"samples={len(ds)} loss={loss:.4f} acc={acc:.4f} gmacs={gmacs:.6g}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_suite(seed=args.seed, configs=args.configs)
    print(format_report(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"all {len(results)} checks passed")
    return EXIT_OK


def shape_svg(row: MetricsRow, width: int = 480, bar: int = 22) -> str:
    """Horizontal bar chart of per-layer H and W."""
    largest = max([max(s.h, s.w) for s in row.shapes] + [1])
    scale = (width - 150) / largest
    height = 30 + 2 * bar * len(row.shapes) + 10
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">',
        f'<text x="4" y="16">feature map sizes at epoch {row.epoch}</text>',
    ]
    y = 30
    for s in row.shapes:
        for label, value, colour in (("H", s.h, "#4a7ab0"), ("W", s.w, "#d08a3c")):
            parts.append(f'<text x="4" y="{y + bar - 8}">layer {s.layer_id} {label}</text>')
            parts.append(f'<rect x="110" y="{y + 2}" width="{value * scale:.1f}" height="{bar - 6}" fill="{colour}"/>')
            parts.append(f'<text x="{114 + value * scale:.1f}" y="{y + bar - 8}">{value}</text>')
            y += bar
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def format_report_text(rows: Sequence[MetricsRow]) -> str:
    last = rows[-1]
    best = max(rows, key=lambda r: r.eval_acc)
    lines = [f"final epoch: {last.epoch}", f"final gmacs: {last.gmacs:.9g}",
             f"best eval_acc: {best.eval_acc:.4f} (epoch {best.epoch})", "resizers:"]
    lines += [f"  {rid}: r_h={r_h:.9g} r_w={r_w:.9g}" for rid, (r_h, r_w) in last.ratios.items()]
    lines.append("layer shapes:")
    lines += [f"  {s.layer_id}: {s.h}x{s.w}" for s in last.shapes]
    return "\n".join(lines)


def cmd_report(args) -> int:
    rows = read_metrics(args.metrics)
    if not rows:
        raise ValueError(f"{args.metrics} holds no metrics rows")
    print(format_report_text(rows))
    if args.svg:
        Path(args.svg).write_text(shape_svg(rows[-1]))
        print(f"shape chart -> {args.svg}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    ds = datagen.load(args.data)
    spec = resolve_arch(args.arch, ds)
    lambdas = [float(v) for v in args.lambdas.split(",")]
    if any(v < 0 for v in lambdas):
        raise UsageError("lambda values must be >= 0")
    lines = ["lambda,seed,gmacs,eval_acc"]
    print(f"{'lambda':>8} {'seed':>5} {'gmacs':>12} {'eval_acc':>9}")
    for seed in args.seeds:
        for lam in lambdas:
            args.lam, args.seed = lam, seed
            last = train(spec, ds, _config(args)).metrics[-1]
            lines.append(f"{lam:.9g},{seed},{last.gmacs:.9g},{last.eval_acc:.9g}")
            print(f"{lam:>8g} {seed:>5} {last.gmacs:>12.6g} {last.eval_acc:>9.4f}", flush=True)
    if args.out:
        Path(args.out).write_text("\n".join(lines) + "\n")
    return EXIT_OK


# -------------------------------------------------------------------- parser
def _train_flags(p: argparse.ArgumentParser, data_required: bool = True) -> None:
    p.add_argument("--data", required=data_required, help="DYNP dataset file")
    p.add_argument("--arch", default="tiny3", help="tiny3, tiny5 or a spec file path")
    p.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    p.add_argument("--batch-size", type=int, default=TrainConfig.batch_size)
    p.add_argument("--lr-weights", type=float, default=TrainConfig.lr_weights)
    p.add_argument("--lr-alpha", type=float, default=TrainConfig.lr_alpha)
    p.add_argument("--schedule", choices=("cosine", "constant"), default=TrainConfig.schedule)
    p.add_argument("--freeze-alpha", action="store_true", help="keep every scale factor at its initial value")
    p.add_argument("--shards", type=int, default=1, help="batch shards (reduced in fixed order)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dynopool", description="Learnable-resolution CNN toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--transform", choices=datagen.TRANSFORMS, default="base")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=2048)
    p.add_argument("--k", type=int, default=4, help="number of classes")
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a network")
    _train_flags(p)
    p.add_argument("--lambda", dest="lam", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--metrics", required=True, help="metrics CSV output")
    p.add_argument("--ckpt", help="checkpoint output (rewritten every epoch)")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--arch", default="tiny3")
    p.add_argument("--ckpt", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--configs", type=int, default=50, help="random configurations per check")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report", help="summarize a metrics CSV")
    p.add_argument("--metrics", required=True)
    p.add_argument("--svg", help="write a per-layer shape chart")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("sweep", help="lambda sweep: final GMACs and accuracy")
    _train_flags(p)
    p.add_argument("--lambdas", default="0,0.1,1,10", help="comma-separated values")
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--out", help="CSV output")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, datagen.DatasetFormatError, CheckpointError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, LayerError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
