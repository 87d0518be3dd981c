"""Command-line front end: ``patchattn {reconstruct,bench,gradcheck,train-demo}``.

Exit codes: 0 success, 1 usage error, 2 I/O error, 3 check failure.
"""
from __future__ import annotations

import argparse
import csv
import sys
import time

import numpy as np

from .annfield import ConfigurationError, OracleCapError, SearchParams, exact_nn, run
from .attention import (ModeError, aggregation_attention, full_attention, hard_attention,
                        soft_knn_attention)
from .autodiff import check_attention_gradients, check_conv_gradients
from .bench import bench_rows
from .core import ImageIOError, PatchView, load_image, save_image
from .similarity import DegenerateInputError, Metric
from .training import ColorizerConfig, TrainingError, train_toy_colorizer, write_loss_csv

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_CHECK = 0, 1, 2, 3

METHODS = ("psal-k", "psal-aggreg", "full", "exact-nn")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--patch", type=int, default=7, help="patch size (odd)")
    p.add_argument("--k", type=int, default=3, help="candidates per query")
    p.add_argument("--iters", type=int, default=5, help="propagation / random-search rounds")
    p.add_argument("--metric", choices=("dot", "l2", "cosine"), default="l2")
    p.add_argument("--temp", type=float, default=0.1, help="softmax temperature")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1, help="worker threads; 1 is deterministic")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="patchattn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    rec = sub.add_parser("reconstruct", help="rebuild image A from the pixels of image B")
    rec.add_argument("image_a")
    rec.add_argument("image_b")
    rec.add_argument("-o", "--output", required=True, help="output PNG")
    rec.add_argument("--method", choices=METHODS, default="psal-k")
    rec.add_argument("--stride", type=int, default=10, help="key stride for --method full")
    rec.add_argument("--force", action="store_true", help="run exhaustive methods past the cap")
    rec.add_argument("--no-timing", action="store_true",
                     help="print 0 in the seconds column (reproducible stdout)")
    _common(rec)

    bench = sub.add_parser("bench", help="analytic attention memory table")
    bench.add_argument("--sides", type=int, nargs="+", default=[64, 128, 256, 512])
    bench.add_argument("--k", type=int, default=3)
    bench.add_argument("--patch", type=int, default=7)
    bench.add_argument("--window", type=int, default=50, help="local attention window side")
    bench.add_argument("--format", choices=("csv", "text"), default="csv")
    bench.add_argument("-o", "--output", help="write to file instead of stdout")

    grad = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    grad.add_argument("--mode", choices=("all", "soft_knn", "aggregation", "hard", "conv"),
                      default="all")
    grad.add_argument("--seeds", type=int, default=3, help="random instances per check")
    grad.add_argument("--size", type=int, default=6)
    grad.add_argument("--perturb", type=float, default=0.0, help=argparse.SUPPRESS)
    _common(grad)

    train = sub.add_parser("train-demo", help="toy guided colorization trainer")
    train.add_argument("target", help="RGB target; the network sees its gray version")
    train.add_argument("reference", help="RGB colour reference")
    train.add_argument("--mode", choices=("hard", "soft_knn", "aggregation"), default="soft_knn")
    train.add_argument("--steps", type=int, default=500)
    train.add_argument("--optimizer", choices=("momentum", "adam"), default="momentum")
    train.add_argument("--lr", type=float, default=0.5)
    train.add_argument("--features", type=int, default=16)
    train.add_argument("--loss-csv", required=True)
    train.add_argument("-o", "--output", required=True, help="colorized PNG")
    _common(train)
    train.set_defaults(patch=3)
    return parser


def _reconstruct(args) -> int:
    A = load_image(args.image_a)
    B = load_image(args.image_b)
    if A.shape[2] != B.shape[2]:
        raise UsageError(f"channel mismatch: A has {A.shape[2]}, B has {B.shape[2]}")
    if args.method == "full" and A.shape != B.shape:
        raise UsageError(f"full attention needs equal sizes, got {A.shape} and {B.shape}")
    Q = PatchView(A, args.patch, np.float32)
    K = PatchView(B, args.patch, np.float32)
    metric = Metric.parse(args.metric)
    k = args.k
    start = time.perf_counter()
    if args.method == "full":
        out = full_attention(Q, K, B, metric, args.temp, stride=args.stride, force=args.force)
    elif args.method == "exact-nn":
        k = 1
        field = exact_nn(Q, K, 1, metric, force=args.force, n_threads=args.threads)
        out = hard_attention(field, B)
    else:
        params = SearchParams(n_iter=args.iters, k=k, seed=args.seed, metric=metric,
                              n_threads=args.threads)
        field = run(Q, K, params)
        attend = soft_knn_attention if args.method == "psal-k" else aggregation_attention
        out = attend(Q, K, B, field, args.temp)
    seconds = 0.0 if args.no_timing else time.perf_counter() - start
    loss = float(np.mean((out - A.astype(np.float64)) ** 2))
    save_image(out, args.output)
    iters = args.iters if args.method.startswith("psal") else 0
    print(f"{args.method},{Q.n_patches},{args.patch},{k},{iters},{loss:.8g},{seconds:.3f}")
    return EXIT_OK


def _bench(args) -> int:
    rows = bench_rows(args.sides, k=args.k, p=args.patch, w=args.window)
    header = ("method", "n", "bytes", "si", "iec", "complexity")
    fh = open(args.output, "w", newline="") if args.output else sys.stdout
    try:
        if args.format == "csv":
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            writer.writerows(rows)
        else:
            table = [header] + [tuple(str(c) for c in row) for row in rows]
            widths = [max(len(r[i]) for r in table) for i in range(len(header))]
            for row in table:
                fh.write("  ".join(c.rjust(w) for c, w in zip(row, widths)).rstrip() + "\n")
    finally:
        if fh is not sys.stdout:
            fh.close()
    return EXIT_OK


def _gradcheck(args) -> int:
    modes = ("soft_knn", "aggregation", "hard", "conv") if args.mode == "all" else (args.mode,)
    results = []
    for mode in modes:
        for seed in range(args.seed, args.seed + args.seeds):
            if mode == "conv":
                results += check_conv_gradients(seed, perturb=args.perturb)
            else:
                results += check_attention_gradients(
                    mode, seed, size=args.size, k=args.k, patch_size=3,
                    metric=Metric.parse(args.metric), perturb=args.perturb)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_CHECK if failed else EXIT_OK


def _train_demo(args) -> int:
    target = load_image(args.target)
    ref = load_image(args.reference)
    if target.shape[2] != 3 or ref.shape[2] != 3:
        raise UsageError("train-demo needs RGB target and reference images")
    config = ColorizerConfig(mode=args.mode, k=args.k, patch_size=args.patch,
                             features=args.features, steps=args.steps,
                             optimizer=args.optimizer, learning_rate=args.lr,
                             temperature=args.temp, n_iter=args.iters,
                             metric=Metric.parse(args.metric), seed=args.seed)
    result = train_toy_colorizer(target, ref, config)
    write_loss_csv(result.losses, args.loss_csv)
    save_image(result.output, args.output)
    print(f"train-demo,{args.mode},k={config.k},steps={config.steps},"
          f"initial={result.initial_loss:.8g},final={result.final_loss:.8g}")
    return EXIT_OK


_COMMANDS = {"reconstruct": _reconstruct, "bench": _bench, "gradcheck": _gradcheck,
             "train-demo": _train_demo}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "threads", 1) < 1:
        print("patchattn: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return _COMMANDS[args.command](args)
    except (ImageIOError, OSError) as exc:
        print(f"patchattn: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OracleCapError as exc:
        print(f"patchattn: error: {exc} (CLI: add --force)", file=sys.stderr)
        return EXIT_USAGE
    except (UsageError, ConfigurationError, ModeError, DegenerateInputError,
            ValueError) as exc:
        print(f"patchattn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingError as exc:
        print(f"patchattn: {exc}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
