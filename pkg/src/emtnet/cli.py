"""Command-line surface: one binary, subcommands for synthesis, training,
evaluation, sweeps, inference, parameter accounting, and latency benchmarks.

Conventions: machine-readable output (CSV, key=value reports) goes to
stdout, progress and warnings to stderr; an undefined metric prints as NA.
Exit codes: 0 success, 1 usage error, 2 runtime error.  Every subcommand
accepts --seed, --out, and --toy.
"""

from __future__ import annotations

import argparse
import statistics
import sys
import time
from pathlib import Path

import numpy as np
from PIL import Image
from threadpoolctl import threadpool_limits

from . import data as D
from . import model as M
from . import trainer as TR

__all__ = ["main", "build_parser"]


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags; this tool reserves 2 for runtime
    # errors, so usage problems exit 1 instead
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        sys.exit(1)


def _log(message):
    print(message, file=sys.stderr)


def _common_flags(p, out_default=None):
    p.add_argument("--seed", type=int, default=42, help="master RNG seed (default 42)")
    p.add_argument("--out", type=Path, default=out_default, help="output directory")
    p.add_argument("--toy", action="store_true",
                   help="toy width: channels/8, 64x64 inputs")


def _train_flags(p):
    p.add_argument("--wp", type=float, default=3.0,
                   help="positive-class loss weight (default 3)")
    p.add_argument("--wclf", type=float, default=None,
                   help="classification task weight (default 1.5)")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    p.add_argument("--threshold", type=float, default=0.5)


def _config_from(args, variant=None) -> TR.TrainConfig:
    wclf = 1.5 if getattr(args, "wclf", None) is None else args.wclf
    return TR.TrainConfig(
        variant=variant or getattr(args, "variant", M.EMT_NET),
        width="toy" if args.toy else "full",
        epochs=args.epochs,
        batch_size=args.batch,
        learning_rate=args.lr,
        optimizer=args.optimizer,
        w_p=args.wp,
        w_clf=wclf,
        threshold=getattr(args, "threshold", 0.5),
        seed=args.seed,
    )


def _print_report(report):
    for key in ("acc", "sen", "spe", "dsc", "iou"):
        value = getattr(report, key)
        print(f"{key}={'NA' if value is None else f'{value:.6f}'}")
    print(f"n_samples={report.n_samples}")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args):
    if args.n < 2:
        args.parser.error(f"--n must be at least 2, got {args.n}")
    out = args.out if args.out is not None else Path("synth-data")
    size = args.size if args.size is not None else (64 if args.toy else 224)
    manifest = D.synth_generate(args.n, args.seed, out, image_size=size,
                                malignant_fraction=args.malignant_fraction)
    _log(f"wrote {len(manifest)} samples under {out}")
    print(out / "manifest.csv")
    return 0


def cmd_train(args):
    if args.wclf is not None and args.variant != M.EMT_NET:
        _log(f"warning: --wclf is ignored for variant {args.variant}")
    config = _config_from(args)
    manifest = D.load_manifest(args.manifest)
    out = args.out if args.out is not None else Path("run")
    out.mkdir(parents=True, exist_ok=True)
    arrays = D.load_arrays(manifest, config.input_size)
    assignment = D.split(manifest, D.SplitSpec.holdout(seed=config.seed))[0]
    ckpt_path = out / "checkpoint.emtw"
    try:
        record, store = TR.train(config, arrays=arrays, assignment=assignment, log=_log)
    except TR.TrainingDiverged as exc:
        if exc.checkpoint is not None:
            M.save_weights(exc.checkpoint, ckpt_path)
            _log(f"training diverged; last good checkpoint kept at {ckpt_path}")
        raise
    M.save_weights(store, ckpt_path)
    with open(out / "history.csv", "w", encoding="utf-8") as fh:
        TR.write_rows(list(record.history_rows()), fh,
                      columns=("epoch", "train_loss", "val_loss", "val_metric"))
    idx = assignment["test"]
    report = TR.evaluate(M.graph_from_store(store),
                         arrays=(arrays[0][idx], arrays[1][idx], arrays[2][idx]),
                         threshold=config.threshold)
    _log(f"best epoch {record.best_epoch} ({record.selection}); "
         f"checkpoint at {ckpt_path}")
    _print_report(report)
    return 0


def cmd_eval(args):
    store = M.load_weights(args.checkpoint)
    manifest = D.load_manifest(args.manifest)
    report = TR.evaluate(store, manifest, threshold=args.threshold)
    _print_report(report)
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        with open(args.out / "report.csv", "w", encoding="utf-8") as fh:
            TR.write_rows([report.as_dict()], fh,
                          columns=("acc", "sen", "spe", "dsc", "iou", "n_samples"))
    return 0


def cmd_infer(args):
    store = M.load_weights(args.checkpoint)
    graph = M.graph_from_store(store)
    with Image.open(args.image) as im:
        image = np.asarray(im.convert("L"), dtype=np.uint8)
    sample = D.Sample(image, np.zeros_like(image), 0)
    x, _, _ = D.to_network_input(sample, graph.input_size)
    class_prob, mask_prob = M.forward(graph, x[None], "infer")
    out = args.out if args.out is not None else Path(".")
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    if mask_prob is not None:
        prob_map = mask_prob[0, 0].astype(np.float32)
        binary = (prob_map >= args.threshold).astype(np.uint8) * np.uint8(255)
        mask_path = out / f"{stem}_mask.png"
        prob_path = out / f"{stem}_prob.npy"
        Image.fromarray(binary, mode="L").save(mask_path)
        np.save(prob_path, prob_map)
        print(f"mask_png={mask_path}")
        print(f"prob_map={prob_path}")
    value = "NA" if class_prob is None else f"{float(class_prob[0]):.6f}"
    print(f"class_prob={value}")
    return 0


def _write_and_print(rows, out, filename, columns):
    TR.write_rows(rows, sys.stdout, columns=columns)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / filename, "w", encoding="utf-8") as fh:
            TR.write_rows(rows, fh, columns=columns)


def cmd_sweep_wp(args):
    config = _config_from(args, variant=M.SINGLE_CLF)
    manifest = D.load_manifest(args.manifest)
    rows = TR.sweep_wp(config, manifest, log=_log)
    _write_and_print(rows, args.out, "wp_sweep.csv", TR.ROW_COLUMNS)
    return 0


def cmd_sweep_grid(args):
    config = _config_from(args, variant=M.EMT_NET)
    manifest = D.load_manifest(args.manifest)
    rows = TR.sweep_grid(config, manifest, log=_log)
    _write_and_print(rows, args.out, "grid_sweep.csv", TR.ROW_COLUMNS)
    return 0


def cmd_params(args):
    width = "toy" if args.toy else "full"
    variants = M.VARIANTS if args.variant == "all" else (args.variant,)
    rows = [{"variant": v, "params": M.count_params(M.assemble(v, width))}
            for v in variants]
    _write_and_print(rows, args.out, "params.csv", ("variant", "params"))
    return 0


def _time_forward(graph, x, runs, warmup):
    for _ in range(warmup):
        M.forward(graph, x, "infer")
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        M.forward(graph, x, "infer")
        times.append((time.perf_counter() - t0) * 1000.0)
    return times


def cmd_bench(args):
    if args.runs < 20:
        args.parser.error(f"--runs must be at least 20, got {args.runs}")
    width = "toy" if args.toy else "full"
    graph = M.assemble(args.variant, width)
    M.init_weights(graph, seed=args.seed)
    rng = np.random.default_rng(args.seed)
    x = rng.random((1, 3, graph.input_size, graph.input_size), dtype=np.float32)
    rows = []
    for label, limit in (("single", 1), ("multi", None)):
        if limit is None:
            times = _time_forward(graph, x, args.runs, args.warmup)
        else:
            with threadpool_limits(limits=limit):
                times = _time_forward(graph, x, args.runs, args.warmup)
        rows.append({
            "threads": label,
            "mean_ms": statistics.fmean(times),
            "median_ms": statistics.median(times),
            "runs": args.runs,
        })
        _log(f"{label}-threaded: mean {rows[-1]['mean_ms']:.1f} ms over {args.runs} runs")
    _write_and_print(rows, args.out, "bench.csv", ("threads", "mean_ms", "median_ms", "runs"))
    return 0


# ---------------------------------------------------------------------------
# wiring
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="emtnet", description=__doc__.splitlines()[0])
    subs = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = subs.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--n", type=int, required=True, help="number of samples (>= 2)")
    p.add_argument("--size", type=int, default=None,
                   help="image side in pixels (default 224, or 64 with --toy)")
    p.add_argument("--malignant-fraction", type=float, default=0.4)
    _common_flags(p)
    p.set_defaults(func=cmd_synth, parser=p)

    p = subs.add_parser("train", help="train a variant on a manifest")
    p.add_argument("--variant", choices=M.VARIANTS, default=M.EMT_NET)
    p.add_argument("--manifest", type=Path, required=True)
    _train_flags(p)
    _common_flags(p)
    p.set_defaults(func=cmd_train, parser=p)

    p = subs.add_parser("eval", help="score a checkpoint on a manifest")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    _common_flags(p)
    p.set_defaults(func=cmd_eval, parser=p)

    p = subs.add_parser("infer", help="run one image through a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    _common_flags(p)
    p.set_defaults(func=cmd_infer, parser=p)

    p = subs.add_parser("sweep-wp", help="positive-weight sweep, K=4 cross-validation")
    p.add_argument("--manifest", type=Path, required=True)
    _train_flags(p)
    _common_flags(p)
    p.set_defaults(func=cmd_sweep_wp, parser=p)

    p = subs.add_parser("sweep-grid", help="5x5 task-weight grid on a holdout split")
    p.add_argument("--manifest", type=Path, required=True)
    _train_flags(p)
    _common_flags(p)
    p.set_defaults(func=cmd_sweep_grid, parser=p)

    p = subs.add_parser("params", help="learnable parameter counts")
    p.add_argument("--variant", choices=M.VARIANTS + ("all",), default="all")
    _common_flags(p)
    p.set_defaults(func=cmd_params, parser=p)

    p = subs.add_parser("bench", help="single-image forward latency")
    p.add_argument("--variant", choices=M.VARIANTS, default=M.EMT_NET)
    p.add_argument("--runs", type=int, default=20)
    p.add_argument("--warmup", type=int, default=3)
    _common_flags(p)
    p.set_defaults(func=cmd_bench, parser=p)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 0
    if getattr(args, "func", None) is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.func(args) or 0
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 0
    except (TR.TrainingDiverged, FileNotFoundError, ValueError, TypeError, OSError) as exc:
        print(f"emtnet: error: {exc}", file=sys.stderr)
        return 2
