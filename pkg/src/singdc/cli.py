"""Command-line entry point: ``singdc {train,eval,gradcheck,params,synth,features}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import gradcheck as gc
from .audio import AudioError, FeatureStats, save_spectrogram
from .dataset import CLASSES, NUM_CLASSES, DataError, SynthSpec, index_dataset, load_spectrograms, synth_generate
from .metrics import compute_metrics
from .model import ModelConfig, Placement, build_model, count_params, load_checkpoint, save_checkpoint
from .training import NumericError, Strategy, TrainPlan, predict, train

log = logging.getLogger("singdc")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ----------------------------------------------------------------------------
# config files: "key = value" lines, keys named like the long flags
# ----------------------------------------------------------------------------

def read_config_file(path) -> dict:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _apply_config(parser, sub, argv):
    """Re-parse with defaults taken from ``--config`` so explicit flags still win."""
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        values = read_config_file(args.config)
        known = {a.dest: a for a in sub.choices[args.command]._actions}
        unknown = set(values) - set(known)
        if unknown:
            raise UsageError(f"{args.config}: unknown keys {sorted(unknown)}")
        defaults = {}
        for key, raw in values.items():
            action = known[key]
            defaults[key] = action.type(raw) if action.type else raw
            if action.choices is not None and defaults[key] not in action.choices:
                raise UsageError(f"{args.config}: {key} must be one of {list(action.choices)}")
        sub.choices[args.command].set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args


# ----------------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------------

def _load_split(data, split, threads):
    if data is None or split is None:
        raise UsageError("--data and --split are required")
    if not Path(split).is_file():
        raise DataError(f"{split}: split file not found")
    index = index_dataset(data, split)
    train_entries, test_entries = index.train(), index.test()
    if not train_entries:
        raise DataError("no training files: no indexed singer is listed in the split file")
    return train_entries, test_entries


def cmd_train(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resolved = {k: v for k, v in vars(args).items() if k != "func"}
    (out / "config.json").write_text(json.dumps(resolved, indent=2) + "\n")

    train_entries, test_entries = _load_split(args.data, args.split, args.threads)
    x, y = load_spectrograms(train_entries, args.threads)
    stats = FeatureStats.fit(x)
    x = np.stack([stats.apply(s) for s in x])
    if test_entries:
        xt, yt = load_spectrograms(test_entries, args.threads)
        xt = np.stack([stats.apply(s) for s in xt])
    else:
        xt = yt = None
    log.info("%d training clips, %d test clips", len(y), 0 if yt is None else len(yt))

    missing = [CLASSES[c] for c in range(NUM_CLASSES) if not np.any(y == c)]
    if missing:
        raise DataError(f"training split has no clips of {missing}")
    dtype = np.float64 if args.bits == 64 else np.float32
    config = ModelConfig(placement=args.placement)
    if args.divisor > 1:
        config = config.reduced(args.divisor)
    model = build_model(config, args.seed, dtype)
    plan = TrainPlan(args.strategy, args.alpha, args.epochs, args.crt_epochs, args.batch, args.lr, args.seed)

    with open(out / "epochs.jsonl", "w") as fh:
        def on_epoch(rec):
            fh.write(json.dumps(rec) + "\n")
            fh.flush()
            print(f"epoch {rec['epoch']:4d}  {rec['phase']:<14s} loss {rec['loss']:.4f}  "
                  f"train acc {rec['train_acc']:.3f}", flush=True)

        def on_phase_end(name, m):
            save_checkpoint(out / f"{name}.ckpt", m, stats)

        result = train(model, x, y, plan, eval_fn=None, on_epoch=on_epoch, on_phase_end=on_phase_end)
    save_checkpoint(out / "final.ckpt", model, stats)

    extra = {"placement": config.placement.value, "strategy": plan.strategy.value, "alpha": plan.alpha,
             "class_weights": result.class_weights.weights.tolist(),
             "class_counts": result.class_weights.counts.tolist()}
    if xt is not None:
        report = compute_metrics(predict(model, xt), yt, NUM_CLASSES)
        report.to_json(out / "report.json", split="test", **extra)
        report.write_confusion_csv(out / "confusion.csv", CLASSES)
        _print_report(report)
    else:
        (out / "report.json").write_text(json.dumps({"split": "test", "note": "no test singers", **extra},
                                                    indent=2) + "\n")
        print("no test singers in the split; report.json carries no metrics")
    return EXIT_OK


def _print_report(report):
    print(f"macro-F1 {report.macro_f1:.4f}  B-Acc {report.balanced_accuracy:.4f}  Acc {report.accuracy:.4f}  "
          f"top-2 {report.top2:.4f}  top-3 {report.top3:.4f}")


def cmd_eval(args) -> int:
    if not Path(args.checkpoint).is_file():
        raise DataError(f"{args.checkpoint}: checkpoint not found")
    model, stats = load_checkpoint(args.checkpoint)
    train_entries, test_entries = _load_split(args.data, args.split, args.threads)
    entries = {"test": test_entries, "train": train_entries, "all": train_entries + test_entries}[args.subset]
    if not entries:
        raise DataError(f"no files in the {args.subset} subset")
    x, y = load_spectrograms(entries, args.threads)
    if stats is None:
        log.warning("checkpoint has no normalization statistics; fitting them on the evaluated data")
        stats = FeatureStats.fit(x)
    x = np.stack([stats.apply(s) for s in x])
    report = compute_metrics(predict(model, x), y, NUM_CLASSES)
    text = report.to_json(args.out, split=args.subset, checkpoint=str(args.checkpoint))
    if args.out is None:
        print(text)
    _print_report(report)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    ops = args.ops or list(gc.CASES)
    unknown = set(ops) - set(gc.CASES)
    if unknown:
        raise UsageError(f"unknown ops {sorted(unknown)}; choose from {sorted(gc.CASES)}")
    reports = gc.run_suite(args.bits, range(args.seeds), ops)
    table = gc.summarize(reports)
    eps, tol = gc.DEFAULTS[args.bits]
    print(f"{args.bits}-bit, eps {eps:g}, tolerance {tol:g}, {args.seeds} seeds per op")
    print(f"{'op':<24s}{'max rel error':>16s}  result")
    for op, row in table.items():
        print(f"{op:<24s}{row['max_rel_error']:>16.3e}  {'pass' if row['passed'] else 'FAIL'}")
    if args.out:
        Path(args.out).write_text(json.dumps({"bits": args.bits, "eps": eps, "tolerance": tol,
                                              "ops": table}, indent=2) + "\n")
    return EXIT_OK if all(r["passed"] for r in table.values()) else EXIT_NUMERIC


def cmd_params(args) -> int:
    rows = {}
    for p in Placement:
        config = ModelConfig(placement=p)
        if args.divisor > 1:
            config = config.reduced(args.divisor)
        rows[p.value] = count_params(build_model(config))
    base = rows["none"].total
    print(f"{'placement':<10s}{'total':>10s}{'delta':>10s}")
    for name, pc in rows.items():
        print(f"{name:<10s}{pc.total:>10,d}{pc.total - base:>+10,d}")
    if args.verbose:
        for name, pc in rows.items():
            print(f"\n[{name}]")
            for layer, n in pc.per_layer.items():
                print(f"  {layer:<20s}{n:>10,d}")
    if args.out:
        Path(args.out).write_text(json.dumps(
            {name: {"total": pc.total, "delta": pc.total - base, "per_layer": pc.per_layer}
             for name, pc in rows.items()}, indent=2) + "\n")
    return EXIT_OK


def cmd_synth(args) -> int:
    kw = {"seed": args.seed}
    if args.counts:
        kw["counts"] = tuple(args.counts)
    if args.test_counts:
        kw["test_counts"] = tuple(args.test_counts)
    try:
        spec = SynthSpec(**kw)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    summary = synth_generate(spec, args.out)
    print(f"wrote {summary['files']} files to {args.out}")
    for name, n in summary["train_counts"].items():
        print(f"  {name:<10s}{n:>5d}")
    return EXIT_OK


def cmd_features(args) -> int:
    train_entries, test_entries = _load_split(args.data, args.split, args.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n = 0
    with open(out / "index.jsonl", "w") as fh:
        for split, entries in (("train", train_entries), ("test", test_entries)):
            for e in entries:
                specs, _ = load_spectrograms([e], 1)
                for k, spec in enumerate(specs):
                    name = f"{Path(e.path).stem}_{k:03d}.bin"
                    save_spectrogram(out / name, spec)
                    fh.write(json.dumps({"file": name, "source": e.path, "singer": e.singer,
                                         "class": CLASSES[e.label], "split": split}) + "\n")
                    n += 1
    print(f"cached {n} spectrograms in {out}")
    return EXIT_OK


# ----------------------------------------------------------------------------

def build_parser():
    parser = _Parser(prog="singdc", description="Deformable-convolution singing-technique classifier.")
    parser.add_argument("--log-level", default="WARNING",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def data_flags(p):
        p.add_argument("--data", help="corpus root (WAV files, singer id as first name token)")
        p.add_argument("--split", help="file listing training singers, one per line")
        p.add_argument("--threads", type=int, default=1, help="decode/spectrogram workers")

    p = sub.add_parser("train", help="train a model and evaluate it on the test singers")
    data_flags(p)
    p.add_argument("--placement", default="late", choices=[x.value for x in Placement])
    p.add_argument("--strategy", default="crt-wc", choices=[x.value for x in Strategy])
    p.add_argument("--alpha", type=float, default=0.2)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--crt-epochs", type=int, default=None, help="classifier re-training epochs (default half)")
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--bits", type=int, default=32, choices=[32, 64])
    p.add_argument("--divisor", type=int, default=1, help="divide every conv channel count by this")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="key = value file supplying defaults for the flags above")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    data_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--subset", default="test", choices=["test", "train", "all"])
    p.add_argument("--out", help="write the JSON report here instead of stdout")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    p.add_argument("--bits", type=int, default=64, choices=[32, 64])
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--ops", nargs="*")
    p.add_argument("--out")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("params", help="parameter counts for all placements")
    p.add_argument("--divisor", type=int, default=1)
    p.add_argument("--verbose", action="store_true", help="per-layer breakdown")
    p.add_argument("--out")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("synth", help="generate the synthetic long-tail corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--counts", type=int, nargs=NUM_CLASSES, help="training clips per class")
    p.add_argument("--test-counts", type=int, nargs=NUM_CLASSES, help="test clips per class")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("features", help="cache spectrograms for every clip")
    data_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_features)
    return parser, sub


def main(argv=None) -> int:
    parser, sub = build_parser()
    try:
        args = _apply_config(parser, sub, argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    t0 = time.perf_counter()
    try:
        code = args.func(args)
    except UsageError as exc:
        print(f"singdc {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, AudioError, FileNotFoundError, NotADirectoryError) as exc:
        print(f"singdc {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"singdc {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    log.info("%s finished in %.1f s", args.command, time.perf_counter() - t0)
    return code


if __name__ == "__main__":
    sys.exit(main())
