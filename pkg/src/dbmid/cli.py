"""``dbmid`` command-line entry point.

Exit codes: 0 success, 1 user or configuration error, 2 internal error.
Values from ``--config FILE.json`` fill in flags not given on the command
line; keys are flag names with dashes replaced by underscores.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import traceback
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigurationError, DbmidError

log = logging.getLogger("dbmid")

DESCRIPTIONS = {
    "synth": "Write a seeded synthetic paired dataset (PNG pairs plus manifest.csv).",
    "train": "Train a deblurring network or the blur classifier on a synthesized dataset.",
    "classify": "Predict the blur class of one image.",
    "deblur": "Deblur one image with the classify-then-route workflow or blind deconvolution.",
    "eval": "Run the experiments in a JSON experiment file, writing CSVs, figures and summary.json.",
    "bench": "Time learned inference against blind deconvolution at several image sizes.",
    "plot": "Render a figure from a harness CSV.",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; here that is a user error
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _sizes(text: str) -> list[int]:
    try:
        sizes = [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not sizes or min(sizes) < 64:
        raise argparse.ArgumentTypeError("sizes must be integers >= 64")
    return sizes


def _global_flags(parser, default) -> None:
    g = parser.add_argument_group("global options")
    g.add_argument("--seed", type=int, default=default, help="master random seed (default 0)")
    g.add_argument("--verbose", "-v", action="count", default=default, help="more logging; repeat for debug")
    g.add_argument("--config", type=Path, default=default,
                   help="JSON file of default flag values; explicit flags win")
    g.add_argument("--workers", type=int, default=default,
                   help="worker threads for sweeps and synthesis (default: processor count)")


def build_parser() -> _Parser:
    # subcommand copies must not reset globals given before the command name
    common = _Parser(add_help=False)
    _global_flags(common, argparse.SUPPRESS)
    parser = _Parser(prog="dbmid", description="Blind deblurring workflow for synthetic microscopy images.")
    _global_flags(parser, None)
    parser.add_argument("--version", action="version", version=f"dbmid {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def add(name):
        return sub.add_parser(name, help=DESCRIPTIONS[name], description=DESCRIPTIONS[name], parents=[common])

    p = add("synth")
    p.add_argument("--out", type=Path, help="output directory (required)")
    p.add_argument("--preset", choices=("smoke", "desk", "paper"), default=None,
                   help="class counts: smoke 4, desk 200 per class, paper uses the original study's counts "
                        "(default desk)")
    p.add_argument("--master-seed", type=int, default=None, help="dataset seed (default: --seed)")
    p.add_argument("--size", type=int, default=None, help="phantom side length in px (default 128)")
    p.add_argument("--noise-sigma", type=float, default=None, help="Gaussian noise sigma (default 0)")
    p.add_argument("--phantom-kinds", default=None,
                   help="comma-separated phantom kinds: cells,usaf,texture,spots (default cells)")
    p.add_argument("--count", type=int, default=None, help="override the per-class sample count")

    p = add("train")
    p.add_argument("--task", choices=("defocus", "motion", "classifier"), help="what to train (required)")
    p.add_argument("--data", type=Path, help="dataset directory or manifest.csv (required)")
    p.add_argument("--out", type=Path, help="checkpoint path to write (required)")
    p.add_argument("--resume", type=Path, default=None, help="warm-start from this checkpoint")
    p.add_argument("--preset", choices=("desk", "paper"), default=None,
                   help="architecture and optimiser preset (default desk)")
    p.add_argument("--steps", type=int, default=None, help="deblur-network optimiser steps (default 2000)")
    p.add_argument("--epochs", type=int, default=None, help="classifier epochs (default 16)")
    p.add_argument("--defocus", type=Path, default=None,
                   help="motion task only: train for the cascade on Motion and Mixed pairs, "
                        "scoring Mixed pairs after this frozen defocus checkpoint")

    p = add("classify")
    p.add_argument("--model", type=Path, help="classifier checkpoint (required)")
    p.add_argument("--input", type=Path, help="PNG or TIFF image (required)")
    p.add_argument("--json", action="store_true", default=None, help="print class and scores as JSON")

    p = add("deblur")
    p.add_argument("--pipeline", type=Path, default=None,
                   help="pipeline JSON with checkpoint paths (required for --method dbmid)")
    p.add_argument("--input", type=Path, help="PNG or TIFF image (required)")
    p.add_argument("--output", type=Path, help="output image path (required)")
    p.add_argument("--report", type=Path, default=None, help="write the deblur report JSON here")
    p.add_argument("--method", choices=("dbmid", "blind-deconv"), default=None,
                   help="deblurring method (default dbmid)")
    p.add_argument("--force-class", choices=("InFocus", "Defocus", "Motion", "Mixed"), default=None,
                   help="skip classification and route as this class")
    p.add_argument("--iterations", type=int, default=None, help="blind-deconv iterations (default 30)")

    p = add("eval")
    p.add_argument("--experiment", type=Path, help="experiment JSON file (required)")
    p.add_argument("--out", type=Path, help="output directory (required)")
    p.add_argument("--no-figures", action="store_true", default=None, help="write CSVs only")

    p = add("bench")
    p.add_argument("--pipeline", type=Path, help="pipeline JSON with checkpoint paths (required)")
    p.add_argument("--sizes", type=_sizes, default=None, help="comma-separated square sizes (default 256,512)")
    p.add_argument("--reps", type=int, default=None, help="timed repetitions per size (default 10)")
    p.add_argument("--warmup", type=int, default=None, help="discarded warmup runs (default 2)")
    p.add_argument("--blind-iterations", type=int, default=None, help="blind-deconv iterations (default 30)")
    p.add_argument("--out", type=Path, help="runtime CSV path (required); a PNG is written next to it")

    p = add("plot")
    p.add_argument("--csv", type=Path, help="harness CSV (required)")
    p.add_argument("--kind", choices=("line", "heatmap"), default=None,
                   help="expected figure kind; checked against the CSV header")
    p.add_argument("--out", type=Path, default=None, help="image path (default: CSV path with .png)")
    return parser


DEFAULTS = {
    "seed": 0, "verbose": 0, "json": False, "no_figures": False, "preset": None, "method": "dbmid",
    "sizes": [256, 512], "reps": 10, "warmup": 2, "blind_iterations": 30, "iterations": 30,
}
REQUIRED = {
    "synth": ("out",), "train": ("task", "data", "out"), "classify": ("model", "input"),
    "deblur": ("input", "output"), "eval": ("experiment", "out"), "bench": ("pipeline", "out"),
    "plot": ("csv",),
}
PATHS = {"out", "data", "resume", "defocus", "model", "input", "pipeline", "output", "report", "experiment", "csv"}


def _merge_config(args, parser) -> None:
    """Fill unset flags from ``--config``; paths there are relative to the config file."""
    if args.config is not None:
        try:
            data = json.loads(args.config.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"{args.config}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigurationError(f"{args.config}: expected a JSON object")
        unknown = set(data) - set(vars(args)) - {"command"}
        if unknown:
            raise ConfigurationError(f"{args.config}: unknown keys {sorted(unknown)} for {args.command}")
        for key, value in data.items():
            if getattr(args, key) is not None:
                continue
            if key in PATHS and value is not None:
                value = args.config.parent / value
            elif key == "sizes" and isinstance(value, str):
                value = _sizes(value)
            setattr(args, key, value)
    for key, value in DEFAULTS.items():
        if hasattr(args, key) and getattr(args, key) is None:
            setattr(args, key, value)
    if args.workers is None:
        args.workers = os.cpu_count() or 1
    if args.workers < 1:
        raise ConfigurationError("--workers must be >= 1")
    missing = [k for k in REQUIRED[args.command] if getattr(args, k) is None]
    if args.command == "deblur" and args.method == "dbmid" and args.pipeline is None:
        missing.append("pipeline")
    if missing:
        sub = parser._subparsers._group_actions[0].choices[args.command]
        sub.print_usage(sys.stderr)
        raise UsageError(f"dbmid {args.command}: missing required " + ", ".join("--" + m.replace("_", "-")
                                                                              for m in missing))


# --------------------------------------------------------------------------
# Commands

def cmd_synth(args) -> int:
    from .blur_synthesis import DatasetConfig, synthesize_dataset
    overrides = {"master_seed": args.master_seed if args.master_seed is not None else args.seed}
    if args.size is not None:
        overrides["size"] = args.size
    if args.noise_sigma is not None:
        overrides["noise_sigma"] = args.noise_sigma
    if args.phantom_kinds:
        kinds = args.phantom_kinds
        overrides["phantom_kinds"] = kinds.split(",") if isinstance(kinds, str) else list(kinds)
    cfg = DatasetConfig.preset(args.preset or "desk", **overrides)
    if args.count is not None:
        cfg.counts = {k: int(args.count) for k in cfg.counts}
    rows = synthesize_dataset(cfg, args.out, workers=args.workers)
    (Path(args.out) / "dataset_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n",
                                                        encoding="utf-8")
    print(f"wrote {len(rows)} pairs to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .checkpoint import load_checkpoint, save_checkpoint
    preset = args.preset or "desk"
    out = Path(args.out)
    if not out.parent.is_dir():
        raise ConfigurationError(f"{out.parent}: directory does not exist")
    if args.task == "classifier":
        from .blur_classifier import (ClassifierConfig, ClassifierTrainConfig, build_classifier, fit_classifier,
                                      load_labeled)
        tc = ClassifierTrainConfig(epochs=args.epochs if args.epochs is not None else 16, seed=args.seed)
        images, labels = load_labeled(args.data)
        model = (load_checkpoint(args.resume, "classifier") if args.resume
                 else build_classifier(ClassifierConfig(), args.seed))
        history = fit_classifier(model, images, labels, tc).to_dict()
        history["train_config"] = dict(vars(tc))
    else:
        from .deblur_net import NetworkConfig, TrainConfig, build_network, fine_tune, train
        steps = args.steps if args.steps is not None else 2000
        desk = TrainConfig.desk_fine_tune if args.resume else TrainConfig.desk
        tc = (desk(max_steps=steps, seed=args.seed) if preset == "desk"
              else TrainConfig(max_steps=steps, seed=args.seed))
        if args.defocus and (args.task != "motion" or args.resume):
            raise ConfigurationError("--defocus applies to fresh --task motion training only")
        if args.resume:
            model = load_checkpoint(args.resume, args.task)
            model, history = fine_tune(model, args.data, tc, provenance=str(args.resume))
        else:
            model = build_network(NetworkConfig.preset(preset), args.seed, args.task)
            downstream = load_checkpoint(args.defocus, "defocus") if args.defocus else None
            model, history = train(model, args.data, tc, downstream, str(args.defocus))
        history = history.to_dict()
        history["train_config"] = tc.to_dict()
    save_checkpoint(model, out)
    history.update(task=args.task, preset=preset, seed=args.seed, data=str(args.data))
    log_path = out.with_name(out.name + ".log.json")
    log_path.write_text(json.dumps(history, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    print(f"wrote {out} (training log {log_path.name})")
    return 0


def cmd_classify(args) -> int:
    from .blur_classifier import classify
    from .checkpoint import load_checkpoint
    from .image_core import load_image
    model = load_checkpoint(args.model, "classifier")
    cls, scores = classify(load_image(args.input).pixels, model)
    if args.json:
        print(json.dumps({"class": cls.value, "scores": {c: float(s) for c, s in
                                                          zip(("InFocus", "Defocus", "Motion", "Mixed"), scores)}}))
    else:
        print(cls.value)
    return 0


def cmd_deblur(args) -> int:
    from .image_core import load_image, save_image
    image = load_image(args.input)
    if args.method == "blind-deconv":
        from .classical_baseline import DeconvConfig, blind_deconvolve
        out, kernel = blind_deconvolve(image.pixels, DeconvConfig(iterations=args.iterations))
        report = {"method": "blind-deconv", "iterations": args.iterations,
                  "kernel": np.round(kernel.matrix, 8).tolist()}
    else:
        from .pipeline import Pipeline, PipelineConfig
        pipe = Pipeline.from_config(PipelineConfig.from_json(args.pipeline))
        out, rep = pipe.deblur(image.pixels, force_class=args.force_class)
        report = {"method": "dbmid", **rep.to_dict()}
    save_image(out, args.output, image.bit_depth or 16)
    if args.report:
        Path(args.report).write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    print(f"wrote {args.output}")
    return 0


def cmd_eval(args) -> int:
    from .harness import run_experiment_file
    summary = run_experiment_file(args.experiment, args.out, workers=args.workers, figures=not args.no_figures)
    for name, info in summary.items():
        print(f"{name}: {info['csv']}")
    return 0


def cmd_bench(args) -> int:
    from .blur_synthesis import BlurClass
    from .classical_baseline import DeconvConfig, blind_deconvolve
    from .harness import benchmark_runtime, write_csv
    from .pipeline import Pipeline, PipelineConfig
    cfg = PipelineConfig.from_json(args.pipeline)
    pipe = Pipeline.from_config(cfg)
    if pipe.classifier is None and pipe.force_class is None:
        pipe.force_class = BlurClass.MIXED
    blind = DeconvConfig(iterations=args.blind_iterations)
    rows = benchmark_runtime({"dbmid": pipe.deblur, "blind_deconv": lambda im: blind_deconvolve(im, blind)},
                             args.sizes, args.reps, args.warmup, args.seed)
    path = write_csv("runtime", rows, args.out)
    from .plotting import plot_csv
    plot_csv(path)
    for r in rows:
        print(f"{r['method']:>12} {r['height']}x{r['width']}: median {r['median_s']:.3f} s")
    return 0


def cmd_plot(args) -> int:
    from .plotting import plot_csv
    print(f"wrote {plot_csv(args.csv, args.out, args.kind)}")
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "classify": cmd_classify, "deblur": cmd_deblur,
            "eval": cmd_eval, "bench": cmd_bench, "plot": cmd_plot}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            raise UsageError("dbmid: a command is required")
        _merge_config(args, parser)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ConfigurationError, argparse.ArgumentTypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (DbmidError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"internal error in {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        if args.verbose:
            traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
