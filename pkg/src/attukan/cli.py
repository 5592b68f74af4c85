"""Command-line entry points: train, eval, gradcheck, ablate, render.

Exit codes: 0 success, 1 validation or tolerance failure, 2 I/O or parse error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .ablation import AXES, run_ablation
from .config import ConfigError, RunConfig, load_config
from .data import (
    ImageFormatError,
    SegmentationSample,
    load_directory,
    preprocess_sample,
    read_image,
    synth_dataset,
    write_image,
)
from .metrics import binarize
from .render import overlay
from .training import TrainingDiverged, evaluate, predict_full, prepare_split, train

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2
DEFAULT_EVAL_SEED = 12345


class UsageError(ValueError):
    """Bad argument combination or data spec."""


def _write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(f"{path}.tmp")
    tmp.write_text(json.dumps(obj, indent=1) + "\n")
    os.replace(tmp, path)


def _run_config(loaded: ckpt.Loaded) -> RunConfig:
    if loaded.run_config is None:
        return RunConfig(model=loaded.model.config)
    cfg = RunConfig.from_dict(loaded.run_config)
    if cfg.model.to_dict() != loaded.model.config.to_dict():
        raise ckpt.CheckpointError("run config echo does not match the checkpoint's model config")
    return cfg


def resolve_data(spec: str, cfg: RunConfig) -> list[SegmentationSample]:
    """``heldout`` (the run's validation split), ``synthetic[:N[:SEED]]`` or a dataset directory."""
    if spec == "heldout":
        return prepare_split(cfg).val
    if spec == "synthetic" or spec.startswith("synthetic:"):
        parts = spec.split(":")[1:]
        try:
            n = int(parts[0]) if parts else cfg.data.n_images
            seed = int(parts[1]) if len(parts) > 1 else DEFAULT_EVAL_SEED
        except ValueError:
            raise UsageError(f"bad synthetic spec {spec!r}; expected synthetic[:N[:SEED]]") from None
        if n < 1 or len(parts) > 2:
            raise UsageError(f"bad synthetic spec {spec!r}; expected synthetic[:N[:SEED]]")
        raw = synth_dataset(replace(cfg.synth, seed=seed), n)
        return [preprocess_sample(s, cfg.preprocess) for s in raw]
    return load_directory(spec, cfg.preprocess)


def _prob_predictor(prob_dir):
    """Predictor reading ``<prob_dir>/<id>.pgm`` as the probability map."""
    root = Path(prob_dir)

    def predict(s: SegmentationSample):
        prob = read_image(root / f"{s.id}.pgm")
        if prob.shape != s.label.shape:
            raise ValueError(f"{s.id}: probability map shape {prob.shape} != label shape {s.label.shape}")
        return prob

    return predict


def _model_predictor(loaded: ckpt.Loaded, cfg: RunConfig):
    return lambda s: predict_full(loaded.model, s.image, cfg.train.patch_size)


def _source(args) -> tuple[RunConfig, object]:
    """Run config and predictor from ``--ckpt`` or ``--prob``."""
    if (args.ckpt is None) == (args.prob is None):
        raise UsageError("give exactly one of --ckpt or --prob")
    if args.ckpt is not None:
        loaded = ckpt.load(args.ckpt)
        cfg = _run_config(loaded)
        return cfg, _model_predictor(loaded, cfg)
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    return cfg, _prob_predictor(args.prob)


# ---------------------------------------------------------------- commands


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    res = train(cfg, out_dir=out, resume=args.resume, verbose=not args.quiet)
    last = res.history[-1] if res.history else None
    summary = {"best": str(res.best_path), "final": str(res.final_path), "epochs_run": len(res.history)}
    if last is not None:
        summary.update(final_loss=last["loss"], final_val_f1=last["val_f1"])
    print(json.dumps(summary))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg, predict = _source(args)
    samples = resolve_data(args.data, cfg)
    report = evaluate(predict, samples)
    report["data"] = args.data
    _write_json(args.out, report)
    agg = report["aggregate"]
    print(" ".join(f"{k}={agg[k]:.4f}" for k in ("f1", "miou", "auc") if agg[k] is not None))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite

    suite = run_suite(args.only or None, seed=args.seed)
    print(suite.table())
    if suite.passed:
        print("gradcheck: all checks passed")
        return EXIT_OK
    for r in suite.results:
        if not r.passed:
            print(f"gradcheck FAILED: {r.name} (ops: {', '.join(sorted(r.ops_used))})", file=sys.stderr)
    if suite.uncovered:
        print(f"gradcheck FAILED: no check exercises {', '.join(suite.uncovered)}", file=sys.stderr)
    return EXIT_INVALID


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    result = run_ablation(cfg, args.axis, seeds, verbose=args.verbose)
    _write_json(args.out, result)
    for name, row in result["summary"].items():
        print(f"{name:22s} f1 {row['f1']:.4f}  miou {row['miou']:.4f}  auc {row['auc']:.4f}")
    return EXIT_OK


def cmd_render(args) -> int:
    cfg, predict = _source(args)
    samples = resolve_data(args.data, cfg)
    match = [s for s in samples if s.id == args.sample]
    if not match and args.sample.isdigit() and int(args.sample) < len(samples):
        match = [samples[int(args.sample)]]
    if not match:
        raise UsageError(f"sample {args.sample!r} not found in {args.data} ({len(samples)} samples)")
    s = match[0]
    prob = predict(s)
    img = overlay(s.image, binarize(prob, args.threshold), s.label, s.mask)
    write_image(args.out, img)
    print(f"wrote {args.out} for {s.id}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="attukan", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--out", default="runs/train", help="directory for the log and checkpoints")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    data_help = "heldout, synthetic[:N[:SEED]] or a directory with images/ labels/ [masks/]"
    e = sub.add_parser("eval", help="per-image metrics and their aggregate as JSON")
    e.add_argument("--ckpt")
    e.add_argument("--prob", help="directory of <id>.pgm probability maps instead of a checkpoint")
    e.add_argument("--config", help="run config for --prob (preprocessing, synthetic settings)")
    e.add_argument("--data", default="heldout", help=data_help)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference check of every layer and loss")
    g.add_argument("--only", nargs="*", help="run only these checks")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    a = sub.add_parser("ablate", help="train every arm of one ablation axis")
    a.add_argument("--config", required=True)
    a.add_argument("--axis", required=True, choices=AXES)
    a.add_argument("--seeds", help="comma-separated seeds shared by all arms (default: the config seed)")
    a.add_argument("--out", required=True)
    a.add_argument("--verbose", action="store_true")
    a.set_defaults(func=cmd_ablate)

    r = sub.add_parser("render", help="TP/FP/FN overlay as a PPM image")
    r.add_argument("--ckpt")
    r.add_argument("--prob", help="directory of <id>.pgm probability maps instead of a checkpoint")
    r.add_argument("--config", help="run config for --prob")
    r.add_argument("--data", default="heldout", help=data_help)
    r.add_argument("--sample", required=True, help="sample id or index within --data")
    r.add_argument("--threshold", type=float, default=0.5)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ImageFormatError, ckpt.CheckpointError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except (TrainingDiverged, UsageError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
