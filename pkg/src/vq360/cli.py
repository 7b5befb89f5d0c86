"""Command-line entry points: train, score, evaluate, gradcheck, synth.

Exit codes: 0 success, 2 configuration problem (bad flag value, malformed
run config or manifest, invalid checkpoint metadata), 3 data outside
supported bounds (missing frames, too-short videos, extent mismatches),
1 verification failure (a gradient check did not pass).

A run config file is flat ``key=value`` text: any TrainConfig field plus
the paths ``manifest``, ``out`` and ``checkpoint``.  Command-line flags
override file values.  Everything is validated before anything is
written.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

from . import data as data_io
from . import gradcheck as gradcheck_mod
from . import metrics as metrics_mod
from .errors import (
    CheckpointError,
    ConfigError,
    DataBoundsError,
    ShapeError,
    UndefinedCorrelationError,
)
from .model import QualityModel
from .training import (
    TrainConfig,
    _parse_field,
    config_to_pairs,
    load_model,
    save_model,
    score_video,
    train_loop,
)

PATH_KEYS = ("manifest", "out", "checkpoint")


def read_run_config(path: str) -> dict:
    """Flat key=value file -> dict of raw strings; rejects unknown keys."""
    known = set(TrainConfig.__dataclass_fields__) | set(PATH_KEYS)
    settings: dict[str, str] = {}
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read run config {path}: {exc}") from None
    with fh:
        for line_no, raw_line in enumerate(fh, start=1):
            line = raw_line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            key = key.strip()
            if not sep:
                raise ConfigError(f"{path} line {line_no}: expected key=value")
            if key not in known:
                raise ConfigError(f"{path} line {line_no}: unknown config key {key!r}")
            if key in settings:
                raise ConfigError(f"{path} line {line_no}: duplicate key {key!r}")
            settings[key] = value.strip()
    return settings


def build_train_config(settings: dict) -> TrainConfig:
    kwargs = {}
    for key, value in settings.items():
        f_def = TrainConfig.__dataclass_fields__[key]
        try:
            kwargs[key] = _parse_field(value, f_def.type)
        except (ValueError, ConfigError) as exc:
            raise ConfigError(f"config key {key!r}: {exc}") from None
    return TrainConfig(**kwargs)


def _echo_config(config: TrainConfig, extra: dict, stream):
    for key, value in config_to_pairs(config):
        stream.write(f"{key}={value}\n")
    for key, value in extra.items():
        if value is not None:
            stream.write(f"{key}={value}\n")


def _cmd_train(args) -> int:
    settings = read_run_config(args.config) if args.config else {}
    if args.manifest:
        settings["manifest"] = args.manifest
    if args.out:
        settings["out"] = args.out
    if args.seed is not None:
        settings["seed"] = str(args.seed)
    if args.precision is not None:
        settings["precision"] = str(args.precision)
    manifest_path = settings.pop("manifest", None)
    out_dir = settings.pop("out", None)
    extra_ckpt = settings.pop("checkpoint", None)
    if manifest_path is None:
        raise ConfigError("train needs a manifest (flag --manifest or config key)")

    config = build_train_config(settings)
    config.validate()
    manifest = data_io.load_manifest(manifest_path)

    _echo_config(config, {"manifest": manifest_path, "out": out_dir,
                          "checkpoint": extra_ckpt}, sys.stdout)
    result = train_loop(manifest, config, out_dir)
    if extra_ckpt is not None:
        save_model(extra_ckpt, result.model, config)
    final = result.losses[-1]
    sys.stdout.write(f"finished {len(result.losses)} iterations, "
                     f"final loss {final[1]:.9g}\n")
    if result.checkpoint_path:
        sys.stdout.write(f"checkpoint {result.checkpoint_path}\n")
    return 0


def _load_model_at_precision(path: str, precision: int | None) -> QualityModel:
    model = load_model(path)
    if precision is not None and precision != model.config.precision:
        config = replace(model.config, precision=precision).validate()
        state = model.state_arrays()
        model = QualityModel(config, np.random.default_rng(0))
        model.load_state_arrays({k: v.astype(config.dtype) for k, v in state.items()})
    return model


def _entries_for_split(manifest, split: str):
    if split == "all":
        return manifest.entries
    chosen = [e for e in manifest.entries if e.split == split]
    if not chosen:
        raise ConfigError(f"manifest has no entries with split={split}")
    return chosen


def _predict_entries(model, entries, clip_count, frame_interval):
    dtype = model.config.dtype
    predictions = []
    for entry in entries:
        frames = data_io.load_video(entry).astype(dtype)
        predictions.append(
            score_video(model, frames, clip_count, frame_interval)
        )
    return predictions


def _cmd_score(args) -> int:
    model = _load_model_at_precision(args.checkpoint, args.precision)
    manifest = data_io.load_manifest(args.manifest)
    entries = _entries_for_split(manifest, args.split)
    predictions = _predict_entries(model, entries, args.clip_count, args.frame_interval)
    lines = [f"{e.id} {p:.6f}" for e, p in zip(entries, predictions)]
    for line in lines:
        sys.stdout.write(line + "\n")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "scores.txt"), "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
    return 0


def _cmd_evaluate(args) -> int:
    model = _load_model_at_precision(args.checkpoint, args.precision)
    manifest = data_io.load_manifest(args.manifest)
    entries = _entries_for_split(manifest, args.split)
    predictions = _predict_entries(model, entries, args.clip_count, args.frame_interval)
    subjective = [e.score for e in entries]
    report, fitted = metrics_mod.evaluate_scores(predictions, subjective)

    sys.stdout.write(f"videos: {report.count}\n")
    for name in ("plcc", "srocc", "krocc"):
        value = getattr(report, name)
        sys.stdout.write(
            f"{name}: {'undefined' if value is None else f'{value:.6f}'}\n"
        )
    sys.stdout.write(f"rmse: {report.rmse:.6f}\n")
    sys.stdout.write(f"mae: {report.mae:.6f}\n")
    for note in report.notes:
        sys.stdout.write(f"note: {note}\n")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        ids = [e.id for e in entries]
        metrics_mod.write_report(
            os.path.join(args.out, "report.txt"),
            report, ids, predictions, fitted, subjective,
        )
        metrics_mod.write_scatter(
            os.path.join(args.out, "scatter.txt"), predictions, fitted, subjective,
        )
    return 0


def _cmd_gradcheck(args) -> int:
    results = gradcheck_mod.run(args.scope, seed=args.seed or 0)
    return 0 if all(r.passed for r in results) else 1


def _cmd_synth(args) -> int:
    config = data_io.SynthConfig(
        seed=args.seed if args.seed is not None else 0,
        contents=args.contents, frames=args.frames,
        height=args.height, width=args.width,
        family=args.family, levels=args.levels,
        storage=args.storage, holdout_contents=args.holdout_contents,
    )
    manifest = data_io.synth_generate(config, args.out)
    sys.stdout.write(
        f"wrote {len(manifest.entries)} videos under {os.path.abspath(args.out)}\n"
    )
    sys.stdout.write(f"manifest {os.path.join(os.path.abspath(args.out), 'manifest.txt')}\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vq360",
        description="Blind quality assessment for 360-degree video.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="optimize a model on a manifest")
    train.add_argument("--config", help="flat key=value run config file")
    train.add_argument("--manifest", help="dataset manifest path")
    train.add_argument("--out", help="directory for logs and the checkpoint")
    train.add_argument("--seed", type=int)
    train.add_argument("--precision", type=int, choices=(32, 64))
    train.set_defaults(handler=_cmd_train)

    def scoring_flags(p):
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--manifest", required=True)
        p.add_argument("--out")
        p.add_argument("--clip-count", type=int, default=6, dest="clip_count")
        p.add_argument("--frame-interval", type=int, default=3, dest="frame_interval")
        p.add_argument("--precision", type=int, choices=(32, 64))

    score = sub.add_parser("score", help="print per-video quality predictions")
    scoring_flags(score)
    score.add_argument("--split", choices=("train", "test", "all"), default="all")
    score.set_defaults(handler=_cmd_score)

    evaluate = sub.add_parser("evaluate", help="correlate predictions with scores")
    scoring_flags(evaluate)
    evaluate.add_argument("--split", choices=("train", "test", "all"), default="test")
    evaluate.set_defaults(handler=_cmd_evaluate)

    grad = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    grad.add_argument("--scope", default="all",
                      help="'all', a case name, or a case-name prefix")
    grad.add_argument("--seed", type=int)
    grad.set_defaults(handler=_cmd_gradcheck)

    synth = sub.add_parser("synth", help="generate a synthetic dataset")
    synth.add_argument("--out", required=True)
    synth.add_argument("--seed", type=int)
    synth.add_argument("--contents", type=int, default=8)
    synth.add_argument("--frames", type=int, default=30)
    synth.add_argument("--height", type=int, default=32)
    synth.add_argument("--width", type=int, default=64)
    synth.add_argument("--family", default="gaussian_blur",
                       choices=data_io.DISTORTION_FAMILIES)
    synth.add_argument("--levels", type=int, default=5)
    synth.add_argument("--storage", default="raw", choices=("raw", "png"))
    synth.add_argument("--holdout-contents", type=int, default=0,
                       dest="holdout_contents")
    synth.set_defaults(handler=_cmd_synth)
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except (ConfigError, CheckpointError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2
    except (DataBoundsError, ShapeError, UndefinedCorrelationError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 3


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
