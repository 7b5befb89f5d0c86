"""Clip sampling, the MSE objective, Adam, and the training loop.

Determinism contract: a single numpy Generator seeded from the config
drives parameter initialization and every batch/clip draw, in a fixed
order, so (seed, config, manifest) fully determine the loss trajectory.
Wall-clock timings are therefore logged to a separate file; the loss log
must be byte-identical between same-seed runs.
"""

from __future__ import annotations

import hashlib
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import data as data_io
from . import engine as eng
from .engine import Parameter, Tensor
from .errors import ConfigError, DataBoundsError
from .model import ModelConfig, QualityModel, config_to_pairs

LOSS_LOG_NAME = "train_log.txt"
TIMING_LOG_NAME = "timing_log.txt"
CHECKPOINT_NAME = "model.ckpt"
CONFIG_ECHO_NAME = "config_effective.txt"


@dataclass
class TrainConfig:
    learning_rate: float = 3e-4
    weight_decay: float = 5e-5
    batch_size: int = 6
    iterations: int = 2000
    clip_count: int = 6        # clips sampled per video (S)
    frame_interval: int = 3    # gap between triple frames (delta-t)
    reduction: int = 8
    seed: int = 0
    channels: int = 16
    precision: int = 32
    geometry: str = "sphere"
    long_skip: bool = True
    spatial_attention: bool = True
    fusion_mode: str = "selective"
    motion_enabled: bool = True
    motion_depth: int = 1
    temporal_enabled: bool = True
    normalize_similarity: bool = False
    embed_channels: int | None = None
    blocks_per_stage: tuple = (3, 4, 6)

    def validate(self):
        if self.clip_count < 1:
            raise ConfigError(f"clip_count must be >= 1, got {self.clip_count}")
        if self.frame_interval < 1:
            raise ConfigError(f"frame_interval must be >= 1, got {self.frame_interval}")
        if self.batch_size < 2:
            raise ConfigError(
                f"batch_size must be >= 2 (batch-norm training), got {self.batch_size}"
            )
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")
        self.model_config().validate()
        return self

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            channels=self.channels,
            blocks_per_stage=tuple(self.blocks_per_stage),
            reduction=self.reduction,
            geometry=self.geometry,
            long_skip=self.long_skip,
            spatial_attention=self.spatial_attention,
            fusion_mode=self.fusion_mode,
            motion_enabled=self.motion_enabled,
            motion_depth=self.motion_depth,
            temporal_enabled=self.temporal_enabled,
            normalize_similarity=self.normalize_similarity,
            embed_channels=self.embed_channels,
            precision=self.precision,
        )

    def hash(self) -> str:
        text = "\n".join(f"{k}={v}" for k, v in config_to_pairs(self))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def sample_clips(frame_count: int, clip_count: int, frame_interval: int,
                 mode: str, rng: np.random.Generator | None = None):
    """Choose clip centres and return (t - dt, t, t + dt) index triples.

    Valid centres live in [dt, T - dt - 1].  'eval' spaces them evenly
    and deterministically over that range; 'train' draws them uniformly
    without replacement (ascending).
    """
    t_total, s, dt = int(frame_count), int(clip_count), int(frame_interval)
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    lo, hi = dt, t_total - dt - 1
    minimum = 2 * dt + s
    if hi - lo + 1 < s:
        raise DataBoundsError(
            f"video too short: {t_total} frames cannot host {s} clips at interval "
            f"{dt}; need at least {minimum} frames"
        )
    if mode == "eval":
        if s == 1:
            centres = [(lo + hi) // 2]
        else:
            centres = [lo + (k * (hi - lo)) // (s - 1) for k in range(s)]
    else:
        if rng is None:
            raise ConfigError("train-mode sampling needs a random generator")
        draw = rng.choice(np.arange(lo, hi + 1), size=s, replace=False)
        centres = sorted(int(c) for c in draw)
    return [(c - dt, c, c + dt) for c in centres]


def mse_loss(predicted: Tensor, target: Tensor) -> Tensor:
    if predicted.shape != target.shape:
        raise ConfigError(
            f"loss operands differ: {predicted.shape} vs {target.shape}"
        )
    diff = eng.sub(predicted, target)
    return eng.mean_all(eng.mul(diff, diff))


class Adam:
    """Adam with bias correction; weight decay joins the gradient (L2)."""

    def __init__(self, params, learning_rate: float, weight_decay: float = 0.0,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params: list[Parameter] = list(params)
        self.learning_rate = float(learning_rate)
        self.weight_decay = float(weight_decay)
        self.beta1, self.beta2, self.eps = float(beta1), float(beta2), float(eps)
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grads(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= self.learning_rate * update


@dataclass
class TrainResult:
    model: QualityModel
    losses: list = field(default_factory=list)   # (iteration, loss) pairs
    config_hash: str = ""
    checkpoint_path: str | None = None
    loss_log_path: str | None = None


def build_model(config: TrainConfig):
    """Seeded model construction; returns (model, generator) with the
    generator positioned exactly where training draws must continue."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    model = QualityModel(config.model_config(), rng)
    return model, rng


def draw_batch(rng: np.random.Generator, cache: list, config: TrainConfig):
    """One training batch: (clips array [B,S,3,3,H,W], targets [B], ids).

    ``cache`` is a list of (entry, frames [T,3,H,W]) pairs in manifest
    order; consumption order of ``rng`` is fixed: video choice first,
    then clip centres per chosen video in batch order.
    """
    chosen = rng.choice(len(cache), size=config.batch_size, replace=False)
    dtype = config.model_config().dtype
    clips = None
    targets = np.empty(config.batch_size, dtype=dtype)
    ids = []
    for slot, video_index in enumerate(chosen):
        entry, frames = cache[int(video_index)]
        triples = sample_clips(entry.frames, config.clip_count,
                               config.frame_interval, "train", rng)
        if clips is None:
            h, w = frames.shape[-2], frames.shape[-1]
            clips = np.empty(
                (config.batch_size, config.clip_count, 3, 3, h, w), dtype=dtype
            )
        for c_idx, (prev_t, mid_t, next_t) in enumerate(triples):
            clips[slot, c_idx, 0] = frames[prev_t]
            clips[slot, c_idx, 1] = frames[mid_t]
            clips[slot, c_idx, 2] = frames[next_t]
        targets[slot] = data_io.normalize_score(entry.score)
        ids.append(entry.id)
    return clips, targets, ids


def _load_training_cache(manifest, config: TrainConfig):
    entries = [e for e in manifest.entries if e.split == "train"]
    if not entries:
        raise ConfigError("manifest contains no entries with split=train")
    if config.batch_size > len(entries):
        raise ConfigError(
            f"batch_size {config.batch_size} exceeds the {len(entries)} training videos"
        )
    extents = {(e.height, e.width) for e in entries}
    if len(extents) != 1:
        raise ConfigError(f"training videos must share extents, got {sorted(extents)}")
    minimum = 2 * config.frame_interval + config.clip_count
    for e in entries:
        if e.frames < minimum:
            raise DataBoundsError(
                f"video {e.id!r} has {e.frames} frames; needs at least {minimum} "
                f"for clip_count {config.clip_count} at interval {config.frame_interval}"
            )
    dtype = config.model_config().dtype
    return [(e, data_io.load_video(e).astype(dtype)) for e in entries]


def train_loop(manifest, config: TrainConfig, out_dir: str | None = None) -> TrainResult:
    """Run the full optimization; optionally write logs + checkpoint.

    Writes (under out_dir): a deterministic loss log, a separate wall-time
    log, the effective config, and the final checkpoint.
    """
    config.validate()
    cache = _load_training_cache(manifest, config)
    model, rng = build_model(config)
    opt = Adam(model.parameters(), config.learning_rate, config.weight_decay)
    cfg_hash = config.hash()

    losses: list[tuple[int, float]] = []
    timings: list[tuple[int, float]] = []
    for iteration in range(config.iterations):
        clips, targets, _ids = draw_batch(rng, cache, config)
        started = time.perf_counter()
        opt.zero_grads()
        with eng.Tape() as tape:
            predicted = model(eng.Tensor(clips), train=True)
            loss = mse_loss(predicted, eng.Tensor(targets))
        eng.backward(tape)
        opt.step()
        elapsed_ms = (time.perf_counter() - started) * 1000.0
        losses.append((iteration, float(loss.data)))
        timings.append((iteration, elapsed_ms))

    result = TrainResult(model=model, losses=losses, config_hash=cfg_hash)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        result.loss_log_path = os.path.join(out_dir, LOSS_LOG_NAME)
        with open(result.loss_log_path, "w", encoding="utf-8") as fh:
            fh.write(f"# config {cfg_hash}\n")
            for iteration, value in losses:
                fh.write(f"{iteration} {value:.9g}\n")
        with open(os.path.join(out_dir, TIMING_LOG_NAME), "w", encoding="utf-8") as fh:
            fh.write(f"# config {cfg_hash}\n")
            for iteration, ms in timings:
                fh.write(f"{iteration} {ms:.3f}\n")
        with open(os.path.join(out_dir, CONFIG_ECHO_NAME), "w", encoding="utf-8") as fh:
            for key, value in config_to_pairs(config):
                fh.write(f"{key}={value}\n")
        result.checkpoint_path = os.path.join(out_dir, CHECKPOINT_NAME)
        save_model(result.checkpoint_path, model, config)
    return result


def save_model(path: str, model: QualityModel, config: TrainConfig | None = None):
    from .checkpoint import save_checkpoint

    meta = dict(config_to_pairs(model.config))
    meta["kind"] = "model"
    if config is not None:
        meta["train_hash"] = config.hash()
    save_checkpoint(path, model.state_arrays(), meta)


def load_model(path: str) -> QualityModel:
    """Rebuild a model from a checkpoint's embedded configuration."""
    from .checkpoint import load_checkpoint
    from .errors import CheckpointError

    arrays, meta = load_checkpoint(path)
    kwargs = {}
    for f_name, f_def in ModelConfig.__dataclass_fields__.items():
        if f_name not in meta:
            raise CheckpointError(f"checkpoint meta missing model field {f_name!r}")
        kwargs[f_name] = _parse_field(meta[f_name], f_def.type)
    config = ModelConfig(**kwargs).validate()
    model = QualityModel(config, np.random.default_rng(0))
    dtype = config.dtype
    model.load_state_arrays({k: v.astype(dtype) for k, v in arrays.items()})
    return model


def _parse_field(text: str, annotation: str):
    text = text.strip()
    ann = str(annotation)
    if "bool" in ann:
        if text not in ("true", "false"):
            raise ConfigError(f"expected true/false, got {text!r}")
        return text == "true"
    if "tuple" in ann:
        return tuple(int(v) for v in text.split(",") if v)
    if "None" in ann or "Optional" in ann:
        if text == "none":
            return None
        return int(text)
    if "int" in ann:
        return int(text)
    if "float" in ann:
        return float(text)
    return text


def score_video(model: QualityModel, frames: np.ndarray, clip_count: int,
                frame_interval: int) -> float:
    """Deterministic eval-mode score for one video [T,3,H,W] in [0,1]."""
    triples = sample_clips(frames.shape[0], clip_count, frame_interval, "eval")
    dtype = model.config.dtype
    clips = np.empty((1, len(triples), 3, 3) + frames.shape[-2:], dtype=dtype)
    for c_idx, (prev_t, mid_t, next_t) in enumerate(triples):
        clips[0, c_idx, 0] = frames[prev_t]
        clips[0, c_idx, 1] = frames[mid_t]
        clips[0, c_idx, 2] = frames[next_t]
    predicted = model(eng.Tensor(clips), train=False)
    return float(predicted.data[0])
