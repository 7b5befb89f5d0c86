"""Dataset manifests, frame ingestion, and synthetic data generation.

A manifest is line-oriented text, one video per line, each line a list of
``key=value`` tokens (id, path, frames, height, width, score, split).
Frame sources are either a directory of PNG files (000000.png, ...) or a
single raw planar file: magic ``VRAW``, little-endian uint32 H, W, T,
then T frames of H*W interleaved 8-bit RGB.

The synthetic generator stands in for a subjective dataset: band-limited
random base contents drift horizontally (whole-pixel camera pan, which
wraps naturally on the equirectangular seam), and each content is emitted
at several distortion levels with pseudo scores that worsen strictly with
level.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy import ndimage

from .engine import Tensor
from .errors import ConfigError, DataBoundsError, ManifestError

RAW_MAGIC = b"VRAW"
MANIFEST_FIELDS = ("id", "path", "frames", "height", "width", "score", "split")
SPLITS = ("train", "test")
DISTORTION_FAMILIES = ("gaussian_blur", "additive_noise", "uniform_quantization")


@dataclass
class VideoEntry:
    id: str
    path: str          # absolute after loading
    frames: int
    height: int
    width: int
    score: float       # raw subjective scale, 0..100, higher is worse
    split: str


@dataclass
class DatasetManifest:
    entries: list
    root: str = "."


# ---------------------------------------------------------------------------
# manifest text format


def _parse_entry(line: str, line_no: int) -> VideoEntry:
    seen: dict[str, str] = {}
    for token in line.split():
        key, sep, value = token.partition("=")
        if not sep:
            raise ManifestError(f"line {line_no}: token {token!r} is not key=value")
        if key not in MANIFEST_FIELDS:
            raise ManifestError(f"line {line_no}: unknown field {key!r}")
        if key in seen:
            raise ManifestError(f"line {line_no}: duplicate field {key!r}")
        seen[key] = value
    missing = [f for f in MANIFEST_FIELDS if f not in seen]
    if missing:
        raise ManifestError(f"line {line_no}: missing field {missing[0]!r}")
    try:
        frames = int(seen["frames"])
        height = int(seen["height"])
        width = int(seen["width"])
        score = float(seen["score"])
    except ValueError as exc:
        raise ManifestError(f"line {line_no}: {exc}") from None
    entry = VideoEntry(
        id=seen["id"], path=seen["path"], frames=frames, height=height,
        width=width, score=score, split=seen["split"],
    )
    if frames < 1 or height < 1 or width < 1:
        raise ManifestError(
            f"line {line_no}: entry {entry.id!r} has non-positive extents"
        )
    if not 0.0 <= score <= 100.0:
        raise ManifestError(
            f"line {line_no}: entry {entry.id!r} score {score} outside [0, 100]"
        )
    if entry.split not in SPLITS:
        raise ManifestError(
            f"line {line_no}: entry {entry.id!r} split must be train or test"
        )
    return entry


def load_manifest(path: str) -> DatasetManifest:
    path = os.path.abspath(path)
    root = os.path.dirname(path)
    entries = []
    ids = set()
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw_line in enumerate(fh, start=1):
            line = raw_line.strip()
            if not line or line.startswith("#"):
                continue
            entry = _parse_entry(line, line_no)
            if entry.id in ids:
                raise ManifestError(f"line {line_no}: duplicate id {entry.id!r}")
            ids.add(entry.id)
            if not os.path.isabs(entry.path):
                entry.path = os.path.normpath(os.path.join(root, entry.path))
            entries.append(entry)
    return DatasetManifest(entries=entries, root=root)


def save_manifest(manifest: DatasetManifest, path: str):
    path = os.path.abspath(path)
    root = os.path.dirname(path)
    with open(path, "w", encoding="utf-8") as fh:
        for entry in manifest.entries:
            rel = os.path.relpath(entry.path, root)
            stored = rel if not rel.startswith("..") else entry.path
            if any(ch.isspace() for ch in entry.id + stored):
                raise ManifestError(
                    f"entry {entry.id!r}: ids and paths must not contain whitespace"
                )
            fh.write(
                f"id={entry.id} path={stored} frames={entry.frames} "
                f"height={entry.height} width={entry.width} "
                f"score={entry.score:g} split={entry.split}\n"
            )


# ---------------------------------------------------------------------------
# frame sources


def write_raw_video(path: str, frames: np.ndarray):
    """frames: uint8 [T, H, W, 3] interleaved RGB."""
    frames = np.ascontiguousarray(frames, dtype=np.uint8)
    if frames.ndim != 4 or frames.shape[-1] != 3:
        raise DataBoundsError(f"raw writer wants [T,H,W,3] uint8, got {frames.shape}")
    t, h, w, _ = frames.shape
    with open(path, "wb") as fh:
        fh.write(RAW_MAGIC)
        fh.write(np.asarray([h, w, t], dtype="<u4").tobytes())
        fh.write(frames.tobytes(order="C"))


def read_raw_header(path: str):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != RAW_MAGIC:
            raise DataBoundsError(f"{path} is not a raw planar video (bad magic)")
        blob = fh.read(12)
        if len(blob) != 12:
            raise DataBoundsError(f"{path}: truncated raw header")
        h, w, t = (int(v) for v in np.frombuffer(blob, dtype="<u4"))
    return h, w, t


def read_raw_frame(path: str, t: int) -> np.ndarray:
    h, w, total = read_raw_header(path)
    if not 0 <= t < total:
        raise DataBoundsError(f"frame {t} outside [0, {total}) in {path}")
    frame_bytes = h * w * 3
    with open(path, "rb") as fh:
        fh.seek(16 + t * frame_bytes)
        blob = fh.read(frame_bytes)
    if len(blob) != frame_bytes:
        raise DataBoundsError(f"{path}: truncated at frame {t}")
    return np.frombuffer(blob, dtype=np.uint8).reshape(h, w, 3)


def read_raw_video(path: str) -> np.ndarray:
    h, w, total = read_raw_header(path)
    with open(path, "rb") as fh:
        fh.seek(16)
        blob = fh.read(h * w * 3 * total)
    if len(blob) != h * w * 3 * total:
        raise DataBoundsError(f"{path}: truncated raw payload")
    return np.frombuffer(blob, dtype=np.uint8).reshape(total, h, w, 3)


def _png_path(directory: str, t: int) -> str:
    return os.path.join(directory, f"{t:06d}.png")


def _load_frame_u8(entry: VideoEntry, t: int) -> np.ndarray:
    if not 0 <= t < entry.frames:
        raise DataBoundsError(
            f"video {entry.id!r}: frame {t} outside [0, {entry.frames})"
        )
    if os.path.isdir(entry.path):
        frame_path = _png_path(entry.path, t)
        try:
            with Image.open(frame_path) as img:
                arr = np.asarray(img.convert("RGB"), dtype=np.uint8)
        except FileNotFoundError:
            raise DataBoundsError(
                f"video {entry.id!r}: missing frame file {frame_path}"
            ) from None
    else:
        arr = read_raw_frame(entry.path, t)
    if arr.shape != (entry.height, entry.width, 3):
        raise DataBoundsError(
            f"video {entry.id!r} frame {t}: extents {arr.shape[:2]} do not match "
            f"manifest {entry.height}x{entry.width}"
        )
    return arr


def load_frame(entry: VideoEntry, t: int) -> Tensor:
    """One frame as a channels-first tensor in [0, 1]."""
    arr = _load_frame_u8(entry, t)
    return Tensor(np.ascontiguousarray(arr.transpose(2, 0, 1), dtype=np.float32) / np.float32(255.0))


def load_video(entry: VideoEntry) -> np.ndarray:
    """All frames, [T, 3, H, W] float32 in [0, 1]."""
    if not os.path.isdir(entry.path):
        raw = read_raw_video(entry.path)
        if raw.shape[0] != entry.frames or raw.shape[1:3] != (entry.height, entry.width):
            raise DataBoundsError(
                f"video {entry.id!r}: file extents {raw.shape} do not match manifest"
            )
        return raw.transpose(0, 3, 1, 2).astype(np.float32) / np.float32(255.0)
    out = np.empty((entry.frames, 3, entry.height, entry.width), dtype=np.float32)
    for t in range(entry.frames):
        out[t] = _load_frame_u8(entry, t).transpose(2, 0, 1)
    out /= np.float32(255.0)
    return out


def normalize_score(raw: float) -> float:
    """Raw 0-100 subjective score to [0, 1]; higher still means worse."""
    raw = float(raw)
    if not 0.0 <= raw <= 100.0:
        raise DataBoundsError(f"score {raw} outside [0, 100]")
    return raw / 100.0


# ---------------------------------------------------------------------------
# synthetic dataset


@dataclass
class SynthConfig:
    seed: int = 0
    contents: int = 8
    frames: int = 30
    height: int = 32
    width: int = 64
    family: str = "gaussian_blur"
    levels: int = 1
    storage: str = "raw"           # 'raw' or 'png'
    holdout_contents: int = 0      # last N contents get split=test
    max_drift: float = 2.0         # peak horizontal pan speed, px/frame

    def validate(self):
        if self.contents < 1:
            raise ConfigError(f"contents must be >= 1, got {self.contents}")
        if self.levels < 2:
            raise ConfigError(f"levels must be >= 2, got {self.levels}")
        if self.frames < 1:
            raise ConfigError(f"frames must be >= 1, got {self.frames}")
        if self.height % 8 or self.width % 8:
            raise ConfigError(
                f"extents must be multiples of 8, got {self.height}x{self.width}"
            )
        if self.family not in DISTORTION_FAMILIES:
            raise ConfigError(
                f"family must be one of {DISTORTION_FAMILIES}, got {self.family!r}"
            )
        if self.storage not in ("raw", "png"):
            raise ConfigError(f"storage must be 'raw' or 'png', got {self.storage!r}")
        if not 0 <= self.holdout_contents < self.contents:
            raise ConfigError(
                f"holdout_contents must lie in [0, contents), got {self.holdout_contents}"
            )
        if self.max_drift < 0:
            raise ConfigError(f"max_drift must be >= 0, got {self.max_drift}")
        return self


def _band_limited_base(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    """Random field with spectrum confined below ~min(H,W)/3 cycles.

    Built in frequency space so the content is periodic horizontally,
    matching the equirectangular wrap.  Returns [3, H, W] in [0.1, 0.9].
    """
    noise = rng.standard_normal((3, height, width))
    spectrum = np.fft.fft2(noise)
    fy = np.fft.fftfreq(height)[:, None]
    fx = np.fft.fftfreq(width)[None, :]
    radius = np.hypot(fy * height, fx * width)
    cutoff = min(height, width) / 3.0
    spectrum *= (radius <= cutoff)
    field = np.fft.ifft2(spectrum).real
    field -= field.mean(axis=(1, 2), keepdims=True)
    peak = np.abs(field).max(axis=(1, 2), keepdims=True)
    peak[peak == 0] = 1.0
    field = 0.5 + 0.4 * field / peak
    return field


def _distort(frame: np.ndarray, family: str, level: int,
             noise_rng: np.random.Generator | None) -> np.ndarray:
    """Apply one distortion level to a float frame [3,H,W] in [0,1]."""
    if level == 0:
        return frame
    if family == "gaussian_blur":
        sigma = 0.8 * level
        out = np.empty_like(frame)
        for c in range(3):
            # rows reflect at the poles, columns wrap at the seam
            out[c] = ndimage.gaussian_filter(frame[c], sigma=sigma, mode=("reflect", "wrap"))
        return out
    if family == "additive_noise":
        out = frame + noise_rng.normal(0.0, 0.025 * level, size=frame.shape)
        return np.clip(out, 0.0, 1.0)
    # uniform_quantization: level 1 -> 16 bins, halving per level, floor 2
    bins = max(2, 32 >> level)
    return np.round(frame * (bins - 1)) / (bins - 1)


def synth_generate(config: SynthConfig, out_dir: str) -> DatasetManifest:
    """Materialize the synthetic dataset and its manifest under out_dir."""
    config.validate()
    os.makedirs(out_dir, exist_ok=True)
    out_dir = os.path.abspath(out_dir)
    content_seeds = np.random.SeedSequence(config.seed).spawn(config.contents)
    entries = []
    for content in range(config.contents):
        base_seq, level_seq = content_seeds[content].spawn(2)
        rng = np.random.default_rng(base_seq)
        base = _band_limited_base(rng, config.height, config.width)
        speed = float(rng.uniform(-config.max_drift, config.max_drift))
        offsets = [int(round(t * speed)) for t in range(config.frames)]
        split = "test" if content >= config.contents - config.holdout_contents else "train"
        level_seeds = level_seq.spawn(config.levels)
        for level in range(config.levels):
            noise_rng = np.random.default_rng(level_seeds[level])
            video = np.empty(
                (config.frames, config.height, config.width, 3), dtype=np.uint8
            )
            for t in range(config.frames):
                frame = np.roll(base, -offsets[t], axis=2)
                frame = _distort(frame, config.family, level, noise_rng)
                video[t] = np.clip(np.round(frame * 255.0), 0, 255).astype(
                    np.uint8
                ).transpose(1, 2, 0)
            vid = f"c{content:02d}_l{level}"
            if config.storage == "raw":
                path = os.path.join(out_dir, vid + ".rpv")
                write_raw_video(path, video)
            else:
                path = os.path.join(out_dir, vid)
                os.makedirs(path, exist_ok=True)
                for t in range(config.frames):
                    Image.fromarray(video[t]).save(_png_path(path, t))
            score = 10.0 + 80.0 * level / (config.levels - 1)
            entries.append(VideoEntry(
                id=vid, path=path, frames=config.frames, height=config.height,
                width=config.width, score=score, split=split,
            ))
    manifest = DatasetManifest(entries=entries, root=out_dir)
    save_manifest(manifest, os.path.join(out_dir, "manifest.txt"))
    return manifest
