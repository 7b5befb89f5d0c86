"""Full scoring model: spatial features, motion fusion, temporal mixing,
regression.

The model consumes clip batches shaped [B, S, 3, 3, H, W]: B videos, S
clips per video, a (previous, centre, next) frame triple per clip, RGB
planes, then the frame.  All S*3 frames of a batch pass through the
spatial subnet as one frame batch, which is what batch normalization
statistics are computed over.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import engine as eng
from .engine import Parameter, Tensor
from .errors import ConfigError, ShapeError
from .layers import Layer
from .motion import MotionSubnet
from .spatial import FUSION_MODES, SpatialSubnet
from .temporal import RegressionHead, TemporalNonLocal

GEOMETRIES = ("sphere", "plane")


@dataclass
class ModelConfig:
    channels: int = 16
    blocks_per_stage: tuple = (3, 4, 6)
    reduction: int = 8
    geometry: str = "sphere"
    long_skip: bool = True
    spatial_attention: bool = True
    fusion_mode: str = "selective"
    motion_enabled: bool = True
    motion_depth: int = 1
    temporal_enabled: bool = True
    normalize_similarity: bool = False
    embed_channels: int | None = None
    precision: int = 32

    def validate(self):
        if self.channels < 1:
            raise ConfigError(f"channels must be positive, got {self.channels}")
        if len(tuple(self.blocks_per_stage)) != 3 or any(
            int(n) < 1 for n in self.blocks_per_stage
        ):
            raise ConfigError(
                f"blocks_per_stage must be three positive counts, got {self.blocks_per_stage}"
            )
        if self.reduction < 1:
            raise ConfigError(f"reduction must be positive, got {self.reduction}")
        if self.channels % self.reduction:
            raise ConfigError(
                f"reduction {self.reduction} must divide channels {self.channels}"
            )
        if self.geometry not in GEOMETRIES:
            raise ConfigError(f"geometry must be one of {GEOMETRIES}, got {self.geometry!r}")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(
                f"fusion_mode must be one of {FUSION_MODES}, got {self.fusion_mode!r}"
            )
        if self.motion_depth < 1:
            raise ConfigError(f"motion_depth must be positive, got {self.motion_depth}")
        if self.embed_channels is not None and self.embed_channels < 1:
            raise ConfigError(f"embed_channels must be positive, got {self.embed_channels}")
        if self.precision not in (32, 64):
            raise ConfigError(f"precision must be 32 or 64, got {self.precision}")
        return self

    @property
    def dtype(self):
        return np.float32 if self.precision == 32 else np.float64

    @property
    def resolved_embed_channels(self) -> int:
        if self.embed_channels is not None:
            return int(self.embed_channels)
        return max(1, self.channels // 2)


class QualityModel(Layer):
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        config.validate()
        self.config = config
        dtype = config.dtype
        self.spatial = SpatialSubnet(
            "spatial", config.channels, tuple(config.blocks_per_stage), config.reduction,
            rng, geometry=config.geometry, long_skip=config.long_skip,
            use_attention=config.spatial_attention, fusion_mode=config.fusion_mode,
            dtype=dtype,
        )
        self.motion = (
            MotionSubnet("motion", config.channels, config.reduction, rng,
                         depth=config.motion_depth, geometry=config.geometry,
                         use_attention=config.spatial_attention, dtype=dtype)
            if config.motion_enabled else None
        )
        self.temporal = (
            TemporalNonLocal("temporal", config.channels,
                             config.resolved_embed_channels, rng,
                             normalize=config.normalize_similarity, dtype=dtype)
            if config.temporal_enabled else None
        )
        self.head = RegressionHead("head", config.channels, rng, dtype=dtype)

    # ------------------------------------------------------------------
    def forward(self, clips: Tensor, train: bool) -> Tensor:
        """clips [B, S, 3, 3, H, W] -> scores [B]."""
        if clips.ndim != 6 or clips.shape[2] != 3 or clips.shape[3] != 3:
            raise ShapeError(
                f"expected clips [B,S,3,3,H,W] (triple, rgb), got {clips.shape}"
            )
        b, s, _, _, h, w = clips.shape
        frames = eng.reshape(clips, (b * s * 3, 3, h, w))
        maps = self.spatial(frames, train)                  # [B*S*3, C, h', w']
        _, c, hp, wp = maps.shape
        triples = eng.reshape(maps, (b * s, 3, c, hp, wp))
        centre = eng.reshape(eng.slice_axis(triples, 1, 1, 1), (b * s, c, hp, wp))
        if self.motion is not None:
            prev = eng.reshape(eng.slice_axis(triples, 1, 0, 1), (b * s, c, hp, wp))
            nxt = eng.reshape(eng.slice_axis(triples, 1, 2, 1), (b * s, c, hp, wp))
            fused = self.motion(prev, centre, nxt, train)
        else:
            fused = centre
        tube = eng.transpose(eng.reshape(fused, (b, s, c, hp, wp)), (0, 1, 3, 4, 2))
        if self.temporal is not None:
            tube = self.temporal(tube)
        return self.head(tube)

    def __call__(self, clips: Tensor, train: bool) -> Tensor:
        return self.forward(clips, train)

    # ------------------------------------------------------------------
    def named_parameters(self) -> dict[str, Parameter]:
        out: dict[str, Parameter] = {}
        for p in self.parameters():
            if p.name in out:
                raise ConfigError(f"duplicate parameter name {p.name!r}")
            out[p.name] = p
        return out

    def named_buffers(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name, arr in self.buffers():
            if name in out:
                raise ConfigError(f"duplicate buffer name {name!r}")
            out[name] = arr
        return out

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Parameters then buffers, in walk order, as plain arrays."""
        state = {name: p.data for name, p in self.named_parameters().items()}
        state.update(self.named_buffers())
        return state

    def load_state_arrays(self, state: dict[str, np.ndarray]):
        params = self.named_parameters()
        buffers = self.named_buffers()
        expected = set(params) | set(buffers)
        got = set(state)
        if expected != got:
            missing = sorted(expected - got)[:4]
            extra = sorted(got - expected)[:4]
            raise ConfigError(
                f"state mismatch; missing {missing}, unexpected {extra}"
            )
        for name, value in state.items():
            if name in params:
                params[name].assign(value)
            else:
                buf = buffers[name]
                value = np.asarray(value, dtype=buf.dtype)
                if value.shape != buf.shape:
                    raise ShapeError(
                        f"buffer {name!r} has shape {buf.shape}, cannot load {value.shape}"
                    )
                buf[...] = value


def config_to_pairs(config) -> list[tuple[str, str]]:
    """Flatten a dataclass config into (key, value-string) pairs."""
    pairs = []
    for f in fields(config):
        value = getattr(config, f.name)
        if isinstance(value, (tuple, list)):
            text = ",".join(str(v) for v in value)
        elif value is None:
            text = "none"
        elif isinstance(value, bool):
            text = "true" if value else "false"
        else:
            text = str(value)
        pairs.append((f.name, text))
    return pairs
