"""Per-frame spatial feature extraction.

Three residual stages produce features at 1/2, 1/4 and 1/8 resolution;
the three levels are rescaled to the middle (1/4) extent and fused into
a single C-channel map.  The default fusion assigns each level a
per-channel softmax weight derived from the pooled sum of the levels, so
the weights of the three branches partition unity channel by channel.
"""

from __future__ import annotations

import numpy as np

from . import engine as eng
from .engine import Tensor
from .errors import ConfigError, ShapeError
from .layers import (
    BatchNorm,
    ChannelAttention,
    Layer,
    Linear,
    PointwiseConv,
    RspBlock,
    SampledConv,
)

FUSION_MODES = ("selective", "sum", "sum_ca", "concat", "concat_ca")


class SpatialStage(Layer):
    """Stride-2 entry convolution, a chain of residual blocks, and an
    optional long skip (stage input, average-halved and remixed 1x1,
    added to the chain output)."""

    def __init__(self, name, channels, depth, rng, *, geometry="sphere",
                 long_skip=True, use_attention=True, dtype=np.float32):
        self.entry = SampledConv(name + ".entry", channels, channels, 3, rng,
                                 stride=2, geometry=geometry, bias=False, dtype=dtype)
        self.entry_bn = BatchNorm(name + ".entry_bn", channels, dtype=dtype)
        self.blocks = [
            RspBlock(f"{name}.block{i}", channels, rng, geometry=geometry,
                     use_attention=use_attention, dtype=dtype)
            for i in range(depth)
        ]
        self.skip = (
            PointwiseConv(name + ".skip", channels, channels, rng, dtype=dtype)
            if long_skip else None
        )

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        h = eng.relu(self.entry_bn(self.entry(x), train))
        for block in self.blocks:
            h = block(h, train)
        if self.skip is not None:
            h = eng.add(h, self.skip(eng.resize_by_factor(x, "down2")))
        return h


class MultiLevelExtractor(Layer):
    """Stem plus three stages; returns the three per-level maps."""

    def __init__(self, name, channels, blocks_per_stage, rng, *, geometry="sphere",
                 long_skip=True, use_attention=True, dtype=np.float32):
        if len(blocks_per_stage) != 3 or any(n < 1 for n in blocks_per_stage):
            raise ConfigError(
                f"blocks_per_stage must be three positive counts, got {blocks_per_stage}"
            )
        self.stem = SampledConv(name + ".stem", 3, channels, 3, rng,
                                geometry=geometry, bias=False, dtype=dtype)
        self.stem_bn = BatchNorm(name + ".stem_bn", channels, dtype=dtype)
        self.stages = [
            SpatialStage(f"{name}.stage{i + 1}", channels, depth, rng,
                         geometry=geometry, long_skip=long_skip,
                         use_attention=use_attention, dtype=dtype)
            for i, depth in enumerate(blocks_per_stage)
        ]

    def __call__(self, frames: Tensor, train: bool):
        h, w = frames.shape[-2], frames.shape[-1]
        if h % 8 or w % 8:
            raise ShapeError(f"frame extents must be multiples of 8, got {h}x{w}")
        x = eng.relu(self.stem_bn(self.stem(frames), train))
        levels = []
        for stage in self.stages:
            x = stage(x, train)
            levels.append(x)
        return levels


class FeatureRescaler(Layer):
    """Bring the 1/2, 1/4 and 1/8 maps to the common 1/4 extent.

    The fine level is average-halved, the coarse level bilinearly doubled,
    and each level passes through its own 1x1 remix afterwards.
    """

    def __init__(self, name, channels, rng, *, dtype=np.float32):
        self.remix_fine = PointwiseConv(name + ".remix_fine", channels, channels, rng, dtype=dtype)
        self.remix_mid = PointwiseConv(name + ".remix_mid", channels, channels, rng, dtype=dtype)
        self.remix_coarse = PointwiseConv(name + ".remix_coarse", channels, channels, rng, dtype=dtype)

    def __call__(self, fine: Tensor, mid: Tensor, coarse: Tensor):
        a = self.remix_fine(eng.resize_by_factor(fine, "down2"))
        b = self.remix_mid(mid)
        c = self.remix_coarse(eng.resize_by_factor(coarse, "up2"))
        if not (a.shape == b.shape == c.shape):
            raise ShapeError(
                f"rescaled levels disagree: {a.shape} / {b.shape} / {c.shape}"
            )
        return a, b, c


class SelectiveFusion(Layer):
    """Fuse three equal-extent maps into one.

    mode 'selective' (default): pooled sum -> bottleneck (no activation)
    -> one expansion per branch -> softmax across the three branches per
    channel -> weighted sum of the branches.  Alternatives for ablation:
    'sum', 'sum_ca', 'concat', 'concat_ca' (ca = channel attention).
    """

    def __init__(self, name, channels, reduction, rng, *, mode="selective",
                 dtype=np.float32):
        if mode not in FUSION_MODES:
            raise ConfigError(f"fusion mode must be one of {FUSION_MODES}, got {mode!r}")
        self.mode = mode
        if mode == "selective":
            if channels % reduction:
                raise ConfigError(
                    f"selective fusion needs reduction {reduction} to divide channels {channels}"
                )
            hidden = channels // reduction
            self.squeeze = Linear(name + ".squeeze", channels, hidden, rng, dtype=dtype)
            self.branch_fine = Linear(name + ".branch_fine", hidden, channels, rng, dtype=dtype)
            self.branch_mid = Linear(name + ".branch_mid", hidden, channels, rng, dtype=dtype)
            self.branch_coarse = Linear(name + ".branch_coarse", hidden, channels, rng, dtype=dtype)
        elif mode == "sum_ca":
            self.gate = ChannelAttention(name + ".gate", channels, reduction, rng, dtype=dtype)
        elif mode == "concat":
            self.project = PointwiseConv(name + ".project", 3 * channels, channels, rng, dtype=dtype)
        elif mode == "concat_ca":
            self.gate = ChannelAttention(name + ".gate", 3 * channels, reduction, rng, dtype=dtype)
            self.project = PointwiseConv(name + ".project", 3 * channels, channels, rng, dtype=dtype)

    def branch_weights(self, fine: Tensor, mid: Tensor, coarse: Tensor) -> Tensor:
        """Softmax branch weights [B, 3, C]; only defined for 'selective'."""
        if self.mode != "selective":
            raise ConfigError(f"branch weights undefined for fusion mode {self.mode!r}")
        total = eng.add(eng.add(fine, mid), coarse)
        pooled = eng.global_average_pool(total)            # [B, C]
        z = self.squeeze(pooled)                           # no activation
        b, c = pooled.shape
        stacked = eng.concat(
            [
                eng.reshape(self.branch_fine(z), (b, 1, c)),
                eng.reshape(self.branch_mid(z), (b, 1, c)),
                eng.reshape(self.branch_coarse(z), (b, 1, c)),
            ],
            axis=1,
        )
        return eng.softmax_over_axis(stacked, axis=1)

    def __call__(self, fine: Tensor, mid: Tensor, coarse: Tensor) -> Tensor:
        if self.mode == "selective":
            weights = self.branch_weights(fine, mid, coarse)
            b, _, c = weights.shape
            out = None
            for idx, level in enumerate((fine, mid, coarse)):
                w = eng.reshape(eng.slice_axis(weights, 1, idx, 1), (b, c, 1, 1))
                term = eng.mul(level, w)
                out = term if out is None else eng.add(out, term)
            return out
        if self.mode == "sum":
            return eng.add(eng.add(fine, mid), coarse)
        if self.mode == "sum_ca":
            return self.gate(eng.add(eng.add(fine, mid), coarse))
        stacked = eng.concat([fine, mid, coarse], axis=1)
        if self.mode == "concat_ca":
            stacked = self.gate(stacked)
        return self.project(stacked)


class SpatialSubnet(Layer):
    """frames [B, 3, H, W] -> fused per-frame map [B, C, H/4, W/4]."""

    def __init__(self, name, channels, blocks_per_stage, reduction, rng, *,
                 geometry="sphere", long_skip=True, use_attention=True,
                 fusion_mode="selective", dtype=np.float32):
        self.extractor = MultiLevelExtractor(
            name + ".extractor", channels, blocks_per_stage, rng,
            geometry=geometry, long_skip=long_skip,
            use_attention=use_attention, dtype=dtype,
        )
        self.rescaler = FeatureRescaler(name + ".rescaler", channels, rng, dtype=dtype)
        self.fusion = SelectiveFusion(name + ".fusion", channels, reduction, rng,
                                      mode=fusion_mode, dtype=dtype)

    def __call__(self, frames: Tensor, train: bool) -> Tensor:
        fine, mid, coarse = self.extractor(frames, train)
        return self.fusion(*self.rescaler(fine, mid, coarse))
