"""Temporal aggregation of per-frame quality maps and score regression.

The non-local stage re-weights each frame's map by its affinity to every
other sampled frame: pixels attend across time, not across space, so the
affinity tensor is only [H*W, S, S].  The regression head collapses the
re-weighted tubelet to one score per video.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as eng
from .engine import Tensor
from .errors import ShapeError
from .layers import Conv3d, Layer, Linear


@dataclass
class AttentionEmbeddings:
    """Inspection bundle: query/key/value embeddings and frame affinity."""
    query: np.ndarray   # [B, H*W, S, C0]
    key: np.ndarray     # [B, H*W, C0, S]
    value: np.ndarray   # [B, H*W, C0, S]
    affinity: np.ndarray  # [B, H*W, S, S]


class TemporalNonLocal(Layer):
    """V [B,S,H,W,C] -> V + project(value @ affinity), affinity per pixel.

    Zeroing the output projection makes the stage an exact identity; set
    ``normalize`` to squash affinities row-wise with a softmax instead of
    using raw dot products.
    """

    def __init__(self, name, channels, embed_channels, rng, *, normalize=False,
                 dtype=np.float32):
        if embed_channels < 1:
            raise ShapeError(f"embed channels must be positive, got {embed_channels}")
        self.normalize = bool(normalize)
        self.embed_q = Linear(name + ".embed_q", channels, embed_channels, rng, dtype=dtype)
        self.embed_k = Linear(name + ".embed_k", channels, embed_channels, rng, dtype=dtype)
        self.embed_v = Linear(name + ".embed_v", channels, embed_channels, rng, dtype=dtype)
        self.project = Linear(name + ".project", embed_channels, channels, rng, dtype=dtype)
        # unnormalized affinities can be large, so the residual branch
        # starts close to the identity to keep early optimization stable
        self.project.weight.data *= dtype(0.01)

    def _pieces(self, v: Tensor):
        if v.ndim != 5:
            raise ShapeError(f"temporal stage expects [B,S,H,W,C], got {v.shape}")
        b, s, h, w, _ = v.shape
        q = self.embed_q(v)   # [B,S,H,W,C0]
        k = self.embed_k(v)
        val = self.embed_v(v)
        c0 = q.shape[-1]
        q = eng.reshape(eng.transpose(q, (0, 2, 3, 1, 4)), (b, h * w, s, c0))
        k = eng.reshape(eng.transpose(k, (0, 2, 3, 4, 1)), (b, h * w, c0, s))
        val = eng.reshape(eng.transpose(val, (0, 2, 3, 4, 1)), (b, h * w, c0, s))
        affinity = eng.matmul_batched(q, k)     # [B,HW,S,S]
        if self.normalize:
            affinity = eng.softmax_over_axis(affinity, axis=-1)
        return q, k, val, affinity

    def internals(self, v: Tensor) -> AttentionEmbeddings:
        squeeze = v.ndim == 4
        if squeeze:
            v = eng.reshape(v, (1,) + v.shape)
        q, k, val, affinity = self._pieces(v)
        take = (lambda t: t.data[0]) if squeeze else (lambda t: t.data)
        return AttentionEmbeddings(
            query=take(q), key=take(k), value=take(val), affinity=take(affinity)
        )

    def __call__(self, v: Tensor) -> Tensor:
        squeeze = v.ndim == 4
        if squeeze:
            v = eng.reshape(v, (1,) + v.shape)
        if v.ndim != 5:
            raise ShapeError(f"temporal stage expects [B,S,H,W,C], got {v.shape}")
        b, s, h, w, c = v.shape
        _, _, val, affinity = self._pieces(v)
        mixed = eng.matmul_batched(val, affinity)           # [B,HW,C0,S]
        c0 = mixed.shape[2]
        mixed = eng.transpose(eng.reshape(mixed, (b, h, w, c0, s)), (0, 4, 1, 2, 3))
        out = eng.add(v, self.project(mixed))
        if squeeze:
            out = eng.reshape(out, out.shape[1:])
        return out


class RegressionHead(Layer):
    """Tubelet [B,S,H,W,C] -> score per video.

    Two 3D conv + complementary-pooling stages (max plus average of the
    same window, summed), then GAP and a small MLP.  Spatial extents must
    survive two halvings; the temporal window shrinks to the available
    depth so any S >= 1 works.
    """

    def __init__(self, name, channels, rng, *, dtype=np.float32):
        self.conv1 = Conv3d(name + ".conv1", channels, 16, 3, rng, dtype=dtype)
        self.conv2 = Conv3d(name + ".conv2", 16, 8, 3, rng, dtype=dtype)
        self.fc1 = Linear(name + ".fc1", 8, 20, rng, dtype=dtype)
        self.fc2 = Linear(name + ".fc2", 20, 1, rng, dtype=dtype)
        # regression output starts at the middle of the score range
        self.fc2.weight.data *= dtype(0.01)
        self.fc2.bias.data += dtype(0.5)

    @staticmethod
    def _complementary_pool(x: Tensor) -> Tensor:
        s, h, w = x.shape[-3], x.shape[-2], x.shape[-1]
        if h < 2 or w < 2:
            raise ShapeError(f"regression head needs spatial extents >= 4, got map {h}x{w}")
        window = (min(2, s), 2, 2)
        return eng.add(
            eng.pool3d(x, window, window, "max"),
            eng.pool3d(x, window, window, "avg"),
        )

    def __call__(self, v: Tensor) -> Tensor:
        squeeze = v.ndim == 4
        if squeeze:
            v = eng.reshape(v, (1,) + v.shape)
        if v.shape[-3] < 4 or v.shape[-2] < 4:
            raise ShapeError(
                f"regression head needs H and W of at least 4, got {v.shape[-3]}x{v.shape[-2]}"
            )
        x = eng.transpose(v, (0, 4, 1, 2, 3))       # [B,C,S,H,W]
        x = self._complementary_pool(self.conv1(x))
        x = self._complementary_pool(self.conv2(x))
        x = eng.global_average_pool(x)              # [B,8]
        x = self.fc2(eng.relu(self.fc1(x)))         # [B,1]
        out = eng.reshape(x, (x.shape[0],))
        if squeeze:
            out = eng.reshape(out, ())
        return out
