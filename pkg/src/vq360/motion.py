"""Motion-masked feature fusion across a frame triple.

Given per-frame maps (P_prev, P_t, P_next) the module forms backward and
forward difference maps, refines each into a multiplicative mask for the
centre features, merges the three views with channel attention, and adds
two residual-refined concatenations back onto the merged map:

    M-     = P_t - P_prev            M+     = P_next - P_t
    P_t-   = P_t * R(M-)             P_t+   = P_t * R(M+)
    P'     = proj(CA(cat(P_t-, P_t, P_t+)))
    Phat-  = cat(P', R(P_t-))        Phat+  = cat(P', R(P_t+))
    out    = P' + out-(R2(Phat-)) + out+(R2(Phat+))

Each R is an independent residual-block chain of the configured depth
(R2 runs at double width); the final 1x1 mixes bring the doubled widths
back to C.  Identical inputs give exactly zero difference maps.
"""

from __future__ import annotations

import numpy as np

from . import engine as eng
from .engine import Tensor
from .errors import ShapeError
from .layers import ChannelAttention, Layer, PointwiseConv, RspChain


def motion_estimate(p_prev: Tensor, p_t: Tensor, p_next: Tensor):
    """Backward and forward temporal differences of the centre map."""
    if not (p_prev.shape == p_t.shape == p_next.shape):
        raise ShapeError(
            f"frame maps disagree: {p_prev.shape} / {p_t.shape} / {p_next.shape}"
        )
    return eng.sub(p_t, p_prev), eng.sub(p_next, p_t)


class MotionSubnet(Layer):
    def __init__(self, name, channels, reduction, rng, *, depth=1,
                 geometry="sphere", use_attention=True, dtype=np.float32):
        kw = dict(geometry=geometry, use_attention=use_attention, dtype=dtype)
        self.refine_back = RspChain(name + ".refine_back", channels, depth, rng, **kw)
        self.refine_fwd = RspChain(name + ".refine_fwd", channels, depth, rng, **kw)
        self.merge_gate = ChannelAttention(name + ".merge_gate", 3 * channels, reduction,
                                           rng, dtype=dtype)
        self.merge = PointwiseConv(name + ".merge", 3 * channels, channels, rng, dtype=dtype)
        self.pre_cat_back = RspChain(name + ".pre_cat_back", channels, depth, rng, **kw)
        self.pre_cat_fwd = RspChain(name + ".pre_cat_fwd", channels, depth, rng, **kw)
        self.residual_back = RspChain(name + ".residual_back", 2 * channels, depth, rng, **kw)
        self.residual_fwd = RspChain(name + ".residual_fwd", 2 * channels, depth, rng, **kw)
        self.out_back = PointwiseConv(name + ".out_back", 2 * channels, channels, rng, dtype=dtype)
        self.out_fwd = PointwiseConv(name + ".out_fwd", 2 * channels, channels, rng, dtype=dtype)

    def __call__(self, p_prev: Tensor, p_t: Tensor, p_next: Tensor, train: bool) -> Tensor:
        m_back, m_fwd = motion_estimate(p_prev, p_t, p_next)
        masked_back = eng.mul(p_t, self.refine_back(m_back, train))
        masked_fwd = eng.mul(p_t, self.refine_fwd(m_fwd, train))
        merged = self.merge(
            self.merge_gate(eng.concat([masked_back, p_t, masked_fwd], axis=1))
        )
        cat_back = eng.concat([merged, self.pre_cat_back(masked_back, train)], axis=1)
        cat_fwd = eng.concat([merged, self.pre_cat_fwd(masked_fwd, train)], axis=1)
        out = eng.add(merged, self.out_back(self.residual_back(cat_back, train)))
        return eng.add(out, self.out_fwd(self.residual_fwd(cat_fwd, train)))
