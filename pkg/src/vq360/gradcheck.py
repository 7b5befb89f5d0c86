"""Finite-difference verification of every differentiable block.

Each registered case builds a small 64-bit instance of one op or layer,
takes the analytic gradient from a tape, and compares it against central
differences of a projected scalar loss at a handful of randomly chosen
coordinates.  The relative error |a - f| / max(|a|, |f|, 1e-6) must stay
below 1e-4 for the case to pass.

The registry is an ordinary dict so a test can swap in a sabotaged case
and watch the harness fail.
"""

from __future__ import annotations

import sys
import time
import zlib
from dataclasses import dataclass

import numpy as np

from . import engine as eng
from . import layers, motion, spatial, sphere, temporal
from .engine import Parameter, Tape, Tensor
from .errors import ConfigError
from .model import ModelConfig, QualityModel

REL_TOL = 1e-4
FD_STEP = 1e-5
# gradients below the floor are compared absolutely: against losses of
# order one, disagreements under FLOOR * REL_TOL are roundoff, not bugs
ERROR_FLOOR = 1e-6

CASES: dict = {}


def register(name):
    def deco(builder):
        CASES[name] = builder
        return builder
    return deco


def _leaf(name, rng, shape, scale=1.0) -> Parameter:
    return Parameter(name, scale * rng.standard_normal(shape))


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(max(abs(analytic), abs(numeric)), ERROR_FLOOR)


@dataclass
class CaseResult:
    name: str
    worst: float
    passed: bool
    seconds: float


def run_case(name, builder=None, *, rel_tol=REL_TOL, step=FD_STEP,
             max_coords=4, seed=0) -> CaseResult:
    """Check one case; `builder` overrides the registry entry."""
    if builder is None:
        try:
            builder = CASES[name]
        except KeyError:
            raise ConfigError(f"unknown gradient check case {name!r}") from None
    started = time.perf_counter()
    rng = np.random.default_rng((zlib.crc32(name.encode()) << 8) + seed)
    forward, leaves = builder(rng)

    with Tape() as tape:
        out = forward()
    proj = rng.standard_normal(out.shape)
    grads = tape.backward(seed=Tensor(proj.astype(out.dtype)))

    def loss() -> float:
        return float((forward().data * proj).sum())

    worst = 0.0
    for leaf in leaves:
        analytic = grads.get(leaf.name)
        if analytic is None:
            analytic = np.zeros_like(leaf.data)
        flat_value = leaf.data.reshape(-1)
        flat_grad = np.asarray(analytic, dtype=np.float64).reshape(-1)
        count = min(max_coords, flat_value.size)
        picks = rng.choice(flat_value.size, size=count, replace=False)
        for idx in picks:
            saved = flat_value[idx]

            def central(h: float) -> float:
                flat_value[idx] = saved + h
                hi = loss()
                flat_value[idx] = saved - h
                lo = loss()
                flat_value[idx] = saved
                return (hi - lo) / (2.0 * h)

            error = relative_error(float(flat_grad[idx]), central(step))
            # the base step can straddle a relu or max kink (smaller steps
            # converge) or drown a near-zero gradient in cancellation noise
            # (larger steps converge); a genuine gradient bug disagrees at
            # every step size, so cover three decades each way densely
            # enough that a narrow convergence window cannot fall between
            # rungs
            for retry in (step * 2.0 ** k
                          for k in (*range(-1, -11, -1), *range(1, 11))):
                if error < rel_tol:
                    break
                error = min(error, relative_error(float(flat_grad[idx]), central(retry)))
            worst = max(worst, error)
    return CaseResult(
        name=name, worst=worst, passed=worst < rel_tol,
        seconds=time.perf_counter() - started,
    )


def select(scope: str) -> list:
    """Case names matching a scope: 'all', an exact name, or a prefix."""
    if scope == "all":
        return list(CASES)
    names = [n for n in CASES if n == scope or n.startswith(scope + "_")]
    if not names:
        raise ConfigError(f"scope {scope!r} matches no gradient check cases")
    return names


def run(scope: str = "all", *, rel_tol=REL_TOL, stream=None, seed=0) -> list:
    stream = stream if stream is not None else sys.stdout
    results = []
    for name in select(scope):
        result = run_case(name, rel_tol=rel_tol, seed=seed)
        results.append(result)
        status = "ok" if result.passed else "FAIL"
        stream.write(
            f"{result.name:<24} worst {result.worst:.3e}  {status}  "
            f"({result.seconds:.2f}s)\n"
        )
    failures = sum(1 for r in results if not r.passed)
    stream.write(f"{len(results) - failures}/{len(results)} gradient checks passed\n")
    return results


# ---------------------------------------------------------------------------
# primitive op cases


@register("add")
def _case_add(rng):
    a = _leaf("a", rng, (3, 4))
    b = _leaf("b", rng, (4,))
    return (lambda: eng.add(a, b)), [a, b]


@register("mul")
def _case_mul(rng):
    a = _leaf("a", rng, (2, 3, 4))
    b = _leaf("b", rng, (3, 1))
    return (lambda: eng.mul(a, b)), [a, b]


@register("relu")
def _case_relu(rng):
    # values kept away from the kink so the difference quotient is clean
    signs = rng.choice([-1.0, 1.0], size=(5, 7))
    x = Parameter("x", signs * rng.uniform(0.2, 1.0, size=(5, 7)))
    return (lambda: eng.relu(x)), [x]


@register("sigmoid")
def _case_sigmoid(rng):
    x = _leaf("x", rng, (5, 7))
    return (lambda: eng.sigmoid(x)), [x]


@register("softmax")
def _case_softmax(rng):
    x = _leaf("x", rng, (4, 3, 5))
    return (lambda: eng.softmax_over_axis(x, 1)), [x]


@register("mean")
def _case_mean(rng):
    x = _leaf("x", rng, (3, 4, 5))
    return (lambda: eng.mean(x, 2)), [x]


@register("mean_all")
def _case_mean_all(rng):
    x = _leaf("x", rng, (3, 4))
    return (lambda: eng.mean_all(x)), [x]


@register("reduce_max")
def _case_reduce_max(rng):
    x = _leaf("x", rng, (4, 6))
    return (lambda: eng.reduce_max(x, 1)), [x]


@register("matmul_batched")
def _case_matmul(rng):
    a = _leaf("a", rng, (2, 3, 4))
    b = _leaf("b", rng, (2, 4, 5))
    return (lambda: eng.matmul_batched(a, b)), [a, b]


@register("fully_connected")
def _case_fc(rng):
    x = _leaf("x", rng, (5, 3))
    w = _leaf("w", rng, (2, 3))
    b = _leaf("b", rng, (2,))
    return (lambda: eng.fully_connected(x, w, b)), [x, w, b]


@register("conv1x1")
def _case_conv1x1(rng):
    x = _leaf("x", rng, (2, 3, 4, 5))
    w = _leaf("w", rng, (6, 3))
    b = _leaf("b", rng, (6,))
    return (lambda: eng.conv1x1(x, w, b)), [x, w, b]


@register("conv2d_sphere")
def _case_conv2d_sphere(rng):
    grid = sphere.build_sampling_grid(8, 16, 3, 1, "sphere")
    x = _leaf("x", rng, (2, 3, 8, 16))
    w = _leaf("w", rng, (4, 3, 3, 3), scale=0.5)
    b = _leaf("b", rng, (4,))
    return (lambda: eng.conv2d_sampled(x, w, b, grid)), [x, w, b]


@register("conv2d_plane_stride2")
def _case_conv2d_plane(rng):
    grid = sphere.build_sampling_grid(8, 16, 3, 2, "plane")
    x = _leaf("x", rng, (2, 3, 8, 16))
    w = _leaf("w", rng, (4, 3, 3, 3), scale=0.5)
    b = _leaf("b", rng, (4,))
    return (lambda: eng.conv2d_sampled(x, w, b, grid)), [x, w, b]


@register("conv3d")
def _case_conv3d(rng):
    x = _leaf("x", rng, (2, 3, 4, 6, 6))
    w = _leaf("w", rng, (4, 3, 3, 3, 3), scale=0.3)
    b = _leaf("b", rng, (4,))
    return (lambda: eng.conv3d(x, w, b)), [x, w, b]


@register("resize_down2")
def _case_resize_down(rng):
    x = _leaf("x", rng, (2, 3, 6, 8))
    return (lambda: eng.resize_by_factor(x, "down2")), [x]


@register("resize_up2")
def _case_resize_up(rng):
    x = _leaf("x", rng, (2, 3, 4, 6))
    return (lambda: eng.resize_by_factor(x, "up2")), [x]


@register("pool3d_avg")
def _case_pool_avg(rng):
    x = _leaf("x", rng, (2, 3, 4, 6, 6))
    return (lambda: eng.pool3d(x, (2, 2, 2), kind="avg")), [x]


@register("pool3d_max")
def _case_pool_max(rng):
    x = _leaf("x", rng, (2, 3, 4, 6, 6))
    return (lambda: eng.pool3d(x, (2, 2, 2), kind="max")), [x]


@register("batch_norm")
def _case_batch_norm(rng):
    x = _leaf("x", rng, (4, 3, 5, 5))
    gamma = Parameter("gamma", rng.uniform(0.5, 1.5, size=3))
    beta = _leaf("beta", rng, (3,))
    mean_buf = np.zeros(3)
    var_buf = np.ones(3)
    fwd = lambda: eng.batch_norm(x, gamma, beta, mean_buf, var_buf, train=True)
    return fwd, [x, gamma, beta]


@register("global_average_pool")
def _case_gap(rng):
    x = _leaf("x", rng, (2, 3, 4, 5))
    return (lambda: eng.global_average_pool(x)), [x]


@register("concat_slice")
def _case_concat_slice(rng):
    a = _leaf("a", rng, (2, 3, 4))
    b = _leaf("b", rng, (2, 2, 4))
    fwd = lambda: eng.slice_axis(eng.concat([a, b], 1), 1, 2, 2)
    return fwd, [a, b]


@register("transpose_reshape")
def _case_transpose(rng):
    x = _leaf("x", rng, (2, 3, 4))
    fwd = lambda: eng.reshape(eng.transpose(x, (2, 0, 1)), (4, 6))
    return fwd, [x]


# ---------------------------------------------------------------------------
# layer and subnet cases


def _with_input(layer_obj, x, call):
    leaves = [x] + list(layer_obj.parameters())
    return call, leaves


@register("spatial_attention")
def _case_satt(rng):
    block = layers.SpatialAttention("satt", rng, dtype=np.float64)
    x = _leaf("x", rng, (2, 3, 8, 16))
    return _with_input(block, x, lambda: block(x))


@register("channel_attention")
def _case_catt(rng):
    block = layers.ChannelAttention("catt", 4, 2, rng, dtype=np.float64)
    x = _leaf("x", rng, (2, 4, 6, 8))
    return _with_input(block, x, lambda: block(x))


@register("residual_block")
def _case_rsp(rng):
    block = layers.RspBlock("rsp", 4, rng, dtype=np.float64)
    x = _leaf("x", rng, (2, 4, 8, 16))
    return _with_input(block, x, lambda: block(x, train=True))


@register("multi_level_extractor")
def _case_extractor(rng):
    net = spatial.MultiLevelExtractor(
        "ext", 4, (1, 1, 1), rng, dtype=np.float64
    )
    # three stride-2 stages: coarse map is x/8, so 16x32 in -> 2x4 out
    x = _leaf("x", rng, (2, 3, 16, 32), scale=0.5)

    def fwd():
        fine, mid, coarse = net(x, train=True)
        return eng.concat([
            eng.global_average_pool(fine),
            eng.global_average_pool(mid),
            eng.global_average_pool(coarse),
        ], 1)

    return _with_input(net, x, fwd)


def _fusion_case(rng, mode):
    rescale = spatial.FeatureRescaler("rescale", 4, rng, dtype=np.float64)
    fuse = spatial.SelectiveFusion("fuse", 4, 2, rng, mode=mode, dtype=np.float64)
    fine = _leaf("fine", rng, (2, 4, 8, 16))
    mid = _leaf("mid", rng, (2, 4, 4, 8))
    coarse = _leaf("coarse", rng, (2, 4, 2, 4))
    fwd = lambda: fuse(*rescale(fine, mid, coarse))
    leaves = [fine, mid, coarse]
    leaves += list(rescale.parameters()) + list(fuse.parameters())
    return fwd, leaves


@register("fusion_selective")
def _case_fusion_selective(rng):
    return _fusion_case(rng, "selective")


@register("fusion_sum")
def _case_fusion_sum(rng):
    return _fusion_case(rng, "sum")


@register("fusion_sum_ca")
def _case_fusion_sum_ca(rng):
    return _fusion_case(rng, "sum_ca")


@register("fusion_concat")
def _case_fusion_concat(rng):
    return _fusion_case(rng, "concat")


@register("fusion_concat_ca")
def _case_fusion_concat_ca(rng):
    return _fusion_case(rng, "concat_ca")


@register("motion_subnet")
def _case_motion(rng):
    net = motion.MotionSubnet("motion", 4, 2, rng, dtype=np.float64)
    prev = _leaf("prev", rng, (2, 4, 8, 16))
    here = _leaf("here", rng, (2, 4, 8, 16))
    after = _leaf("after", rng, (2, 4, 8, 16))
    fwd = lambda: net(prev, here, after, train=True)
    return fwd, [prev, here, after] + list(net.parameters())


@register("temporal_nonlocal")
def _case_temporal(rng):
    net = temporal.TemporalNonLocal("tnl", 4, 2, rng, dtype=np.float64)
    v = _leaf("v", rng, (2, 3, 4, 6, 4))
    return _with_input(net, v, lambda: net(v))


@register("temporal_normalized")
def _case_temporal_norm(rng):
    net = temporal.TemporalNonLocal(
        "tnl", 4, 2, rng, normalize=True, dtype=np.float64
    )
    v = _leaf("v", rng, (2, 3, 4, 6, 4))
    return _with_input(net, v, lambda: net(v))


@register("regression_head")
def _case_head(rng):
    net = temporal.RegressionHead("head", 4, rng, dtype=np.float64)
    v = _leaf("v", rng, (2, 3, 4, 8, 4))
    return _with_input(net, v, lambda: net(v))


@register("spatial_subnet")
def _case_spatial_subnet(rng):
    net = spatial.SpatialSubnet(
        "spatial", 4, (1, 1, 1), 2, rng, dtype=np.float64
    )
    x = _leaf("x", rng, (2, 3, 16, 32), scale=0.5)
    return _with_input(net, x, lambda: net(x, train=True))


def model_case(config: ModelConfig, *, batch=1, clips=2, height=16, width=32):
    """Builder for the end-to-end model under an arbitrary configuration.

    Used both by the registered full_model case and by the ablation grid,
    which re-runs the same check for every architectural switch.
    """
    def build(rng):
        model = QualityModel(config, rng)
        x = Parameter(
            "clips",
            rng.uniform(0.1, 0.9, size=(batch, clips, 3, 3, height, width)),
        )
        fwd = lambda: model(x, train=True)
        leaves = [x] + list(model.named_parameters().values())
        return fwd, leaves
    return build


@register("full_model")
def _case_full_model(rng):
    config = ModelConfig(
        channels=4, blocks_per_stage=(1, 1, 1), reduction=2,
        embed_channels=2, precision=64,
    )
    return model_case(config)(rng)
