"""Acceptance gate: one test per shipping criterion.

Each test prints a single PASS/FAIL line (visible with -s, and embedded
in the assertion message on failure) and enforces the criterion at its
stated tolerance.  The two training criteria run real optimizations and
dominate the suite's wall time.
"""

import time

import numpy as np
import pytest

from vq360 import data as data_io
from vq360 import engine as eng
from vq360 import gradcheck as gradcheck_mod
from vq360 import metrics
from vq360.engine import Tensor
from vq360.model import ModelConfig, QualityModel
from vq360.motion import MotionSubnet, motion_estimate
from vq360.spatial import FUSION_MODES, SelectiveFusion
from vq360.sphere import build_sampling_grid
from vq360.temporal import TemporalNonLocal
from vq360.training import TrainConfig, build_model, sample_clips, score_video, train_loop
from vq360.layers import RspBlock

import oracles


def _report(number, slug, passed, detail):
    line = f"criterion {number:02d} [{slug}]: {'PASS' if passed else 'FAIL'} ({detail})"
    print(line)
    assert passed, line


# ---------------------------------------------------------------------------
# 1. every registered gradient check passes at 1e-4 in 64-bit


def test_criterion_01_gradient_suite():
    started = time.perf_counter()
    results = gradcheck_mod.run("all", seed=0)
    elapsed = time.perf_counter() - started
    worst = max(r.worst for r in results)
    ok = all(r.passed for r in results) and worst < 1e-4 and elapsed < 300.0
    _report(1, "gradient suite", ok,
            f"{sum(r.passed for r in results)}/{len(results)} cases, "
            f"worst rel err {worst:.3g}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 2. fusion / motion / temporal forward chains match equation oracles to 1e-10


def test_criterion_02_equation_chain_oracles():
    rng = np.random.default_rng(2)
    worst = 0.0

    fuse = SelectiveFusion("f", 6, 2, rng, dtype=np.float64)
    fine, mid, coarse = (rng.standard_normal((2, 6, 8, 16)) for _ in range(3))
    got = fuse(Tensor(fine), Tensor(mid), Tensor(coarse)).data
    worst = max(worst, float(np.max(np.abs(
        got - oracles.selective_fusion_forward(fuse, fine, mid, coarse)))))

    net = MotionSubnet("m", 6, 2, rng, dtype=np.float64)
    prev, cur, nxt = (rng.standard_normal((2, 6, 8, 16)) for _ in range(3))
    got = net(Tensor(prev), Tensor(cur), Tensor(nxt), train=True).data
    worst = max(worst, float(np.max(np.abs(
        got - oracles.motion_forward(net, prev, cur, nxt)))))

    for normalize in (False, True):
        tnl = TemporalNonLocal("t", 6, 3, rng, normalize=normalize, dtype=np.float64)
        v = rng.standard_normal((2, 4, 6, 8, 6))
        got = tnl(Tensor(v)).data
        worst = max(worst, float(np.max(np.abs(got - oracles.temporal_forward(tnl, v)))))

    _report(2, "equation-chain oracles", worst < 1e-10, f"worst abs diff {worst:.3g}")


# ---------------------------------------------------------------------------
# 3. sampling geometry at 180x360: equator offsets, vertical taps, rotation


def test_criterion_03_sphere_geometry():
    h, w = 180, 360
    grid = build_sampling_grid(h, w, 3)

    equator_off = 0.0
    for i in (89, 90):
        for j in (0, 90, 180, 271):
            rows_ideal = np.array([i - 1.0, i, i + 1.0])[:, None]
            cols_ideal = np.array([j - 1.0, j, j + 1.0])[None, :]
            equator_off = max(equator_off, float(np.max(np.abs(grid.rows[i, j] - rows_ideal))))
            dcol = (grid.cols[i, j] - cols_ideal + w / 2) % w - w / 2
            equator_off = max(equator_off, float(np.max(np.abs(dcol))))

    ideal = np.arange(h)[:, None, None] + np.array([-1.0, 0.0, 1.0])[None, None, :]
    vertical_err = float(np.max(np.abs(grid.rows[:, :, :, 1] - np.clip(ideal, 0, h - 1))))

    rng = np.random.default_rng(3)
    x = rng.standard_normal((1, 2, h, w))
    weight = rng.standard_normal((2, 2, 3, 3))
    bias = rng.standard_normal(2)
    base = eng.conv2d_sampled(Tensor(x), Tensor(weight), Tensor(bias), grid).data
    rolled = eng.conv2d_sampled(Tensor(np.roll(x, 45, axis=-1)),
                                Tensor(weight), Tensor(bias), grid).data
    rotation_err = float(np.max(np.abs(
        rolled[..., h // 2, :] - np.roll(base, 45, axis=-1)[..., h // 2, :])))

    ok = equator_off < 0.05 and vertical_err < 1e-9 and rotation_err < 1e-5
    _report(3, "sphere geometry", ok,
            f"equator offset {equator_off:.3g} px, vertical err {vertical_err:.3g}, "
            f"rotation err {rotation_err:.3g}")


# ---------------------------------------------------------------------------
# 4. fusion branch weights form a partition of unity on 1000 random inputs


def test_criterion_04_fusion_partition_of_unity():
    rng = np.random.default_rng(4)
    fuse = SelectiveFusion("f", 8, 4, rng)
    worst = 0.0
    for start in range(0, 1000, 250):
        count = min(250, 1000 - start)
        fine, mid, coarse = (
            Tensor(rng.standard_normal((count, 8, 4, 8)).astype(np.float32))
            for _ in range(3)
        )
        weights = fuse.branch_weights(fine, mid, coarse).data
        assert weights.min() > 0.0
        worst = max(worst, float(np.max(np.abs(weights.sum(axis=1) - 1.0))))
    _report(4, "fusion partition of unity", worst <= 1e-6,
            f"worst |sum - 1| = {worst:.3g} over 1000 inputs")


# ---------------------------------------------------------------------------
# 5. structural identities are exact, not approximate


def test_criterion_05_exact_identities():
    rng = np.random.default_rng(5)
    frame = Tensor(rng.standard_normal((2, 4, 8, 16)))
    back, fwd = motion_estimate(frame, frame, frame)
    zero_motion = not back.data.any() and not fwd.data.any()

    tnl = TemporalNonLocal("t", 4, 2, rng, dtype=np.float64)
    tnl.project.weight.data[:] = 0.0
    tnl.project.bias.data[:] = 0.0
    v = rng.standard_normal((1, 3, 4, 4, 4))
    temporal_identity = np.array_equal(tnl(Tensor(v)).data, v)

    block = RspBlock("b", 4, rng, dtype=np.float64)
    for param in block.parameters():
        param.data[:] = 0.0
    x = rng.standard_normal((2, 4, 8, 16))
    rsp_identity = np.array_equal(block(Tensor(x), train=False).data, x)

    ok = zero_motion and temporal_identity and rsp_identity
    _report(5, "exact identities", ok,
            f"zero-motion {zero_motion}, temporal identity {temporal_identity}, "
            f"residual identity {rsp_identity}")


# ---------------------------------------------------------------------------
# 6. metric battery: exact tau, rank invariance, affine invariance, recovery


def test_criterion_06_metrics():
    rng = np.random.default_rng(6)

    exact = 0
    trials = 0
    while trials < 100:
        n = int(rng.integers(2, 11))
        x = rng.integers(0, 5, size=n).astype(np.float64)
        y = rng.integers(0, 5, size=n).astype(np.float64)
        if x.min() == x.max() or y.min() == y.max():
            continue
        trials += 1
        exact += metrics.krocc(x, y) == oracles.tau_b_bruteforce(x, y)

    x = rng.normal(size=40)
    srocc_err = abs(metrics.srocc(x, np.exp(x)) - 1.0)

    y = rng.normal(size=40)
    affine_err = abs(metrics.plcc(3.0 * x - 11.0, y) - metrics.plcc(x, y))

    beta_true = np.array([92.0, 8.0, 0.45, 0.12])
    xs = np.linspace(0.0, 1.0, 40)
    fit = metrics.logistic_fit(xs, metrics.logistic_curve(beta_true, xs))
    got = fit.params.copy()
    got[3] = abs(got[3])
    recovery = float(np.max(np.abs(got - beta_true) / np.abs(beta_true))) if fit.converged else np.inf

    ok = exact == 100 and srocc_err <= 1e-12 and affine_err <= 1e-12 and recovery < 1e-4
    _report(6, "metrics", ok,
            f"tau exact {exact}/100, srocc err {srocc_err:.2g}, "
            f"plcc affine err {affine_err:.2g}, logistic rel err {recovery:.2g}")


# ---------------------------------------------------------------------------
# 7. desk-scale overfit: 8 synthetic videos to MSE < 1e-3, reproducibly


def _desk_train_config(iterations):
    return TrainConfig(
        learning_rate=3e-4, batch_size=4, iterations=iterations,
        clip_count=4, frame_interval=3, channels=8, reduction=4,
        embed_channels=4, blocks_per_stage=(1, 1, 1), seed=0,
    )


def test_criterion_07_overfit_and_reproducibility(tmp_path):
    synth = data_io.SynthConfig(seed=11, contents=4, levels=2, frames=30,
                                height=32, width=64, family="gaussian_blur")
    manifest = data_io.synth_generate(synth, str(tmp_path / "data"))
    assert len(manifest.entries) == 8

    config = _desk_train_config(iterations=1200)
    started = time.perf_counter()
    first = train_loop(manifest, config, str(tmp_path / "a"))
    second = train_loop(manifest, config, str(tmp_path / "b"))
    elapsed = time.perf_counter() - started

    best_iter, best = min(first.losses, key=lambda pair: pair[1])
    log_a = open(tmp_path / "a" / "train_log.txt", "rb").read()
    log_b = open(tmp_path / "b" / "train_log.txt", "rb").read()

    ok = best < 1e-3 and best_iter < 2000 and log_a == log_b and elapsed < 1800.0
    _report(7, "desk-scale overfit", ok,
            f"best MSE {best:.3g} at iteration {best_iter}, "
            f"bit-identical logs {log_a == log_b}, {elapsed:.0f}s for both runs")


# ---------------------------------------------------------------------------
# 8. held-out contents: SROCC >= 0.8 in at least 2 of 3 seeds


def test_criterion_08_cross_content_ranking(tmp_path):
    synth = data_io.SynthConfig(seed=21, contents=16, levels=5, frames=30,
                                height=32, width=64, family="gaussian_blur",
                                holdout_contents=4)
    manifest = data_io.synth_generate(synth, str(tmp_path / "data"))
    held_out = [e for e in manifest.entries if e.split == "test"]
    assert len(held_out) == 20

    correlations = []
    for seed in (0, 1, 2):
        config = TrainConfig(
            learning_rate=3e-4, batch_size=4, iterations=500,
            clip_count=2, frame_interval=3, channels=8, reduction=4,
            embed_channels=4, blocks_per_stage=(1, 1, 1), seed=seed,
        )
        result = train_loop(manifest, config)
        predictions = [
            score_video(result.model, data_io.load_video(e).astype(np.float32),
                        config.clip_count, config.frame_interval)
            for e in held_out
        ]
        correlations.append(metrics.srocc(predictions, [e.score for e in held_out]))

    hits = sum(value >= 0.8 for value in correlations)
    _report(8, "cross-content ranking", hits >= 2,
            "SROCC " + ", ".join(f"{v:.3f}" for v in correlations) + f"; {hits}/3 seeds >= 0.8")


# ---------------------------------------------------------------------------
# 9. publication-scale configuration lands in the stated parameter budget


def test_criterion_09_parameter_budget():
    config = ModelConfig(channels=32, blocks_per_stage=(3, 4, 6), reduction=8)
    model = QualityModel(config, np.random.default_rng(0))
    count = sum(p.data.size for p in model.named_parameters().values())
    _report(9, "parameter budget", 500_000 <= count <= 3_000_000,
            f"{count:,} parameters")


# ---------------------------------------------------------------------------
# 10. every ablation axis builds, runs shape-true, and passes a grad check


def _ablation_configs():
    base = dict(channels=4, blocks_per_stage=(1, 1, 1), reduction=2,
                embed_channels=2, precision=64)
    variants = {
        "baseline": {},
        "plane": {"geometry": "plane"},
        "no_long_skip": {"long_skip": False},
        "no_attention": {"spatial_attention": False},
        "no_motion": {"motion_enabled": False},
        "motion_depth_2": {"motion_depth": 2},
        "no_temporal": {"temporal_enabled": False},
        "normalized_similarity": {"normalize_similarity": True},
    }
    for mode in FUSION_MODES:
        if mode != "selective":
            variants[f"fusion_{mode}"] = {"fusion_mode": mode}
    return {name: ModelConfig(**base, **overrides)
            for name, overrides in variants.items()}


def test_criterion_10_ablation_grid():
    rng = np.random.default_rng(10)
    failures = []

    for name, config in _ablation_configs().items():
        model = QualityModel(config.validate(), np.random.default_rng(1))
        x = Tensor(rng.uniform(0.1, 0.9, size=(2, 2, 3, 3, 16, 32)))
        out = model(x, train=False)
        if out.shape != (2,) or not np.all(np.isfinite(out.data)):
            failures.append(f"{name}: bad forward")
            continue
        result = gradcheck_mod.run_case(f"ablation_{name}",
                                        gradcheck_mod.model_case(config), seed=0)
        if not result.passed:
            failures.append(f"{name}: grad check {result.worst:.2g}")

    config = ModelConfig(channels=4, blocks_per_stage=(1, 1, 1), reduction=2,
                         embed_channels=2, precision=64)
    model = QualityModel(config, np.random.default_rng(1))
    for clips in range(1, 7):
        x = Tensor(rng.uniform(0.1, 0.9, size=(1, clips, 3, 3, 16, 32)))
        if model(x, train=False).shape != (1,):
            failures.append(f"clip_count={clips}: bad shape")
    # batch 2 keeps the motion-path batch norm trainable at a single clip
    grad_s1 = gradcheck_mod.run_case("ablation_single_clip",
                                     gradcheck_mod.model_case(config, batch=2, clips=1),
                                     seed=0)
    if not grad_s1.passed:
        failures.append(f"clip_count=1: grad check {grad_s1.worst:.2g}")

    for interval in (1, 3, 5, 7, 9):
        rng_clip = np.random.default_rng(interval)
        triples = sample_clips(40, 4, interval, "train", rng_clip)
        spans = [(m - p, n - m) for p, m, n in triples]
        if len(triples) != 4 or any(span != (interval, interval) for span in spans):
            failures.append(f"frame_interval={interval}: bad clip windows")

    _report(10, "ablation grid", not failures,
            "all axes shape-true and grad-checked" if not failures else "; ".join(failures))
