"""Spatial subnet: multi-level extraction, rescaling, and fusion."""

import numpy as np
import pytest

import oracles
from vq360.engine import Tensor
from vq360.errors import ConfigError, ShapeError
from vq360.spatial import (
    FUSION_MODES,
    FeatureRescaler,
    MultiLevelExtractor,
    SelectiveFusion,
    SpatialStage,
    SpatialSubnet,
)


def random_levels(rng, batch=2, channels=4, height=8, width=16):
    fine = rng.standard_normal((batch, channels, height, width))
    mid = rng.standard_normal((batch, channels, height // 2, width // 2))
    coarse = rng.standard_normal((batch, channels, height // 4, width // 4))
    return fine, mid, coarse


# ---------------------------------------------------------------------------
# extraction


def test_extractor_level_extents():
    rng = np.random.default_rng(0)
    ext = MultiLevelExtractor("e", 4, (1, 1, 1), rng)
    frames = Tensor(rng.standard_normal((2, 3, 16, 32)).astype(np.float32))
    fine, mid, coarse = ext(frames, train=True)
    assert fine.shape == (2, 4, 8, 16)
    assert mid.shape == (2, 4, 4, 8)
    assert coarse.shape == (2, 4, 2, 4)


def test_extractor_rejects_odd_extents():
    rng = np.random.default_rng(1)
    ext = MultiLevelExtractor("e", 4, (1, 1, 1), rng)
    with pytest.raises(ShapeError):
        ext(Tensor(np.zeros((2, 3, 18, 32), dtype=np.float32)), train=True)


def test_extractor_validates_stage_counts():
    rng = np.random.default_rng(2)
    with pytest.raises(ConfigError):
        MultiLevelExtractor("e", 4, (1, 1), rng)
    with pytest.raises(ConfigError):
        MultiLevelExtractor("e", 4, (1, 0, 1), rng)


def test_stage_matches_oracle():
    rng = np.random.default_rng(3)
    stage = SpatialStage("s", 3, 1, rng, dtype=np.float64)
    x = rng.standard_normal((2, 3, 8, 16))
    np.testing.assert_allclose(stage(Tensor(x), train=True).data,
                               oracles.spatial_stage_forward(stage, x),
                               atol=1e-10)


def test_stage_without_long_skip():
    rng = np.random.default_rng(4)
    stage = SpatialStage("s", 3, 1, rng, long_skip=False, dtype=np.float64)
    assert stage.skip is None
    x = rng.standard_normal((2, 3, 8, 16))
    np.testing.assert_allclose(stage(Tensor(x), train=True).data,
                               oracles.spatial_stage_forward(stage, x),
                               atol=1e-10)


# ---------------------------------------------------------------------------
# rescaling


def test_rescaler_matches_oracle():
    rng = np.random.default_rng(5)
    rescaler = FeatureRescaler("r", 4, rng, dtype=np.float64)
    fine, mid, coarse = random_levels(rng)
    got = rescaler(Tensor(fine), Tensor(mid), Tensor(coarse))
    want = oracles.rescale_forward(rescaler, fine, mid, coarse)
    for g, w in zip(got, want):
        assert g.shape == (2, 4, 4, 8)
        np.testing.assert_allclose(g.data, w, atol=1e-10)


def test_rescaler_rejects_inconsistent_extents():
    rng = np.random.default_rng(6)
    rescaler = FeatureRescaler("r", 4, rng, dtype=np.float64)
    fine, mid, _ = random_levels(rng)
    bad_coarse = rng.standard_normal((2, 4, 3, 4))
    with pytest.raises(ShapeError):
        rescaler(Tensor(fine), Tensor(mid), Tensor(bad_coarse))


# ---------------------------------------------------------------------------
# fusion


def test_branch_weights_partition_unity():
    # criterion: per-channel softmax weights of the three branches must sum
    # to one for any input, checked on 1000 random level triples
    rng = np.random.default_rng(7)
    fuse = SelectiveFusion("f", 8, 4, rng)  # float32, the training dtype
    fine = Tensor(rng.standard_normal((1000, 8, 4, 4)).astype(np.float32))
    mid = Tensor(rng.standard_normal((1000, 8, 4, 4)).astype(np.float32))
    coarse = Tensor(rng.standard_normal((1000, 8, 4, 4)).astype(np.float32))
    weights = fuse.branch_weights(fine, mid, coarse).data
    assert weights.shape == (1000, 3, 8)
    np.testing.assert_allclose(weights.sum(axis=1), 1.0, atol=1e-6)
    assert weights.min() > 0.0


def test_selective_fusion_matches_equation_oracle():
    rng = np.random.default_rng(8)
    fuse = SelectiveFusion("f", 4, 2, rng, dtype=np.float64)
    fine, mid, coarse = (rng.standard_normal((2, 4, 4, 8)) for _ in range(3))
    fine, mid, coarse = np.asarray(fine), np.asarray(mid), np.asarray(coarse)
    got = fuse(Tensor(fine), Tensor(mid), Tensor(coarse)).data
    want = oracles.selective_fusion_forward(fuse, fine, mid, coarse)
    np.testing.assert_allclose(got, want, atol=1e-10)


def test_sum_mode_is_plain_sum():
    rng = np.random.default_rng(9)
    fuse = SelectiveFusion("f", 4, 2, rng, mode="sum", dtype=np.float64)
    fine, mid, coarse = (rng.standard_normal((2, 4, 4, 8)) for _ in range(3))
    got = fuse(Tensor(fine), Tensor(mid), Tensor(coarse)).data
    np.testing.assert_array_equal(got, (fine + mid) + coarse)


@pytest.mark.parametrize("mode", FUSION_MODES)
def test_every_fusion_mode_preserves_shape(mode):
    rng = np.random.default_rng(10)
    fuse = SelectiveFusion("f", 4, 2, rng, mode=mode, dtype=np.float64)
    fine, mid, coarse = (rng.standard_normal((2, 4, 4, 8)) for _ in range(3))
    out = fuse(Tensor(fine), Tensor(mid), Tensor(coarse))
    assert out.shape == (2, 4, 4, 8)


def test_fusion_validation():
    rng = np.random.default_rng(11)
    with pytest.raises(ConfigError):
        SelectiveFusion("f", 4, 2, rng, mode="average")
    with pytest.raises(ConfigError):
        SelectiveFusion("f", 6, 4, rng)  # reduction must divide channels
    sum_fuse = SelectiveFusion("f", 4, 2, rng, mode="sum")
    x = Tensor(np.zeros((1, 4, 4, 4), dtype=np.float32))
    with pytest.raises(ConfigError):
        sum_fuse.branch_weights(x, x, x)


# ---------------------------------------------------------------------------
# full subnet


def test_subnet_matches_composed_oracle():
    rng = np.random.default_rng(12)
    subnet = SpatialSubnet("s", 4, (1, 1, 1), 2, rng, dtype=np.float64)
    frames = rng.standard_normal((2, 3, 16, 32))
    got = subnet(Tensor(frames), train=True)
    assert got.shape == (2, 4, 4, 8)
    np.testing.assert_allclose(got.data,
                               oracles.spatial_subnet_forward(subnet, frames),
                               atol=1e-10)


def test_subnet_output_extent_is_quarter():
    rng = np.random.default_rng(13)
    subnet = SpatialSubnet("s", 4, (1, 1, 1), 2, rng)
    frames = Tensor(rng.standard_normal((2, 3, 32, 64)).astype(np.float32))
    assert subnet(frames, train=True).shape == (2, 4, 8, 16)
