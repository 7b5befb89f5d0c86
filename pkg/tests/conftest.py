import numpy as np
import pytest

from vq360 import data as data_io


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Six short 16x32 videos on disk, two quality levels, one held out."""
    root = tmp_path_factory.mktemp("tiny")
    cfg = data_io.SynthConfig(seed=7, contents=3, frames=14, height=16,
                              width=32, levels=2, holdout_contents=1)
    manifest = data_io.synth_generate(cfg, root)
    return manifest


@pytest.fixture
def rng64():
    return np.random.default_rng(0)
