import numpy as np
import pytest

from revoice import data
from revoice.model import ModelConfig


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    """2-speaker synthetic corpus: 4 train + 1 test clip per speaker."""
    root = tmp_path_factory.mktemp("corpus")
    manifest = data.build_toy_corpus(str(root), clips_per_speaker=4,
                                     length=32768, seed=1234)
    return manifest


@pytest.fixture(scope="session")
def toy_dataset(toy_corpus):
    return data.load_manifest(toy_corpus)


@pytest.fixture(scope="session")
def micro_cfg():
    """Smallest legal model: fastest config that exercises every path."""
    return ModelConfig(n_speakers=2, d_speaker=32, width_divisor=16,
                       blocks_per_stack=1)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(0)
