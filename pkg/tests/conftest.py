import numpy as np
import pytest

from bicnet_tks.config import preset
from bicnet_tks.synthdata import SynthDataset, generate_dataset


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory) -> SynthDataset:
    """6 identities x 2 cameras x 40 frames; enough for pipeline tests."""
    root = tmp_path_factory.mktemp("synth") / "tiny"
    return generate_dataset(6, 2, 40, seed=7, out_dir=root)


@pytest.fixture(scope="session")
def mini_run_config():
    cfg = preset("mini")
    cfg.validate()
    return cfg


@pytest.fixture
def rng():
    return np.random.default_rng(0)
