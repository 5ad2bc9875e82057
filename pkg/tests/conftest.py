"""Shared fixtures: synthetic digit dataset, desk-scale trained model.

The desk-scale training run is expensive (a few minutes) and session-scoped;
everything that needs a trained model shares it.
"""

import os
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

import digitgen  # noqa: E402

from arcaps.config import RunConfig  # noqa: E402
from arcaps.data import load_idx  # noqa: E402
from arcaps.model import ArCapsNet, ConvCapsSpec, ModelConfig  # noqa: E402
from arcaps.train import load_model, train  # noqa: E402

# reduced configuration for desk-scale training: stem width 32, four primary
# channels, 8-dimensional capsules, one conv caps layer
DESK_KW = dict(stem_width=32, primary_dim=8, primary_channels=4,
               conv_caps=1, caps_dim=8, caps_channels=8,
               epochs=3, batch_size=100, seed=0)

TRAIN_COUNT = 10000
TEST_COUNT = 2000


def real_mnist_dir():
    """Directory holding canonical MNIST IDX files, or None."""
    root = os.environ.get("ARCAPS_DATA_DIR")
    if not root:
        return None
    root = Path(root)
    names = ["train-images-idx3-ubyte", "train-labels-idx1-ubyte",
             "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"]
    if all((root / n).exists() for n in names):
        return root
    return None


@pytest.fixture(scope="session")
def digits_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("digits")
    digitgen.write_dataset(out, TRAIN_COUNT, TEST_COUNT, seed=0)
    return out


@pytest.fixture(scope="session")
def digits_train(digits_dir):
    return load_idx(digits_dir / "train-images-idx3-ubyte",
                    digits_dir / "train-labels-idx1-ubyte")


@pytest.fixture(scope="session")
def digits_test(digits_dir):
    return load_idx(digits_dir / "t10k-images-idx3-ubyte",
                    digits_dir / "t10k-labels-idx1-ubyte", "test")


@pytest.fixture(scope="session")
def desk_config(digits_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("desk_run")
    return RunConfig(data_dir=str(digits_dir), out_dir=str(out), **DESK_KW)


@pytest.fixture(scope="session")
def desk_run(desk_config, digits_train):
    start = time.perf_counter()
    run = train(desk_config, digits_train)
    elapsed = time.perf_counter() - start
    return run, elapsed


@pytest.fixture(scope="session")
def trained_model(desk_run):
    run, _ = desk_run
    model, _, _ = load_model(run.best_path)
    return model


@pytest.fixture(scope="session")
def untrained_model(desk_config):
    return ArCapsNet(desk_config.model_config(), seed=99)


@pytest.fixture
def tiny_config():
    return ModelConfig(
        input_width=8, input_height=8, stem_width=3, primary_dim=3,
        primary_channels=2, conv_caps=(ConvCapsSpec(dim=4, channels=3, stride=2),),
        out_dim=4, classes=3, decoder_widths=(8, 8))


@pytest.fixture
def tiny_run_config(tiny_config):
    """RunConfig whose model_config() equals tiny_config."""
    cfg = RunConfig(input_width=8, input_height=8, input_channels=1,
                    stem_width=3, primary_dim=3, primary_channels=2,
                    conv_caps=1, caps_dim=4, caps_channels=3, classes=3,
                    decoder_widths=(8, 8))
    assert cfg.model_config() == tiny_config
    return cfg


@pytest.fixture
def rng():
    return np.random.default_rng(0xC0FFEE)
