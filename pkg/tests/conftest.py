import os

import numpy as np
import pytest

from src.autodiff.tensor import get_tape, wide_precision
from src.data.synth import SyntheticGenerator
from src.models.config import ModelConfig


@pytest.fixture(autouse=True)
def isolated_logs(tmp_path, monkeypatch):
    """Keep service-object log files out of the working tree."""
    monkeypatch.setenv('SDU_SEG_LOG_DIR', str(tmp_path / 'logs'))
    yield
    get_tape().reset()


@pytest.fixture
def wide():
    with wide_precision():
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def mini_config():
    return ModelConfig(widths=(8, 16, 32, 64), channel_rounding='floor')


def make_synth(root, n=8, size=16, seed=3, **kwargs) -> str:
    SyntheticGenerator(str(root), size, seed=seed, workers=1, **kwargs).generate(n)
    return str(root)


@pytest.fixture
def synth_root(tmp_path):
    return make_synth(tmp_path / 'synth')


@pytest.fixture
def clean_synth_root(tmp_path):
    """Speckle-free data: the mask is exactly the bright region of the image."""
    return make_synth(tmp_path / 'clean', n=6, size=16, speckle=False)


def tree_bytes(root: str, skip=()) -> dict:
    found = {}
    for base, _, names in os.walk(root):
        for name in names:
            if name in skip:
                continue
            path = os.path.join(base, name)
            with open(path, 'rb') as f:
                found[os.path.relpath(path, root)] = f.read()
    return found
