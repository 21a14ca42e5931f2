import numpy as np
import pytest

from steinflow.config import KernelFamily
from steinflow.kernels import KernelSpec
from steinflow.targets import GaussianTarget


@pytest.fixture
def std_normal():
    return GaussianTarget([0.0], [[1.0]])


@pytest.fixture
def std_normal_2d():
    return GaussianTarget([0.0, 0.0], np.eye(2))


@pytest.fixture
def rbf():
    return KernelSpec(KernelFamily.RBF, 1.0)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def write_config(tmp_path):
    def write(text: str, name: str = "experiment.toml") -> str:
        path = tmp_path / name
        path.write_text(text, encoding="utf-8")
        return str(path)
    return write
