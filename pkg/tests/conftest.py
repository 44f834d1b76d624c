import numpy as np
import pytest

from slamformer.data import SyntheticSpec, generate_synthetic_sequence
from slamformer.model import ImageFrame, ModelConfig, SlamFormer

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def random_frames(n, hw=(32, 32), seed=0):
    rng = np.random.default_rng(seed)
    return [ImageFrame(rng.random((*hw, 3)), 0.1 * i, i) for i in range(n)]


@pytest.fixture
def toy_model():
    return SlamFormer(ModelConfig(), seed=3)


@pytest.fixture(scope="session")
def synthetic20():
    return generate_synthetic_sequence(SyntheticSpec(num_frames=20), seed=0)
