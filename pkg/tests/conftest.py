import numpy as np
import pytest

from hatcn.model import HatcnConfig, HatcnModel

ACCEPTANCE_LINES: list[str] = []


def randomized_model(rng, layers, channels, kernel, length) -> HatcnModel:
    """Model with every parameter drawn at random (biases and attention included)."""
    model = HatcnModel(HatcnConfig(layers, channels, kernel, length), seed=int(rng.integers(1 << 31)))
    for p in model.parameters("hatcn"):
        p.value = rng.normal(0.0, 0.6, size=p.shape)
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
