import numpy as np
import pytest

from lcc.model import ModelConfig, ModelWeights
from lcc.tensor import RngState

TOY = ModelConfig(vocab_size=24, d_model=16, n_layers=2, n_heads=2, head_dim=8, d_ff=32, max_position=128)


def toy_weights(seed: int = 0, config: ModelConfig = TOY, freeze: bool = True) -> ModelWeights:
    w = ModelWeights.init(config, RngState(seed))
    if freeze:
        w.freeze()
    return w


@pytest.fixture
def toy():
    return toy_weights()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
