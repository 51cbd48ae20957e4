import numpy as np
import pytest

from camo import tensor as T
from camo.model import CaptionModel, ModelConfig


def leaf(rng, *shape, low=-2.0, high=2.0):
    return T.tensor(rng.uniform(low, high, size=shape), requires_grad=True)


def tiny_config(**overrides) -> ModelConfig:
    base = dict(d_feat=3, d_model=4, n_heads=2, d_ff=6, enc_layers=2, dec_layers=1, vocab_size=6, max_len=4)
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    return CaptionModel(tiny_config(), seed=7)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    def report(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}: {detail}"
        print(line)
        ACCEPTANCE_LINES.append(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
