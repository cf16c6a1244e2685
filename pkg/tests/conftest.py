import numpy as np
import pytest

from comigs.toy_lm import TinyLM


def randomize_adapters(model: TinyLM, rng: np.random.Generator, scale: float = 0.3) -> TinyLM:
    """Give every LoRA B and router a nonzero value so all gradient paths are live."""
    for k, v in model.params.items():
        if k.endswith(".B") or model.role(k) == "router":
            v[...] = rng.normal(0.0, scale, size=v.shape)
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
