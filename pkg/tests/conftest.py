import numpy as np
import pytest

from lloco.encoder import CompressionConfig
from lloco.model import Decoder, ModelConfig


@pytest.fixture
def tiny_cfg():
    return ModelConfig(d_model=32, n_layers=2, n_heads=4, window=64, n_slots=4, seed=3)


@pytest.fixture
def tiny(tiny_cfg):
    return Decoder(tiny_cfg)


@pytest.fixture
def toy_model():
    """Default toy config (d=64, W=256), random weights."""
    return Decoder(ModelConfig())


@pytest.fixture
def toy_comp():
    return CompressionConfig.toy()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance report ---------------------------------------------------------

_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def acceptance():
    """``acceptance(n, ok, detail)`` records one PASS/FAIL line for criterion n."""

    def record(n: int, ok: bool, detail: str) -> bool:
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE[n] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
