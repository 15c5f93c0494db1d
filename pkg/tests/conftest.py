import numpy as np
import pytest

from ptqkit.calibration import CalibrationSet
from ptqkit.model import place_quant_nodes
from ptqkit.synthetic import SynthConfig, synthesize

BITS6 = {"weight": 6, "embedding": 6, "activation": 6}

# one-block model small enough for brute-force oracles
TINY = dict(L=1, n=16, heads=2, T=8, vocab=40, d_ff=32, outlier_neurons=2, n_calib=16, n_eval=64, n_train=256, batch_size=8)

ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def synth():
    """Default planted-outlier model with a fitted head, plus its data."""
    return synthesize(SynthConfig())


@pytest.fixture(scope="session")
def tiny():
    return synthesize(SynthConfig(**TINY))


@pytest.fixture
def tiny_q(tiny):
    model, data = tiny
    m = model.copy()
    place_quant_nodes(m, BITS6)
    return m, CalibrationSet.from_data(data)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
