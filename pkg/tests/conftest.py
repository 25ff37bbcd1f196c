import numpy as np
import pytest

from conflictdecode.forge import KBSpec, build_kb, synthesize_dataset
from conflictdecode.model import ModelConfig, init_params

TINY_KB = KBSpec(n_types=2, entities_per_type=8, n_relations=2, n_facts=10, seed=0)
TINY_MODEL = ModelConfig(vocab_size=64, d_model=32, n_layers=2, n_heads=2, d_ff=64, max_seq=96, seed=3)


def sharpened(config=TINY_MODEL, scale=25.0):
    """Random model with scaled-up weights so argmax choices are far from ties."""
    params = init_params(config)
    for name, value in params.tensors.items():
        if value.ndim == 2:
            params.tensors[name] = value * np.float32(scale)
    return params


@pytest.fixture(scope="session")
def tiny_kb():
    return build_kb(TINY_KB)


@pytest.fixture(scope="session")
def tiny_vocab(tiny_kb):
    return tiny_kb.vocabulary()


@pytest.fixture(scope="session")
def tiny_params():
    return sharpened()


@pytest.fixture(scope="session")
def tiny_dataset(tiny_kb):
    return synthesize_dataset(tiny_kb, 20, 0.5, 2, seed=1)


# acceptance criteria register their verdicts here; printed after the run
ACCEPTANCE = {}


def record_criterion(key, passed, detail):
    ACCEPTANCE[key] = (bool(passed), detail)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (int(k.split(".")[0].rstrip("abcd")), k)):
        passed, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if passed else 'FAIL'} - {detail}")
