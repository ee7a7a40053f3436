import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from kidlab import toysql
from kidlab.model import ModelConfig, init_params

settings.register_profile("kidlab", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("kidlab")


def micro_config(vocab: int = 10, max_len: int = 8) -> ModelConfig:
    """A model small enough for coordinate-wise finite differences (< 500 parameters)."""
    return ModelConfig(d_model=6, n_heads=2, n_layers=1, d_ff=6, vocab_size=vocab, max_len=max_len)


@pytest.fixture
def micro_params():
    return init_params(micro_config(), seed=3, scale=0.5, dtype=np.float64)


@pytest.fixture(scope="session")
def small_world():
    return toysql.generate_world(7, 100, 20)


@pytest.fixture(scope="session")
def tiny_student_config():
    return ModelConfig(d_model=16, n_heads=2, n_layers=1, d_ff=32)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(LINES, key=lambda k: int(k.split("-")[1])):
            terminalreporter.write_line(LINES[key])
