import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from killshape.diffnet import DTYPE, MlpConfig
from killshape.selftest import random_net

settings.register_profile(
    "default", max_examples=40, deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def net(rng):
    """Desk-size network with jittered weights so every derivative is generic."""
    return random_net(rng)


@pytest.fixture
def tiny_net(rng):
    return random_net(rng, MlpConfig(hidden_layers=2, hidden_width=16, latent_dim=2,
                                     skip_layer=1, part_hidden=8, parts=2))


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def t64(a):
    return torch.as_tensor(np.asarray(a, dtype=np.float64), dtype=DTYPE)


# -- acceptance report -------------------------------------------------------

ACCEPTANCE: dict[int, str] = {}


def record(number: int, name: str, passed: bool, detail: str) -> bool:
    """Store and print one PASS/FAIL line for an acceptance criterion."""
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:2d} {name}: {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
