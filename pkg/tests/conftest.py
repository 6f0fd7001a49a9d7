from __future__ import annotations

import os
from pathlib import Path

import numpy as np
import pytest

from aotsnn.network import NetworkConfig, build_network
from aotsnn.tensor import Rng

MNIST_ROOT = Path(os.environ.get("AOTSNN_DATA_ROOT", "~/data/mnist")).expanduser()


def tiny_config(**overrides) -> NetworkConfig:
    base = dict(input_shape=(1, 4, 4), encoder=[[2]], hidden=6, num_classes=3, T=3, dropout_rate=0.0)
    base.update(overrides)
    return NetworkConfig(**base)


@pytest.fixture
def tiny_net():
    return build_network(tiny_config(), Rng(0).stream("init"))


@pytest.fixture(scope="session")
def mnist_root():
    if not (MNIST_ROOT / "t10k-images-idx3-ubyte").exists():
        pytest.skip("MNIST files not available")
    return MNIST_ROOT


def rel_err(a, b, floor: float = 1e-8) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
