import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from morfi.tensor_store import ActivationTensor


def make_tensor(shape=(3, 4, 5, 6), seed=0, dtype="float64"):
    T, P, F, N = shape
    rng = np.random.default_rng(seed)
    return ActivationTensor(
        rng.random(shape).astype(dtype),
        [5.0 * (i + 1) for i in range(T)],
        list(np.linspace(0, 100, P)),
        [f"id{i}" for i in range(N)],
    )


@pytest.fixture
def small_tensor():
    return make_tensor()


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
