import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fairdolce.core import DataPoint, init_params  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_params():
    return init_params(feature_dim=4, latent_semantic=3, latent_variation=2, seed=42)


def make_point(features, z=1, y=0, e=0):
    return DataPoint(np.asarray(features, dtype=float), z, y, e)


def random_points(rng, n, d, envs=(0,), labels=(0, 1)):
    return [
        DataPoint(rng.standard_normal(d), int(rng.choice([-1, 1])), int(rng.choice(labels)),
                  int(rng.choice(envs)))
        for _ in range(n)
    ]


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
