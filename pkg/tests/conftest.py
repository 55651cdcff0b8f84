import numpy as np
import pytest

from flcgrid.config import build_system, load_config
from flcgrid.grid import FullNetwork, Line


@pytest.fixture(scope="session")
def desk3_config():
    return load_config("desk3")


@pytest.fixture(scope="session")
def desk3(desk3_config):
    return build_system(desk3_config)


@pytest.fixture
def tri_bus():
    """Conductance-only 3-bus network: lines 1-3 and 2-3 of g=10, generators at 1 and 2."""
    return FullNetwork.from_lines(3, [Line(0, 2, 10.0, 0.0), Line(1, 2, 10.0, 0.0)], (0, 1))


def random_network(rng, n_bus, n_gen):
    """Connected random network with lossy lines and small load shunts."""
    lines = [Line(k, int(rng.integers(0, k)), *_branch(rng)) for k in range(1, n_bus)]
    for _ in range(int(rng.integers(0, n_bus))):
        a, b = (int(v) for v in rng.choice(n_bus, 2, replace=False))
        lines.append(Line(a, b, *_branch(rng)))
    shunts = {k: (float(rng.uniform(0.0, 0.5)), float(rng.uniform(-0.2, 0.2))) for k in range(n_bus)}
    gens = tuple(int(g) for g in rng.choice(n_bus, n_gen, replace=False))
    return FullNetwork.from_lines(n_bus, lines, gens, shunts)


def _branch(rng):
    y = 1.0 / complex(rng.uniform(0.001, 0.05), rng.uniform(0.02, 0.5))
    return y.real, y.imag
