import numpy as np
import pytest

from ctmc_lab.state_space import DensePmf, SpaceConfig


def random_instance(rng, max_size=256, max_S=10, max_d=4):
    """Random (space, q0) with S^d <= max_size; q0 is a strictly positive Dirichlet draw or a point mass."""
    while True:
        S = int(rng.integers(2, max_S + 1))
        d = int(rng.integers(1, max_d + 1))
        if S**d <= max_size:
            break
    space = SpaceConfig(S, d)
    if rng.random() < 0.3:
        q0 = DensePmf.point_mass(space, int(rng.integers(space.size)))
    else:
        q0 = DensePmf.dirichlet(space, float(rng.uniform(0.3, 2.0)), int(rng.integers(2**31)))
    return space, q0


def random_neighbor_pair(rng, space):
    x = tuple(int(v) for v in rng.integers(0, space.S, size=space.d))
    i = int(rng.integers(space.d))
    a = int((x[i] + rng.integers(1, space.S)) % space.S)
    y = x[:i] + (a,) + x[i + 1:]
    return x, y


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def small_space():
    return SpaceConfig(3, 2)
