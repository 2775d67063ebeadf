from __future__ import annotations

import numpy as np
import pytest

from hskinetic.core import Configuration, FreeSpace, Torus, make_rng


def random_gas(n: int, eps: float, rng: np.random.Generator, box: float = 1.0, torus: bool = False) -> Configuration:
    """Non-overlapping gas drawn by sequential rejection (only used to build test fixtures)."""
    xs: list[np.ndarray] = []
    domain = Torus(box) if torus else FreeSpace()
    while len(xs) < n:
        x = rng.uniform(0, box, 3)
        if all(np.linalg.norm(domain.displacement(x[None], y[None])[0]) > 1.05 * eps for y in xs):
            xs.append(x)
    return Configuration(np.array(xs), rng.normal(size=(n, 3)), eps, domain)


@pytest.fixture
def rng() -> np.random.Generator:
    return make_rng(12345)
