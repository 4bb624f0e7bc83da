from __future__ import annotations

import numpy as np
import pytest

from brainvqa.rng import stream


def digitized_sphere(radius: int, margin: int = 2) -> np.ndarray:
    n = radius + margin
    g = np.arange(-n, n + 1)
    x, y, z = np.meshgrid(g, g, g, indexing="ij")
    return (x * x + y * y + z * z <= radius * radius).astype(np.uint8)


def digitized_ellipsoid(semi_axes: tuple[int, int, int], margin: int = 2) -> np.ndarray:
    grids = np.meshgrid(
        *[np.arange(-(a + margin), a + margin + 1) for a in semi_axes], indexing="ij"
    )
    dist = sum((g / a) ** 2 for g, a in zip(grids, semi_axes))
    return (dist <= 1.0).astype(np.uint8)


def random_blob(seed: int, dims=(16, 16, 16), density: float = 0.35) -> np.ndarray:
    rng = stream(seed, "blob")
    return (rng.random(dims) < density).astype(np.uint8)


@pytest.fixture(scope="session")
def sphere10() -> np.ndarray:
    return digitized_sphere(10)
