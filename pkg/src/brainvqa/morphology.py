"""26-connected component decomposition and lesion spread classification.

Connectivity is hard-fixed at 26 (full 3x3x3 neighborhood).  Components are
numbered by decreasing voxel count, ties broken by the lowest first-voxel
linear index (first axis fastest), so the core component is always index 0
and outputs are deterministic.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SPREAD_SINGLE = "single lesion"
SPREAD_CORE_SATELLITES = "core with satellite lesions"
SPREAD_SCATTERED = "scattered lesions"
NOT_AVAILABLE = "N/A"

CORE_FRACTION_THRESHOLD = 0.7

# The 13 lexicographically-negative offsets of the 26-neighborhood; each
# unordered neighbor pair is visited exactly once.
_HALF_OFFSETS = [
    (dx, dy, dz)
    for dx in (-1, 0, 1)
    for dy in (-1, 0, 1)
    for dz in (-1, 0, 1)
    if (dx, dy, dz) < (0, 0, 0)
]


@dataclass
class ComponentLabeling:
    """Partition of a binary mask into 26-connected components.

    ``component_id`` holds 0 for background and ``i + 1`` for the component at
    list index ``i``; ``component_coords[i]`` is an (n_i, 3) voxel index array.
    """

    component_id: np.ndarray
    component_voxels: list[int]
    component_volumes: list[float]
    component_coords: list[np.ndarray]
    voxel_volume_mm3: float

    @property
    def n_components(self) -> int:
        return len(self.component_voxels)

    @property
    def total_voxels(self) -> int:
        return int(sum(self.component_voxels))

    @property
    def total_volume(self) -> float:
        return float(sum(self.component_volumes))

    @property
    def core_index(self) -> int:
        return 0

    @property
    def core_fraction(self) -> float:
        if not self.component_volumes:
            return 0.0
        return self.component_volumes[0] / self.total_volume


@dataclass(frozen=True)
class SpreadDescriptor:
    category: str
    core_fraction: float
    n_components: int


class _UnionFind:
    def __init__(self, n: int):
        self.parent = np.arange(n, dtype=np.int64)

    def find(self, x: int) -> int:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:  # path compression
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def connected_components(
    mask: np.ndarray, spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
) -> ComponentLabeling:
    """Label the 26-connected components of a binary mask.

    An empty mask yields an empty labeling with ``n_components == 0``
    (downstream maps it to N/A); it is not an error.
    """
    mask = np.asarray(mask)
    if mask.ndim != 3:
        raise ValueError(f"mask must be 3D, got shape {mask.shape}")
    fg = mask != 0
    dv = float(spacing[0] * spacing[1] * spacing[2])
    coords = np.argwhere(fg)
    labeling = np.zeros(mask.shape, dtype=np.int32)
    if coords.shape[0] == 0:
        return ComponentLabeling(labeling, [], [], [], dv)

    # Map voxel -> dense index for the union-find array.
    index = np.full(mask.shape, -1, dtype=np.int64)
    index[fg] = np.arange(coords.shape[0])
    uf = _UnionFind(coords.shape[0])
    dims = mask.shape
    for off in _HALF_OFFSETS:
        shifted = coords + off
        valid = np.ones(coords.shape[0], dtype=bool)
        for axis in range(3):
            valid &= (shifted[:, axis] >= 0) & (shifted[:, axis] < dims[axis])
        src = index[fg][valid]
        neigh = index[shifted[valid, 0], shifted[valid, 1], shifted[valid, 2]]
        hit = neigh >= 0
        for a, b in zip(src[hit], neigh[hit]):
            uf.union(int(a), int(b))

    roots = np.array([uf.find(i) for i in range(coords.shape[0])])
    # Deterministic ordering: decreasing size, ties by lowest first-voxel
    # linear index (first axis fastest, matching the volume layout).
    linear = np.ravel_multi_index((coords[:, 0], coords[:, 1], coords[:, 2]), dims, order="F")
    order_keys = {}
    for root in np.unique(roots):
        members = roots == root
        order_keys[root] = (-int(members.sum()), int(linear[members].min()))
    ordered_roots = sorted(order_keys, key=order_keys.get)

    voxels, volumes, coord_lists = [], [], []
    for new_id, root in enumerate(ordered_roots, start=1):
        members = coords[roots == root]
        labeling[members[:, 0], members[:, 1], members[:, 2]] = new_id
        voxels.append(members.shape[0])
        volumes.append(members.shape[0] * dv)
        coord_lists.append(members)
    return ComponentLabeling(labeling, voxels, volumes, coord_lists, dv)


def spread_classify(labeling: ComponentLabeling) -> SpreadDescriptor:
    """Map a component labeling onto the three-way spread vocabulary.

    One component is a single lesion; multiple components where the largest
    holds at least 70% of the volume are a core with satellites; anything
    else is scattered.  Empty masks are N/A.
    """
    n = labeling.n_components
    if n == 0:
        return SpreadDescriptor(NOT_AVAILABLE, 0.0, 0)
    f_core = labeling.core_fraction
    if n == 1:
        category = SPREAD_SINGLE
    elif f_core >= CORE_FRACTION_THRESHOLD:
        category = SPREAD_CORE_SATELLITES
    else:
        category = SPREAD_SCATTERED
    return SpreadDescriptor(category, f_core, n)
