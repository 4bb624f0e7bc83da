"""Isosurface extraction and triangle-mesh measurements.

Marching cubes runs at iso-level 0.5 on a one-voxel zero-padded copy of the
mask with linear edge interpolation, so meshes are closed by construction;
vertex positions are scaled by the voxel spacing into millimeters.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from .errors import GeometryError
from .mc_tables import TRI_TABLE

# Cube corner offsets and the corner pair of each of the 12 edges, in the
# numbering the tables assume (v0 at the cell origin; x, then y, then z).
CORNER_OFFSETS = np.array(
    [
        (0, 0, 0),
        (1, 0, 0),
        (1, 1, 0),
        (0, 1, 0),
        (0, 0, 1),
        (1, 0, 1),
        (1, 1, 1),
        (0, 1, 1),
    ],
    dtype=np.int64,
)
EDGE_CORNERS = [
    (0, 1), (1, 2), (2, 3), (3, 0),
    (4, 5), (5, 6), (6, 7), (7, 4),
    (0, 4), (1, 5), (2, 6), (3, 7),
]

# Global identity of a cell edge: (corner offset of the lower endpoint, axis
# along which the edge runs).  Used to weld vertices shared between cells.
_EDGE_GLOBAL = []
for _a, _b in EDGE_CORNERS:
    _lo = np.minimum(CORNER_OFFSETS[_a], CORNER_OFFSETS[_b])
    _axis = int(np.argmax(CORNER_OFFSETS[_a] != CORNER_OFFSETS[_b]))
    _EDGE_GLOBAL.append((_lo, _axis))

ISO_LEVEL = 0.5


@dataclass
class SurfaceMesh:
    """Triangle mesh in world millimeters."""

    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (
            self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)
        ):
            raise GeometryError("triangle indices out of range")
        if not np.isfinite(self.vertices).all():
            raise GeometryError("non-finite mesh vertex")


def cell_triangles(case: int) -> list[tuple[int, int, int]]:
    """Edge-index triples of one table case (exposed for the table audit)."""
    row = TRI_TABLE[case]
    tris = []
    for i in range(0, 16, 3):
        if row[i] < 0:
            break
        tris.append((row[i], row[i + 1], row[i + 2]))
    return tris


def marching_cubes(
    mask: np.ndarray, spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
) -> SurfaceMesh:
    """Extract the closed iso-surface of a nonempty binary mask.

    Vertices are welded: a grid edge crossed by the surface contributes one
    vertex shared by every incident triangle, which is what makes the
    every-edge-in-two-triangles closure property checkable.
    """
    mask = np.asarray(mask)
    if mask.ndim != 3:
        raise GeometryError(f"mask must be 3D, got shape {mask.shape}")
    if not (mask != 0).any():
        raise GeometryError("cannot mesh an empty component")

    grid = np.zeros(tuple(d + 2 for d in mask.shape), dtype=np.float64)
    grid[1:-1, 1:-1, 1:-1] = (mask != 0).astype(np.float64)

    # Case index per cell: bit i set when corner i is below the iso-level
    # (background), matching the table convention.
    nx, ny, nz = (s - 1 for s in grid.shape)
    case = np.zeros((nx, ny, nz), dtype=np.int32)
    for bit, (ox, oy, oz) in enumerate(CORNER_OFFSETS):
        below = grid[ox : ox + nx, oy : oy + ny, oz : oz + nz] < ISO_LEVEL
        case |= below.astype(np.int32) << bit

    active = np.argwhere((case != 0) & (case != 255))
    spacing = np.asarray(spacing, dtype=np.float64)

    vertex_ids: dict[tuple[int, int, int, int], int] = {}
    vertices: list[np.ndarray] = []
    triangles: list[tuple[int, int, int]] = []

    def edge_vertex(cell: np.ndarray, edge: int) -> int:
        lo, axis = _EDGE_GLOBAL[edge]
        base = cell + lo
        key = (int(base[0]), int(base[1]), int(base[2]), axis)
        vid = vertex_ids.get(key)
        if vid is not None:
            return vid
        v0 = grid[base[0], base[1], base[2]]
        p1 = base.copy()
        p1[axis] += 1
        v1 = grid[p1[0], p1[1], p1[2]]
        mu = (ISO_LEVEL - v0) / (v1 - v0)
        pos = base.astype(np.float64)
        pos[axis] += mu
        vertices.append((pos - 1.0) * spacing)  # undo the one-voxel pad
        vid = len(vertices) - 1
        vertex_ids[key] = vid
        return vid

    for cell in active:
        c = int(case[cell[0], cell[1], cell[2]])
        for ea, eb, ec in cell_triangles(c):
            triangles.append(
                (edge_vertex(cell, ea), edge_vertex(cell, eb), edge_vertex(cell, ec))
            )

    mesh = SurfaceMesh(np.array(vertices), np.array(triangles, dtype=np.int64))
    areas = triangle_areas(mesh)
    if areas.size and areas.min() <= 0.0:
        raise GeometryError("marching cubes produced a degenerate triangle")
    return mesh


def single_voxel_mesh(
    center_index: tuple[int, int, int], spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
) -> SurfaceMesh:
    """Analytic octahedral iso-surface of one voxel.

    Identical to the lookup-table output for an isolated voxel; used as the
    fast path for single-voxel components.
    """
    c = np.asarray(center_index, dtype=np.float64) * np.asarray(spacing, dtype=np.float64)
    h = 0.5 * np.asarray(spacing, dtype=np.float64)
    verts = np.array(
        [
            c + [h[0], 0, 0], c - [h[0], 0, 0],
            c + [0, h[1], 0], c - [0, h[1], 0],
            c + [0, 0, h[2]], c - [0, 0, h[2]],
        ]
    )
    xp, xm, yp, ym, zp, zm = range(6)
    tris = np.array(
        [
            (xp, yp, zp), (yp, xm, zp), (xm, ym, zp), (ym, xp, zp),
            (yp, xp, zm), (xm, yp, zm), (ym, xm, zm), (xp, ym, zm),
        ],
        dtype=np.int64,
    )
    return SurfaceMesh(verts, tris)


def triangle_areas(mesh: SurfaceMesh) -> np.ndarray:
    p = mesh.vertices[mesh.triangles[:, 0]]
    q = mesh.vertices[mesh.triangles[:, 1]]
    r = mesh.vertices[mesh.triangles[:, 2]]
    cross = np.cross(q - p, r - p)
    return 0.5 * np.linalg.norm(cross, axis=1)


def mesh_area(mesh: SurfaceMesh) -> float:
    """Total surface area in mm^2 (half cross-product magnitude per triangle)."""
    return float(triangle_areas(mesh).sum())


def edge_incidence(mesh: SurfaceMesh) -> Counter:
    """Count how many triangles share each undirected edge."""
    counts: Counter = Counter()
    for a, b, c in mesh.triangles:
        for u, v in ((a, b), (b, c), (c, a)):
            counts[(min(u, v), max(u, v))] += 1
    return counts


def is_closed(mesh: SurfaceMesh) -> bool:
    """True when every undirected edge is shared by exactly two triangles."""
    counts = edge_incidence(mesh)
    return bool(counts) and all(n == 2 for n in counts.values())


def is_orientable(mesh: SurfaceMesh) -> bool:
    """True when every directed edge appears exactly once (consistent winding)."""
    seen = set()
    for a, b, c in mesh.triangles:
        for u, v in ((a, b), (b, c), (c, a)):
            if (u, v) in seen:
                return False
            seen.add((u, v))
    return True


def write_off(mesh: SurfaceMesh, path) -> None:
    """Write the mesh in ASCII OFF format."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("OFF\n")
        fh.write(f"{len(mesh.vertices)} {len(mesh.triangles)} 0\n")
        for v in mesh.vertices:
            fh.write(f"{v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for t in mesh.triangles:
            fh.write(f"3 {t[0]} {t[1]} {t[2]}\n")
