"""Per-component 3D shape metrics, aggregation, and category assignment.

Metrics per component: voxel volume, marching-cubes surface area, sphericity,
compactness (area/volume), principal-axis elongation and flatness, and
convex-hull solidity.  Aggregation keeps the core component's metrics when it
dominates, otherwise averages; the category comes from fixed sphericity and
elongation thresholds with a small-volume "focus" override.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .errors import GeometryError
from .hull import convex_hull_volume, voxel_corner_points
from .morphology import CORE_FRACTION_THRESHOLD, NOT_AVAILABLE, ComponentLabeling
from .surface import marching_cubes, mesh_area, single_voxel_mesh

SHAPE_FOCUS = "focus"
SHAPE_ROUND = "round"
SHAPE_OVAL = "oval"
SHAPE_ELONGATED = "elongated"
SHAPE_IRREGULAR = "irregular"
SHAPE_CATEGORIES = (SHAPE_FOCUS, SHAPE_ROUND, SHAPE_OVAL, SHAPE_ELONGATED, SHAPE_IRREGULAR)

FOCUS_VOLUME_MM3 = 100.0  # 0.1 cm^3
ROUND_SPHERICITY = 0.85
OVAL_SPHERICITY = 0.60
ROUND_ELONGATION = 1.3
OVAL_ELONGATION = 2.5

_EIG_ZERO_TOL = 1e-12


@dataclass(frozen=True)
class ShapeMetrics:
    volume: float  # mm^3
    area: float  # mm^2
    sphericity: float
    compactness: float  # mm^-1
    eigenvalues: tuple[float, float, float]  # mm^2, descending
    elongation: float
    flatness: float
    solidity: float


def pca_axes(
    coords: np.ndarray, spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
) -> tuple[float, float, float]:
    """Descending eigenvalues of the biased covariance of world voxel centers.

    No regularization is applied here; a single voxel yields (0, 0, 0).
    """
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    if coords.shape[0] < 1:
        raise GeometryError("pca_axes needs at least one voxel")
    world = coords * np.asarray(spacing, dtype=np.float64)
    centered = world - world.mean(axis=0)
    cov = centered.T @ centered / coords.shape[0]
    eig = np.linalg.eigvalsh(cov)
    eig = np.clip(eig, 0.0, None)[::-1]
    return (float(eig[0]), float(eig[1]), float(eig[2]))


def _regularized_axes(
    coords: np.ndarray, spacing: tuple[float, float, float]
) -> tuple[float, float, float]:
    """Eigenvalues with the single-voxel variance floor mixed in.

    A voxel is a cube, not a point: adding spacing^2/12 per axis (the variance
    of a uniform voxel) keeps elongation and flatness finite for components
    with fewer than 3 voxels or with a zero minor axis.
    """
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    spacing = np.asarray(spacing, dtype=np.float64)
    world = coords * spacing
    centered = world - world.mean(axis=0)
    cov = centered.T @ centered / coords.shape[0]
    cov += np.diag(spacing**2 / 12.0)
    eig = np.clip(np.linalg.eigvalsh(cov), 0.0, None)[::-1]
    return (float(eig[0]), float(eig[1]), float(eig[2]))


def shape_metrics(
    coords: np.ndarray, spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
) -> ShapeMetrics:
    """All shape metrics of one connected component given its voxel coords."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    if coords.shape[0] == 0:
        raise GeometryError("cannot compute shape metrics of an empty component")
    spacing = tuple(float(s) for s in spacing)
    dv = spacing[0] * spacing[1] * spacing[2]
    volume = coords.shape[0] * dv

    if coords.shape[0] < 2:
        mesh = single_voxel_mesh(tuple(coords[0]), spacing)
    else:
        offset = coords.min(axis=0)
        local = coords - offset
        mask = np.zeros(tuple(local.max(axis=0) + 1), dtype=np.uint8)
        mask[local[:, 0], local[:, 1], local[:, 2]] = 1
        mesh = marching_cubes(mask, spacing)
    area = mesh_area(mesh)

    lam = pca_axes(coords, spacing)
    if coords.shape[0] < 3 or lam[1] < _EIG_ZERO_TOL or lam[2] < _EIG_ZERO_TOL:
        lam = _regularized_axes(coords, spacing)
    elongation = float(np.sqrt(lam[0] / lam[1]))
    flatness = float(np.sqrt(lam[2] / lam[1]))

    hull_volume = convex_hull_volume(voxel_corner_points(coords, spacing))
    sphericity = float(np.pi ** (1.0 / 3.0) * (6.0 * volume) ** (2.0 / 3.0) / area)
    return ShapeMetrics(
        volume=volume,
        area=area,
        sphericity=sphericity,
        compactness=area / volume,
        eigenvalues=lam,
        elongation=elongation,
        flatness=flatness,
        solidity=volume / hull_volume,
    )


def component_shape_metrics(
    labeling: ComponentLabeling, spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
) -> list[ShapeMetrics]:
    return [shape_metrics(coords, spacing) for coords in labeling.component_coords]


def aggregate_metrics(
    per_component: list[ShapeMetrics], f_core: float, n_components: int
) -> ShapeMetrics:
    """Core component's metrics when it dominates, else the unweighted mean.

    The core is dominant when it is the only component or holds at least 70%
    of the total volume; component 0 is the core by the labeling order.
    """
    if not per_component:
        raise GeometryError("aggregate_metrics needs at least one component")
    if n_components == 1 or f_core >= CORE_FRACTION_THRESHOLD:
        return per_component[0]
    values = {}
    for f in fields(ShapeMetrics):
        column = [getattr(m, f.name) for m in per_component]
        if f.name == "eigenvalues":
            values[f.name] = tuple(np.mean(column, axis=0))
        else:
            values[f.name] = float(np.mean(column))
    return ShapeMetrics(**values)


def shape_classify(agg: ShapeMetrics, total_volume_mm3: float) -> str:
    """Five-way shape category; cases evaluated in listed order, first match wins."""
    phi, e = agg.sphericity, agg.elongation
    if total_volume_mm3 < FOCUS_VOLUME_MM3:
        return SHAPE_FOCUS
    if phi >= ROUND_SPHERICITY and e <= ROUND_ELONGATION:
        return SHAPE_ROUND
    if OVAL_SPHERICITY <= phi < ROUND_SPHERICITY and ROUND_ELONGATION < e <= OVAL_ELONGATION:
        return SHAPE_OVAL
    if e > OVAL_ELONGATION:
        return SHAPE_ELONGATED
    return SHAPE_IRREGULAR


def describe_shape(
    labeling: ComponentLabeling, spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
) -> tuple[str, ShapeMetrics | None]:
    """Category plus aggregated metrics for a labeled mask (N/A when empty)."""
    if labeling.n_components == 0:
        return NOT_AVAILABLE, None
    per_component = component_shape_metrics(labeling, spacing)
    agg = aggregate_metrics(per_component, labeling.core_fraction, labeling.n_components)
    return shape_classify(agg, labeling.total_volume), agg
