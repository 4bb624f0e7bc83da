"""Relative lesion volume binning and atlas-based region assignment.

Both operations require mask and reference on the same RAS grid; the atlas is
pluggable (any label volume plus an integer-to-region-name map over the fixed
nine-name vocabulary).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, GeometryError
from .morphology import NOT_AVAILABLE
from .nifti import LabelMask, Volume3D

REGION_NAMES = (
    "frontal",
    "parietal",
    "occipital",
    "temporal",
    "limbic",
    "insula",
    "subcortical",
    "cerebellum",
    "brainstem",
)

VOLUME_BINS = ("<1%", "1-5%", "5-10%", "10-25%", "25-50%", "50-75%")
# Half-open bin edges; the boundary belongs to the upper bin (0.01 -> "1-5%").
_BIN_EDGES = (0.01, 0.05, 0.10, 0.25, 0.50)
MAX_BINNED_FRACTION = 0.75

DEFAULT_MIN_OVERLAP_VOXELS = 10


@dataclass(frozen=True)
class VolumeBin:
    bin: str
    raw_fraction: float
    clamped: bool = False


@dataclass(frozen=True)
class RegionAssignment:
    """Regions ordered by descending overlap count, ties alphabetical."""

    regions: tuple[str, ...]
    overlap_counts: dict[str, int] = field(default_factory=dict)


@dataclass
class Atlas:
    labels: LabelMask
    region_map: dict[int, str]
    provenance: str = ""

    def __post_init__(self):
        bad = {name for name in self.region_map.values() if name not in REGION_NAMES}
        if bad:
            raise ConfigError(f"region map uses unknown region names: {sorted(bad)}")
        unmapped = self.labels.label_set - set(self.region_map)
        if unmapped:
            raise ConfigError(f"atlas labels {sorted(unmapped)} missing from region map")


def load_region_map(path) -> dict[int, str]:
    """Read an integer-label -> region-name JSON map."""
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    try:
        return {int(k): str(v) for k, v in raw.items()}
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"region map {path} must map integer labels to names") from exc


def _require_same_grid(a: Volume3D, b: Volume3D, what: str) -> None:
    if a.header.dims != b.header.dims:
        raise GeometryError(f"{what}: grids differ, {a.header.dims} vs {b.header.dims}")
    if not np.allclose(a.header.affine, b.header.affine, atol=1e-6):
        raise GeometryError(f"{what}: affines differ; conform both volumes first")


def relative_volume(mask: np.ndarray, brain: Volume3D) -> float:
    """Foreground voxel count of the mask divided by nonzero brain voxels."""
    mask = np.asarray(mask)
    if mask.shape != brain.header.dims:
        raise GeometryError(
            f"mask shape {mask.shape} does not match brain grid {brain.header.dims}"
        )
    brain_voxels = int(np.count_nonzero(brain.data))
    if brain_voxels == 0:
        raise GeometryError("brain volume has no nonzero voxels; fraction undefined")
    return float(np.count_nonzero(mask)) / brain_voxels


def volume_bin(fraction: float) -> VolumeBin:
    """Bin a fraction in [0, 1]; above 0.75 clamps with a warning flag."""
    if not 0.0 <= fraction <= 1.0:
        raise GeometryError(f"fraction {fraction} outside [0, 1]")
    if fraction > MAX_BINNED_FRACTION:
        return VolumeBin(VOLUME_BINS[-1], fraction, clamped=True)
    for edge, name in zip(_BIN_EDGES, VOLUME_BINS):
        if fraction < edge:
            return VolumeBin(name, fraction)
    return VolumeBin(VOLUME_BINS[-1], fraction)


def region_overlap(
    mask: np.ndarray,
    atlas: Atlas,
    min_overlap_voxels: int = DEFAULT_MIN_OVERLAP_VOXELS,
) -> RegionAssignment | None:
    """Regions whose atlas labels intersect the mask in >= the voxel floor.

    Returns None (N/A) for an empty mask.  Ordering is descending overlap
    count with alphabetical ties so rendered text is deterministic.
    """
    mask = np.asarray(mask)
    if mask.shape != atlas.labels.volume.header.dims:
        raise GeometryError(
            f"mask shape {mask.shape} does not match atlas grid "
            f"{atlas.labels.volume.header.dims}"
        )
    if not (mask != 0).any():
        return None
    overlapped = atlas.labels.volume.data[mask != 0]
    counts_by_label = np.bincount(overlapped.astype(np.int64).ravel())
    counts: dict[str, int] = {}
    for label, count in enumerate(counts_by_label):
        if label == 0 or count == 0:
            continue
        name = atlas.region_map.get(label)
        if name is not None:
            counts[name] = counts.get(name, 0) + int(count)
    kept = {name: c for name, c in counts.items() if c >= min_overlap_voxels}
    ordered = tuple(sorted(kept, key=lambda name: (-kept[name], name)))
    return RegionAssignment(regions=ordered, overlap_counts=kept)


def region_list_text(regions: tuple[str, ...] | None) -> str:
    """Comma-and rendering: 'frontal, parietal and temporal'; empty -> 'N/A'."""
    if regions is None or len(regions) == 0:
        return NOT_AVAILABLE
    if len(regions) == 1:
        return regions[0]
    return ", ".join(regions[:-1]) + " and " + regions[-1]
