"""3D convex hull volume via quickhull.

Volume is accumulated as signed tetrahedra from an interior point over the
outward-oriented hull facets.  Inputs that span fewer than three dimensions
raise :class:`DegenerateHullError`; callers that need a guaranteed 3D point
set (solidity) feed voxel corners rather than centers.
"""
from __future__ import annotations

import numpy as np

from .errors import DegenerateHullError


def convex_hull_volume(points: np.ndarray) -> float:
    """Volume of the convex hull of a 3D point cloud."""
    faces, pts, interior = quickhull(points)
    a = pts[faces[:, 0]] - interior
    b = pts[faces[:, 1]] - interior
    c = pts[faces[:, 2]] - interior
    signed = np.einsum("ij,ij->i", a, np.cross(b, c)) / 6.0
    return float(signed.sum())


def quickhull(points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Compute hull facets (outward-oriented vertex triples).

    Returns ``(faces, points, interior_point)`` where ``faces`` is (F, 3)
    indices into ``points``.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    pts = np.unique(pts, axis=0)
    if pts.shape[0] < 4:
        raise DegenerateHullError(f"need at least 4 distinct points, got {pts.shape[0]}")
    scale = float(np.abs(pts).max())
    eps = 1e-9 * max(scale, 1.0)

    simplex = _initial_simplex(pts, eps)
    interior = pts[simplex].mean(axis=0)

    # Outward-oriented initial faces of the tetrahedron.
    i0, i1, i2, i3 = simplex
    faces: dict[int, tuple[int, int, int]] = {}
    next_id = 0
    for tri in ((i0, i1, i2), (i0, i3, i1), (i1, i3, i2), (i2, i3, i0)):
        faces[next_id] = _orient_outward(tri, pts, interior)
        next_id += 1

    normals = {fid: _plane(pts, tri) for fid, tri in faces.items()}
    outside: dict[int, list[int]] = {fid: [] for fid in faces}
    unclaimed = [i for i in range(pts.shape[0]) if i not in set(simplex)]
    _assign(unclaimed, faces, normals, outside, pts, eps)

    pending = [fid for fid, lst in outside.items() if lst]
    while pending:
        fid = pending.pop()
        if fid not in faces or not outside.get(fid):
            continue
        cand = outside[fid]
        n, d = normals[fid]
        dists = pts[cand] @ n - d
        apex = cand[int(np.argmax(dists))]

        visible = _visible_faces(apex, fid, faces, normals, pts, eps)
        horizon = _horizon_edges(visible, faces)

        orphans: list[int] = []
        for vid in visible:
            orphans.extend(outside.pop(vid, []))
            del faces[vid]
            del normals[vid]
        orphans = [p for p in set(orphans) if p != apex]

        new_ids = []
        for a, b in horizon:
            tri = (a, b, apex)
            tri = _orient_outward(tri, pts, interior)
            faces[next_id] = tri
            normals[next_id] = _plane(pts, tri)
            outside[next_id] = []
            new_ids.append(next_id)
            next_id += 1
        _assign(orphans, {i: faces[i] for i in new_ids}, normals, outside, pts, eps)
        pending.extend(i for i in new_ids if outside[i])

    face_arr = np.array(list(faces.values()), dtype=np.int64)
    return face_arr, pts, interior


def _initial_simplex(pts: np.ndarray, eps: float) -> list[int]:
    lo = int(np.argmin(pts[:, 0]))
    hi = int(np.argmax(pts[:, 0]))
    if not np.any(np.abs(pts[lo] - pts[hi]) > eps):
        # x-degenerate cloud; fall back to the most distant axis-extreme pair
        extremes = [int(np.argmin(pts[:, k])) for k in range(3)]
        extremes += [int(np.argmax(pts[:, k])) for k in range(3)]
        best = (lo, hi, -1.0)
        for i in extremes:
            for j in extremes:
                d = float(np.linalg.norm(pts[i] - pts[j]))
                if d > best[2]:
                    best = (i, j, d)
        lo, hi, dist = best
        if dist <= eps:
            raise DegenerateHullError("all points coincide")
    line = pts[hi] - pts[lo]
    rel = pts - pts[lo]
    cross = np.cross(rel, line)
    d_line = np.linalg.norm(cross, axis=1)
    third = int(np.argmax(d_line))
    if d_line[third] <= eps * max(np.linalg.norm(line), 1.0):
        raise DegenerateHullError("points are collinear")
    normal = np.cross(pts[third] - pts[lo], line)
    normal /= np.linalg.norm(normal)
    d_plane = np.abs(rel @ normal)
    fourth = int(np.argmax(d_plane))
    if d_plane[fourth] <= eps:
        raise DegenerateHullError("points are coplanar")
    return [lo, hi, third, fourth]


def _plane(pts: np.ndarray, tri: tuple[int, int, int]) -> tuple[np.ndarray, float]:
    a, b, c = pts[tri[0]], pts[tri[1]], pts[tri[2]]
    n = np.cross(b - a, c - a)
    norm = np.linalg.norm(n)
    if norm == 0.0:
        n = np.zeros(3)
    else:
        n = n / norm
    return n, float(n @ a)


def _orient_outward(
    tri: tuple[int, int, int], pts: np.ndarray, interior: np.ndarray
) -> tuple[int, int, int]:
    n, d = _plane(pts, tri)
    if n @ interior - d > 0:
        return (tri[0], tri[2], tri[1])
    return tri


def _assign(candidates, faces, normals, outside, pts, eps) -> None:
    for p in candidates:
        best_fid, best_dist = -1, eps
        for fid in faces:
            n, d = normals[fid]
            dist = float(pts[p] @ n - d)
            if dist > best_dist:
                best_fid, best_dist = fid, dist
        if best_fid >= 0:
            outside[best_fid].append(p)


def _visible_faces(apex, start, faces, normals, pts, eps) -> set[int]:
    visible = set()
    stack = [start]
    edge_owner = {}
    for fid, tri in faces.items():
        for k in range(3):
            edge_owner[(tri[k], tri[(k + 1) % 3])] = fid
    while stack:
        fid = stack.pop()
        if fid in visible:
            continue
        n, d = normals[fid]
        if float(pts[apex] @ n - d) > eps or fid == start:
            visible.add(fid)
            tri = faces[fid]
            for k in range(3):
                rev = (tri[(k + 1) % 3], tri[k])
                neighbor = edge_owner.get(rev)
                if neighbor is not None and neighbor not in visible:
                    stack.append(neighbor)
    return visible


def _horizon_edges(visible, faces) -> list[tuple[int, int]]:
    edges = []
    for fid in visible:
        tri = faces[fid]
        for k in range(3):
            edges.append((tri[k], tri[(k + 1) % 3]))
    edge_set = set(edges)
    return [e for e in edges if (e[1], e[0]) not in edge_set]


def voxel_corner_points(
    coords: np.ndarray, spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
) -> np.ndarray:
    """Corner lattice of a voxel set: centers +/- half a voxel per axis.

    Feeding corners (not centers) to the hull makes a single voxel a proper
    cube of volume dx*dy*dz and removes the coplanar-failure class entirely.
    """
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    doubled = 2 * coords[:, None, :] + np.array(
        [c for c in np.ndindex(2, 2, 2)], dtype=np.int64
    ) * 2 - 1
    corners = np.unique(doubled.reshape(-1, 3), axis=0)
    return corners * (np.asarray(spacing, dtype=np.float64) / 2.0)
