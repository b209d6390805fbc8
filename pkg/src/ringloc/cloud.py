"""Point clouds from masked depth, k-NN normals, and the ideal ring template."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .core import CameraIntrinsics, GeometryError, PointCloud, RingSpec, back_project_many

__all__ = [
    "EmptyCloudError",
    "RingTemplate",
    "depth_to_cloud",
    "estimate_normals",
    "make_ring_template",
    "fit_plane",
]


class EmptyCloudError(GeometryError):
    pass


@dataclass(frozen=True)
class RingTemplate:
    cloud: PointCloud
    spec: RingSpec
    sample_spacing: float


def depth_to_cloud(survivors, intrinsics: CameraIntrinsics, max_extent: float | None = None) -> PointCloud:
    """Back-project ``(u, v, depth)`` survivor rows, keeping their order.

    ``max_extent`` (mm) optionally drops points farther than ``max_extent``
    from the cloud's median point (an ROI-radius clamp).
    """
    rows = np.asarray(survivors, dtype=np.float64).reshape(-1, 3)
    if len(rows) == 0:
        raise EmptyCloudError("no surviving depth pixels")
    pts = back_project_many(rows[:, 0], rows[:, 1], rows[:, 2], intrinsics)
    if max_extent is not None:
        center = np.median(pts, axis=0)
        pts = pts[np.linalg.norm(pts - center, axis=1) <= max_extent]
        if len(pts) == 0:
            raise EmptyCloudError("extent clamp removed every point")
    return PointCloud(pts)


def estimate_normals(cloud: PointCloud, k: int | None = None, viewpoint=(0.0, 0.0, 0.0)) -> PointCloud:
    """Per-point unit normals from the smallest eigenvector of the k-NN covariance.

    Neighborhoods include the point itself. Normals are flipped to face
    ``viewpoint`` (the camera origin by default). When ``k`` is omitted it is
    20, clamped to ``len(cloud) - 1``.
    """
    pts = cloud.points
    n = len(pts)
    if k is None:
        k = min(20, n - 1)
    if k < 3:
        raise GeometryError("normal estimation needs k >= 3")
    if n < k + 1:
        raise GeometryError(f"cloud of {n} points is too small for k={k}")
    _, idx = cKDTree(pts).query(pts, k=k)
    nbrs = pts[idx]
    centered = nbrs - nbrs.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    evals, evecs = np.linalg.eigh(cov)
    scale = np.maximum(evals[:, 2], 1e-300)
    if np.any(evals[:, 1] <= 1e-10 * scale):
        raise GeometryError("rank-deficient neighborhood: normals undefined for collinear points")
    normals = evecs[:, :, 0]
    to_view = np.asarray(viewpoint, dtype=np.float64) - pts
    flip = np.einsum("ij,ij->i", normals, to_view) < 0
    normals[flip] *= -1.0
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return PointCloud(pts, normals)


def make_ring_template(spec: RingSpec | None = None, sample_spacing: float = 0.5, shell: bool = False) -> RingTemplate:
    """Flat annulus on ``z = 0`` with normals ``+z``, centered at the origin.

    Concentric circles sit at the midpoints of radial bins of width
    ``sample_spacing``; each circle gets points in proportion to its
    circumference, so the areal density is close to uniform. With
    ``shell=True`` the inner and outer walls (down to ``-thickness``) are
    added with radial normals.
    """
    spec = spec or RingSpec()
    width = spec.outer_radius - spec.inner_radius
    if not 0 < sample_spacing <= (spec.outer_diameter - spec.inner_diameter) / 4.0:
        raise GeometryError("sample_spacing must lie in (0, (outer - inner) / 4]")
    n_rings = max(int(round(width / sample_spacing)), 1)
    step = width / n_rings
    pts, nrm = [], []
    for i in range(n_rings):
        r = spec.inner_radius + (i + 0.5) * step
        count = max(int(round(2 * math.pi * r / sample_spacing)), 3)
        t = 2 * math.pi * np.arange(count) / count
        pts.append(np.column_stack([r * np.cos(t), r * np.sin(t), np.zeros(count)]))
        nrm.append(np.tile([0.0, 0.0, 1.0], (count, 1)))
    if shell:
        n_levels = max(int(round(spec.thickness / sample_spacing)), 1)
        dz = spec.thickness / n_levels
        for r, sign in ((spec.inner_radius, -1.0), (spec.outer_radius, 1.0)):
            count = max(int(round(2 * math.pi * r / sample_spacing)), 3)
            t = 2 * math.pi * np.arange(count) / count
            for j in range(n_levels):
                z = -(j + 0.5) * dz
                pts.append(np.column_stack([r * np.cos(t), r * np.sin(t), np.full(count, z)]))
                nrm.append(sign * np.column_stack([np.cos(t), np.sin(t), np.zeros(count)]))
    # with walls the point centroid drops below z = 0; the frame origin stays
    # at the top-face center either way
    return RingTemplate(PointCloud(np.vstack(pts), np.vstack(nrm)), spec, float(sample_spacing))


def fit_plane(points) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares plane through ``points``: ``(centroid, unit normal)``."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) < 3:
        raise GeometryError("plane fit needs at least 3 points")
    c = pts.mean(axis=0)
    _, s, vt = np.linalg.svd(pts - c, full_matrices=False)
    if s[1] <= 1e-12 * max(s[0], 1e-300):
        raise GeometryError("points are collinear; plane undefined")
    return c, vt[-1]
