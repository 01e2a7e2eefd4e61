"""Gaussian primitive initialization from an environment point cloud.

Each surviving point seeds one primitive: the covariance is the sample
covariance of its nearest neighbors, floored so the smallest eigenvalue is at
least 1e-6 m^2 (planar or collinear neighborhoods would otherwise be
singular).  Initial amplitude is 1 and initial phase 0; learned attenuation is
applied later.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .errors import ValidationError
from .field import COVARIANCE_EIGENVALUE_FLOOR, GaussianPrimitive


def deduplicate_points(points: np.ndarray) -> np.ndarray:
    """Drop exactly coincident points, keeping first occurrences in order."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    _, first = np.unique(points, axis=0, return_index=True)
    return points[np.sort(first)]


def voxel_downsample(points: np.ndarray, voxel: float) -> np.ndarray:
    """Replace each occupied voxel by the centroid of its points.

    Output keeps the order of first voxel occupancy; voxel <= 0 disables
    downsampling.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if voxel <= 0 or points.shape[0] == 0:
        return points
    keys = np.floor(points / voxel).astype(np.int64)
    seen = {}
    sums = []
    counts = []
    for i in range(points.shape[0]):
        key = tuple(keys[i])
        slot = seen.get(key)
        if slot is None:
            seen[key] = len(sums)
            sums.append(points[i].copy())
            counts.append(1)
        else:
            sums[slot] += points[i]
            counts[slot] += 1
    return np.asarray(sums) / np.asarray(counts)[:, None]


def floored_covariance(cov: np.ndarray, floor: float = COVARIANCE_EIGENVALUE_FLOOR) -> np.ndarray:
    values, vectors = np.linalg.eigh(cov)
    return (vectors * np.maximum(values, floor)) @ vectors.T


def init_primitives_from_pointcloud(points, neighbor_count: int = 8,
                                    downsample_voxel: float = 0.0) -> list:
    """One primitive per surviving point, covariance from its nearest neighbors.

    Coincident points are deduplicated before the neighbor search.  Raises
    when fewer than neighbor_count + 1 points survive preprocessing.
    """
    if neighbor_count < 1:
        raise ValidationError(f"neighbor count must be >= 1, got {neighbor_count}")
    points = deduplicate_points(points)
    points = voxel_downsample(points, downsample_voxel)
    n = points.shape[0]
    if downsample_voxel > 0 and n == 1:
        # degenerate downsampling: a single centroid with an isotropic floor
        return [GaussianPrimitive(points[0], np.eye(3) * COVARIANCE_EIGENVALUE_FLOOR, 1.0, 0.0)]
    if n < neighbor_count + 1:
        raise ValidationError(
            f"need at least {neighbor_count + 1} distinct points, got {n}")
    tree = cKDTree(points)
    # k+1 because each point is its own nearest neighbor
    _, indices = tree.query(points, k=neighbor_count + 1)
    primitives = []
    for i in range(n):
        neighbors = points[indices[i, 1:]]
        mean = neighbors.mean(axis=0)
        centered = neighbors - mean
        cov = centered.T @ centered / neighbor_count
        primitives.append(GaussianPrimitive(points[i], floored_covariance(cov), 1.0, 0.0))
    return primitives
