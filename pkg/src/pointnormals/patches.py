"""Patch extraction and canonicalization around a query point.

A patch is the k-nearest neighborhood of a query point. Canonicalization
centers the query at the origin, scales by the patch radius (max distance
from the query), and rotates into the PCA eigenbasis of the scaled patch.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .geometry import PointCloud, covariance_eigendecomposition
from .knn import KnnIndex

# Relative threshold on the middle covariance eigenvalue below which a patch
# is treated as collinear and the PCA rotation is skipped.
COLLINEAR_EIGENVALUE_RATIO = 1e-12


class DegeneratePatchError(ValueError):
    pass


@dataclass
class Patch:
    """k nearest neighbors of a query point, query included."""

    center_index: int
    indices: np.ndarray
    positions: np.ndarray
    gt_normals: np.ndarray | None = None

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if len(np.unique(self.indices)) != len(self.indices):
            raise ValueError("patch indices must be unique")
        if self.center_index not in self.indices:
            raise ValueError("center_index must be one of the patch indices")

    def __len__(self) -> int:
        return len(self.indices)

    @property
    def center_row(self) -> int:
        """Row of the query point within the patch arrays."""
        return int(np.nonzero(self.indices == self.center_index)[0][0])


@dataclass
class PatchTransform:
    """Map into the canonical frame: x' = rotation @ ((x - translation) / scale)."""

    translation: np.ndarray
    rotation: np.ndarray
    scale: float

    def apply_points(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return ((points - self.translation) / self.scale) @ self.rotation.T

    def apply_direction(self, direction: np.ndarray) -> np.ndarray:
        """Rotate a direction into the canonical frame (unit length preserved)."""
        return self.rotation @ np.asarray(direction, dtype=np.float64)


@dataclass
class NormalizedPatch:
    """Canonical-frame patch coordinates plus the transform that produced them."""

    positions: np.ndarray
    transform: PatchTransform


def extract_patch(cloud: PointCloud, index: KnnIndex, query_index: int, k: int) -> Patch:
    """k-nearest-neighbor patch around cloud point `query_index` (itself included)."""
    n = len(cloud)
    if not 0 <= query_index < n:
        raise IndexError(f"query_index {query_index} out of range for {n} points")
    if k > n:
        raise ValueError(f"k={k} exceeds point count {n}")
    query = cloud.points[query_index]
    idx = index.query(query, k)
    if query_index not in idx:
        # Exact duplicates of the query can shadow it under the lower-index tie
        # rule; the contract requires the query in its own patch, so swap it in
        # for the farthest member.
        idx = np.concatenate([idx[:-1], [query_index]])
        d2 = ((cloud.points[idx] - query) ** 2).sum(axis=1)
        idx = idx[np.lexsort((idx, d2))]
    gt = cloud.normals[idx] if cloud.normals is not None else None
    return Patch(query_index, idx, cloud.points[idx], gt)


def normalize_patch(patch: Patch) -> NormalizedPatch:
    """Center on the query, scale by patch radius, rotate into the PCA basis.

    Collinear patches fall back to translation+scale with the identity
    rotation and emit a warning instead of failing.
    """
    if len(patch) < 3:
        raise DegeneratePatchError(f"patch has {len(patch)} points, need >= 3")
    query = patch.positions[patch.center_row]
    centered = patch.positions - query
    radius = float(np.linalg.norm(centered, axis=1).max())
    if radius <= 0.0:
        raise DegeneratePatchError("all patch points coincide with the query")
    scaled = centered / radius
    evals, evecs = covariance_eigendecomposition(scaled)
    if evals[1] <= COLLINEAR_EIGENVALUE_RATIO * max(evals[0], 1e-300):
        warnings.warn(
            "collinear patch: skipping PCA rotation, using translation+scale only",
            RuntimeWarning,
            stacklevel=2,
        )
        rotation = np.eye(3)
    else:
        # Coordinates in the eigenbasis: rows of the transform's rotation are
        # the eigenvectors, so x' = rotation @ x.
        rotation = evecs.T
    transform = PatchTransform(query.copy(), rotation, radius)
    return NormalizedPatch(scaled @ rotation.T, transform)


def denormalize_normal(transform: PatchTransform, n: np.ndarray) -> np.ndarray:
    """Map a canonical-frame direction back to world coordinates, unit length."""
    n = np.asarray(n, dtype=np.float64)
    if not np.isfinite(n).all():
        raise ValueError("direction must be finite")
    norm = np.linalg.norm(n)
    if norm < 1e-12:
        raise ValueError("cannot denormalize a zero-length direction")
    world = transform.rotation.T @ n
    return world / np.linalg.norm(world)


def build_neighbor_lists(positions: np.ndarray, g: int) -> np.ndarray:
    """(k, g) neighbor indices within a patch, each point its own first neighbor.

    Remaining slots are the g-1 nearest other points, ties broken by lower
    index. Used to wire graph convolutions and local attention.
    """
    positions = np.asarray(positions, dtype=np.float64)
    k = len(positions)
    if not 1 <= g <= k:
        raise ValueError(f"g must be in [1, {k}], got {g}")
    diff = positions[:, None, :] - positions[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    np.fill_diagonal(d2, -1.0)  # forces self strictly first
    order = np.argsort(d2, axis=1, kind="stable")
    return np.ascontiguousarray(order[:, :g], dtype=np.int64)
