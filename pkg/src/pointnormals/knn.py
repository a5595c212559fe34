"""Exact k-nearest-neighbor search over a point cloud via a bucketed kd-tree.

Queries return indices sorted by non-decreasing squared distance; exact
distance ties are broken in favor of the lower point index, which keeps
patch extraction reproducible.
"""

from __future__ import annotations

import heapq

import numpy as np

from .geometry import PointCloud

_LEAF_SIZE = 32


class KnnIndex:
    """Immutable kd-tree index; safe for concurrent queries after construction."""

    def __init__(self, points: np.ndarray):
        points = np.ascontiguousarray(points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 3:
            raise ValueError(f"points must be (n, 3), got {points.shape}")
        if len(points) == 0:
            raise ValueError("cannot index an empty point cloud")
        self._points = points
        self.point_count = len(points)
        # Flat node arrays: internal nodes carry (axis, split, left, right);
        # leaves carry axis == -1 and a [start, stop) slice into _order.
        self._axis: list[int] = []
        self._split: list[float] = []
        self._left: list[int] = []
        self._right: list[int] = []
        self._start: list[int] = []
        self._stop: list[int] = []
        self._order = np.arange(self.point_count)
        self._root = self._build(0, self.point_count)

    def _new_node(self) -> int:
        self._axis.append(-1)
        self._split.append(0.0)
        self._left.append(-1)
        self._right.append(-1)
        self._start.append(0)
        self._stop.append(0)
        return len(self._axis) - 1

    def _build(self, start: int, stop: int) -> int:
        node = self._new_node()
        idx = self._order[start:stop]
        coords = self._points[idx]
        extent = coords.max(axis=0) - coords.min(axis=0)
        if stop - start <= _LEAF_SIZE or extent.max() == 0.0:
            self._start[node] = start
            self._stop[node] = stop
            return node
        axis = int(np.argmax(extent))
        mid = (stop - start) // 2
        part = np.argpartition(coords[:, axis], mid)
        self._order[start:stop] = idx[part]
        split_value = float(self._points[self._order[start + mid], axis])
        self._axis[node] = axis
        self._split[node] = split_value
        self._left[node] = self._build(start, start + mid)
        self._right[node] = self._build(start + mid, stop)
        return node

    def query(self, query: np.ndarray, k: int) -> np.ndarray:
        """Indices of the min(k, point_count) nearest points to `query`."""
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        q = np.asarray(query, dtype=np.float64).reshape(3)
        k = min(k, self.point_count)
        # Max-heap keyed on (-dist2, -index): the root is the current worst
        # candidate under the (distance, lower-index-wins) ordering.
        heap: list[tuple[float, int]] = []
        stack = [self._root]
        points = self._points
        order = self._order
        while stack:
            node = stack.pop()
            axis = self._axis[node]
            if axis < 0:
                leaf = order[self._start[node]:self._stop[node]]
                d2 = ((points[leaf] - q) ** 2).sum(axis=1)
                for dist2, idx in zip(d2.tolist(), leaf.tolist()):
                    if len(heap) < k:
                        heapq.heappush(heap, (-dist2, -idx))
                    elif (dist2, idx) < (-heap[0][0], -heap[0][1]):
                        heapq.heapreplace(heap, (-dist2, -idx))
                continue
            diff = q[axis] - self._split[node]
            near, far = (
                (self._left[node], self._right[node])
                if diff < 0
                else (self._right[node], self._left[node])
            )
            # Keep the far side whenever the splitting plane could still hide a
            # candidate at the current worst distance (<= so ties are found).
            if len(heap) < k or diff * diff <= -heap[0][0]:
                stack.append(far)
            stack.append(near)
        found = sorted((-d2, -idx) for d2, idx in heap)
        return np.array([idx for _, idx in found], dtype=np.int64)

    def query_batch(self, queries: np.ndarray, k: int) -> list[np.ndarray]:
        queries = np.asarray(queries, dtype=np.float64)
        return [self.query(q, k) for q in queries]


def build_knn_index(cloud: PointCloud | np.ndarray) -> KnnIndex:
    """Index a PointCloud or a raw (n, 3) coordinate array."""
    points = cloud.points if hasattr(cloud, "points") else cloud
    return KnnIndex(points)


def query_knn(index: KnnIndex, query: np.ndarray, k: int) -> np.ndarray:
    return index.query(query, k)
