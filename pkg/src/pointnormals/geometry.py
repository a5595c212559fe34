"""Point cloud container, ASCII I/O, 3x3 eigensolver, and angular error."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

UNIT_NORMAL_TOL = 1e-6


class PointCloudFormatError(ValueError):
    """Raised for malformed point/normal files; carries the offending line number."""

    def __init__(self, path, line_number: int, message: str):
        self.path = str(path)
        self.line_number = line_number
        super().__init__(f"{path}:{line_number}: {message}")


@dataclass
class PointCloud:
    """Points in arbitrary world units, with optional unit ground-truth normals."""

    points: np.ndarray
    normals: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError(f"points must be (n, 3), got {self.points.shape}")
        if len(self.points) == 0:
            raise ValueError("point cloud is empty")
        if not np.isfinite(self.points).all():
            raise ValueError("point cloud contains non-finite coordinates")
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64)
            if self.normals.shape != self.points.shape:
                raise ValueError(
                    f"normals shape {self.normals.shape} does not match "
                    f"points shape {self.points.shape}"
                )
            norms = np.linalg.norm(self.normals, axis=1)
            if not np.all(np.abs(norms - 1.0) <= UNIT_NORMAL_TOL):
                raise ValueError("normals must be unit length within 1e-6")

    def __len__(self) -> int:
        return len(self.points)

    def bounding_box_diagonal(self) -> float:
        extent = self.points.max(axis=0) - self.points.min(axis=0)
        return float(np.linalg.norm(extent))


def _parse_vec3_file(path) -> np.ndarray:
    """Parse one 3-vector per line; blank lines are skipped."""
    rows = []
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped:
                continue
            parts = stripped.split()
            if len(parts) != 3:
                raise PointCloudFormatError(
                    path, lineno, f"expected 3 numbers, got {len(parts)}"
                )
            try:
                rows.append([float(p) for p in parts])
            except ValueError:
                raise PointCloudFormatError(
                    path, lineno, f"could not parse {stripped!r} as 3 numbers"
                ) from None
    if not rows:
        raise PointCloudFormatError(path, 0, "file contains no points")
    return np.asarray(rows, dtype=np.float64)


def load_point_cloud(path, normals_path=None) -> PointCloud:
    """Load an ASCII .xyz file (PCPNet convention), optionally with a line-aligned .normals file.

    Normals are re-normalized to unit length on load.
    """
    points = _parse_vec3_file(path)
    normals = None
    if normals_path is not None:
        raw = _parse_vec3_file(normals_path)
        if len(raw) != len(points):
            raise ValueError(
                f"{normals_path} has {len(raw)} normals but {path} has "
                f"{len(points)} points"
            )
        norms = np.linalg.norm(raw, axis=1)
        if np.any(norms < 1e-12):
            bad = int(np.argmin(norms)) + 1
            raise PointCloudFormatError(normals_path, bad, "zero-length normal")
        normals = raw / norms[:, None]
    return PointCloud(points, normals, name=Path(path).stem)


def load_vectors(path) -> np.ndarray:
    """Read a one-3-vector-per-line file (e.g. a .normals file) as (n, 3)."""
    return _parse_vec3_file(path)


def save_vectors(path, rows: np.ndarray) -> None:
    """Write (n, 3) rows one per line, full float64 round-trip precision."""
    _write_vec3_file(path, np.asarray(rows, dtype=np.float64))


def _write_vec3_file(path, rows: np.ndarray) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(f"{row[0]:.17g} {row[1]:.17g} {row[2]:.17g}\n")


def save_point_cloud(cloud: PointCloud, path, normals_path=None) -> None:
    """Write the .xyz file and, when requested, the companion .normals file."""
    _write_vec3_file(path, cloud.points)
    if normals_path is not None:
        if cloud.normals is None:
            raise ValueError("cloud has no normals to write")
        _write_vec3_file(normals_path, cloud.normals)


def covariance_eigendecomposition(points: np.ndarray):
    """Eigenpairs of the centered 3x3 covariance via cyclic Jacobi sweeps.

    Returns (eigenvalues, eigenvectors) with eigenvalues descending and
    eigenvectors as orthonormal columns. Sign convention: each column's
    largest-magnitude component is made positive, then the third column is
    flipped if needed so det = +1.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ValueError(f"points must be (n, 3), got {points.shape}")
    n = len(points)
    if n < 3:
        raise ValueError(f"need at least 3 points, got {n}")
    centered = points - points.mean(axis=0)
    cov = centered.T @ centered / n
    evals, evecs = jacobi_eigh_3x3(cov)

    order = np.argsort(-evals, kind="stable")
    evals = evals[order]
    evecs = evecs[:, order]
    for col in range(3):
        pivot = int(np.argmax(np.abs(evecs[:, col])))
        if evecs[pivot, col] < 0:
            evecs[:, col] = -evecs[:, col]
    if np.linalg.det(evecs) < 0:
        evecs[:, 2] = -evecs[:, 2]
    return evals, evecs


def jacobi_eigh_3x3(matrix: np.ndarray, max_sweeps: int = 50):
    """Cyclic Jacobi rotations on a symmetric 3x3 matrix (unordered eigenpairs)."""
    a = np.array(matrix, dtype=np.float64)
    v = np.eye(3)
    scale = np.abs(a).max()
    if scale == 0.0:
        return np.zeros(3), v
    tol = 1e-15 * scale
    for _ in range(max_sweeps):
        off = max(abs(a[0, 1]), abs(a[0, 2]), abs(a[1, 2]))
        if off <= tol:
            break
        for p, q in ((0, 1), (0, 2), (1, 2)):
            apq = a[p, q]
            if abs(apq) <= tol * 1e-2:
                continue
            theta = (a[q, q] - a[p, p]) / (2.0 * apq)
            t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
            if theta == 0.0:
                t = 1.0
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            rot = np.eye(3)
            rot[p, p] = rot[q, q] = c
            rot[p, q] = s
            rot[q, p] = -s
            a = rot.T @ a @ rot
            v = v @ rot
    return np.diag(a).copy(), v


def angular_error(a: np.ndarray, b: np.ndarray) -> float:
    """Unoriented angle between two directions, in radians within [0, pi/2]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        raise ValueError("angular_error requires non-zero vectors")
    cosine = abs(float(np.dot(a, b))) / (na * nb)
    return float(np.arccos(np.clip(cosine, 0.0, 1.0)))


def angular_errors(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise unoriented angular errors in radians for (n, 3) arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    if np.any(na < 1e-12) or np.any(nb < 1e-12):
        raise ValueError("angular_errors requires non-zero vectors")
    cosine = np.abs(np.sum(a * b, axis=-1)) / (na * nb)
    return np.arccos(np.clip(cosine, 0.0, 1.0))
