"""Synthetic surfaces with analytic unit normals, plus the two corruption
regimes used for robustness studies: Gaussian noise and uneven density.

Every operation is bit-deterministic under its seed. Noise keeps the clean
surface's normals as ground truth (evaluation scores against the underlying
surface); density variation keeps the survivors' normals aligned.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import PointCloud

SHAPE_KINDS = ("plane", "sphere", "cylinder", "saddle", "torus")
DENSITY_MODES = ("none", "stripes", "gradient")

STRIPE_BANDS = 8  # equal-width bands along the first axis, alternating density

# Noise levels studied for robustness, as fractions of the bounding-box
# diagonal: none, low, medium, high.
NOISE_LEVELS = (0.0, 0.0012, 0.006, 0.012)


@dataclass(frozen=True)
class SyntheticShape:
    """Sampling request for one analytic surface.

    Shape-specific scalars: `extent` is the half-side of the plane/saddle
    domain; `coefficient` the saddle's a in z = a·x·y; `radius`/`height`
    size the sphere and (lateral) cylinder; `major_radius`/`minor_radius`
    the torus.
    """

    kind: str
    sample_count: int
    seed: int = 0
    extent: float = 1.0
    coefficient: float = 1.0
    radius: float = 1.0
    height: float = 2.0
    major_radius: float = 1.0
    minor_radius: float = 0.35

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise ValueError(f"kind must be one of {SHAPE_KINDS}, got {self.kind!r}")
        for name in ("extent", "radius", "height", "major_radius", "minor_radius"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.minor_radius >= self.major_radius:
            raise ValueError("torus needs minor_radius < major_radius")


@dataclass(frozen=True)
class CorruptionSpec:
    """Noise and density settings; sigma is a fraction of the bbox diagonal."""

    noise_sigma_fraction: float = 0.0
    density_mode: str = "none"
    seed: int = 0
    stripes_low_keep: float = 0.1  # keep probability inside the sparse bands
    gradient_min_keep: float = 0.05  # keep probability at the far end of the ramp

    def __post_init__(self):
        if self.noise_sigma_fraction < 0:
            raise ValueError("noise_sigma_fraction must be >= 0")
        if self.density_mode not in DENSITY_MODES:
            raise ValueError(f"density_mode must be one of {DENSITY_MODES}")
        for name in ("stripes_low_keep", "gradient_min_keep"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")


def _unit_sphere_dirs(rng: np.random.Generator, n: int) -> np.ndarray:
    dirs = rng.standard_normal((n, 3))
    norms = np.linalg.norm(dirs, axis=1)
    while (bad := norms < 1e-12).any():
        dirs[bad] = rng.standard_normal((int(bad.sum()), 3))
        norms = np.linalg.norm(dirs, axis=1)
    return dirs / norms[:, None]


def generate_synthetic_shape(spec: SyntheticShape) -> PointCloud:
    """Sample `spec.sample_count` surface points with exact analytic normals."""
    n = spec.sample_count
    if n < 100:
        raise ValueError(f"sample_count must be >= 100, got {n}")
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "plane":
        xy = rng.uniform(-spec.extent, spec.extent, size=(n, 2))
        points = np.column_stack([xy, np.zeros(n)])
        normals = np.tile([0.0, 0.0, 1.0], (n, 1))
    elif spec.kind == "sphere":
        normals = _unit_sphere_dirs(rng, n)
        points = spec.radius * normals
    elif spec.kind == "cylinder":
        theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
        z = rng.uniform(-spec.height / 2.0, spec.height / 2.0, size=n)
        normals = np.column_stack([np.cos(theta), np.sin(theta), np.zeros(n)])
        points = np.column_stack(
            [spec.radius * np.cos(theta), spec.radius * np.sin(theta), z]
        )
    elif spec.kind == "saddle":
        a = spec.coefficient
        xy = rng.uniform(-spec.extent, spec.extent, size=(n, 2))
        x, y = xy[:, 0], xy[:, 1]
        points = np.column_stack([x, y, a * x * y])
        normals = np.column_stack([-a * y, -a * x, np.ones(n)])
        normals /= np.linalg.norm(normals, axis=1)[:, None]
    else:  # torus
        big_r, small_r = spec.major_radius, spec.minor_radius
        points = np.empty((n, 3))
        normals = np.empty((n, 3))
        filled = 0
        while filled < n:
            want = n - filled
            theta = rng.uniform(0.0, 2.0 * np.pi, size=want)
            phi = rng.uniform(0.0, 2.0 * np.pi, size=want)
            # Area element scales with R + r·cosφ: rejection keeps sampling
            # uniform over the surface rather than over parameters.
            accept = rng.uniform(0.0, 1.0, size=want) < (
                (big_r + small_r * np.cos(phi)) / (big_r + small_r)
            )
            theta, phi = theta[accept], phi[accept]
            took = len(theta)
            ring = big_r + small_r * np.cos(phi)
            points[filled : filled + took] = np.column_stack(
                [ring * np.cos(theta), ring * np.sin(theta), small_r * np.sin(phi)]
            )
            normals[filled : filled + took] = np.column_stack(
                [np.cos(phi) * np.cos(theta), np.cos(phi) * np.sin(theta), np.sin(phi)]
            )
            filled += took
    return PointCloud(points, normals)


def bounding_box_diagonal(points: np.ndarray) -> float:
    points = np.asarray(points, dtype=np.float64)
    return float(np.linalg.norm(points.max(axis=0) - points.min(axis=0)))


def add_gaussian_noise(cloud: PointCloud, spec: CorruptionSpec) -> PointCloud:
    """Isotropic offsets with sigma = fraction x bbox diagonal; ground-truth
    normals stay those of the clean surface points."""
    normals = None if cloud.normals is None else cloud.normals.copy()
    if spec.noise_sigma_fraction == 0.0:
        return PointCloud(cloud.points.copy(), normals)
    sigma = spec.noise_sigma_fraction * bounding_box_diagonal(cloud.points)
    rng = np.random.default_rng(spec.seed)
    offsets = rng.normal(0.0, sigma, size=cloud.points.shape)
    return PointCloud(cloud.points + offsets, normals)


def _keep_probabilities(x: np.ndarray, spec: CorruptionSpec) -> np.ndarray:
    lo, hi = float(x.min()), float(x.max())
    span = hi - lo
    if span <= 0.0:  # degenerate cloud: a single slab, keep everything
        return np.ones_like(x)
    t = (x - lo) / span
    if spec.density_mode == "stripes":
        band = np.minimum((t * STRIPE_BANDS).astype(int), STRIPE_BANDS - 1)
        return np.where(band % 2 == 1, spec.stripes_low_keep, 1.0)
    # gradient: linear ramp from full density down to the configured minimum
    return 1.0 + t * (spec.gradient_min_keep - 1.0)


def apply_density_variation(
    cloud: PointCloud, spec: CorruptionSpec, min_points: int = 3
) -> PointCloud:
    """Thin the cloud along its first axis: alternating sparse/dense stripes,
    or a linear density gradient. Survivors keep their normals."""
    if spec.density_mode == "none":
        raise ValueError("density_mode is 'none'; nothing to apply")
    keep_p = _keep_probabilities(cloud.points[:, 0], spec)
    rng = np.random.default_rng(spec.seed)
    keep = rng.uniform(0.0, 1.0, size=len(keep_p)) < keep_p
    survivors = int(keep.sum())
    if survivors < min_points:
        raise ValueError(
            f"density variation would leave {survivors} points, need >= {min_points}"
        )
    normals = None if cloud.normals is None else cloud.normals[keep].copy()
    return PointCloud(cloud.points[keep].copy(), normals)


def corrupt(cloud: PointCloud, spec: CorruptionSpec, min_points: int = 3) -> PointCloud:
    """Noise then density variation, as configured (either may be a no-op)."""
    out = add_gaussian_noise(cloud, spec)
    if spec.density_mode != "none":
        out = apply_density_variation(out, spec, min_points=min_points)
    return out
