"""Evaluation: angular RMSE, PGP curves, per-cloud reports, error heatmaps,
and inference benchmarking.

All scoring is unoriented: errors come from |dot| and live in [0, 90] degrees,
so flipping the sign of any normal changes nothing.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .geometry import PointCloud, angular_errors
from .classical import estimate_normal_jet, estimate_normal_pca
from .knn import build_knn_index
from .model import ModelConfig, build_param_tensors, forward_batch
from .patches import Patch, build_neighbor_lists, denormalize_normal, extract_patch, normalize_patch

DEFAULT_PGP_ALPHAS = tuple(float(a) for a in range(31))  # 0..30 degrees

# Heatmap color ramp: 0 deg -> pure blue, HEATMAP_MAX_DEGREES and above -> pure
# red, linear interpolation between, green always 0.
HEATMAP_MAX_DEGREES = 60.0


class EvaluationError(RuntimeError):
    """Estimator failed on one or more patches; carries (query index, reason)."""

    def __init__(self, failures: list[tuple[int, str]]):
        preview = "; ".join(f"#{i}: {msg}" for i, msg in failures[:5])
        more = "" if len(failures) <= 5 else f" (+{len(failures) - 5} more)"
        super().__init__(f"estimator failed on {len(failures)} patches: {preview}{more}")
        self.failures = failures


def rmse_from_errors(errors_radians: np.ndarray) -> float:
    """Root mean square of angular errors, in degrees."""
    deg = np.degrees(np.asarray(errors_radians, dtype=np.float64))
    return float(np.sqrt(np.mean(deg * deg)))


def pgp_from_errors(
    errors_radians: np.ndarray, alphas=DEFAULT_PGP_ALPHAS
) -> list[tuple[float, float]]:
    """Fraction of points with error strictly below each threshold (degrees)."""
    deg = np.degrees(np.asarray(errors_radians, dtype=np.float64))
    return [(float(a), float(np.mean(deg < a))) for a in alphas]


def rmse(predicted: np.ndarray, ground_truth: np.ndarray) -> float:
    """Unoriented angular RMSE in degrees between two (n, 3) normal sets."""
    return rmse_from_errors(angular_errors(predicted, ground_truth))


def pgp_curve(
    predicted: np.ndarray, ground_truth: np.ndarray, alphas=DEFAULT_PGP_ALPHAS
) -> list[tuple[float, float]]:
    return pgp_from_errors(angular_errors(predicted, ground_truth), alphas)


@dataclass
class EvalReport:
    """Per-point errors plus the derived metrics; JSON round-trippable."""

    per_point_errors: np.ndarray  # radians
    rmse_degrees: float
    pgp: list[tuple[float, float]]
    timing: dict[str, float] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_errors(cls, errors_radians, timing=None, metadata=None) -> "EvalReport":
        errors = np.asarray(errors_radians, dtype=np.float64)
        return cls(
            per_point_errors=errors,
            rmse_degrees=rmse_from_errors(errors),
            pgp=pgp_from_errors(errors),
            timing=dict(timing or {}),
            metadata=dict(metadata or {}),
        )

    def to_json(self, path) -> None:
        payload = {
            "rmse_degrees": self.rmse_degrees,
            "pgp": [[a, f] for a, f in self.pgp],
            "per_point_errors_radians": self.per_point_errors.tolist(),
            "timing": self.timing,
            "metadata": self.metadata,
        }
        Path(path).write_text(json.dumps(payload, indent=2) + "\n")

    @classmethod
    def from_json(cls, path) -> "EvalReport":
        payload = json.loads(Path(path).read_text())
        return cls(
            per_point_errors=np.asarray(payload["per_point_errors_radians"]),
            rmse_degrees=payload["rmse_degrees"],
            pgp=[(a, f) for a, f in payload["pgp"]],
            timing=payload["timing"],
            metadata=payload["metadata"],
        )


class PcaEstimator:
    """Smallest-covariance-eigenvector baseline."""

    name = "pca"

    def __call__(self, patch: Patch) -> np.ndarray:
        return estimate_normal_pca(patch)


class JetEstimator:
    """Polynomial height-field fit in the canonical patch frame."""

    def __init__(self, order: int = 3):
        self.order = order
        self.name = f"jet{order}"

    def __call__(self, patch: Patch) -> np.ndarray:
        return estimate_normal_jet(patch, self.order)


class ModelEstimator:
    """Learned network; predicts per-patch normals and keeps the query's row."""

    name = "model"

    def __init__(self, weights: dict[str, np.ndarray], config: ModelConfig, batch_size: int = 64):
        self.weights = weights
        self.config = config
        self.batch_size = batch_size

    def __call__(self, patch: Patch) -> np.ndarray:
        return self.estimate_batch([patch])[0]

    def estimate_batch(self, patches: list[Patch]) -> np.ndarray:
        out = np.empty((len(patches), 3))
        for start in range(0, len(patches), self.batch_size):
            chunk = patches[start : start + self.batch_size]
            normalized = [normalize_patch(p) for p in chunk]
            positions = np.stack([n.positions for n in normalized])
            graph_nb = np.stack(
                [build_neighbor_lists(n.positions, self.config.graph_k) for n in normalized]
            )
            attn_nb = None
            if self.config.variant == "local_attention":
                attn_nb = np.stack(
                    [
                        build_neighbor_lists(n.positions, self.config.local_attention_k)
                        for n in normalized
                    ]
                )
            tape = ad.Tape(check_finite=False)
            params = build_param_tensors(tape, self.weights, requires_grad=False)
            pred = forward_batch(
                tape, params, tape.constant(positions), graph_nb, attn_nb, self.config
            ).values
            for i, (patch, norm) in enumerate(zip(chunk, normalized)):
                frame_normal = pred[i, patch.center_row]
                out[start + i] = denormalize_normal(norm.transform, frame_normal)
        return out


def estimate_normals(
    cloud: PointCloud, estimator, k: int, query_indices: np.ndarray | None = None
) -> np.ndarray:
    """Run an estimator at the given query indices (default: every point).

    Raises EvaluationError if the estimator fails on any patch.
    """
    if query_indices is None:
        query_indices = np.arange(len(cloud))
    index = build_knn_index(cloud.points)
    patches = [extract_patch(cloud, index, int(q), k) for q in query_indices]
    if hasattr(estimator, "estimate_batch"):
        return estimator.estimate_batch(patches)
    normals = np.empty((len(patches), 3))
    failures: list[tuple[int, str]] = []
    for row, (q, patch) in enumerate(zip(query_indices, patches)):
        try:
            normals[row] = estimator(patch)
        except Exception as exc:  # noqa: BLE001 - collected and re-raised below
            failures.append((int(q), str(exc)))
    if failures:
        raise EvaluationError(failures)
    return normals


def evaluate_cloud(
    cloud: PointCloud, estimator, k: int, stride: int = 1
) -> EvalReport:
    """Score an estimator against the cloud's ground-truth normals.

    stride subsamples the query points (every stride-th point) for speed;
    errors are unoriented angles in radians.
    """
    if cloud.normals is None:
        raise ValueError("evaluation requires ground-truth normals")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    queries = np.arange(0, len(cloud), stride)
    start = time.perf_counter()
    predicted = estimate_normals(cloud, estimator, k, queries)
    elapsed = time.perf_counter() - start
    errors = angular_errors(predicted, cloud.normals[queries])
    return EvalReport.from_errors(
        errors,
        timing={
            "total_seconds": elapsed,
            "points_per_second": len(queries) / elapsed if elapsed > 0 else float("inf"),
        },
        metadata={
            "cloud": cloud.name,
            "method": getattr(estimator, "name", str(estimator)),
            "k": k,
            "stride": stride,
            "query_count": int(len(queries)),
        },
    )


def error_colors(errors_radians: np.ndarray) -> np.ndarray:
    """(n, 3) uint8 RGB: blue at 0 degrees to red at >= 60, linear, green 0."""
    deg = np.degrees(np.asarray(errors_radians, dtype=np.float64))
    t = np.clip(deg / HEATMAP_MAX_DEGREES, 0.0, 1.0)
    red = np.rint(255.0 * t).astype(np.uint8)
    blue = np.rint(255.0 * (1.0 - t)).astype(np.uint8)
    return np.column_stack([red, np.zeros_like(red), blue])


def export_error_heatmap(cloud, per_point_errors: np.ndarray, path) -> None:
    """ASCII PLY of the points colored by angular error (see error_colors)."""
    points = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    errors = np.asarray(per_point_errors, dtype=np.float64)
    if len(errors) != len(points):
        raise ValueError(f"{len(errors)} errors for {len(points)} points")
    colors = error_colors(errors)
    lines = [
        "ply",
        "format ascii 1.0",
        f"comment error color ramp: 0 deg = blue (0,0,255), >= {HEATMAP_MAX_DEGREES:g} deg"
        " = red (255,0,0), linear in between, green fixed at 0",
        f"element vertex {len(points)}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    for p, c in zip(points, colors):
        lines.append(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g} {c[0]} {c[1]} {c[2]}")
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class BenchResult:
    """Wall-clock stats over repeated full-cloud estimation runs."""

    method: str
    median_seconds: float
    min_seconds: float
    max_seconds: float
    points_per_second: float
    repetitions: int
    query_count: int


def benchmark_inference(
    estimator, cloud: PointCloud, k: int, repetitions: int = 3, stride: int = 1
) -> BenchResult:
    """Median/min/max seconds over `repetitions` runs after one untimed warm-up."""
    if repetitions < 3:
        raise ValueError("repetitions must be >= 3")
    queries = np.arange(0, len(cloud), stride)
    estimate_normals(cloud, estimator, k, queries)  # warm-up, excluded
    times = []
    for _ in range(repetitions):
        start = time.perf_counter()
        estimate_normals(cloud, estimator, k, queries)
        times.append(time.perf_counter() - start)
    median = float(np.median(times))
    return BenchResult(
        method=getattr(estimator, "name", str(estimator)),
        median_seconds=median,
        min_seconds=float(min(times)),
        max_seconds=float(max(times)),
        points_per_second=len(queries) / median if median > 0 else float("inf"),
        repetitions=repetitions,
        query_count=int(len(queries)),
    )
