"""Metrics against independently coded plain-loop oracles, report round-trips,
estimator plumbing (including the batched model path vs the one-patch route),
heatmap export against a reference PLY parser, and the benchmark contract."""

import math

import numpy as np
import pytest

from pointnormals.evaluation import (
    DEFAULT_PGP_ALPHAS,
    HEATMAP_MAX_DEGREES,
    BenchResult,
    EvalReport,
    EvaluationError,
    JetEstimator,
    ModelEstimator,
    PcaEstimator,
    benchmark_inference,
    error_colors,
    estimate_normals,
    evaluate_cloud,
    export_error_heatmap,
    pgp_curve,
    pgp_from_errors,
    rmse,
    rmse_from_errors,
)
from pointnormals.geometry import PointCloud, angular_errors
from pointnormals.knn import build_knn_index
from pointnormals.model import ModelConfig, forward, init_weights
from pointnormals.patches import extract_patch, normalize_patch, denormalize_normal
from pointnormals.synth import SyntheticShape, generate_synthetic_shape

from _oracles import parse_ascii_ply, pgp_brute, rmse_degrees_brute


def _unit_rows(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


# --- metrics ---------------------------------------------------------------------


def test_rmse_hand_value():
    errors = np.radians([30.0, 40.0])
    assert rmse_from_errors(errors) == pytest.approx(math.sqrt(1250.0), abs=1e-10)
    assert rmse_from_errors(errors) == pytest.approx(35.3553, abs=1e-4)


def test_pgp_hand_value_and_strict_inequality():
    errors = np.radians([5.0, 15.0, 25.0])
    curve = dict(pgp_from_errors(errors, alphas=(20.0,)))
    assert curve[20.0] == pytest.approx(2.0 / 3.0, abs=1e-15)
    # a point at exactly the threshold does not count as good
    at_threshold = np.radians([20.0])
    assert dict(pgp_from_errors(at_threshold, alphas=(20.0,)))[20.0] == 0.0
    assert dict(pgp_from_errors(at_threshold, alphas=(20.0 + 1e-9,)))[20.0 + 1e-9] == 1.0


def test_metrics_match_brute_force_oracle():
    rng = np.random.default_rng(0)
    pred = _unit_rows(rng, 200)
    gt = _unit_rows(rng, 200)
    assert abs(rmse(pred, gt) - rmse_degrees_brute(pred, gt)) < 1e-12
    for alpha, fraction in pgp_curve(pred, gt, alphas=(5.0, 10.0, 20.0, 30.0)):
        assert abs(fraction - pgp_brute(pred, gt, alpha)) < 1e-12


def test_pgp_monotone_nondecreasing():
    rng = np.random.default_rng(1)
    curve = pgp_curve(_unit_rows(rng, 300), _unit_rows(rng, 300))
    fractions = [f for _, f in curve]
    assert all(b >= a for a, b in zip(fractions, fractions[1:]))
    assert curve[0] == (0.0, 0.0)  # strict inequality: nothing is below zero


def test_scoring_invariant_to_gt_sign_flips_bitwise():
    rng = np.random.default_rng(2)
    pred = _unit_rows(rng, 100)
    gt = _unit_rows(rng, 100)
    flips = np.where(rng.random(100) < 0.5, -1.0, 1.0)[:, None]
    assert rmse(pred, gt * flips) == rmse(pred, gt)
    assert pgp_curve(pred, gt * flips) == pgp_curve(pred, gt)
    np.testing.assert_array_equal(
        angular_errors(pred, gt * flips), angular_errors(pred, gt)
    )


# --- reports -----------------------------------------------------------------------


def test_eval_report_self_consistent_and_roundtrips(tmp_path):
    rng = np.random.default_rng(3)
    errors = np.abs(rng.normal(size=50)) * 0.3
    report = EvalReport.from_errors(errors, timing={"total_seconds": 1.5},
                                    metadata={"cloud": "test", "k": 16})
    assert report.rmse_degrees == pytest.approx(rmse_from_errors(errors))
    assert report.pgp == pgp_from_errors(errors)
    assert [a for a, _ in report.pgp] == list(DEFAULT_PGP_ALPHAS)

    path = tmp_path / "report.json"
    report.to_json(path)
    loaded = EvalReport.from_json(path)
    np.testing.assert_array_equal(loaded.per_point_errors, report.per_point_errors)
    assert loaded.rmse_degrees == report.rmse_degrees
    assert loaded.pgp == report.pgp
    assert loaded.timing == report.timing
    assert loaded.metadata == report.metadata


# --- estimators and evaluate_cloud ----------------------------------------------------


def test_pca_on_noiseless_plane_is_machine_exact():
    cloud = generate_synthetic_shape(SyntheticShape(kind="plane", sample_count=2_000, seed=4))
    report = evaluate_cloud(cloud, PcaEstimator(), k=16, stride=7)
    assert report.rmse_degrees < 1e-6
    assert report.metadata["method"] == "pca"


def test_jet_estimator_name_and_quality():
    cloud = generate_synthetic_shape(SyntheticShape(kind="sphere", sample_count=5_000, seed=5))
    report = evaluate_cloud(cloud, JetEstimator(order=2), k=30, stride=50)
    assert report.metadata["method"] == "jet2"
    assert report.rmse_degrees < 2.0


def test_evaluate_cloud_stride_contract():
    cloud = generate_synthetic_shape(SyntheticShape(kind="plane", sample_count=1_003, seed=6))
    report = evaluate_cloud(cloud, PcaEstimator(), k=12, stride=5)
    expected = math.ceil(1_003 / 5)
    assert report.metadata["query_count"] == expected
    assert len(report.per_point_errors) == expected
    assert report.metadata["stride"] == 5
    assert report.timing["total_seconds"] > 0.0


def test_evaluate_cloud_validation():
    bare = PointCloud(np.random.default_rng(7).normal(size=(200, 3)))
    with pytest.raises(ValueError):
        evaluate_cloud(bare, PcaEstimator(), k=8)
    cloud = generate_synthetic_shape(SyntheticShape(kind="plane", sample_count=200))
    with pytest.raises(ValueError):
        evaluate_cloud(cloud, PcaEstimator(), k=8, stride=0)


def test_estimate_normals_collects_failures():
    cloud = generate_synthetic_shape(SyntheticShape(kind="plane", sample_count=300, seed=8))

    class Flaky:
        name = "flaky"

        def __call__(self, patch):
            if patch.center_index % 2 == 0:
                raise ValueError(f"boom {patch.center_index}")
            return np.array([0.0, 0.0, 1.0])

    with pytest.raises(EvaluationError) as exc:
        estimate_normals(cloud, Flaky(), k=8, query_indices=np.arange(10))
    assert len(exc.value.failures) == 5
    assert exc.value.failures[0][0] == 0


def test_model_estimator_batched_matches_single_patch_route():
    rng = np.random.default_rng(9)
    config = ModelConfig(num_blocks=1, feature_dim=8, num_heads=2, graph_k=4)
    weights = init_weights(config, seed=10)
    cloud = generate_synthetic_shape(SyntheticShape(kind="sphere", sample_count=2_000, seed=11))
    index = build_knn_index(cloud.points)
    queries = [3, 100, 700, 1500, 1999]
    patches = [extract_patch(cloud, index, q, k=12) for q in queries]

    estimator = ModelEstimator(weights, config, batch_size=2)  # forces chunking
    batched = estimator.estimate_batch(patches)

    for row, patch in zip(batched, patches):
        normalized = normalize_patch(patch)
        pred = forward(normalized, weights, config)
        expected = denormalize_normal(normalized.transform, pred[patch.center_row])
        np.testing.assert_allclose(row, expected, atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(batched, axis=1), 1.0, atol=1e-9)


# --- heatmap export ---------------------------------------------------------------------


def test_error_colors_endpoints_and_clamp():
    errors = np.radians([0.0, HEATMAP_MAX_DEGREES, 90.0, HEATMAP_MAX_DEGREES / 2.0])
    colors = error_colors(errors)
    np.testing.assert_array_equal(colors[0], [0, 0, 255])
    np.testing.assert_array_equal(colors[1], [255, 0, 0])
    np.testing.assert_array_equal(colors[2], [255, 0, 0])  # clamped above max
    assert colors[3][1] == 0
    assert 0 < colors[3][0] < 255 and 0 < colors[3][2] < 255
    assert int(colors[3][0]) + int(colors[3][2]) in (255, 256)  # linear ramp


def test_heatmap_roundtrip_against_reference_parser(tmp_path):
    rng = np.random.default_rng(12)
    points = rng.normal(size=(40, 3))
    errors = np.abs(rng.normal(size=40)) * 0.5
    path = tmp_path / "heat.ply"
    export_error_heatmap(PointCloud(points), errors, path)

    positions, colors, header = parse_ascii_ply(path)
    assert header["count"] == 40
    assert header["properties"] == ["x", "y", "z", "red", "green", "blue"]
    np.testing.assert_allclose(positions, points, rtol=1e-8)
    np.testing.assert_array_equal(colors, error_colors(errors))


def test_heatmap_length_mismatch_rejected(tmp_path):
    with pytest.raises(ValueError):
        export_error_heatmap(np.zeros((5, 3)), np.zeros(4), tmp_path / "x.ply")


# --- benchmarking -----------------------------------------------------------------------


def test_benchmark_runs_warmup_plus_exact_repetitions():
    cloud = generate_synthetic_shape(SyntheticShape(kind="plane", sample_count=150, seed=13))
    calls = {"n": 0}

    class Counting:
        name = "counting"

        def __call__(self, patch):
            calls["n"] += 1
            return np.array([0.0, 0.0, 1.0])

    result = benchmark_inference(Counting(), cloud, k=8, repetitions=4, stride=3)
    queries = math.ceil(150 / 3)
    assert calls["n"] == (4 + 1) * queries  # one warm-up plus the timed runs
    assert result.repetitions == 4
    assert result.query_count == queries
    assert result.min_seconds <= result.median_seconds <= result.max_seconds
    assert result.points_per_second > 0
    assert result.method == "counting"


def test_benchmark_rejects_too_few_repetitions():
    cloud = generate_synthetic_shape(SyntheticShape(kind="plane", sample_count=150, seed=14))
    with pytest.raises(ValueError):
        benchmark_inference(PcaEstimator(), cloud, k=8, repetitions=2)
