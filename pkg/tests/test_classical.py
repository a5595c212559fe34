"""PCA and jet baselines against exact geometric constructions: closed-form
plane normals, forward-generated polynomial height fields, and analytic
sphere normals."""

import math

import numpy as np
import pytest

from pointnormals.classical import (
    JetCoefficients,
    estimate_normal_jet,
    estimate_normal_pca,
    fit_jet,
    jet_exponents,
    jet_normal,
)
from pointnormals.geometry import PointCloud
from pointnormals.knn import KnnIndex
from pointnormals.patches import (
    DegeneratePatchError,
    NormalizedPatch,
    Patch,
    PatchTransform,
    extract_patch,
    normalize_patch,
)

from _oracles import fit_polynomial_surface_exact, unoriented_angle


def _patch_from_points(points: np.ndarray) -> Patch:
    return Patch(0, np.arange(len(points)), np.asarray(points, dtype=np.float64))


def _plane_patch(normal: np.ndarray, count: int = 40, seed: int = 0) -> Patch:
    """Noiseless samples of the plane through the origin with the given normal."""
    rng = np.random.default_rng(seed)
    normal = normal / np.linalg.norm(normal)
    basis = np.linalg.svd(normal[None])[2][1:]  # two unit vectors spanning the plane
    uv = rng.normal(size=(count, 2))
    uv[0] = 0.0  # query at the origin
    return _patch_from_points(uv @ basis)


def _normalized_height_field(coeffs: dict, count: int = 60, seed: int = 1) -> NormalizedPatch:
    """Canonical-frame patch sampled exactly from h(u, v) = sum c_ij u^i v^j."""
    rng = np.random.default_rng(seed)
    height, _ = fit_polynomial_surface_exact(2, coeffs)
    u = rng.uniform(-0.8, 0.8, size=count)
    v = rng.uniform(-0.8, 0.8, size=count)
    u[0] = v[0] = 0.0
    positions = np.stack([u, v, height(u, v)], axis=1)
    transform = PatchTransform(np.zeros(3), np.eye(3), 1.0)
    return NormalizedPatch(positions, transform)


# --- PCA estimator ------------------------------------------------------------


def test_pca_exact_z_plane():
    patch = _plane_patch(np.array([0.0, 0.0, 1.0]))
    np.testing.assert_allclose(estimate_normal_pca(patch), [0.0, 0.0, 1.0], atol=1e-12)


def test_pca_tilted_plane_closed_form():
    normal = np.array([1.0, 1.0, 1.0]) / math.sqrt(3.0)
    patch = _plane_patch(normal)
    assert unoriented_angle(estimate_normal_pca(patch), normal) < 1e-9


def test_pca_sign_convention_z_nonnegative():
    rng = np.random.default_rng(2)
    for seed in range(5):
        normal = rng.normal(size=3)
        got = estimate_normal_pca(_plane_patch(normal, seed=seed))
        assert got[2] >= 0.0
        assert np.linalg.norm(got) == pytest.approx(1.0, abs=1e-12)


def test_pca_rejects_degenerate_patches():
    with pytest.raises(DegeneratePatchError):
        estimate_normal_pca(_patch_from_points(np.zeros((2, 3))))
    t = np.linspace(0.0, 1.0, 10)
    line = np.stack([t, t, t], axis=1)
    with pytest.raises(DegeneratePatchError):
        estimate_normal_pca(_patch_from_points(line))


def test_pca_rotation_equivariant_up_to_sign():
    rng = np.random.default_rng(3)
    points = rng.normal(size=(30, 3)) * np.array([1.0, 0.8, 0.05])
    a = rng.normal(size=(3, 3))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    base = estimate_normal_pca(_patch_from_points(points))
    rotated = estimate_normal_pca(_patch_from_points(points @ q.T))
    assert unoriented_angle(rotated, q @ base) < 1e-9


def test_pca_sphere_patch_tracks_analytic_normal():
    rng = np.random.default_rng(4)
    points = rng.normal(size=(10_000, 3))
    points /= np.linalg.norm(points, axis=1, keepdims=True)
    cloud = PointCloud(points)
    index = KnnIndex(points)
    for qi in (0, 123, 9_999):
        patch = extract_patch(cloud, index, qi, k=16)
        got = estimate_normal_pca(patch)
        # truth for the unit sphere is the position itself; a 16-point cap at
        # this density subtends a few degrees, bounding the plane-fit error
        assert math.degrees(unoriented_angle(got, points[qi])) < 5.0


# --- jet exponents and coefficients ---------------------------------------------


def test_jet_exponents_graded_and_counted():
    assert jet_exponents(1) == [(0, 0), (1, 0), (0, 1)]
    assert jet_exponents(2) == [(0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2)]
    for order in range(1, 5):
        exps = jet_exponents(order)
        assert len(exps) == (order + 1) * (order + 2) // 2
        assert all(i + j <= order for i, j in exps)


def test_jet_coefficients_validation():
    with pytest.raises(ValueError):
        JetCoefficients(2, np.zeros(5))
    with pytest.raises(ValueError):
        JetCoefficients(1, np.array([0.0, np.inf, 0.0]))


# --- jet fitting -----------------------------------------------------------------


def test_fit_jet_recovers_exact_quadratic():
    generating = {(2, 0): 0.3, (1, 1): 0.1, (0, 2): -0.2}
    patch = _normalized_height_field(generating)
    coeffs = fit_jet(patch, order=2)
    expected = np.zeros(6)
    for idx, (i, j) in enumerate(jet_exponents(2)):
        expected[idx] = generating.get((i, j), 0.0)
    np.testing.assert_allclose(coeffs.coeffs, expected, atol=1e-8)


def test_fit_jet_plane_has_zero_nonconstant_coefficients():
    rng = np.random.default_rng(5)
    u = rng.uniform(-1.0, 1.0, size=50)
    v = rng.uniform(-1.0, 1.0, size=50)
    positions = np.stack([u, v, np.zeros(50)], axis=1)
    patch = NormalizedPatch(positions, PatchTransform(np.zeros(3), np.eye(3), 1.0))
    for order in (1, 2, 3, 4):
        coeffs = fit_jet(patch, order)
        np.testing.assert_allclose(coeffs.coeffs, 0.0, atol=1e-10)


def test_fit_jet_preconditions():
    positions = np.zeros((5, 3))
    positions[:, 0] = np.arange(5.0)
    positions[:, 1] = np.arange(5.0) ** 2
    patch = NormalizedPatch(positions, PatchTransform(np.zeros(3), np.eye(3), 1.0))
    with pytest.raises(ValueError):
        fit_jet(patch, order=2)  # 5 points < 6 coefficients
    with pytest.raises(ValueError):
        fit_jet(patch, order=0)
    with pytest.raises(ValueError):
        fit_jet(patch, order=5)


def test_fit_jet_residual_nonincreasing_in_order():
    rng = np.random.default_rng(6)
    u = rng.uniform(-1.0, 1.0, size=80)
    v = rng.uniform(-1.0, 1.0, size=80)
    h = 0.4 * u**2 - 0.3 * u * v + 0.1 * v**3 + 0.02 * rng.normal(size=80)
    patch = NormalizedPatch(
        np.stack([u, v, h], axis=1), PatchTransform(np.zeros(3), np.eye(3), 1.0)
    )
    residuals = []
    for order in (1, 2, 3, 4):
        coeffs = fit_jet(patch, order)
        residuals.append(float(((coeffs.evaluate(u, v) - h) ** 2).sum()))
    assert all(b <= a + 1e-12 for a, b in zip(residuals, residuals[1:]))


# --- jet normal -------------------------------------------------------------------


def test_jet_normal_identities():
    flat = JetCoefficients(2, np.zeros(6))
    np.testing.assert_array_equal(jet_normal(flat), [0.0, 0.0, 1.0])
    ramp = JetCoefficients(1, np.array([0.0, 0.5, 0.0]))
    expected = np.array([-0.5, 0.0, 1.0]) / np.linalg.norm([-0.5, 0.0, 1.0])
    np.testing.assert_allclose(jet_normal(ramp), expected, atol=1e-15)


def test_jet_normal_matches_analytic_on_quadratic():
    generating = {(1, 0): 0.2, (0, 1): -0.4, (2, 0): 0.3, (1, 1): 0.1, (0, 2): -0.2}
    _, analytic = fit_polynomial_surface_exact(2, generating)
    patch = _normalized_height_field(generating)
    got = jet_normal(fit_jet(patch, order=2))
    assert unoriented_angle(got, analytic) < 1e-10


def test_jet_order1_plane_matches_pca():
    rng = np.random.default_rng(7)
    normal = rng.normal(size=3)
    patch = _plane_patch(normal, count=30, seed=8)
    pca = estimate_normal_pca(patch)
    jet = estimate_normal_jet(patch, order=1)
    assert unoriented_angle(jet, pca) < 1e-9


def test_jet_beats_pca_on_curved_surface():
    # lopsided paraboloid patch: the uneven sampling tilts the PCA plane by
    # ~16 degrees, while the order-2 jet absorbs the curvature and stays
    # within a degree of the true normal (not exact: the tilted canonical
    # frame turns the quadratic graph into one with higher-order terms)
    rng = np.random.default_rng(9)
    uv = rng.uniform((-0.2, -0.5), (0.5, 0.5), size=(200, 2))
    uv[0] = 0.0
    h = 0.8 * uv[:, 0] ** 2 + 0.6 * uv[:, 1] ** 2
    patch = _patch_from_points(np.column_stack([uv, h]))
    truth = np.array([0.0, 0.0, 1.0])
    jet_err = math.degrees(unoriented_angle(estimate_normal_jet(patch, order=2), truth))
    pca_err = math.degrees(unoriented_angle(estimate_normal_pca(patch), truth))
    assert jet_err < 2.0
    assert pca_err > 5.0
    assert jet_err < pca_err / 5.0


def test_full_jet_pipeline_world_frame():
    # sphere cap: full pipeline (canonicalize, fit, map back) vs analytic normal
    rng = np.random.default_rng(10)
    points = rng.normal(size=(5_000, 3))
    points /= np.linalg.norm(points, axis=1, keepdims=True)
    cloud = PointCloud(points)
    index = KnnIndex(points)
    patch = extract_patch(cloud, index, 42, k=30)
    got = estimate_normal_jet(patch, order=2)
    assert math.degrees(unoriented_angle(got, points[42])) < 2.0
