"""Classical normal estimators: PCA plane fitting and n-jet polynomial fitting."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import covariance_eigendecomposition
from .patches import DegeneratePatchError, NormalizedPatch, Patch, denormalize_normal, normalize_patch

JET_RIDGE = 1e-10


def estimate_normal_pca(patch: Patch) -> np.ndarray:
    """Smallest-eigenvalue direction of the patch covariance, unit length.

    Unoriented convention: the sign is chosen so the z-component is >= 0 in
    the frame of the patch coordinates (falling back to y, then x, when the
    z-component is exactly zero).
    """
    if len(patch) < 3:
        raise DegeneratePatchError(f"patch has {len(patch)} points, need >= 3")
    evals, evecs = covariance_eigendecomposition(patch.positions)
    if evals[1] <= 1e-12 * max(evals[0], 1e-300):
        raise DegeneratePatchError("collinear patch: PCA normal undefined")
    normal = evecs[:, 2].copy()
    for axis in (2, 1, 0):
        if normal[axis] != 0.0:
            if normal[axis] < 0.0:
                normal = -normal
            break
    return normal / np.linalg.norm(normal)


def jet_exponents(order: int) -> list[tuple[int, int]]:
    """Graded (i, j) exponent pairs of the height polynomial sum c_ij u^i v^j."""
    return [(total - j, j) for total in range(order + 1) for j in range(total + 1)]


@dataclass
class JetCoefficients:
    """Bivariate height polynomial h(u, v) in the patch's canonical frame."""

    order: int
    coeffs: np.ndarray

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=np.float64)
        expected = (self.order + 1) * (self.order + 2) // 2
        if self.coeffs.shape != (expected,):
            raise ValueError(
                f"order {self.order} needs {expected} coefficients, "
                f"got shape {self.coeffs.shape}"
            )
        if not np.isfinite(self.coeffs).all():
            raise ValueError("jet coefficients must be finite")

    def evaluate(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        out = np.zeros_like(np.asarray(u, dtype=np.float64))
        for c, (i, j) in zip(self.coeffs, jet_exponents(self.order)):
            out = out + c * np.asarray(u) ** i * np.asarray(v) ** j
        return out


def fit_jet(patch: NormalizedPatch, order: int = 3) -> JetCoefficients:
    """Least-squares fit of the height field over the canonical patch frame.

    The first two canonical axes are the parameter plane and the third is the
    height. Solved via normal equations with a small ridge term for
    conditioning.
    """
    if not 1 <= order <= 4:
        raise ValueError(f"jet order must be in [1, 4], got {order}")
    exponents = jet_exponents(order)
    n_coeffs = len(exponents)
    uv = patch.positions[:, :2]
    h = patch.positions[:, 2]
    if len(uv) < n_coeffs:
        raise ValueError(
            f"need at least {n_coeffs} points for order {order}, got {len(uv)}"
        )
    design = np.column_stack([uv[:, 0] ** i * uv[:, 1] ** j for i, j in exponents])
    gram = design.T @ design + JET_RIDGE * np.eye(n_coeffs)
    coeffs = np.linalg.solve(gram, design.T @ h)
    if not np.isfinite(coeffs).all():
        raise ValueError("jet fit produced non-finite coefficients")
    return JetCoefficients(order, coeffs)


def jet_normal(coeffs: JetCoefficients) -> np.ndarray:
    """Surface normal of the fitted height field at the origin (the query point)."""
    # d h/d u and d h/d v at (0, 0) are the linear coefficients c_10 and c_01.
    du = coeffs.coeffs[1]
    dv = coeffs.coeffs[2]
    normal = np.array([-du, -dv, 1.0])
    return normal / np.linalg.norm(normal)


def estimate_normal_jet(patch: Patch, order: int = 3) -> np.ndarray:
    """Full jet pipeline on a raw patch: canonicalize, fit, map back to world."""
    normalized = normalize_patch(patch)
    coeffs = fit_jet(normalized, order)
    return denormalize_normal(normalized.transform, jet_normal(coeffs))
