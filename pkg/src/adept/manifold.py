"""Stiefel manifold primitives.

Points are ``d x r`` matrices with orthonormal columns. Everything here is a
pure function of its inputs; arrays are never modified in place.
"""

from dataclasses import dataclass

import numpy as np

ORTHO_TOL = 1e-8


@dataclass(frozen=True)
class StiefelPoint:
    """A ``d x r`` matrix with orthonormal columns."""

    mat: np.ndarray

    def __post_init__(self):
        mat = np.asarray(self.mat, dtype=np.float64)
        if mat.ndim != 2:
            raise ValueError(f"expected a 2-d matrix, got shape {mat.shape}")
        d, r = mat.shape
        if not d >= r >= 1:
            raise ValueError(f"need d >= r >= 1, got d={d}, r={r}")
        err = np.linalg.norm(mat.T @ mat - np.eye(r))
        if err > ORTHO_TOL:
            raise ValueError(f"columns are not orthonormal (||U^T U - I||_F = {err:.3e})")
        object.__setattr__(self, "mat", mat)

    @property
    def d(self) -> int:
        return self.mat.shape[0]

    @property
    def r(self) -> int:
        return self.mat.shape[1]


@dataclass(frozen=True)
class TangentVector:
    """A matrix in the tangent space at ``base``."""

    base: StiefelPoint
    mat: np.ndarray

    def skew_residual(self) -> float:
        a = self.base.mat.T @ self.mat
        return float(np.linalg.norm(a + a.T))


def _as_matrix(x) -> np.ndarray:
    if isinstance(x, (StiefelPoint, TangentVector)):
        return x.mat
    return np.asarray(x, dtype=np.float64)


def _check_same_shape(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def project_tangent(v, u) -> np.ndarray:
    """Raw-array version of :func:`tangent_project`: ``U - V sym(V^T U) / 2``."""
    v = _as_matrix(v)
    u = _as_matrix(u)
    _check_same_shape(v, u)
    vtu = v.T @ u
    return u - 0.5 * v @ (vtu + vtu.T)


def tangent_project(v, u) -> TangentVector:
    """Project the ambient matrix ``u`` onto the tangent space at ``v``."""
    base = v if isinstance(v, StiefelPoint) else StiefelPoint(v)
    return TangentVector(base, project_tangent(base.mat, u))


def inv_sqrt_spd(a: np.ndarray) -> np.ndarray:
    """Inverse square root of a symmetric positive definite matrix."""
    w, q = np.linalg.eigh(0.5 * (a + a.T))
    return (q / np.sqrt(w)) @ q.T


def retract(base, xi) -> np.ndarray:
    """Raw-array polar retraction ``(U + Xi)(I + Xi^T Xi)^(-1/2)``.

    Computed as the orthogonal polar factor of ``U + Xi`` (via SVD). The two
    agree for tangent ``Xi`` at an orthonormal ``U``; the polar factor also
    stays on the manifold for non-tangent displacements and does not let
    rounding drift accumulate over many iterations.
    """
    u = _as_matrix(base)
    xi = _as_matrix(xi)
    _check_same_shape(u, xi)
    p, _, qt = np.linalg.svd(u + xi, full_matrices=False)
    return p @ qt


def polar_retract(base, xi) -> StiefelPoint:
    """Polar retraction of ``xi`` at ``base``.

    For a tangent ``xi`` the result is on the manifold. A non-tangent ``xi`` is
    still accepted (the server update averages displacements); the output is
    then re-validated by :class:`StiefelPoint` and may raise.
    """
    return StiefelPoint(retract(base, xi))


def stiefel_distance(v, u) -> float:
    """``||P_{T_V}(U)||_F``. Not symmetric in its arguments."""
    return float(np.linalg.norm(project_tangent(v, u)))


def sample_stiefel_uniform(d: int, r: int, rng: np.random.Generator) -> StiefelPoint:
    """Haar-distributed point via QR of a Gaussian matrix with sign-fixed R."""
    if not d >= r >= 1:
        raise ValueError(f"need d >= r >= 1, got d={d}, r={r}")
    q, rr = np.linalg.qr(rng.standard_normal((d, r)))
    signs = np.sign(np.diag(rr))
    signs[signs == 0] = 1.0
    return StiefelPoint(q * signs)


def retraction_error(base, xi) -> float:
    """``||R_U(Xi) - (U + Xi)||_F``."""
    u = _as_matrix(base)
    xi = _as_matrix(xi)
    return float(np.linalg.norm(retract(u, xi) - (u + xi)))


def estimate_retraction_constant(d: int, r: int, rng: np.random.Generator,
                                 n_probe: int = 200, max_norm: float = 1.0) -> float:
    """Largest observed ``error / ||Xi||_F^2`` over random tangent probes.

    For tangent ``Xi`` the error equals ``||I - (I + Xi^T Xi)^(1/2)||_F``, which
    is at most ``||Xi||_F^2 / 2``, so the estimate never exceeds 0.5.
    """
    worst = 0.0
    for _ in range(n_probe):
        u = sample_stiefel_uniform(d, r, rng).mat
        xi = project_tangent(u, rng.standard_normal((d, r)))
        xi *= rng.uniform(1e-3, max_norm) / np.linalg.norm(xi)
        worst = max(worst, retraction_error(u, xi) / np.linalg.norm(xi) ** 2)
    return worst
