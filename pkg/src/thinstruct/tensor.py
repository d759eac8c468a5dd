"""Fixed-size 3x3 / 3x2 / 3-vector kernels.

All heavier modules reduce their pointwise work to the routines in here:
singular value decomposition with rotation-valued factors, nearest-rotation
projection (Procrustes), and distances to rotation wells SO(3) and delta*SO(3).

Matrices are plain numpy arrays: Mat3 is shape (3, 3), Mat3x2 is (3, 2),
Vec3 is (3,). Batched variants act on stacks of shape (N, 3, 3) and are the
ones the assembly loops call.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "svd3",
    "project_rotation",
    "project_rotation_batch",
    "WellSet",
    "dist_to_wells",
    "dist_to_wells_batch",
    "nearest_well_point",
    "nearest_well_point_batch",
    "random_rotation",
]

# Column-split helpers: M_alpha is the first two columns, M_3 the third.


def split_columns(M: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return (M_alpha, M_3) views of a (..., 3, 3) array."""
    return M[..., :, :2], M[..., :, 2]


def join_columns(M_alpha: np.ndarray, M_3: np.ndarray) -> np.ndarray:
    """Assemble (..., 3, 3) from a (..., 3, 2) block and a (..., 3) column."""
    return np.concatenate([M_alpha, M_3[..., :, None]], axis=-1)


def svd3(M: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Decompose M = U @ diag(sigma) @ V.T with U, V in SO(3).

    Both factors are proper rotations; any reflection is folded into the
    sign of the last singular value, so sigma is sorted descending and
    sigma[2] may be negative (it is iff det M < 0).
    """
    M = np.asarray(M, dtype=float)
    U, s, Vt = np.linalg.svd(M)
    if np.linalg.det(U) < 0.0:
        U = U.copy()
        U[:, 2] *= -1.0
        s = s.copy()
        s[2] *= -1.0
    if np.linalg.det(Vt) < 0.0:
        Vt = Vt.copy()
        Vt[2, :] *= -1.0
        s = s.copy()
        s[2] *= -1.0
    return U, s, Vt.T


def project_rotation(M: np.ndarray) -> np.ndarray:
    """Nearest rotation to M in the Frobenius norm.

    R = U @ diag(1, 1, det(U V^T)) @ V^T from the raw SVD. For repeated
    singular values the minimizer may be non-unique; any one is returned.
    """
    U, _, Vt = np.linalg.svd(np.asarray(M, dtype=float))
    d = np.linalg.det(U) * np.linalg.det(Vt)
    if d < 0.0:
        U = U.copy()
        U[:, 2] *= -1.0
    return U @ Vt


def project_rotation_batch(Ms: np.ndarray) -> np.ndarray:
    """Vectorized project_rotation over a stack of shape (..., 3, 3)."""
    Ms = np.asarray(Ms, dtype=float)
    U, _, Vt = np.linalg.svd(Ms)
    d = np.linalg.det(U) * np.linalg.det(Vt)
    U = U.copy()
    U[..., :, 2] *= np.where(d < 0.0, -1.0, 1.0)[..., None]
    return U @ Vt


@dataclass(frozen=True)
class WellSet:
    """One or two rotation wells: SO(3), optionally together with delta*SO(3).

    Only the conformal second well delta*I*SO(3) = delta*SO(3) is supported:
    it has no rank-one connection to SO(3) for delta != 1, and nearest-point
    projection onto it reuses the plain rotation projection scaled by delta.
    """

    delta: float | None = None  # None means the single well SO(3)

    def __post_init__(self):
        if self.delta is not None:
            d = float(self.delta)
            if not np.isfinite(d) or d <= 0.0:
                raise ValueError(f"well scale must be positive, got {self.delta}")
            if abs(d - 1.0) < 1e-12:
                raise ValueError("second well coincides with SO(3); use single()")
            object.__setattr__(self, "delta", d)

    @classmethod
    def single(cls) -> "WellSet":
        return cls(delta=None)

    @classmethod
    def double(cls, delta: float = 1.3) -> "WellSet":
        return cls(delta=float(delta))

    @classmethod
    def from_matrix(cls, A: np.ndarray) -> "WellSet":
        """Accept a second-well matrix A only if it is delta*I."""
        A = np.asarray(A, dtype=float)
        if A.shape != (3, 3):
            raise ValueError(f"well matrix must be 3x3, got shape {A.shape}")
        d = A[0, 0]
        if not np.allclose(A, d * np.eye(3), atol=1e-12, rtol=0.0):
            raise ValueError(
                "unsupported well matrix: only the conformal form delta*I is "
                "accepted (no closed-form well projection otherwise)"
            )
        return cls.double(float(d))

    @property
    def is_double(self) -> bool:
        return self.delta is not None

    def scales(self) -> tuple[float, ...]:
        """Radial scales of the wells: (1,) or (1, delta)."""
        return (1.0,) if self.delta is None else (1.0, self.delta)


def dist_to_wells(M: np.ndarray, K: WellSet, p: float) -> float:
    """min over the wells of |M - a*R(M)|, raised to the power p.

    The maximizing rotation of <M, R> is independent of the radial scale a,
    so a single projection serves both wells.
    """
    if not (1.0 < p < np.inf):
        raise ValueError(f"exponent p must lie in (1, inf), got {p}")
    R = project_rotation(M)
    M = np.asarray(M, dtype=float)
    d = min(float(np.linalg.norm(M - a * R)) for a in K.scales())
    return d**p


def dist_to_wells_batch(Ms: np.ndarray, K: WellSet, p: float) -> np.ndarray:
    """Vectorized dist_to_wells over (..., 3, 3); returns shape (...)."""
    if not (1.0 < p < np.inf):
        raise ValueError(f"exponent p must lie in (1, inf), got {p}")
    Ms = np.asarray(Ms, dtype=float)
    R = project_rotation_batch(Ms)
    d = np.linalg.norm(Ms - R, axis=(-2, -1))
    if K.is_double:
        d2 = np.linalg.norm(Ms - K.delta * R, axis=(-2, -1))
        d = np.minimum(d, d2)
    return d**p


def nearest_well_point(M: np.ndarray, K: WellSet) -> np.ndarray:
    """The closest point a*R of the well set to M (ties resolved to SO(3))."""
    R = project_rotation(M)
    M = np.asarray(M, dtype=float)
    best = R
    best_d = np.linalg.norm(M - R)
    for a in K.scales()[1:]:
        d = np.linalg.norm(M - a * R)
        if d < best_d:
            best, best_d = a * R, d
    return best


def nearest_well_point_batch(Ms: np.ndarray, K: WellSet) -> np.ndarray:
    """Vectorized nearest_well_point over (..., 3, 3)."""
    Ms = np.asarray(Ms, dtype=float)
    R = project_rotation_batch(Ms)
    if not K.is_double:
        return R
    d1 = np.linalg.norm(Ms - R, axis=(-2, -1))
    d2 = np.linalg.norm(Ms - K.delta * R, axis=(-2, -1))
    a = np.where(d1 <= d2, 1.0, K.delta)
    return a[..., None, None] * R


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform-ish random rotation via projection of a Gaussian matrix."""
    return project_rotation(rng.standard_normal((3, 3)))
