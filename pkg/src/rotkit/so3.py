"""Rotation-group primitives.

Conventions used throughout the package:

* Rotations are 3x3 ``float64`` arrays acting on column vectors,
  ``det(R) = +1`` and ``R.T @ R = I``.
* Quaternions are scalar-first ``(w, x, y, z)``; ``q`` and ``-q`` map to
  the same rotation.
* The geodesic distance between two rotations is the relative rotation
  angle normalized by pi, so it lives in ``[0, 1]``. Angle errors are the
  same quantity in degrees, in ``[0, 180]``.
* Wherever a rotation crosses a file boundary it is serialized as nine
  row-major 64-bit floats.

Under the uniform (Haar) distribution the relative angle between two
independent rotations has density ``(1 - cos t) / pi`` on ``[0, pi]``;
``haar_angle_cdf`` exposes the corresponding CDF for distribution tests.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = [
    "ORTHO_TOL",
    "is_rotation",
    "check_rotation",
    "geodesic_distance",
    "angle_error_deg",
    "ProperSvd",
    "proper_svd",
    "proper_svd_many",
    "project_to_so3",
    "project_to_so3_many",
    "rotation_from_quaternion",
    "axis_angle_rotation",
    "random_rotation",
    "random_rotations",
    "haar_angle_cdf",
    "rotation_to_floats",
    "rotation_from_floats",
]

# Orthonormality / determinant tolerance for validating rotations.
ORTHO_TOL = 1e-9


def _as_matrix(m: np.ndarray, name: str = "matrix") -> np.ndarray:
    a = np.asarray(m, dtype=np.float64)
    if a.shape != (3, 3):
        raise ValueError(f"{name} must have shape (3, 3), got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} must be finite")
    return a


def is_rotation(m: np.ndarray, tol: float = ORTHO_TOL) -> bool:
    """Return True if ``m`` is orthonormal with determinant +1 within ``tol``."""
    a = np.asarray(m, dtype=np.float64)
    if a.shape != (3, 3) or not np.all(np.isfinite(a)):
        return False
    if not np.allclose(a.T @ a, np.eye(3), rtol=0.0, atol=tol):
        return False
    return bool(abs(np.linalg.det(a) - 1.0) <= tol)


def check_rotation(m: np.ndarray, name: str = "rotation") -> np.ndarray:
    """Validate and return ``m`` as a rotation matrix, raising ValueError otherwise."""
    a = _as_matrix(m, name)
    if not np.allclose(a.T @ a, np.eye(3), rtol=0.0, atol=ORTHO_TOL):
        raise ValueError(f"{name} is not orthonormal within {ORTHO_TOL}")
    if abs(np.linalg.det(a) - 1.0) > ORTHO_TOL:
        raise ValueError(f"{name} must have determinant +1")
    return a


def geodesic_distance(r1: np.ndarray, r2: np.ndarray) -> float:
    """Normalized geodesic distance between two rotations.

    Computes ``arccos((trace(r1.T @ r2) - 1) / 2) / pi`` with the cosine
    clamped to ``[-1, 1]`` so that round-off near the identity or near a
    half-turn cannot produce NaN.

    Returns:
        A float in ``[0, 1]``: 0 for identical rotations, 1 for rotations
        a half-turn apart.
    """
    a = check_rotation(r1, "r1")
    b = check_rotation(r2, "r2")
    cos = (np.trace(a.T @ b) - 1.0) / 2.0
    return float(np.arccos(np.clip(cos, -1.0, 1.0)) / np.pi)


def angle_error_deg(r1: np.ndarray, r2: np.ndarray) -> float:
    """Relative rotation angle between ``r1`` and ``r2`` in degrees, in [0, 180]."""
    return 180.0 * geodesic_distance(r1, r2)


@dataclass(frozen=True)
class ProperSvd:
    """SVD ``m = u @ diag(s) @ v.T`` with both factors proper rotations.

    ``u`` and ``v`` have determinant +1; any reflection is absorbed into
    the sign of the last singular value, so ``s[0] >= s[1] >= abs(s[2])``
    and ``s[2]`` may be negative.
    """

    u: np.ndarray
    s: np.ndarray
    v: np.ndarray


def proper_svd(m: np.ndarray) -> ProperSvd:
    """Decompose an arbitrary 3x3 matrix into rotation-valued SVD factors.

    Args:
        m: any finite 3x3 matrix.

    Returns:
        A :class:`ProperSvd` whose factors reconstruct ``m`` and whose
        ``u``/``v`` are proper rotations.
    """
    a = _as_matrix(m)
    u, s, vt = np.linalg.svd(a)
    v = vt.T
    s = s.copy()
    if np.linalg.det(u) < 0.0:
        u = u.copy()
        u[:, 2] = -u[:, 2]
        s[2] = -s[2]
    if np.linalg.det(v) < 0.0:
        v = v.copy()
        v[:, 2] = -v[:, 2]
        s[2] = -s[2]
    return ProperSvd(u=u, s=s, v=v)


def proper_svd_many(ms: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized :func:`proper_svd` over a stack of matrices.

    Args:
        ms: array of shape (n, 3, 3).

    Returns:
        ``(u, s, v)`` with shapes (n, 3, 3), (n, 3), (n, 3, 3).
    """
    a = np.asarray(ms, dtype=np.float64)
    if a.ndim != 3 or a.shape[1:] != (3, 3):
        raise ValueError(f"expected shape (n, 3, 3), got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrices must be finite")
    u, s, vt = np.linalg.svd(a)
    v = np.swapaxes(vt, -1, -2)
    s = s.copy()
    u = u.copy()
    v = v.copy()
    flip_u = np.linalg.det(u) < 0.0
    u[flip_u, :, 2] = -u[flip_u, :, 2]
    s[flip_u, 2] = -s[flip_u, 2]
    flip_v = np.linalg.det(v) < 0.0
    v[flip_v, :, 2] = -v[flip_v, :, 2]
    s[flip_v, 2] = -s[flip_v, 2]
    return u, s, v


def project_to_so3(m: np.ndarray) -> tuple[np.ndarray, bool]:
    """Nearest rotation to ``m`` in Frobenius norm.

    The projection is ``u @ v.T`` from the proper SVD. It is unique iff
    ``s[1] + s[2] > 0``; the second return value flags the degenerate
    case (for example ``m = 0``, where every rotation is equally close).

    Returns:
        ``(rotation, degenerate)``.
    """
    d = proper_svd(m)
    r = d.u @ d.v.T
    degenerate = bool(d.s[1] + d.s[2] <= 1e-12 * max(1.0, d.s[0]))
    return r, degenerate


def project_to_so3_many(ms: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`project_to_so3`; returns (rotations, degenerate flags)."""
    u, s, v = proper_svd_many(ms)
    r = u @ np.swapaxes(v, -1, -2)
    degenerate = s[:, 1] + s[:, 2] <= 1e-12 * np.maximum(1.0, s[:, 0])
    return r, degenerate


def rotation_from_quaternion(q: np.ndarray) -> np.ndarray:
    """Rotation matrix for a scalar-first quaternion (normalized internally).

    Args:
        q: array-like of 4 floats ``(w, x, y, z)``, not all zero.
    """
    a = np.asarray(q, dtype=np.float64).reshape(-1)
    if a.shape != (4,):
        raise ValueError(f"quaternion must have 4 components, got shape {a.shape}")
    n = np.linalg.norm(a)
    if not np.isfinite(n) or n == 0.0:
        raise ValueError("quaternion must be finite and nonzero")
    w, x, y, z = a / n
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ],
        dtype=np.float64,
    )


def axis_angle_rotation(axis: Sequence[float], angle: float) -> np.ndarray:
    """Rotation by ``angle`` radians about ``axis`` (normalized internally)."""
    ax = np.asarray(axis, dtype=np.float64).reshape(3)
    n = np.linalg.norm(ax)
    if n == 0.0 or not np.isfinite(n):
        raise ValueError("axis must be finite and nonzero")
    half = 0.5 * float(angle)
    return rotation_from_quaternion(
        np.concatenate([[np.cos(half)], np.sin(half) * ax / n])
    )


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Draw one rotation from the uniform (Haar) distribution on SO(3).

    A 4-dimensional standard Gaussian, normalized, is uniform on the unit
    quaternion sphere; pushing it through the double cover gives Haar.
    """
    q = rng.normal(size=4)
    while np.linalg.norm(q) == 0.0:  # pragma: no cover - probability zero
        q = rng.normal(size=4)
    return rotation_from_quaternion(q)


def random_rotations(rng: np.random.Generator, n: int) -> np.ndarray:
    """Draw ``n`` Haar-uniform rotations as an (n, 3, 3) array."""
    if n < 0:
        raise ValueError("n must be nonnegative")
    q = rng.normal(size=(n, 4))
    norms = np.linalg.norm(q, axis=1, keepdims=True)
    q = q / norms
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    r = np.empty((n, 3, 3), dtype=np.float64)
    r[:, 0, 0] = 1 - 2 * (y * y + z * z)
    r[:, 0, 1] = 2 * (x * y - w * z)
    r[:, 0, 2] = 2 * (x * z + w * y)
    r[:, 1, 0] = 2 * (x * y + w * z)
    r[:, 1, 1] = 1 - 2 * (x * x + z * z)
    r[:, 1, 2] = 2 * (y * z - w * x)
    r[:, 2, 0] = 2 * (x * z - w * y)
    r[:, 2, 1] = 2 * (y * z + w * x)
    r[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def haar_angle_cdf(theta: np.ndarray) -> np.ndarray:
    """CDF of the rotation angle (radians) under the Haar distribution.

    ``P(angle <= theta) = (theta - sin(theta)) / pi`` for theta in [0, pi].
    """
    t = np.clip(np.asarray(theta, dtype=np.float64), 0.0, np.pi)
    return (t - np.sin(t)) / np.pi


def rotation_to_floats(r: np.ndarray) -> list[float]:
    """Serialize a rotation as nine row-major floats."""
    return [float(x) for x in check_rotation(r).reshape(9)]


def rotation_from_floats(values: Sequence[float]) -> np.ndarray:
    """Inverse of :func:`rotation_to_floats`, validating the result."""
    a = np.asarray(values, dtype=np.float64)
    if a.shape != (9,):
        raise ValueError(f"expected 9 floats, got shape {a.shape}")
    return check_rotation(a.reshape(3, 3))
