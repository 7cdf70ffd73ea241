"""Angle-axis rotation utilities with exact derivatives.

Rotations are parameterized as angle-axis 3-vectors ``w`` (axis * angle,
radians). All derivative formulas are exact, including the small-angle
limit, which is handled by Taylor series so the expressions stay smooth
under finite-difference probing.
"""

from __future__ import annotations

import numpy as np

# Below this angle the closed-form coefficients are replaced by series
# expansions (error ~ theta^4 / 120, far below float64 noise).
_SMALL = 1e-4


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrices for a batch of 3-vectors: skew(v) @ u = v x u."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    out[..., 0, 1] = -z
    out[..., 0, 2] = y
    out[..., 1, 0] = z
    out[..., 1, 2] = -x
    out[..., 2, 0] = -y
    out[..., 2, 1] = x
    return out


def _sin_cos_coeffs(theta2: np.ndarray):
    # a = sin(t)/t, b = (1-cos(t))/t^2, c = (t-sin(t))/t^3, all smooth at 0
    theta = np.sqrt(theta2)
    small = theta < _SMALL
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(safe)) / np.where(small, 1.0, theta2))
    c = np.where(small, 1.0 / 6.0 - theta2 / 120.0, (safe - np.sin(safe)) / np.where(small, 1.0, theta2 * safe))
    return a, b, c


def rotation_matrix(w: np.ndarray) -> np.ndarray:
    """Rodrigues' formula for a batch of angle-axis vectors.

    Parameters
    ----------
    w : (..., 3) array
        Angle-axis rotation vectors.

    Returns
    -------
    (..., 3, 3) array of rotation matrices.
    """
    w = np.asarray(w, dtype=float)
    theta2 = np.einsum("...i,...i->...", w, w)
    a, b, _ = _sin_cos_coeffs(theta2)
    K = skew(w)
    KK = K @ K
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + a[..., None, None] * K + b[..., None, None] * KK


def angle_axis(R: np.ndarray) -> np.ndarray:
    """Inverse of rotation_matrix: the angle-axis vector of a single matrix.

    The returned vector has angle in [0, pi]. Both limits need care: near
    zero the sin(theta)/theta division is replaced by its series, and near
    pi the axis is recovered from the symmetric part because the
    antisymmetric part vanishes there.
    """
    R = np.asarray(R, dtype=float)
    v = 0.5 * np.array([R[2, 1] - R[1, 2],
                        R[0, 2] - R[2, 0],
                        R[1, 0] - R[0, 1]])
    s = np.linalg.norm(v)                 # sin(theta), >= 0
    c = 0.5 * (np.trace(R) - 1.0)         # cos(theta)
    theta = np.arctan2(s, c)
    if s >= _SMALL:
        return v * (theta / s)
    if c > 0.0:
        # theta/sin(theta) expanded to stay smooth through theta = 0
        return v * (1.0 + theta * theta / 6.0)
    # theta near pi: outer product a a^T survives in the symmetric part
    B = 0.5 * (R + R.T) - c * np.eye(3)
    diag = np.clip(np.diag(B), 0.0, None)
    k = int(np.argmax(diag))
    axis = B[:, k] / np.sqrt(diag[k] * (1.0 - c))
    axis /= np.linalg.norm(axis)
    if s > 0.0 and np.dot(axis, v) < 0.0:
        axis = -axis
    return axis * theta


def right_jacobian(w: np.ndarray) -> np.ndarray:
    """Right Jacobian J_r of SO(3): exp((w+d)^) = exp(w^) exp((J_r(w) d)^)."""
    w = np.asarray(w, dtype=float)
    theta2 = np.einsum("...i,...i->...", w, w)
    _, b, c = _sin_cos_coeffs(theta2)
    K = skew(w)
    KK = K @ K
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye - b[..., None, None] * K + c[..., None, None] * KK


def rotate_jacobian(w: np.ndarray, v: np.ndarray, R: np.ndarray | None = None,
                    Jr: np.ndarray | None = None) -> np.ndarray:
    """d(R(w) @ v)/dw, exact for any angle.

    Parameters
    ----------
    w : (3,) or (..., 3) angle-axis vector(s).
    v : (..., 3) vectors being rotated (broadcast against ``w``).
    R, Jr : optional precomputed rotation matrices / right Jacobians.

    Returns
    -------
    (..., 3, 3) array; column k is the derivative wrt w[k].
    """
    if R is None:
        R = rotation_matrix(w)
    if Jr is None:
        Jr = right_jacobian(w)
    return -(R @ skew(v)) @ Jr
