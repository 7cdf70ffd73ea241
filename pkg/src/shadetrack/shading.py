"""Second-order real spherical-harmonic irradiance and the reflectance model.

The shading of a vertex is r(n) = l . Y(n) with 9 coefficients l (white
illumination); predicted intensity adds an albedo scale and the additive
per-vertex specular residue: rho_c * r(n) + beta_c per channel.

Basis order: (Y00; Y1,-1, Y10, Y11; Y2,-2, Y2,-1, Y20, Y21, Y22) where
Y1,-1 ~ y, Y10 ~ z, Y11 ~ x. Orthonormal real-SH constants; any radiometric
convolution factors are folded into l by the solver, so only the span of
the basis matters.
"""

from __future__ import annotations

import numpy as np

SH_DIM = 9

_C0 = 0.28209479177387814  # 0.5*sqrt(1/pi)
_C1 = 0.4886025119029199   # sqrt(3/(4 pi))
_C2 = 1.0925484305920792   # 0.5*sqrt(15/pi)
_C20 = 0.31539156525252005  # 0.25*sqrt(5/pi)
_C22 = 0.5462742152960396   # 0.25*sqrt(15/pi)

_UNIT_TOL = 3e-6  # on n.n - 1, i.e. norm within ~1.5e-6 of 1


def sh_basis(normal) -> np.ndarray:
    """Evaluate the 9 real SH basis functions at unit normal(s).

    Parameters
    ----------
    normal : (3,) or (M, 3) array of unit vectors (norm within ~1e-6 of 1).

    Returns
    -------
    (9,) or (M, 9) basis values.

    Raises
    ------
    ValueError
        On non-unit input.
    """
    n = np.asarray(normal, dtype=float)
    nn = np.einsum("...i,...i->...", n, n)
    if np.any(np.abs(nn - 1.0) > _UNIT_TOL):
        raise ValueError("sh_basis requires unit normals")
    return _sh_basis_unchecked(n)


def _sh_basis_unchecked(n: np.ndarray) -> np.ndarray:
    x, y, z = n[..., 0], n[..., 1], n[..., 2]
    out = np.empty(n.shape[:-1] + (SH_DIM,))
    out[..., 0] = _C0
    out[..., 1] = _C1 * y
    out[..., 2] = _C1 * z
    out[..., 3] = _C1 * x
    out[..., 4] = _C2 * x * y
    out[..., 5] = _C2 * y * z
    out[..., 6] = _C20 * (3.0 * z * z - 1.0)
    out[..., 7] = _C2 * x * z
    out[..., 8] = _C22 * (x * x - y * y)
    return out


def sh_basis_jacobian(normal) -> np.ndarray:
    """d Y / d n, shape (..., 9, 3), valid for the polynomial extension off
    the unit sphere (callers chain it with a normalization projector)."""
    n = np.asarray(normal, dtype=float)
    x, y, z = n[..., 0], n[..., 1], n[..., 2]
    J = np.zeros(n.shape[:-1] + (SH_DIM, 3))
    J[..., 1, 1] = _C1
    J[..., 2, 2] = _C1
    J[..., 3, 0] = _C1
    J[..., 4, 0] = _C2 * y
    J[..., 4, 1] = _C2 * x
    J[..., 5, 1] = _C2 * z
    J[..., 5, 2] = _C2 * y
    J[..., 6, 2] = _C20 * 6.0 * z
    J[..., 7, 0] = _C2 * z
    J[..., 7, 2] = _C2 * x
    J[..., 8, 0] = _C22 * 2.0 * x
    J[..., 8, 1] = -_C22 * 2.0 * y
    return J


def irradiance(l, normal) -> np.ndarray | float:
    """Shading r(n) = l . Y(n). May be negative; the tracker reports the
    negative fraction as a diagnostic instead of clamping."""
    l = np.asarray(l, dtype=float)
    if l.shape[-1] != SH_DIM:
        raise ValueError("l must have 9 entries")
    out = sh_basis(normal) @ l
    return float(out) if out.ndim == 0 else out


def predict_intensity(albedo, l, normal, beta) -> np.ndarray:
    """Per-channel rho_c * r(n) + beta_c for one or many vertices."""
    albedo = np.asarray(albedo, dtype=float)
    beta = np.asarray(beta, dtype=float)
    r = irradiance(l, normal)
    return albedo * np.asarray(r)[..., None] + beta


def fit_sh_to_samples(normals, values) -> np.ndarray:
    """Least-squares l so that Y(normals) @ l ~ values (minimum-norm)."""
    basis = sh_basis(np.asarray(normals, dtype=float))
    sol, *_ = np.linalg.lstsq(basis, np.asarray(values, dtype=float), rcond=None)
    return sol
