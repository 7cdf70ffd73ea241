"""Pinhole camera, image sampling, and the 3-level multi-resolution pyramid.

Pixel convention: continuous image coordinates (u, v) = (column, row) with
integer coordinates falling exactly on pixel centers, so sampling an image
at integer (u, v) returns the stored pixel value.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

PYRAMID_LEVELS = 3
_KERNEL = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


@dataclass(frozen=True)
class Camera:
    """Pinhole intrinsics (pixels). Projection: (fx x/z + cx, fy y/z + cy)."""

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    def scaled(self, factor: float) -> "Camera":
        return Camera(self.fx * factor, self.fy * factor,
                      self.cx * factor, self.cy * factor)


class BehindCameraError(ValueError):
    pass


class SamplingError(ValueError):
    pass


def project(points, camera: Camera) -> np.ndarray:
    """Project 3D points (..., 3) to pixel coordinates (..., 2).

    Raises
    ------
    BehindCameraError
        If any point has z <= 0.
    """
    p = np.asarray(points, dtype=float)
    z = p[..., 2]
    if np.any(z <= 0):
        raise BehindCameraError("point behind camera (z <= 0)")
    u = camera.fx * p[..., 0] / z + camera.cx
    v = camera.fy * p[..., 1] / z + camera.cy
    return np.stack([u, v], axis=-1)


def project_jacobian(points, camera: Camera) -> np.ndarray:
    """d(u, v)/d(point) for points (..., 3); returns (..., 2, 3)."""
    p = np.asarray(points, dtype=float)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    iz = 1.0 / z
    out = np.zeros(p.shape[:-1] + (2, 3))
    out[..., 0, 0] = camera.fx * iz
    out[..., 0, 2] = -camera.fx * x * iz * iz
    out[..., 1, 1] = camera.fy * iz
    out[..., 1, 2] = -camera.fy * y * iz * iz
    return out


def _bilinear_raw(image: np.ndarray, uv: np.ndarray):
    iu = np.floor(uv[:, 0]).astype(np.int64)
    iv = np.floor(uv[:, 1]).astype(np.int64)
    fu = (uv[:, 0] - iu)[:, None]
    fv = (uv[:, 1] - iv)[:, None]
    i00 = image[iv, iu]
    i01 = image[iv, iu + 1]
    i10 = image[iv + 1, iu]
    i11 = image[iv + 1, iu + 1]
    top = i00 + fu * (i01 - i00)
    bot = i10 + fu * (i11 - i10)
    val = top + fv * (bot - top)
    du = (1.0 - fv) * (i01 - i00) + fv * (i11 - i10)
    dv = bot - top
    return val, np.stack([du, dv], axis=-1)


def sample_bilinear(image, pixel):
    """Bilinear color sample and image-space gradient.

    Parameters
    ----------
    image : (H, W) or (H, W, C) float array.
    pixel : (2,) or (M, 2) continuous (u, v) coordinates. Must lie inside
        the image minus a 1-pixel margin.

    Returns
    -------
    value : sampled color(s), shape (C,) / (M, C).
    gradient : d value / d (u, v), shape (C, 2) / (M, C, 2).

    Raises
    ------
    SamplingError
        If any coordinate violates the margin; callers treat the vertex
        as invisible instead of extrapolating.
    """
    img = np.asarray(image, dtype=float)
    squeeze_c = img.ndim == 2
    if squeeze_c:
        img = img[:, :, None]
    uv = np.atleast_2d(np.asarray(pixel, dtype=float))
    h, w = img.shape[:2]
    if not sample_mask(uv, w, h).all():
        raise SamplingError("sample point outside image minus 1-pixel margin")
    val, grad = _bilinear_raw(img, uv)
    if squeeze_c:
        val, grad = val[:, 0], grad[:, 0]
    if np.asarray(pixel).ndim == 1:
        return val[0], grad[0]
    return val, grad


def sample_mask(uv: np.ndarray, width: int, height: int) -> np.ndarray:
    """True where (u, v) respects the 1-pixel sampling margin."""
    u, v = uv[..., 0], uv[..., 1]
    return (u >= 1.0) & (u <= width - 2.0) & (v >= 1.0) & (v <= height - 2.0)


def sample_bilinear_masked(image: np.ndarray, uv: np.ndarray):
    """Batched sampling that zero-fills out-of-margin points.

    Returns (values, gradients, valid_mask); invalid rows are zero.
    """
    h, w = image.shape[:2]
    ok = sample_mask(uv, w, h)
    vals = np.zeros((len(uv), image.shape[2]))
    grads = np.zeros((len(uv), image.shape[2], 2))
    if ok.any():
        v, g = _bilinear_raw(image, uv[ok])
        vals[ok] = v
        grads[ok] = g
    return vals, grads, ok


# -------------------------------------------------------------------- pyramid


@dataclass(frozen=True)
class FramePyramid:
    """3-level coarse-to-fine stack of one input frame.

    Index 0 is the finest (input) level. ``depths`` is None for RGB-only
    input; depth value 0 means missing.
    """

    colors: tuple
    depths: tuple | None
    cameras: tuple

    @property
    def levels(self) -> int:
        return len(self.colors)

    def color(self, level: int) -> np.ndarray:
        return self.colors[level]

    def depth(self, level: int):
        return None if self.depths is None else self.depths[level]

    def camera(self, level: int) -> Camera:
        return self.cameras[level]


def _blur_color(img: np.ndarray) -> np.ndarray:
    out = ndimage.correlate1d(img, _KERNEL, axis=0, mode="reflect")
    out = ndimage.correlate1d(out, _KERNEL, axis=1, mode="reflect")
    return out


def _median_depth(depth: np.ndarray) -> np.ndarray:
    # 3x3 lower median over valid (nonzero) samples; all-missing -> 0.
    padded = np.pad(depth, 1, mode="constant", constant_values=0.0)
    h, w = depth.shape
    stack = np.empty((9, h, w))
    k = 0
    for dy in range(3):
        for dx in range(3):
            stack[k] = padded[dy:dy + h, dx:dx + w]
            k += 1
    valid = stack > 0
    count = valid.sum(axis=0)
    stack = np.where(valid, stack, np.inf)
    stack.sort(axis=0)
    pick = np.clip((count - 1) // 2, 0, 8)
    med = np.take_along_axis(stack, pick[None], axis=0)[0]
    return np.where(count > 0, med, 0.0)


def build_pyramid(color, depth=None, camera: Camera | None = None) -> FramePyramid:
    """Build the 3-level pyramid used by the coarse-to-fine schedule.

    Color levels: 5-tap binomial blur ([1,4,6,4,1]/16, separable, reflect
    boundary) followed by 2x decimation. Depth levels: 3x3 median with 0
    treated as missing, then decimation. Intrinsics are halved per level.
    """
    color = np.asarray(color, dtype=float)
    if color.ndim != 3 or color.shape[2] != 3:
        raise ValueError("color must be (H, W, 3)")
    h, w = color.shape[:2]
    if h < 8 or w < 8:
        raise ValueError("image too small for a 3-level pyramid (need >= 8x8)")
    if camera is None:
        raise ValueError("camera required")
    if depth is not None:
        depth = np.asarray(depth, dtype=float)
        if depth.shape != (h, w):
            raise ValueError("depth dims must match color dims")

    colors = [color]
    depths = [depth] if depth is not None else None
    cameras = [camera]
    for _ in range(PYRAMID_LEVELS - 1):
        colors.append(_blur_color(colors[-1])[::2, ::2])
        if depths is not None:
            depths.append(_median_depth(depths[-1])[::2, ::2])
        cameras.append(cameras[-1].scaled(0.5))
    return FramePyramid(
        colors=tuple(colors),
        depths=None if depths is None else tuple(depths),
        cameras=tuple(cameras),
    )


def backproject_depth(depth, camera: Camera) -> np.ndarray:
    """One 3D point per valid (nonzero) depth pixel: ((u-cx)/fx, (v-cy)/fy, 1)*d."""
    depth = np.asarray(depth, dtype=float)
    v, u = np.nonzero(depth > 0)
    d = depth[v, u]
    x = (u - camera.cx) / camera.fx * d
    y = (v - camera.cy) / camera.fy * d
    return np.column_stack([x, y, d])
