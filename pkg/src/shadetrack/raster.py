"""Software z-buffer rasterization and vertex visibility.

The rasterizer is perspective-correct: depth and vertex attributes are
interpolated via 1/z, so the value at a pixel equals the 3D-barycentric
interpolation at the exact ray/triangle intersection. That property is what
lets rendered depth + attributes reproduce an independent per-pixel
ray-shading oracle to float precision.

Sample points sit at integer pixel coordinates (see camera module).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import Camera, sample_mask
from .mesh import Mesh, vertex_normals

_MIN_Z = 1e-9
_MIN_AREA = 1e-12
VISIBILITY_TOL_FRAC = 0.01  # tau_z as a fraction of the bbox diagonal


@dataclass
class RasterResult:
    """Z-buffer plus the per-pixel winning fragment data.

    ``zbuf`` holds +inf on uncovered pixels. ``tri`` holds the winning face
    index or -1. Attribute images are produced on demand so callers that
    only need depth (visibility) skip the interpolation cost.
    """

    width: int
    height: int
    zbuf: np.ndarray
    tri: np.ndarray
    _pix: np.ndarray        # flat pixel index per winning fragment
    _corners: np.ndarray    # (K, 3) vertex indices of the winning face
    _weights: np.ndarray    # (K, 3) perspective-correct interpolation weights

    def depth_map(self) -> np.ndarray:
        """Depth image with 0 on uncovered pixels (missing-data sentinel)."""
        return np.where(np.isfinite(self.zbuf), self.zbuf, 0.0)

    def coverage(self) -> np.ndarray:
        return np.isfinite(self.zbuf)

    def interpolate(self, attribute: np.ndarray, background: float = 0.0) -> np.ndarray:
        """Perspective-correct per-pixel interpolation of a (N, C) vertex attribute."""
        attr = np.asarray(attribute, dtype=float)
        squeeze = attr.ndim == 1
        if squeeze:
            attr = attr[:, None]
        vals = np.einsum("kj,kjc->kc", self._weights, attr[self._corners])
        out = np.full((self.height * self.width, attr.shape[1]), background)
        out[self._pix] = vals
        out = out.reshape(self.height, self.width, attr.shape[1])
        return out[:, :, 0] if squeeze else out


def _empty_result(width: int, height: int) -> RasterResult:
    return RasterResult(
        width=width,
        height=height,
        zbuf=np.full((height, width), np.inf),
        tri=np.full((height, width), -1, dtype=np.int64),
        _pix=np.empty(0, dtype=np.int64),
        _corners=np.empty((0, 3), dtype=np.int64),
        _weights=np.empty((0, 3)),
    )


def rasterize(points, faces, camera: Camera, resolution) -> RasterResult:
    """Rasterize camera-frame points (camera at origin, +z forward).

    Faces containing a vertex at or behind the camera plane are skipped;
    ties in depth are broken by face index so output is deterministic.
    """
    width, height = int(resolution[0]), int(resolution[1])
    p = np.asarray(points, dtype=float)
    faces = np.asarray(faces, dtype=np.int64)

    ok = (p[:, 2] > _MIN_Z)
    keep = ok[faces].all(axis=1)
    faces = faces[keep]
    if len(faces) == 0:
        return _empty_result(width, height)

    z = p[:, 2]
    u = camera.fx * p[:, 0] / z + camera.cx
    v = camera.fy * p[:, 1] / z + camera.cy

    fu = u[faces]  # (F, 3)
    fv = v[faces]
    x0 = np.maximum(np.ceil(fu.min(axis=1)), 0).astype(np.int64)
    x1 = np.minimum(np.floor(fu.max(axis=1)), width - 1).astype(np.int64)
    y0 = np.maximum(np.ceil(fv.min(axis=1)), 0).astype(np.int64)
    y1 = np.minimum(np.floor(fv.max(axis=1)), height - 1).astype(np.int64)
    area = (fu[:, 1] - fu[:, 0]) * (fv[:, 2] - fv[:, 0]) - (fu[:, 2] - fu[:, 0]) * (fv[:, 1] - fv[:, 0])
    live = (x1 >= x0) & (y1 >= y0) & (np.abs(area) > _MIN_AREA)
    faces, fu, fv, area = faces[live], fu[live], fv[live], area[live]
    x0, x1, y0, y1 = x0[live], x1[live], y0[live], y1[live]
    face_ids = np.flatnonzero(keep)[live]
    if len(faces) == 0:
        return _empty_result(width, height)

    # ragged bbox -> fragment expansion
    wspan = x1 - x0 + 1
    counts = wspan * (y1 - y0 + 1)
    total = int(counts.sum())
    rep = np.repeat(np.arange(len(faces)), counts)
    local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    px = x0[rep] + local % wspan[rep]
    py = y0[rep] + local // wspan[rep]

    ax, ay = fu[rep, 0], fv[rep, 0]
    bx, by = fu[rep, 1], fv[rep, 1]
    cx_, cy_ = fu[rep, 2], fv[rep, 2]
    w0 = (bx - px) * (cy_ - py) - (cx_ - px) * (by - py)
    w1 = (cx_ - px) * (ay - py) - (ax - px) * (cy_ - py)
    w2 = (ax - px) * (by - py) - (bx - px) * (ay - py)
    inside = ((w0 >= 0) & (w1 >= 0) & (w2 >= 0)) | ((w0 <= 0) & (w1 <= 0) & (w2 <= 0))
    if not inside.any():
        return _empty_result(width, height)

    rep = rep[inside]
    px, py = px[inside], py[inside]
    lam = np.stack([w0[inside], w1[inside], w2[inside]], axis=1) / area[rep][:, None]
    invz = (1.0 / z)[faces[rep]]
    invz_pix = np.einsum("kj,kj->k", lam, invz)
    z_pix = 1.0 / invz_pix

    flat = py * width + px
    order = np.lexsort((rep, z_pix, flat))
    flat_s = flat[order]
    first = np.r_[0, 1 + np.flatnonzero(np.diff(flat_s))]
    win = order[first]

    zbuf = np.full(height * width, np.inf)
    tri = np.full(height * width, -1, dtype=np.int64)
    zbuf[flat[win]] = z_pix[win]
    tri[flat[win]] = face_ids[rep[win]]

    weights = lam[win] * invz[win] * z_pix[win][:, None]
    return RasterResult(
        width=width,
        height=height,
        zbuf=zbuf.reshape(height, width),
        tri=tri.reshape(height, width),
        _pix=flat[win],
        _corners=faces[rep[win]],
        _weights=weights,
    )


def compute_visibility(mesh: Mesh, positions, rotation, translation,
                       camera: Camera, resolution) -> np.ndarray:
    """Visible-vertex indices (sorted) for the posed mesh.

    A vertex is visible iff it projects inside the image (minus the
    bilinear sampling margin), its depth is within tau_z of the z-buffer at
    its pixel, and it is front-facing after rotation. tau_z is 1% of the
    bounding-box diagonal; the z-buffer runs at the working resolution.
    """
    width, height = int(resolution[0]), int(resolution[1])
    positions = np.asarray(positions, dtype=float)
    posed = positions @ np.asarray(rotation).T + np.asarray(translation)

    res = rasterize(posed, mesh.faces, camera, (width, height))
    diag = mesh.bbox_diagonal(positions)
    tau = VISIBILITY_TOL_FRAC * diag if diag > 0 else 0.0

    z = posed[:, 2]
    ok = z > _MIN_Z
    uv = np.zeros((len(posed), 2))
    uv[ok, 0] = camera.fx * posed[ok, 0] / z[ok] + camera.cx
    uv[ok, 1] = camera.fy * posed[ok, 1] / z[ok] + camera.cy
    ok &= sample_mask(uv, width, height)

    # compare against the most lenient of the four touched z-buffer pixels;
    # a nearest-pixel lookup culls a whole silhouette band wherever the
    # depth gradient across one pixel exceeds tau
    pu = np.clip(np.floor(uv[:, 0]).astype(np.int64), 0, width - 2)
    pv = np.clip(np.floor(uv[:, 1]).astype(np.int64), 0, height - 2)
    zref = np.maximum(
        np.maximum(res.zbuf[pv, pu], res.zbuf[pv, pu + 1]),
        np.maximum(res.zbuf[pv + 1, pu], res.zbuf[pv + 1, pu + 1]),
    )
    ok &= z <= zref + tau

    normals = vertex_normals(mesh, positions) @ np.asarray(rotation).T
    view = posed / np.maximum(np.linalg.norm(posed, axis=1, keepdims=True), 1e-30)
    ok &= np.einsum("ij,ij->i", normals, view) <= 0.0

    return np.flatnonzero(ok)
