import numpy as np
import pytest

from shadetrack.camera import (BehindCameraError, Camera, SamplingError,
                               backproject_depth, build_pyramid, project,
                               project_jacobian, sample_bilinear, sample_mask)
from shadetrack.mesh import make_grid
from shadetrack.raster import rasterize


# -------------------------------------------------------------- projection


def test_project_optical_axis():
    cam = Camera(123.0, 456.0, 50.0, 40.0)
    assert np.allclose(project(np.array([0.0, 0.0, 7.0]), cam), [50.0, 40.0])


def test_project_arithmetic():
    cam = Camera(100.0, 100.0, 50.0, 50.0)
    uv = project(np.array([1.0, 0.0, 2.0]), cam)
    assert np.allclose(uv, [100.0, 50.0])


def test_project_behind_camera():
    cam = Camera(100.0, 100.0, 50.0, 50.0)
    with pytest.raises(BehindCameraError):
        project(np.array([0.0, 0.0, 0.0]), cam)
    with pytest.raises(BehindCameraError):
        project(np.array([0.0, 0.0, -1.0]), cam)


def test_project_jacobian_matches_finite_differences(rng):
    cam = Camera(300.0, 280.0, 160.0, 120.0)
    h = 1e-6
    for _ in range(10):
        p = rng.normal(size=3) * 5 + [0, 0, 50]
        J = project_jacobian(p, cam)
        fd = np.empty((2, 3))
        for k in range(3):
            d = np.zeros(3)
            d[k] = h
            fd[:, k] = (project(p + d, cam) - project(p - d, cam)) / (2 * h)
        assert np.abs(J - fd).max() < 1e-5


def test_project_batched(rng):
    cam = Camera(300.0, 280.0, 160.0, 120.0)
    pts = rng.normal(size=(20, 3)) * 5 + [0, 0, 50]
    batch = project(pts, cam)
    for i in range(20):
        assert np.allclose(batch[i], project(pts[i], cam))


# ---------------------------------------------------------------- sampling


def _ramp_image(h, w):
    # affine in (u, v) so bilinear interpolation is exact everywhere
    v, u = np.mgrid[0:h, 0:w].astype(float)
    img = np.stack([0.3 + 0.01 * u, 0.5 - 0.02 * v, 0.1 + 0.005 * (u + v)],
                   axis=-1)
    return img


def test_sample_integer_pixel_exact(rng):
    img = rng.uniform(size=(10, 12, 3))
    val, _ = sample_bilinear(img, np.array([5.0, 7.0]))
    assert np.array_equal(val, img[7, 5])


def test_sample_midpoint():
    img = np.zeros((4, 4, 3))
    img[1, 2] = 1.0
    val, _ = sample_bilinear(img, np.array([1.5, 1.0]))
    assert np.allclose(val, 0.5)


def test_sample_constant_gradient_zero():
    img = np.full((8, 8, 3), 0.37)
    val, grad = sample_bilinear(img, np.array([3.3, 4.6]))
    assert np.allclose(val, 0.37)
    assert np.allclose(grad, 0.0)


def test_sample_gradient_matches_affine_image():
    img = _ramp_image(16, 16)
    val, grad = sample_bilinear(img, np.array([6.4, 9.7]))
    assert np.allclose(val, img[9, 6] + 0.4 * (img[9, 7] - img[9, 6])
                       + 0.7 * (img[10, 6] - img[9, 6]), atol=1e-12)
    assert np.allclose(grad[:, 0], [0.01, 0.0, 0.005], atol=1e-12)
    assert np.allclose(grad[:, 1], [0.0, -0.02, 0.005], atol=1e-12)


def test_sample_gradient_finite_differences(rng):
    img = rng.uniform(size=(20, 20, 3))
    h = 1e-5
    for _ in range(5):
        # keep the probe inside one interpolation cell
        uv = rng.uniform(3.1, 15.9, size=2)
        _, grad = sample_bilinear(img, uv)
        for k in range(2):
            d = np.zeros(2)
            d[k] = h
            vp, _ = sample_bilinear(img, uv + d)
            vm, _ = sample_bilinear(img, uv - d)
            fd = (vp - vm) / (2 * h)
            assert np.abs(grad[:, k] - fd).max() < 1e-4 * max(1, np.abs(fd).max())


def test_sample_out_of_bounds():
    img = np.zeros((8, 8, 3))
    with pytest.raises(SamplingError):
        sample_bilinear(img, np.array([0.4, 4.0]))
    with pytest.raises(SamplingError):
        sample_bilinear(img, np.array([4.0, 6.9]))


def test_sample_mask_margins():
    w, h = 10, 8
    uv = np.array([[0.5, 4.0], [1.0, 4.0], [8.0, 4.0], [8.5, 4.0],
                   [4.0, 0.5], [4.0, 6.0], [4.0, 6.5]])
    mask = sample_mask(uv, w, h)
    assert mask.tolist() == [False, True, True, False, False, True, False]


# ----------------------------------------------------------------- pyramid


def test_pyramid_level_dims():
    cam = Camera(100.0, 100.0, 31.5, 31.5)
    pyr = build_pyramid(np.zeros((64, 64, 3)), None, cam)
    assert pyr.levels == 3
    assert pyr.color(0).shape == (64, 64, 3)
    assert pyr.color(1).shape == (32, 32, 3)
    assert pyr.color(2).shape == (16, 16, 3)


def test_pyramid_odd_dims_ceil():
    cam = Camera(100.0, 100.0, 32.0, 32.0)
    pyr = build_pyramid(np.zeros((65, 65, 3)), None, cam)
    assert pyr.color(1).shape == (33, 33, 3)
    assert pyr.color(2).shape == (17, 17, 3)


def test_pyramid_preserves_constants():
    cam = Camera(100.0, 100.0, 31.5, 31.5)
    pyr = build_pyramid(np.full((64, 64, 3), 0.625), None, cam)
    for k in range(3):
        assert np.array_equal(pyr.color(k), np.full(pyr.color(k).shape, 0.625))


def test_pyramid_camera_scaling():
    cam = Camera(300.0, 280.0, 160.0, 120.0)
    pyr = build_pyramid(np.zeros((64, 64, 3)), None, cam)
    c0, c1, c2 = pyr.camera(0), pyr.camera(1), pyr.camera(2)
    assert (c0.fx, c0.fy, c0.cx, c0.cy) == (300.0, 280.0, 160.0, 120.0)
    assert np.isclose(c1.fx, 150.0) and np.isclose(c2.fx, 75.0)


def test_pyramid_too_small_rejected():
    cam = Camera(10.0, 10.0, 3.0, 3.0)
    with pytest.raises(ValueError):
        build_pyramid(np.zeros((6, 6, 3)), None, cam)


def test_depth_pyramid_median_keeps_step_values():
    cam = Camera(100.0, 100.0, 31.5, 31.5)
    depth = np.full((64, 64), 1.0)
    depth[:, 32:] = 2.0
    pyr = build_pyramid(np.zeros((64, 64, 3)), depth, cam)
    for k in range(1, 3):
        vals = np.unique(pyr.depth(k))
        assert set(vals.tolist()) <= {1.0, 2.0}


def test_depth_pyramid_ignores_missing_zeros():
    cam = Camera(100.0, 100.0, 31.5, 31.5)
    depth = np.full((64, 64), 3.0)
    depth[::2, ::2] = 0.0  # missing pixels must not drag the median down
    pyr = build_pyramid(np.zeros((64, 64, 3)), depth, cam)
    d1 = pyr.depth(1)
    assert set(np.unique(d1).tolist()) <= {0.0, 3.0}
    assert (d1 == 3.0).sum() > 0


# ------------------------------------------------------------ backproject


def test_backproject_empty():
    cam = Camera(100.0, 100.0, 32.0, 32.0)
    cloud = backproject_depth(np.zeros((8, 8)), cam)
    assert cloud.shape == (0, 3)


def test_backproject_principal_point():
    cam = Camera(100.0, 100.0, 3.0, 2.0)
    depth = np.zeros((8, 8))
    depth[2, 3] = 5.0
    cloud = backproject_depth(depth, cam)
    assert cloud.shape == (1, 3)
    assert np.allclose(cloud[0], [0.0, 0.0, 5.0])


def test_backproject_plane_round_trip():
    # render a slanted quad's depth, backproject, verify points on the plane
    cam = Camera(80.0, 80.0, 31.5, 31.5)
    m = make_grid(2, 2, spacing=4.0, origin=(-2.0, -2.0))
    pos = m.vertices.copy()
    pos[:, 2] = 2.0 + 0.1 * pos[:, 0]
    res = rasterize(pos, m.faces, cam, (64, 64))
    cloud = backproject_depth(res.depth_map(), cam)
    assert len(cloud) > 100
    plane_err = np.abs(cloud[:, 2] - (2.0 + 0.1 * cloud[:, 0]))
    assert plane_err.max() < 1e-6


def test_backproject_reproject_pixel_centers():
    cam = Camera(80.0, 80.0, 31.5, 31.5)
    m = make_grid(2, 2, spacing=4.0, origin=(-2.0, -2.0))
    pos = m.vertices.copy()
    pos[:, 2] = 2.0 + 0.05 * pos[:, 1]
    res = rasterize(pos, m.faces, cam, (64, 64))
    depth = res.depth_map()
    cloud = backproject_depth(depth, cam)
    uv = project(cloud, cam)
    vv, uu = np.nonzero(depth > 0)
    centers = np.stack([uu, vv], axis=1).astype(float)
    # backproject enumerates pixels row-major, same as nonzero
    assert np.abs(uv - centers).max() < 1e-4
