import numpy as np
import pytest

from splatsr import InvalidParameterError
from splatsr.render import downsample, downsample_adjoint, project, project_gaussian, rasterize, upsample
from splatsr.scene import CameraView, Scene

from conftest import random_scene, single_splat, small_camera
from oracles import naive_render


def axis_camera(size=16, f=20.0):
    # camera at z=-3 looking along +z
    w2c = np.eye(4)
    w2c[2, 3] = 3.0
    return CameraView(w2c, (f, f), ((size - 1) / 2, (size - 1) / 2), size, size)


def test_on_axis_projection():
    cam = axis_camera()
    s = single_splat(log_scale=np.log(0.1))
    p = project_gaussian(s[0], cam)
    np.testing.assert_allclose(p.ndc[:2], 0.0, atol=1e-15)
    np.testing.assert_allclose(p.pixel_center, cam.principal_point)
    expect = (20.0 * 0.1 / 3.0) ** 2
    np.testing.assert_allclose(p.cov2d, np.diag([expect, expect]) + 0.3 * np.eye(2), atol=1e-6)
    assert not p.culled


def test_behind_camera_culled():
    cam = axis_camera()
    assert project_gaussian(single_splat(position=(0, 0, -4.0))[0], cam).culled
    # far outside the guard band
    assert project(single_splat(position=(5.0, 0, 0)), cam).culled[0]


def test_single_saturated_splat_center_pixel():
    cam = axis_camera(size=15)
    s = single_splat(log_scale=np.log(1e-3), opacity_logit=30.0, color_logit=(0.5, -1.0, 2.0))
    img, _ = rasterize(s, cam, background=(0.2, 0.4, 0.6))
    color = 1 / (1 + np.exp(-np.array([0.5, -1.0, 2.0])))
    np.testing.assert_allclose(img[7, 7], 0.99 * color + 0.01 * np.array([0.2, 0.4, 0.6]), atol=1e-6)


def test_transparent_scene_is_background():
    s = random_scene(0)
    s = s.replace(opacity=np.full(len(s), -20.0))
    img, _ = rasterize(s, small_camera(), background=(0.3, 0.1, 0.9))
    np.testing.assert_allclose(img, np.broadcast_to([0.3, 0.1, 0.9], img.shape), atol=1e-6)


@pytest.mark.parametrize("seed", range(4))
def test_matches_naive_renderer(seed):
    s = random_scene(seed, n=10, sharp=True)
    cam = small_camera(azimuth=0.5 * seed)
    img, _ = rasterize(s, cam, background=(0.1, 0.2, 0.3))
    np.testing.assert_allclose(img, naive_render(s, cam, (0.1, 0.2, 0.3)), atol=1e-6)


def test_worker_count_is_bitwise_irrelevant():
    s = random_scene(5, n=40)
    cam = small_camera(size=40)
    a = rasterize(s, cam, workers=1)[0]
    b = rasterize(s, cam, workers=3)[0]
    assert a.tobytes() == b.tobytes()


def test_permutation_invariance():
    s = random_scene(6, n=15)
    perm = np.random.default_rng(0).permutation(len(s))
    cam = small_camera()
    np.testing.assert_allclose(rasterize(s, cam)[0], rasterize(s.take(perm), cam)[0], atol=1e-12)


def test_aux_transmittance_invariants():
    s = random_scene(7, n=20)
    cam = small_camera()
    img, aux = rasterize(s, cam, keep_aux=True, background=(1, 1, 1))
    assert img.max() <= 1 + 1e-9
    for r in range(0, 16, 3):
        for c in range(0, 16, 3):
            recs = aux.contributions(r, c)
            ts = [t for _, _, t in recs]
            assert all(0 < t <= 1 for t in ts)
            assert all(a > b for a, b in zip(ts, ts[1:]))
            assert all(0 < g <= 1 for _, g, _ in recs)


def test_resampling():
    const = np.full((8, 12, 3), 0.37)
    for mode in ("bilinear", "area"):
        np.testing.assert_allclose(downsample(const, 4, mode), 0.37, atol=1e-15)
        np.testing.assert_array_equal(downsample(const, 1, mode), const)
    img = np.arange(16, dtype=float).reshape(4, 4)[..., None].repeat(3, axis=2)
    expect = np.array([[2.5, 4.5], [10.5, 12.5]])
    np.testing.assert_allclose(downsample(img, 2, "area")[..., 0], expect)
    with pytest.raises(InvalidParameterError):
        downsample(np.zeros((6, 6, 3)), 4)
    up = upsample(const[:4, :4], 4, "bicubic")
    np.testing.assert_allclose(up, 0.37, atol=1e-12)


@pytest.mark.parametrize("mode", ["bilinear", "area"])
def test_downsample_adjoint(mode):
    rng = np.random.default_rng(1)
    x = rng.random((16, 8, 3))
    y = rng.random((4, 2, 3))
    lhs = np.sum(downsample(x, 4, mode) * y)
    rhs = np.sum(x * downsample_adjoint(y, 4, mode))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_empty_scene_rejected():
    with pytest.raises(InvalidParameterError):
        Scene(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0), np.zeros((0, 3)), 1.0)
