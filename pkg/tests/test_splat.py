import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import identity_camera, random_scene
from hfsplat.core import Camera, GaussianSet, covariance3d, logit, normalize_quaternions
from hfsplat.scenegen import look_at
from hfsplat.splat import (LOWPASS, ProjectedGaussian, compositing_weights, eval2d, project,
                           render, set_threads)


def single(position, scale=(0.3, 0.3, 0.3), opacity=0.5, color=(0.2, 0.4, 0.6), q=(1, 0, 0, 0)):
    return GaussianSet(position=np.array([position], dtype=float), rotation=np.array([q], float),
                       scale=np.log(np.array([scale])), opacity=logit(np.array([opacity])),
                       color=logit(np.array([color])), feature=np.zeros((1, 8)))


def test_on_axis_projects_to_principal_point():
    cam = identity_camera(32)
    pg = project(single([0, 0, 5]).activate(), cam)
    np.testing.assert_allclose(pg.mean2d, [cam.cx, cam.cy], atol=1e-12)
    assert pg.view_depth == 5.0


def test_isotropic_covariance_closed_form():
    cam = identity_camera(32, f=30.0)
    s, d = 0.3, 5.0
    pg = project(single([0, 0, d], scale=(s, s, s)).activate(), cam)
    expect = np.diag([(cam.fx * s / d) ** 2 + LOWPASS, (cam.fy * s / d) ** 2 + LOWPASS])
    np.testing.assert_allclose(pg.cov2d, expect, rtol=1e-12)


def test_covariance_matches_numeric_jacobian():
    rng = np.random.default_rng(1)
    W = look_at([1.0, 0.5, -4.0], [0.1, 0.0, 0.2])
    cam = Camera(40.0, 35.0, 16.0, 15.0, 32, 32, W)
    for _ in range(10):
        pos = rng.normal(size=3) * 0.3
        q = normalize_quaternions(rng.normal(size=4))
        s = rng.uniform(0.05, 0.4, 3)
        g = GaussianSet(position=pos[None], rotation=q[None], scale=np.log(s)[None],
                        opacity=np.zeros(1), color=np.zeros((1, 3)))
        pg = project(g.activate(), cam)

        def pix(p):
            pc = cam.R @ p + cam.t
            return np.array([cam.fx * pc[0] / pc[2] + cam.cx, cam.fy * pc[1] / pc[2] + cam.cy])

        h = 1e-6
        pc0 = cam.R @ pos + cam.t
        J = np.zeros((2, 3))
        for i in range(3):
            e = np.zeros(3)
            e[i] = h
            J[:, i] = (pix(cam.R.T @ (pc0 + e - cam.t)) - pix(cam.R.T @ (pc0 - e - cam.t))) / (2 * h)
        expect = J @ cam.R @ covariance3d(q, s) @ cam.R.T @ J.T + LOWPASS * np.eye(2)
        np.testing.assert_allclose(pg.cov2d, expect, rtol=1e-6)
        np.testing.assert_allclose(pg.mean2d, pix(pos), atol=1e-9)


def test_behind_camera_is_culled():
    cam = identity_camera()
    assert project(single([0, 0, -2]).activate(), cam) is None
    assert project(single([0, 0, 0.005]).activate(), cam) is None


def test_far_outside_image_is_culled():
    cam = identity_camera(32, f=30.0)
    assert project(single([50.0, 0, 5], scale=(0.01, 0.01, 0.01)).activate(), cam) is None


def test_eval2d_examples():
    pg = ProjectedGaussian(np.array([3.0, 4.0]), np.eye(2), 1.0, 0)
    assert eval2d(pg, [3.0, 4.0]) == 1.0
    assert eval2d(pg, [3.0 + np.sqrt(2), 4.0]) == pytest.approx(np.exp(-1.0), rel=1e-12)


def test_eval2d_anisotropic_matches_inverse():
    cov = np.array([[2.0, 0.7], [0.7, 1.0]])
    pg = ProjectedGaussian(np.array([1.0, -2.0]), cov, 1.0, 0)
    a, b, c = cov[0, 0], cov[0, 1], cov[1, 1]
    inv = np.array([[c, -b], [-b, a]]) / (a * c - b * b)
    d = np.array([0.4, 1.3]) - pg.mean2d
    assert eval2d(pg, [0.4, 1.3]) == pytest.approx(np.exp(-0.5 * d @ inv @ d), rel=1e-12)


def test_clamped_single_gaussian():
    cam = identity_camera(9, f=30.0)
    bg = np.array([0.1, 0.2, 0.3])
    c = np.array([0.9, 0.5, 0.1])
    out = render(single([0, 0, 5], opacity=0.999, color=c), cam, bg)
    np.testing.assert_allclose(out.color[4, 4], 0.99 * c + 0.01 * bg, atol=1e-12)
    assert out.depth[4, 4] == pytest.approx(5.0)


def test_off_pixel_front_gaussian_contributes_nothing():
    cam = identity_camera(33, f=30.0)
    back = single([0, 0, 6], opacity=0.6)
    front = single([3.0, 0, 3], scale=(0.02, 0.02, 0.02), opacity=0.9, color=(1, 0, 0))
    both = back.concat(front)
    centre = (16, 16)
    np.testing.assert_array_equal(render(both, cam).color[centre], render(back, cam).color[centre])


def test_empty_set_is_background():
    cam = identity_camera(8)
    out = render(GaussianSet.empty(), cam, (0.2, 0.3, 0.4))
    np.testing.assert_array_equal(out.color, np.broadcast_to([0.2, 0.3, 0.4], (8, 8, 3)))
    assert not out.alpha.any() and not out.depth.any() and not out.feature.any()


@pytest.mark.parametrize("seed", range(5))
def test_tiled_matches_naive(seed):
    gs, cam = random_scene(seed)
    a = render(gs, cam, (0.3, 0.2, 0.1))
    b = render(gs, cam, (0.3, 0.2, 0.1), path="naive")
    for k in ("color", "feature", "depth", "alpha"):
        np.testing.assert_allclose(getattr(a, k), getattr(b, k), atol=1e-5)


def test_weights_sum_to_alpha(scene):
    gs, cam = scene
    w, alpha = compositing_weights(gs, cam)
    out = render(gs, cam)
    np.testing.assert_allclose(w.sum(-1), alpha, atol=1e-12)
    np.testing.assert_allclose(alpha, out.alpha, atol=1e-12)
    assert alpha.max() <= 1.0 and alpha.min() >= 0.0


def test_background_pixels():
    gs, cam = random_scene(4, n=3)
    bg = np.array([0.5, 0.6, 0.7])
    out = render(gs, cam, bg)
    empty = out.alpha == 0
    assert empty.any()
    np.testing.assert_array_equal(out.color[empty], np.broadcast_to(bg, (empty.sum(), 3)))
    assert not out.depth[empty].any() and not out.feature[empty].any()


def test_feature_equal_to_color_is_bit_exact(scene):
    gs, cam = scene
    g3 = GaussianSet(**{**gs.params(), "feature": gs.color})
    out = render(g3, cam)
    np.testing.assert_array_equal(out.feature, out.color)


@given(st.integers(0, 2**31 - 1))
def test_permutation_invariance(seed):
    gs, cam = random_scene(seed % 1000, n=12, size=16)
    perm = np.random.default_rng(seed).permutation(len(gs))
    a = render(gs, cam)
    b = render(gs.subset(perm), cam)
    for k in ("color", "feature", "depth", "alpha"):
        np.testing.assert_array_equal(getattr(a, k), getattr(b, k))


def test_resolution_doubling_keeps_normalised_means():
    gs, cam = random_scene(2, n=5)
    big = cam.scaled(2.0)
    for i in range(len(gs)):
        p1, p2 = project(gs.activate(), cam, i), project(gs.activate(), big, i)
        if p1 is None or p2 is None:
            continue
        np.testing.assert_allclose((p1.mean2d + 0.5) / cam.width, (p2.mean2d + 0.5) / big.width,
                                   atol=1e-12)


def test_render_is_pure_and_thread_independent(scene):
    gs, cam = scene
    n = set_threads(None)
    set_threads(1)
    a = render(gs, cam)
    set_threads(max(2, n))
    b = render(gs, cam)
    set_threads(n)
    np.testing.assert_array_equal(a.color, b.color)
    np.testing.assert_array_equal(a.depth, b.depth)


def test_unknown_path_rejected(scene):
    gs, cam = scene
    with pytest.raises(ValueError):
        render(gs, cam, path="gpu")
