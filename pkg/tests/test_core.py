import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.spatial.transform import Rotation

from hfsplat.core import (Camera, GaussianSet, covariance3d, normalize_quaternions,
                          quat_to_rotmat, rotmat_to_quat, sigmoid)

finite = st.floats(-5, 5, allow_nan=False)
quats = arrays(np.float64, 4, elements=st.floats(-1, 1)).filter(lambda q: np.linalg.norm(q) > 0.1)
scales = arrays(np.float64, 3, elements=st.floats(0.05, 3.0))


def one(**kw):
    base = dict(position=np.zeros((1, 3)), rotation=np.array([[1.0, 0, 0, 0]]),
                scale=np.zeros((1, 3)), opacity=np.zeros(1), color=np.zeros((1, 3)))
    base.update(kw)
    return GaussianSet(**base)


def test_activation_examples():
    g = one(rotation=np.array([[2.0, 0, 0, 0]])).activate()
    assert g.opacity[0] == 0.5
    np.testing.assert_array_equal(g.scale[0], [1.0, 1.0, 1.0])
    np.testing.assert_array_equal(g.rotation[0], [1.0, 0.0, 0.0, 0.0])
    np.testing.assert_array_equal(g.color[0], [0.5, 0.5, 0.5])
    assert g.feature.shape == (1, 8)


def test_degenerate_rotation():
    with pytest.raises(ValueError, match="degenerate rotation"):
        one(rotation=np.zeros((1, 4))).activate()


def test_non_finite_raw_rejected():
    with pytest.raises(ValueError):
        one(opacity=np.array([np.nan])).activate()


def test_mismatched_lengths_rejected():
    with pytest.raises(ValueError):
        GaussianSet(position=np.zeros((2, 3)), rotation=np.ones((1, 4)), scale=np.zeros((1, 3)),
                    opacity=np.zeros(1), color=np.zeros((1, 3)))


def test_covariance_identity_rotation():
    cov = covariance3d(np.array([1.0, 0, 0, 0]), np.array([1.0, 2.0, 3.0]))
    np.testing.assert_allclose(cov, np.diag([1.0, 4.0, 9.0]), atol=1e-15)


def test_covariance_axis_swap():
    q = np.array([np.cos(np.pi / 4), 0, 0, np.sin(np.pi / 4)])
    cov = covariance3d(q, np.array([1.0, 2.0, 1.0]))
    np.testing.assert_allclose(cov, np.diag([4.0, 1.0, 1.0]), atol=1e-12)


def test_covariance_matches_dense_oracle():
    rng = np.random.default_rng(3)
    for _ in range(20):
        q = normalize_quaternions(rng.normal(size=4))
        s = rng.uniform(0.1, 2.0, 3)
        # scipy uses scalar-last quaternions
        R = Rotation.from_quat([q[1], q[2], q[3], q[0]]).as_matrix()
        S = np.diag(s)
        np.testing.assert_allclose(covariance3d(q, s), R @ S @ S.T @ R.T, atol=1e-12)


@given(quats, scales)
def test_covariance_properties(q, s):
    q = normalize_quaternions(q)
    cov = covariance3d(q, s)
    np.testing.assert_allclose(cov, cov.T, atol=1e-9)
    assert np.linalg.eigvalsh(cov).min() >= -1e-9
    np.testing.assert_allclose(covariance3d(-q, s), cov, atol=1e-12)
    np.testing.assert_allclose(np.linalg.det(cov), np.prod(s) ** 2, rtol=1e-6)


@given(quats)
def test_rotation_matrix_roundtrip(q):
    q = normalize_quaternions(q)
    R = quat_to_rotmat(q)
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
    back = rotmat_to_quat(R)
    np.testing.assert_allclose(quat_to_rotmat(back), R, atol=1e-12)


@given(arrays(np.float64, 5, elements=finite))
def test_activation_monotone(x):
    x = np.sort(x)
    assert np.all(np.diff(sigmoid(x)) >= 0)
    assert np.all(np.diff(np.exp(x)) >= 0)


@given(quats)
def test_rotation_normalised(q):
    g = one(rotation=q[None]).activate()
    assert abs(np.linalg.norm(g.rotation[0]) - 1.0) < 1e-6
    # re-normalising an activated quaternion is a no-op
    np.testing.assert_allclose(normalize_quaternions(g.rotation), g.rotation, atol=1e-15)


def test_camera_validation():
    W = np.hstack([np.eye(3), np.zeros((3, 1))])
    with pytest.raises(ValueError):
        Camera(0.0, 1.0, 0, 0, 4, 4, W)
    bad = W.copy()
    bad[0, 0] = 1.1
    with pytest.raises(ValueError):
        Camera(1.0, 1.0, 0, 0, 4, 4, bad)
    cam = Camera(10.0, 12.0, 3.0, 4.0, 8, 9, W)
    assert Camera.from_dict(cam.to_dict()) == cam
    np.testing.assert_allclose(cam.project(np.array([0.0, 0.0, 2.0])), [3.0, 4.0])


def test_subset_and_concat():
    rng = np.random.default_rng(0)
    gs = GaussianSet(position=rng.normal(size=(5, 3)), rotation=rng.normal(size=(5, 4)),
                     scale=rng.normal(size=(5, 3)), opacity=rng.normal(size=5),
                     color=rng.normal(size=(5, 3)))
    both = gs.subset([0, 1]).concat(gs.subset([2, 3, 4]))
    for k, v in gs.params().items():
        np.testing.assert_array_equal(both.params()[k], v)
