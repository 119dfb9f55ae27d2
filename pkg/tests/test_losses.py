import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from skimage.metrics import structural_similarity

from hfsplat.losses import (BETA_MAE, DEPTH_DECAY, GAMMA_SSIM, LossReport, MetricReport,
                            image_loss_terms, loss_depth, loss_feature, loss_image, loss_pose,
                            mpjpe, mse, pck, psnr, ssim)

rng0 = np.random.default_rng


def test_coefficients():
    assert (BETA_MAE, GAMMA_SSIM, DEPTH_DECAY) == (1.6, 0.4, 0.9)


def test_ssim_identical_is_one():
    a = rng0(0).uniform(size=(16, 16, 3))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)


def test_ssim_constant_images():
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    expect = (2 * 0 * 1 + c1) * c2 / ((0 + 1 + c1) * (0 + 0 + c2))
    assert ssim(np.zeros((12, 12)), np.ones((12, 12))) == pytest.approx(expect, rel=1e-12)


def test_ssim_tiny_noise():
    a = rng0(1).uniform(size=(20, 20, 3))
    b = a + rng0(2).normal(0, 1e-3, a.shape)
    assert 0.99 < ssim(a, b) < 1.0


@pytest.mark.parametrize("seed", range(4))
def test_ssim_matches_reference_implementation(seed):
    r = rng0(seed)
    a = r.uniform(size=(24, 19, 3))
    b = np.clip(a + r.normal(0, 0.2, a.shape), 0, 1)
    ref = structural_similarity(a, b, gaussian_weights=True, sigma=1.5, data_range=1.0,
                                use_sample_covariance=False, channel_axis=2)
    assert ssim(a, b) == pytest.approx(ref, abs=1e-10)


def test_ssim_small_image_rejected():
    with pytest.raises(ValueError):
        ssim(np.zeros((10, 30)), np.zeros((10, 30)))


def test_loss_image_combines_terms():
    r = rng0(3)
    gt = r.uniform(size=(16, 16, 3))
    pred = r.uniform(size=(16, 16, 3))
    mask = r.uniform(size=(16, 16)) > 0.4
    l1, ls = image_loss_terms(pred, gt, mask)
    m = mask[..., None]
    assert l1 == pytest.approx(np.abs(pred - gt)[np.broadcast_to(m, pred.shape)].mean())
    assert ls == pytest.approx(1 - ssim(pred * m, gt * m))
    assert loss_image(pred, gt, mask) == pytest.approx(1.6 * l1 + 0.4 * ls)
    assert loss_image(gt, gt, mask) == pytest.approx(0.0, abs=1e-12)


def test_loss_image_grad_consistent_with_terms():
    r = rng0(4)
    gt, pred = r.uniform(size=(2, 14, 14, 3))
    mask = np.ones((14, 14), bool)
    v, g = loss_image(pred, gt, mask, with_grad=True)
    _, _, g1, g2 = image_loss_terms(pred, gt, mask, with_grad=True)
    assert v == pytest.approx(loss_image(pred, gt, mask))
    np.testing.assert_allclose(g, 1.6 * g1 + 0.4 * g2)


def test_empty_mask_rejected():
    with pytest.raises(ValueError, match="empty mask"):
        loss_feature(np.zeros((4, 4, 3)), np.ones((4, 4, 3)), np.zeros((4, 4), bool))


def test_depth_loss_examples():
    r = rng0(5)
    gt = r.uniform(1, 2, (8, 8))
    mask = r.uniform(size=(8, 8)) > 0.3
    d1 = gt + r.normal(size=gt.shape)
    d2 = gt + r.normal(size=gt.shape)
    e1, e2 = (np.abs(d - gt)[mask].mean() for d in (d1, d2))
    assert loss_depth([d1], gt, mask) == pytest.approx(e1)
    assert loss_depth([d1, d2], gt, mask) == pytest.approx(0.9 * e1 + e2)
    assert loss_depth([gt, gt, gt], gt, mask) == 0.0
    with pytest.raises(ValueError):
        loss_depth([], gt, mask)


def test_pose_loss_examples():
    gt = rng0(6).normal(size=(19, 3))
    assert loss_pose(gt, gt) == 0.0
    p = gt.copy()
    p[4] += [1, 0, 0]
    assert loss_pose(p, gt) == pytest.approx(1 / 57)
    q = rng0(7).normal(size=(19, 3))
    total = sum((q[i][c] - gt[i][c]) ** 2 for i in range(19) for c in range(3))
    assert loss_pose(q, gt) == pytest.approx(total / 57)
    with pytest.raises(ValueError):
        loss_pose(q[:, :2], gt)


def test_feature_loss_examples():
    gt = rng0(8).uniform(size=(6, 6, 3))
    mask = np.ones((6, 6), bool)
    assert loss_feature(gt, gt, mask) == 0.0
    assert loss_feature(gt + 0.25, gt, mask) == pytest.approx(0.25)
    mask[0] = False
    p = rng0(9).uniform(size=gt.shape)
    vals = [abs(p[i, j, c] - gt[i, j, c]) for i in range(1, 6) for j in range(6) for c in range(3)]
    assert loss_feature(p, gt, mask) == pytest.approx(sum(vals) / len(vals))


def test_mpjpe_examples():
    gt = rng0(10).normal(size=(19, 3))
    assert mpjpe(gt, gt) == 0.0
    u = rng0(11).normal(size=(19, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    assert mpjpe(gt + u, gt) == pytest.approx(1.0)
    p = rng0(12).normal(size=(19, 3))
    d = [math.sqrt(sum((p[i][c] - gt[i][c]) ** 2 for c in range(3))) for i in range(19)]
    assert mpjpe(p, gt) == pytest.approx(sum(d) / 19)
    with pytest.raises(ValueError):
        mpjpe(p[:, :2], gt)


def _pck_brute(pred, gt, ratio=0.2):
    sx, sy = gt[5][0] - gt[9][0], gt[5][1] - gt[9][1]
    torso = math.sqrt(sx * sx + sy * sy)
    hits = 0
    for j in range(19):
        dx, dy = pred[j][0] - gt[j][0], pred[j][1] - gt[j][1]
        if math.sqrt(dx * dx + dy * dy) <= ratio * torso:
            hits += 1
    return hits / 19


def test_pck_examples():
    r = rng0(13)
    gt = r.uniform(0, 100, (19, 2))
    torso = np.linalg.norm(gt[5] - gt[9])
    assert pck(gt, gt) == 1.0
    assert pck(gt + 10 * torso, gt) == 0.0
    for _ in range(50):
        gt = r.uniform(0, 100, (19, 2))
        pred = gt + r.normal(0, 0.2 * np.linalg.norm(gt[5] - gt[9]), (19, 2))
        assert pck(pred, gt) == _pck_brute(pred, gt)


def test_pck_degenerate_torso():
    gt = np.zeros((19, 2))
    with pytest.raises(ValueError, match="torso"):
        pck(gt, gt)


@given(st.integers(0, 10**6), st.floats(-50, 50), st.floats(-50, 50))
def test_pck_translation_invariant(seed, tx, ty):
    r = rng0(seed)
    gt = r.uniform(0, 100, (19, 2))
    pred = gt + r.normal(0, 5, (19, 2))
    t = np.array([tx, ty])
    assert pck(pred + t, gt + t) == pck(pred, gt)


@given(st.integers(0, 10**6))
def test_mpjpe_relabel_invariant(seed):
    r = rng0(seed)
    gt, pred = r.normal(size=(2, 19, 3))
    perm = r.permutation(19)
    assert mpjpe(pred[perm], gt[perm]) == pytest.approx(mpjpe(pred, gt), rel=1e-12)


@given(st.integers(0, 10**6))
def test_losses_nonnegative_and_zero_at_truth(seed):
    r = rng0(seed)
    gt = r.uniform(size=(12, 12, 3))
    pred = r.uniform(size=(12, 12, 3))
    mask = r.uniform(size=(12, 12)) > 0.5
    mask[0, 0] = True
    for f in (loss_image, loss_feature):
        assert f(pred, gt, mask) >= 0
        assert f(gt, gt, mask) == pytest.approx(0.0, abs=1e-12)
    assert loss_depth([pred[..., 0]], gt[..., 0], mask) >= 0


def test_psnr_examples():
    a = rng0(14).uniform(size=(8, 8, 3))
    assert psnr(a, a) == math.inf
    b = np.full((4, 4), 0.5)
    assert psnr(b + 0.1, b) == pytest.approx(20.0)
    c = rng0(15).uniform(size=(8, 8, 3))
    err = sum((a.ravel()[i] - c.ravel()[i]) ** 2 for i in range(a.size)) / a.size
    assert psnr(a, c) == pytest.approx(10 * math.log10(1 / err))


def test_mse_masked():
    a, b = np.zeros((3, 3, 2)), np.ones((3, 3, 2))
    mask = np.zeros((3, 3), bool)
    mask[1, 1] = True
    b[0, 0] = 5
    assert mse(a, b, mask) == 1.0


def test_reports_serialise_inf():
    rep = MetricReport(psnr=math.inf, mpjpe=0.0, extra={"fps": 3.5})
    d = json.loads(rep.to_json())
    assert d == {"psnr": "inf", "mpjpe": 0.0, "fps": 3.5}
    assert MetricReport.from_dict(d).psnr == math.inf
    assert "psnr = inf" in rep.to_text()
    lr = LossReport(l_image=1.0, l_depth=0.5, l_pose=0.25, l_feature=0.125)
    assert lr.to_dict()["total"] == 1.875
