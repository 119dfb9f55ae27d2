"""Training losses and evaluation metrics.

Every loss takes ``with_grad``; when set it returns ``(value, d value / d pred)``.
Image losses are averaged over foreground pixels (and channels) only.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BETA_MAE = 1.6
GAMMA_SSIM = 0.4
DEPTH_DECAY = 0.9

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

TORSO = (5, 9)  # left shoulder, right hip


def _f(a):
    """Array in at least float64, keeping wider floats (used by the FD oracle)."""
    a = np.asarray(a)
    return a.astype(np.result_type(a.dtype, np.float64), copy=False)


def _scalar(v):
    v = np.asarray(v)
    return float(v) if v.dtype == np.float64 else v[()]


def _mask3(mask, shape):
    m = np.asarray(mask, dtype=bool)
    if m.shape != tuple(shape[:2]):
        raise ValueError(f"mask shape {m.shape} does not match image {shape[:2]}")
    count = int(m.sum())
    if count == 0:
        raise ValueError("empty mask")
    return m, count


def _check_same(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def _masked_l1(pred, gt, mask, with_grad):
    pred = _f(pred)
    gt = _f(gt)
    _check_same(pred, gt)
    m, count = _mask3(mask, pred.shape)
    channels = 1 if pred.ndim == 2 else pred.shape[2]
    mm = m if pred.ndim == 2 else m[..., None]
    diff = (pred - gt) * mm
    n = count * channels
    value = _scalar(np.abs(diff).sum() / n)
    if not with_grad:
        return value
    return value, np.sign(diff) / n


# -- SSIM ---------------------------------------------------------------------------

def _gauss_kernel():
    x = np.arange(SSIM_WINDOW) - SSIM_WINDOW // 2
    g = np.exp(-(x ** 2) / (2 * SSIM_SIGMA ** 2))
    return g / g.sum()


_KERNEL = _gauss_kernel()


def _filter_valid(x):
    """Separable Gaussian filter over axes 0 and 1 without padding."""
    y = sliding_window_view(x, SSIM_WINDOW, axis=0) @ _KERNEL
    return sliding_window_view(y, SSIM_WINDOW, axis=1) @ _KERNEL


def _filter_valid_adjoint(y):
    pad = SSIM_WINDOW - 1
    widths = [(pad, pad), (pad, pad)] + [(0, 0)] * (y.ndim - 2)
    return _filter_valid(np.pad(y, widths))


def _as_hwc(img):
    img = _f(img)
    return img[..., None] if img.ndim == 2 else img


def ssim(a, b, with_grad: bool = False, data_range: float = 1.0):
    """Mean SSIM over an 11x11 Gaussian window (sigma 1.5), averaged over channels.

    With ``with_grad`` the gradient is taken with respect to ``a``.
    """
    a3, b3 = _as_hwc(a), _as_hwc(b)
    _check_same(a3, b3)
    if a3.shape[0] < SSIM_WINDOW or a3.shape[1] < SSIM_WINDOW:
        raise ValueError(f"image {a3.shape[:2]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    # one batched filter pass over the five local statistics
    stats = _filter_valid(np.concatenate([a3, b3, a3 * a3, b3 * b3, a3 * b3], axis=2))
    mu_a, mu_b, m_aa, m_bb, m_ab = np.split(stats, 5, axis=2)
    s_aa = m_aa - mu_a ** 2
    s_bb = m_bb - mu_b ** 2
    s_ab = m_ab - mu_a * mu_b
    n1 = 2 * mu_a * mu_b + c1
    n2 = 2 * s_ab + c2
    d1 = mu_a ** 2 + mu_b ** 2 + c1
    d2 = s_aa + s_bb + c2
    smap = n1 * n2 / (d1 * d2)
    value = _scalar(smap.mean())
    if not with_grad:
        return value
    scale = 1.0 / smap.size
    g_mu = scale * smap * (2 * mu_b / n1 - 2 * mu_b / n2 - 2 * mu_a / d1 + 2 * mu_a / d2)
    g_aa = -scale * smap / d2
    g_ab = 2 * scale * smap / n2
    back = _filter_valid_adjoint(np.concatenate([g_mu, g_aa, g_ab], axis=2))
    b_mu, b_aa, b_ab = np.split(back, 3, axis=2)
    grad = b_mu + 2 * a3 * b_aa + b3 * b_ab
    return value, grad.reshape(np.shape(a))


# -- training losses -------------------------------------------------------------

def image_loss_terms(pred, gt, mask, with_grad: bool = False):
    """(L_mae, L_ssim) before weighting, with L_ssim = 1 - SSIM of the masked images.

    With ``with_grad`` also returns both gradients with respect to ``pred``.
    """
    pred = _f(pred)
    gt = _f(gt)
    _check_same(pred, gt)
    m, _ = _mask3(mask, pred.shape)
    mm = m[..., None] if pred.ndim == 3 else m
    if not with_grad:
        return _masked_l1(pred, gt, m, False), 1.0 - ssim(pred * mm, gt * mm)
    l_mae, g_mae = _masked_l1(pred, gt, m, True)
    s, g_s = ssim(pred * mm, gt * mm, with_grad=True)
    return l_mae, 1.0 - s, g_mae, -g_s * mm


def loss_image(pred, gt, mask, beta: float = BETA_MAE, gamma: float = GAMMA_SSIM,
               with_grad: bool = False):
    """beta * masked L1 + gamma * (1 - SSIM) on the foreground-masked images."""
    if not with_grad:
        l_mae, l_ssim = image_loss_terms(pred, gt, mask)
        return beta * l_mae + gamma * l_ssim
    l_mae, l_ssim, g_mae, g_ssim = image_loss_terms(pred, gt, mask, with_grad=True)
    return beta * l_mae + gamma * l_ssim, beta * g_mae + gamma * g_ssim


def loss_depth(preds, gt, mask, decay: float = DEPTH_DECAY, with_grad: bool = False):
    """sum_t decay^(T-t) * masked L1(d_t, gt) over a sequence of depth maps."""
    preds = list(preds)
    if not preds:
        raise ValueError("depth sequence must not be empty")
    T = len(preds)
    value = 0.0
    grads = []
    for t, d in enumerate(preds, start=1):
        w = decay ** (T - t)
        v, g = _masked_l1(d, gt, mask, True)
        value += w * v
        grads.append(w * g)
    return (value, grads) if with_grad else value


def loss_pose(pred, gt, with_grad: bool = False):
    """Mean squared coordinate error over all joints."""
    pred = _f(pred)
    gt = _f(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"keypoint dimension mismatch: {pred.shape} vs {gt.shape}")
    diff = pred - gt
    value = _scalar(np.mean(diff ** 2))
    return (value, 2.0 * diff / diff.size) if with_grad else value


def loss_feature(pred, gt, mask, with_grad: bool = False):
    """Masked L1 between predicted and ground-truth feature images."""
    return _masked_l1(pred, gt, mask, with_grad)


# -- metrics -------------------------------------------------------------------

def mpjpe(pred, gt) -> float:
    pred = _f(pred)
    gt = _f(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"keypoint dimension mismatch: {pred.shape} vs {gt.shape}")
    return float(np.mean(np.linalg.norm(pred - gt, axis=-1)))


def pck(pred, gt, threshold_ratio: float = 0.2) -> float:
    """Fraction of 2D joints within ``threshold_ratio`` x torso diameter of the truth."""
    pred = _f(pred)
    gt = _f(gt)
    if pred.shape != gt.shape or pred.shape[-1] != 2:
        raise ValueError("pck expects matching 2D keypoints")
    torso = np.linalg.norm(gt[TORSO[0]] - gt[TORSO[1]])
    if torso <= 0:
        raise ValueError("degenerate torso: coincident shoulder and hip joints")
    err = np.linalg.norm(pred - gt, axis=-1)
    return float(np.mean(err <= threshold_ratio * torso))


def mse(pred, gt, mask=None) -> float:
    pred = _f(pred)
    gt = _f(gt)
    _check_same(pred, gt)
    if mask is None:
        return float(np.mean((pred - gt) ** 2))
    m = np.asarray(mask, dtype=bool)
    return float(np.mean((pred[m] - gt[m]) ** 2))


def psnr(pred, gt) -> float:
    """10 log10(1 / MSE) with peak 1.0; identical images give ``math.inf``."""
    err = mse(pred, gt)
    if err == 0.0:
        return math.inf
    return float(10.0 * np.log10(1.0 / err))


# -- reports ---------------------------------------------------------------------

@dataclass
class LossReport:
    l_image: float = 0.0
    l_mae: float = 0.0
    l_ssim: float = 0.0
    l_depth: float = 0.0
    l_pose: float = 0.0
    l_feature: float = 0.0

    @property
    def total(self) -> float:
        return self.l_image + self.l_depth + self.l_pose + self.l_feature

    def to_dict(self) -> dict:
        d = asdict(self)
        d["total"] = self.total
        return d


def _json_number(v):
    if isinstance(v, float) and math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return v


@dataclass
class MetricReport:
    psnr: float | None = None
    ssim: float | None = None
    mpjpe: float | None = None
    pck: float | None = None
    feature_mse: float | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {k: _json_number(v) for k, v in asdict(self).items() if k != "extra" and v is not None}
        d.update({k: _json_number(v) for k, v in self.extra.items()})
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in sorted(self.to_dict().items()))

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        def num(v):
            return float(v) if isinstance(v, str) else v
        known = {k: num(d[k]) for k in ("psnr", "ssim", "mpjpe", "pck", "feature_mse") if k in d}
        extra = {k: v for k, v in d.items() if k not in known}
        return cls(**known, extra=extra)
