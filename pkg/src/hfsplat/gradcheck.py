"""Finite-difference verification of every hand-written backward pass.

Each check builds a small random instance from a seed, evaluates the analytic
gradient and compares it with central differences of the scalar objective.
Network and loss checks run their finite differences in ``np.longdouble``:
leaky-ReLU branches produce gradients around 1e-8 whose float64 central
differences are dominated by rounding.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .core import PARAM_NAMES, Camera, GaussianSet, logit
from .featdec import DecoderWeights, init_decoder, mlp_backward, mlp_forward
from .grad import backward_render, finite_diff_check, numerical_gradient, relative_error
from .losses import loss_depth, loss_feature, loss_image, loss_pose, ssim
from .posenet import BACKBONES, PoseWeights, init_pose_weights, knn_graph, pose_forward_backward
from .splat import ALPHA_MIN, RenderOutput, project_gaussians, render

log = logging.getLogger(__name__)

TOLERANCE = 1e-4
WIDE = np.longdouble
# The renderer is float64 only. Rotation gradients of near-isotropic Gaussians can
# be ~1e-6, where a two-point difference is swamped by rounding, so rendering uses
# the five-point stencil with a larger step.
RENDER_EPS, RENDER_ORDER = 1e-3, 4
DEPTH_GAP = 0.02
POSE_EPS, POSE_ORDER = 1e-6, 2


@dataclass
class CheckResult:
    name: str
    seed: int
    error: float
    tol: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error < self.tol)


@dataclass
class SuiteReport:
    results: list = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def worst(self) -> dict:
        out = {}
        for r in self.results:
            key = r.name.split(":")[0]
            out[key] = max(out.get(key, 0.0), r.error)
        return out

    def to_dict(self) -> dict:
        return {"passed": self.passed, "checks": len(self.results),
                "seeds": sorted({r.seed for r in self.results}),
                "worst": dict(sorted(self.worst().items())),
                "failures": [f"{r.name} seed={r.seed} err={r.error:.3e}"
                             for r in self.results if not r.passed]}


def _max_error(analytic, numeric) -> float:
    sel = ~np.isnan(numeric)
    if not np.any(sel):
        return 0.0
    return float(relative_error(np.asarray(analytic)[sel], np.asarray(numeric)[sel]).max())


# -- rendering -----------------------------------------------------------------------

def render_scene(seed: int, n: int = 10, size: int = 16, feature_dim: int = 4):
    """Random overlapping scene that stays clear of the compositing thresholds.

    Every (pixel, Gaussian) alpha' is at least 1.5x the skip threshold and
    below the 0.99 clamp, and depths differ by more than ``DEPTH_GAP`` so no
    finite-difference step reorders the blend. The objective is therefore
    smooth over the whole stencil.
    """
    rng = np.random.default_rng(seed)
    f = 20.0
    cam = Camera(f, f, size / 2, size / 2, size, size, np.hstack([np.eye(3), np.zeros((3, 1))]))
    while True:
        z = rng.uniform(4.0, 6.0, n)
        uv = rng.uniform(2.0, size - 2.0, (n, 2))
        pos = np.stack([(uv[:, 0] - cam.cx) * z / f, (uv[:, 1] - cam.cy) * z / f, z], 1)
        gs = GaussianSet(position=pos, rotation=rng.normal(size=(n, 4)),
                         scale=np.log(rng.uniform(2.5, 4.0, (n, 3))),
                         opacity=logit(rng.uniform(0.1, 0.5, n)),
                         color=rng.normal(size=(n, 3)), feature=rng.normal(size=(n, feature_dim)))
        g = gs.activate()
        pr = project_gaussians(g, cam)
        py, px = np.mgrid[0:size, 0:size].astype(np.float64)
        dx = px[..., None] - pr.mean2d[:, 0]
        dy = py[..., None] - pr.mean2d[:, 1]
        A, B, C = pr.conic.T
        a = g.opacity * np.exp(-0.5 * (A * dx * dx + C * dy * dy) - B * dx * dy)
        gaps = np.diff(np.sort(z))
        if pr.visible.all() and a.min() > 1.5 * ALPHA_MIN and gaps.min() > DEPTH_GAP:
            return gs, cam


def check_render(seed: int, tol: float = TOLERANCE, eps: float = RENDER_EPS,
                 order: int = RENDER_ORDER) -> list[CheckResult]:
    gs, cam = render_scene(seed)
    rng = np.random.default_rng(seed + 10_000)
    H, W, nf = cam.height, cam.width, gs.feature_dim
    adj = RenderOutput(rng.normal(size=(H, W, 3)), rng.normal(size=(H, W, nf)),
                       rng.normal(size=(H, W)), rng.normal(size=(H, W)))
    bg = rng.uniform(0.0, 1.0, 3)

    def objective(p):
        o = render(GaussianSet(**p), cam, bg)
        return sum(float(np.sum(getattr(o, k) * getattr(adj, k)))
                   for k in ("color", "feature", "depth", "alpha"))

    analytic = backward_render(gs, cam, adj, bg).as_dict()
    numeric = numerical_gradient(objective, gs.params(), eps, order=order)
    return [CheckResult(f"render.{k}", seed, _max_error(analytic[k], numeric[k]), tol)
            for k in PARAM_NAMES]


# -- pose network ------------------------------------------------------------------------

def _pose_instance(seed: int):
    rng = np.random.default_rng(seed)
    backbone = BACKBONES[seed % len(BACKBONES)]
    dim = 3 if (seed // len(BACKBONES)) % 2 == 0 else 2
    x = rng.normal(size=(16, 3))
    x -= x.mean(axis=0)
    centroid = rng.normal(size=3) * 0.1 + np.array([0.0, 0.0, 4.0])
    camera = None
    if dim == 2:
        camera = Camera(50.0, 50.0, 32.0, 32.0, 64, 64, np.hstack([np.eye(3), np.zeros((3, 1))]))
        gt = rng.uniform(10.0, 50.0, (19, 2))
    else:
        gt = centroid + rng.normal(size=(19, 3))
    w = init_pose_weights(backbone, dim, seed)
    nbr = knn_graph(x, 3) if backbone != "pointnet" else None
    return backbone, dim, x, centroid, camera, gt, w, nbr


def check_pose(seed: int, per_array: int = 4, tol: float = TOLERANCE, eps: float = POSE_EPS,
               order: int = POSE_ORDER) -> list[CheckResult]:
    """All layers of one backbone (cycled by seed) plus the input cloud, in long double."""
    backbone, dim, x, centroid, camera, gt, w, nbr = _pose_instance(seed)
    rng = np.random.default_rng(seed + 20_000)
    _, _, grads, g_x = pose_forward_backward(x, w, gt, centroid, nbr, camera, want_input=True)
    xw = x.astype(WIDE)

    def f_weights(p):
        wp = PoseWeights({k: v.astype(WIDE) for k, v in p.items()})
        return pose_forward_backward(xw, wp, gt, centroid, nbr, camera)[0]

    def f_input(xx):
        return pose_forward_backward(xx.astype(WIDE), w.astype(WIDE), gt, centroid, nbr,
                                     camera)[0]

    results = []
    for name, arr in w.items():
        size = arr.size
        coords = np.arange(size) if size <= per_array else np.sort(
            rng.choice(size, per_array, replace=False))
        num = numerical_gradient(
            lambda a, name=name: f_weights({**w, name: a}), arr, eps, coords, order)
        results.append(CheckResult(f"pose.{backbone}.d{dim}.{name}", seed,
                                   _max_error(grads[name], num), tol))
    coords = np.sort(rng.choice(x.size, per_array * 2, replace=False))
    num = numerical_gradient(f_input, x, eps, coords, order)
    results.append(CheckResult(f"pose.{backbone}.d{dim}.input", seed, _max_error(g_x, num), tol))
    return results


# -- decoder ---------------------------------------------------------------------------------

def check_decoder(seed: int, tol: float = TOLERANCE) -> list[CheckResult]:
    rng = np.random.default_rng(seed + 30_000)
    w = init_decoder(8, 3, seed)
    x = rng.uniform(0.0, 1.0, (6, 8))
    gy = rng.normal(size=(6, 3))
    y, cache = mlp_forward(x, w)
    g_w, g_x = mlp_backward(cache, gy, w)

    def f(p, xx):
        wp = DecoderWeights({k: np.asarray(v).astype(WIDE) for k, v in p.items()})
        out, _ = mlp_forward(np.asarray(xx).astype(WIDE), wp)
        return np.sum(out * gy)

    results = []
    for name, arr in w.items():
        num = numerical_gradient(lambda a, name=name: f({**w, name: a}, x), arr, 1e-6)
        results.append(CheckResult(f"decoder.{name}", seed, _max_error(g_w[name], num), tol))
    num = numerical_gradient(lambda xx: f(w, xx), x, 1e-6)
    results.append(CheckResult("decoder.input", seed, _max_error(g_x, num), tol))
    return results


# -- losses ------------------------------------------------------------------------------------

def _away_from_zero(rng, shape, low=0.05):
    """Offsets whose magnitude stays above ``low`` so L1 kinks are not crossed."""
    return rng.uniform(low, 0.3, shape) * rng.choice([-1.0, 1.0], shape)


def check_losses(seed: int, tol: float = TOLERANCE) -> list[CheckResult]:
    rng = np.random.default_rng(seed + 40_000)
    H = W = 16
    gt = rng.uniform(0.2, 0.8, (H, W, 3))
    pred = np.clip(gt + _away_from_zero(rng, gt.shape), 0.0, 1.0)
    pred = np.where(np.abs(pred - gt) < 0.05, gt + 0.1, pred)
    mask = rng.uniform(size=(H, W)) > 0.3
    eps = 1e-6
    out = []

    _, g = loss_image(pred, gt, mask, with_grad=True)
    num = numerical_gradient(lambda p: loss_image(p.astype(WIDE), gt, mask), pred, eps)
    out.append(CheckResult("loss.image", seed, _max_error(g, num), tol))

    _, g = ssim(pred, gt, with_grad=True)
    num = numerical_gradient(lambda p: ssim(p.astype(WIDE), gt), pred, eps)
    out.append(CheckResult("loss.ssim", seed, _max_error(g, num), tol))

    dgt = rng.uniform(1.0, 3.0, (H, W))
    d1 = dgt + _away_from_zero(rng, dgt.shape)
    d2 = dgt + _away_from_zero(rng, dgt.shape)
    _, gs = loss_depth([d1, d2], dgt, mask, with_grad=True)
    for t, (d, g) in enumerate(zip((d1, d2), gs), start=1):
        def f(dd, t=t):
            seq = [dd, d2] if t == 1 else [d1, dd]
            return loss_depth([s.astype(WIDE) for s in seq], dgt, mask)
        num = numerical_gradient(f, d, eps)
        out.append(CheckResult(f"loss.depth.t{t}", seed, _max_error(g, num), tol))

    kp_gt = rng.normal(size=(19, 3))
    kp = kp_gt + rng.normal(size=(19, 3))
    _, g = loss_pose(kp, kp_gt, with_grad=True)
    num = numerical_gradient(lambda p: loss_pose(p.astype(WIDE), kp_gt), kp, eps)
    out.append(CheckResult("loss.pose", seed, _max_error(g, num), tol))

    egt = rng.uniform(0.0, 1.0, (H, W, 3))
    emb = egt + _away_from_zero(rng, egt.shape)
    _, g = loss_feature(emb, egt, mask, with_grad=True)
    num = numerical_gradient(lambda p: loss_feature(p.astype(WIDE), egt, mask), emb, eps)
    out.append(CheckResult("loss.feature", seed, _max_error(g, num), tol))
    return out


CHECKS = {"render": check_render, "pose": check_pose, "decoder": check_decoder,
          "losses": check_losses}


def run_suite(seeds=range(20), groups=tuple(CHECKS), tol: float = TOLERANCE,
              callback=None) -> SuiteReport:
    """Run every check group for every seed."""
    start = time.perf_counter()
    report = SuiteReport()
    for seed in seeds:
        for group in groups:
            for r in CHECKS[group](int(seed), tol=tol):
                report.results.append(r)
                if callback is not None:
                    callback(r)
    report.seconds = time.perf_counter() - start
    return report


__all__ = ["CheckResult", "SuiteReport", "run_suite", "check_render", "check_pose",
           "check_decoder", "check_losses", "render_scene", "finite_diff_check"]
