"""Forward Gaussian splatting: EWA projection, sorting and alpha compositing.

Two paths produce the same image:

* ``render(..., path="tiled")`` bins Gaussians into 16x16 tiles and composites
  each tile in parallel (numba).
* ``render(..., path="naive")`` sorts all Gaussians once and composites every
  pixel against the full list. It is slow and exists as an oracle.

Pixel (u, v) is centred on integer coordinates. Compositing constants follow
the usual 3DGS values: alpha' is clamped to 0.99, contributions below 1/255
are skipped and traversal stops once transmittance would fall below 1e-4.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from . import _raster
from .core import Camera, Gaussians, GaussianSet, covariance3d, quat_to_rotmat

LOWPASS = 0.3
TILE = _raster.TILE
ALPHA_MAX = _raster.ALPHA_MAX
ALPHA_MIN = _raster.ALPHA_MIN
T_MIN = _raster.T_MIN
DEPTH_EPS = 1e-6


@dataclass
class ProjectedGaussian:
    mean2d: np.ndarray
    cov2d: np.ndarray
    view_depth: float
    index: int

    @property
    def conic(self) -> np.ndarray:
        return np.linalg.inv(self.cov2d)


@dataclass
class Projection:
    """Batched projection of N Gaussians plus the intermediates the backward pass needs."""

    mean2d: np.ndarray   # (N, 2)
    cov2d: np.ndarray    # (N, 3) as (a, b, c) of [[a, b], [b, c]]
    conic: np.ndarray    # (N, 3) inverse of cov2d in the same layout
    depth: np.ndarray    # (N,) camera-space z
    radius: np.ndarray   # (N,) pixel radius outside which alpha' < 1/255
    visible: np.ndarray  # (N,) bool
    p_cam: np.ndarray
    jac: np.ndarray      # (N, 2, 3)
    cov3d: np.ndarray    # (N, 3, 3)
    rotmat: np.ndarray   # (N, 3, 3) from the quaternions

    def sort_order(self) -> np.ndarray:
        """Visible Gaussians front to back; ties broken by index."""
        idx = np.nonzero(self.visible)[0]
        return idx[np.lexsort((idx, self.depth[idx]))]


@dataclass
class RenderOutput:
    color: np.ndarray    # (H, W, 3)
    feature: np.ndarray  # (H, W, F)
    depth: np.ndarray    # (H, W)
    alpha: np.ndarray    # (H, W)
    state: object = None

    @property
    def transmittance(self) -> np.ndarray:
        return 1.0 - self.alpha


def project_gaussians(g: Gaussians, cam: Camera) -> Projection:
    n = len(g)
    R, t = cam.R, cam.t
    p_cam = g.position @ R.T + t
    x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]
    in_front = z > cam.near
    zs = np.where(in_front, z, 1.0)
    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = cam.fx / zs
    jac[:, 0, 2] = -cam.fx * x / (zs * zs)
    jac[:, 1, 1] = cam.fy / zs
    jac[:, 1, 2] = -cam.fy * y / (zs * zs)
    rotmat = quat_to_rotmat(g.rotation)
    M = rotmat * g.scale[:, None, :]
    cov3d = M @ np.swapaxes(M, 1, 2)
    T = jac @ R
    cov = T @ cov3d @ np.swapaxes(T, 1, 2)
    a = cov[:, 0, 0] + LOWPASS
    b = cov[:, 0, 1]
    c = cov[:, 1, 1] + LOWPASS
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=1)
    mean2d = np.stack([cam.fx * x / zs + cam.cx, cam.fy * y / zs + cam.cy], axis=1)

    lam = 0.5 * (a + c) + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    sigma3 = 3.0 * np.sqrt(lam)
    inside = ((mean2d[:, 0] >= -0.5 - sigma3) & (mean2d[:, 0] <= cam.width - 0.5 + sigma3)
              & (mean2d[:, 1] >= -0.5 - sigma3) & (mean2d[:, 1] <= cam.height - 0.5 + sigma3))
    strong = g.opacity * 255.0 >= 1.0
    radius = np.sqrt(2.0 * lam * np.log(np.maximum(g.opacity * 255.0, 1.0)))
    visible = in_front & inside & strong
    return Projection(mean2d, np.stack([a, b, c], axis=1), conic, z, radius, visible,
                      p_cam, jac, cov3d, rotmat)


def project(g: Gaussians, cam: Camera, index: int = 0):
    """Project the single Gaussian ``index``; returns None when culled."""
    pr = project_gaussians(_take(g, [index]), cam)
    if not pr.visible[0]:
        return None
    a, b, c = pr.cov2d[0]
    return ProjectedGaussian(pr.mean2d[0], np.array([[a, b], [b, c]]), float(pr.depth[0]), index)


def eval2d(pg: ProjectedGaussian, pixel) -> float:
    d = np.asarray(pixel, dtype=np.float64) - pg.mean2d
    return float(np.exp(-0.5 * d @ np.linalg.solve(pg.cov2d, d)))


def _take(g: Gaussians, idx) -> Gaussians:
    return Gaussians(g.position[idx], g.rotation[idx], g.scale[idx], g.opacity[idx],
                     g.color[idx], g.feature[idx])


@dataclass
class _TileState:
    proj: Projection
    ranges: np.ndarray
    entries: np.ndarray
    t_final: np.ndarray
    n_end: np.ndarray
    depth_raw: np.ndarray
    background: np.ndarray


def set_threads(n: int | None) -> int:
    """Clamp and apply the numba worker count; returns the count in effect."""
    if n is None:
        return numba.get_num_threads()
    n = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(n)
    return n


def _finish(color_acc, feat, depth_raw, t_final, bg):
    alpha = 1.0 - t_final
    color = color_acc + t_final[..., None] * bg
    depth = np.zeros_like(depth_raw)
    has = alpha > DEPTH_EPS
    depth[has] = depth_raw[has] / alpha[has]
    return color, feat, depth, alpha


def rasterize(g: Gaussians, cam: Camera, background=(0.0, 0.0, 0.0), path: str = "tiled",
              keep_state: bool = False) -> RenderOutput:
    """Render activated Gaussians."""
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    H, W = cam.height, cam.width
    nf = g.feature.shape[1]
    if len(g) == 0:
        out = RenderOutput(np.broadcast_to(bg, (H, W, 3)).copy(), np.zeros((H, W, nf)),
                           np.zeros((H, W)), np.zeros((H, W)))
        if keep_state:
            out.state = None
        return out
    proj = project_gaussians(g, cam)
    order = proj.sort_order()
    if path == "naive":
        color_acc, feat, depth_raw, t_final, _ = _naive(g, proj, order, H, W)
        return RenderOutput(*_finish(color_acc, feat, depth_raw, t_final, bg))
    if path != "tiled":
        raise ValueError(f"unknown render path {path!r}")
    ranges, entries = _raster.bin_tiles(order, proj.mean2d, proj.radius, W, H, TILE)
    color_acc, feat, depth_raw, t_final, n_end = _raster.forward(
        ranges, entries, proj.mean2d, proj.conic, g.opacity, g.color, g.feature,
        proj.depth, W, H, TILE)
    out = RenderOutput(*_finish(color_acc, feat, depth_raw, t_final, bg))
    if keep_state:
        out.state = _TileState(proj, ranges, entries, t_final, n_end, depth_raw, bg)
    return out


def render(gs: GaussianSet, cam: Camera, background=(0.0, 0.0, 0.0), path: str = "tiled",
           keep_state: bool = False) -> RenderOutput:
    """Render a raw GaussianSet: color, blended feature, expected depth and alpha."""
    return rasterize(gs.activate(), cam, background, path, keep_state)


def _naive(g: Gaussians, proj: Projection, order, H, W, return_weights=False):
    """Reference compositor: every pixel walks the globally sorted list."""
    py, px = np.mgrid[0:H, 0:W].astype(np.float64)
    T = np.ones((H, W))
    done = np.zeros((H, W), dtype=bool)
    color = np.zeros((H, W, 3))
    feat = np.zeros((H, W, g.feature.shape[1]))
    depth = np.zeros((H, W))
    weights = np.zeros((H, W, len(g))) if return_weights else None
    for i in order:
        dx = px - proj.mean2d[i, 0]
        dy = py - proj.mean2d[i, 1]
        A, B, C = proj.conic[i]
        power = -0.5 * (A * dx * dx + C * dy * dy) - B * dx * dy
        a = np.minimum(g.opacity[i] * np.exp(power), ALPHA_MAX)
        live = ~done & (a >= ALPHA_MIN)
        tn = T * (1.0 - a)
        stop = live & (tn < T_MIN)
        done |= stop
        live &= ~stop
        w = np.where(live, a * T, 0.0)
        color += np.where(live[..., None], g.color[i] * w[..., None], 0.0)
        feat += np.where(live[..., None], g.feature[i] * w[..., None], 0.0)
        depth += np.where(live, proj.depth[i] * w, 0.0)
        if return_weights:
            weights[..., i] = w
        T = np.where(live, tn, T)
    return color, feat, depth, T, weights


def compositing_weights(gs: GaussianSet, cam: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel weights w_i = alpha'_i * prod_{j<i}(1 - alpha'_j) from the oracle path.

    Returns (weights of shape (H, W, N), alpha of shape (H, W)).
    """
    g = gs.activate()
    proj = project_gaussians(g, cam)
    _, _, _, T, w = _naive(g, proj, proj.sort_order(), cam.height, cam.width, True)
    return w, 1.0 - T


def covariance_2d(g: Gaussians, cam: Camera) -> np.ndarray:
    """Dilated screen-space covariances as (N, 2, 2) matrices."""
    pr = project_gaussians(g, cam)
    a, b, c = pr.cov2d.T
    return np.stack([np.stack([a, b], -1), np.stack([b, c], -1)], -2)


__all__ = ["ProjectedGaussian", "Projection", "RenderOutput", "project", "project_gaussians",
           "eval2d", "render", "rasterize", "compositing_weights", "covariance3d",
           "covariance_2d", "set_threads"]
