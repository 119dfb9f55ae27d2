"""Analytic backward pass for rendering, a finite-difference checker and AdamW."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _raster
from .core import PARAM_NAMES, Camera, GaussianSet, quat_rotmat_vjp
from .splat import DEPTH_EPS, TILE, RenderOutput, rasterize


class DivergenceError(FloatingPointError):
    """Raised when a loss or gradient stops being finite."""


@dataclass
class GradientBundle:
    position: np.ndarray
    rotation: np.ndarray
    scale: np.ndarray
    opacity: np.ndarray
    color: np.ndarray
    feature: np.ndarray
    network: dict = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, gs: GaussianSet) -> "GradientBundle":
        return cls(**{k: np.zeros_like(v) for k, v in gs.params().items()})

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in PARAM_NAMES}

    def __add__(self, other: "GradientBundle") -> "GradientBundle":
        net = dict(self.network)
        for k, v in other.network.items():
            net[k] = net[k] + v if k in net else v
        return GradientBundle(**{k: getattr(self, k) + getattr(other, k) for k in PARAM_NAMES},
                              network=net)


def _adjoint(arr, shape, name):
    if arr is None:
        return np.zeros(shape)
    arr = np.asarray(arr, dtype=np.float64).reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"non-finite adjoint for {name}")
    return arr


def backward_render(gs: GaussianSet, cam: Camera, output_grad: RenderOutput,
                    background=(0.0, 0.0, 0.0), forward: RenderOutput | None = None
                    ) -> GradientBundle:
    """Gradient of <output_grad, render(gs, cam)> with respect to every raw parameter.

    ``output_grad`` carries adjoints for color, feature, depth and alpha; any of
    them may be None. ``forward`` may be a tiled render made with
    ``keep_state=True`` to skip the recomputation.
    """
    H, W = cam.height, cam.width
    n, nf = len(gs), gs.feature_dim
    gC = _adjoint(output_grad.color, (H, W, 3), "color")
    gF = _adjoint(output_grad.feature, (H, W, nf), "feature")
    gD = _adjoint(output_grad.depth, (H, W), "depth")
    gA = _adjoint(output_grad.alpha, (H, W), "alpha")
    bundle = GradientBundle.zeros_like(gs)
    if n == 0:
        return bundle
    g = gs.activate()
    if forward is None or forward.state is None:
        forward = rasterize(g, cam, background, "tiled", keep_state=True)
    st = forward.state
    proj = st.proj
    bg = np.asarray(background, dtype=np.float64).reshape(3)

    alpha = 1.0 - st.t_final
    has = alpha > DEPTH_EPS
    safe = np.where(has, alpha, 1.0)
    g_draw = np.where(has, gD / safe, 0.0)
    g_alpha = gA - np.where(has, gD * st.depth_raw / safe ** 2, 0.0)
    g_t = gC @ bg - g_alpha

    e_mean, e_conic, e_opac, e_color, e_feat, e_depth = _raster.backward(
        st.ranges, st.entries, proj.mean2d, proj.conic, g.opacity, g.color, g.feature,
        proj.depth, W, H, TILE, st.t_final, st.n_end, gC, gF, g_draw, g_t)

    ids = st.entries
    g_mean = np.zeros((n, 2))
    g_conic = np.zeros((n, 3))
    g_opac = np.zeros(n)
    g_color = np.zeros((n, 3))
    g_feat = np.zeros((n, nf))
    g_z = np.zeros(n)
    # np.add.at applies updates in entry order, so the reduction is deterministic.
    np.add.at(g_mean, ids, e_mean)
    np.add.at(g_conic, ids, e_conic)
    np.add.at(g_opac, ids, e_opac)
    np.add.at(g_color, ids, e_color)
    np.add.at(g_feat, ids, e_feat)
    np.add.at(g_z, ids, e_depth)

    vis = proj.visible
    A, B, C = proj.conic[:, 0], proj.conic[:, 1], proj.conic[:, 2]
    Q = np.stack([np.stack([A, B], -1), np.stack([B, C], -1)], -2)
    GQ = np.stack([np.stack([g_conic[:, 0], 0.5 * g_conic[:, 1]], -1),
                   np.stack([0.5 * g_conic[:, 1], g_conic[:, 2]], -1)], -2)
    G2 = -Q @ GQ @ Q
    R = cam.R
    T = proj.jac @ R
    G3 = np.swapaxes(T, 1, 2) @ G2 @ T
    gT = 2.0 * G2 @ T @ proj.cov3d
    gJ = gT @ R.T

    x, y, z = proj.p_cam[:, 0], proj.p_cam[:, 1], np.where(vis, proj.p_cam[:, 2], 1.0)
    fx, fy = cam.fx, cam.fy
    z2, z3 = z * z, z * z * z
    gpc = np.zeros((n, 3))
    gpc[:, 0] = gJ[:, 0, 2] * (-fx / z2) + g_mean[:, 0] * fx / z
    gpc[:, 1] = gJ[:, 1, 2] * (-fy / z2) + g_mean[:, 1] * fy / z
    gpc[:, 2] = (gJ[:, 0, 0] * (-fx / z2) + gJ[:, 0, 2] * (2 * fx * x / z3)
                 + gJ[:, 1, 1] * (-fy / z2) + gJ[:, 1, 2] * (2 * fy * y / z3)
                 - g_mean[:, 0] * fx * x / z2 - g_mean[:, 1] * fy * y / z2 + g_z)
    g_pos = gpc @ R

    M = proj.rotmat * g.scale[:, None, :]
    gM = 2.0 * G3 @ M
    g_s = np.einsum("nij,nij->nj", gM, proj.rotmat)
    g_rot = gM * g.scale[:, None, :]
    g_q = quat_rotmat_vjp(g.rotation, g_rot)
    rnorm = np.linalg.norm(gs.rotation, axis=1, keepdims=True)
    g_raw_q = (g_q - g.rotation * np.sum(g.rotation * g_q, axis=1, keepdims=True)) / rnorm

    mask = vis[:, None]
    bundle.position = np.where(mask, g_pos, 0.0)
    bundle.rotation = np.where(mask, g_raw_q, 0.0)
    bundle.scale = np.where(mask, g_s * g.scale, 0.0)
    bundle.opacity = np.where(vis, g_opac * g.opacity * (1.0 - g.opacity), 0.0)
    bundle.color = np.where(mask, g_color * g.color * (1.0 - g.color), 0.0)
    bundle.feature = np.where(mask, g_feat * g.feature * (1.0 - g.feature), 0.0)
    for v in bundle.as_dict().values():
        if not np.all(np.isfinite(v)):
            raise DivergenceError("non-finite render gradient")
    return bundle


# -- finite differences -------------------------------------------------------

def _flatten(params):
    if isinstance(params, dict):
        keys = sorted(params)
        return keys, [np.asarray(params[k], dtype=np.float64) for k in keys]
    return None, [np.asarray(params, dtype=np.float64)]


def _rebuild(keys, arrays):
    if keys is None:
        return arrays[0]
    return dict(zip(keys, arrays))


def relative_error(analytic, numeric, floor: float = 1e-8):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numerical_gradient(f, params, eps: float = 1e-4, coords=None, order: int = 2):
    """Central differences. ``coords`` optionally restricts each array to a list of flat indices.

    ``order=4`` uses the five-point stencil
    (8 (f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h, whose O(h^4) truncation
    error allows a larger step and so less cancellation noise.
    Returns a structure like ``params``; unchecked entries are NaN.
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    keys, arrays = _flatten(params)
    out = []
    for ai, arr in enumerate(arrays):
        g = np.full(arr.shape, np.nan)
        if coords is None:
            idx = range(arr.size)
        else:
            idx = coords[keys[ai]] if keys is not None else coords
        for i in idx:
            work = [a.copy() for a in arrays]
            flat = work[ai].reshape(-1)
            x0 = flat[i]

            def at(step):
                flat[i] = x0 + step
                return f(_rebuild(keys, work))

            d1 = at(eps) - at(-eps)
            if order == 2:
                g.reshape(-1)[i] = d1 / (2.0 * eps)
            else:
                d2 = at(2.0 * eps) - at(-2.0 * eps)
                g.reshape(-1)[i] = (8.0 * d1 - d2) / (12.0 * eps)
        out.append(g)
    return _rebuild(keys, out)


def finite_diff_check(f, params, analytic, eps: float = 1e-4, coords=None,
                      order: int = 2) -> float:
    """Max relative error between ``analytic`` and central differences of ``f``.

    The per-entry error is |a - n| / max(|a|, |n|, 1e-8).
    """
    numeric = numerical_gradient(f, params, eps, coords, order)
    _, num = _flatten(numeric)
    keys, ana = _flatten(analytic)
    worst = 0.0
    for a, n in zip(ana, num):
        sel = ~np.isnan(n)
        if np.any(sel):
            worst = max(worst, float(relative_error(a[sel], n[sel]).max()))
    return worst


def sample_coords(params: dict, per_array: int, rng: np.random.Generator) -> dict:
    """Random flat indices per array (all of them for small arrays)."""
    out = {}
    for k, v in params.items():
        size = np.asarray(v).size
        if size <= per_array:
            out[k] = np.arange(size)
        else:
            out[k] = np.sort(rng.choice(size, per_array, replace=False))
    return out


# -- AdamW ----------------------------------------------------------------------

@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict, grads: dict, state: OptimizerState, lr, wd=0.0,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One AdamW update with decoupled weight decay and bias correction.

    ``lr`` and ``wd`` are scalars or dicts keyed like ``params``. Returns
    (new_params, new_state); inputs are not modified.
    """
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"diverged: non-finite gradient for {k!r}")
    step = state.step + 1
    new_params, m_out, v_out = {}, {}, {}
    for k, p in params.items():
        p = np.asarray(p)
        g = grads.get(k)
        rate = lr[k] if isinstance(lr, dict) else lr
        decay = wd.get(k, 0.0) if isinstance(wd, dict) else wd
        if g is None:
            new_params[k] = p
            if k in state.m:
                m_out[k], v_out[k] = state.m[k], state.v[k]
            continue
        g = np.asarray(g, dtype=p.dtype)
        m = state.m.get(k, np.zeros_like(p))
        v = state.v.get(k, np.zeros_like(p))
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** step)
        v_hat = v / (1.0 - beta2 ** step)
        q = p * (1.0 - rate * decay)
        new_params[k] = (q - rate * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype, copy=False)
        m_out[k], v_out[k] = m, v
    return new_params, OptimizerState(m_out, v_out, step)
