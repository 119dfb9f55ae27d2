"""Numba kernels for the tiled rasterizer (forward and backward)."""
import numba
import numpy as np
from numba import njit, prange

# The TBB layer shipped here is too old and warns on first use; prefer OpenMP.
if numba.config.THREADING_LAYER == "default":
    try:
        from numba.np.ufunc import omppool  # noqa: F401
        numba.config.THREADING_LAYER = "omp"
    except ImportError:
        pass

TILE = 16
ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4
# Powers this far below ln(ALPHA_MIN / opacity) certainly give alpha' < ALPHA_MIN,
# so exp() can be skipped without changing which contributions are kept.
CUT_MARGIN = 1e-9


@njit(cache=True)
def _cutoffs(opacity):
    n = opacity.shape[0]
    cut = np.empty(n)
    for i in range(n):
        if opacity[i] > 0.0:
            cut[i] = np.log(ALPHA_MIN / opacity[i]) - CUT_MARGIN
        else:
            cut[i] = np.inf
    return cut


@njit(cache=True)
def bin_tiles(order, means2d, radius, width, height, tile):
    """Duplicate each Gaussian into every tile its support touches.

    ``order`` lists visible Gaussians front-to-back, so filling buckets in that
    order leaves every tile list sorted by (depth, index).
    """
    ntx = (width + tile - 1) // tile
    nty = (height + tile - 1) // tile
    n = order.shape[0]
    rect = np.empty((n, 4), dtype=np.int64)
    counts = np.zeros(ntx * nty, dtype=np.int64)
    for k in range(n):
        g = order[k]
        r = radius[g] + 1.0
        x0 = int(np.floor((means2d[g, 0] - r) / tile))
        x1 = int(np.floor((means2d[g, 0] + r) / tile))
        y0 = int(np.floor((means2d[g, 1] - r) / tile))
        y1 = int(np.floor((means2d[g, 1] + r) / tile))
        x0 = max(x0, 0)
        y0 = max(y0, 0)
        x1 = min(x1, ntx - 1)
        y1 = min(y1, nty - 1)
        rect[k, 0] = x0
        rect[k, 1] = x1
        rect[k, 2] = y0
        rect[k, 3] = y1
        for ty in range(y0, y1 + 1):
            for tx in range(x0, x1 + 1):
                counts[ty * ntx + tx] += 1
    ranges = np.zeros((ntx * nty, 2), dtype=np.int64)
    total = 0
    for t in range(ntx * nty):
        ranges[t, 0] = total
        total += counts[t]
        ranges[t, 1] = ranges[t, 0]
    entries = np.empty(total, dtype=np.int64)
    for k in range(n):
        g = order[k]
        for ty in range(rect[k, 2], rect[k, 3] + 1):
            for tx in range(rect[k, 0], rect[k, 1] + 1):
                t = ty * ntx + tx
                entries[ranges[t, 1]] = g
                ranges[t, 1] += 1
    return ranges, entries


@njit(parallel=True, cache=True)
def forward(ranges, entries, means2d, conic, opacity, color, feature, depth,
            width, height, tile):
    ntx = (width + tile - 1) // tile
    ntiles = ranges.shape[0]
    nf = feature.shape[1]
    out_c = np.zeros((height, width, 3))
    out_f = np.zeros((height, width, nf))
    out_z = np.zeros((height, width))
    out_t = np.ones((height, width))
    n_end = np.zeros((height, width), dtype=np.int64)
    cut = _cutoffs(opacity)
    for t in prange(ntiles):
        tx = t % ntx
        ty = t // ntx
        start = ranges[t, 0]
        stop = ranges[t, 1]
        acc_f = np.zeros(nf)
        for py in range(ty * tile, min((ty + 1) * tile, height)):
            for px in range(tx * tile, min((tx + 1) * tile, width)):
                T = 1.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                z = 0.0
                for f in range(nf):
                    acc_f[f] = 0.0
                last = start
                for j in range(start, stop):
                    g = entries[j]
                    dx = px - means2d[g, 0]
                    dy = py - means2d[g, 1]
                    power = -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) \
                        - conic[g, 1] * dx * dy
                    if power < cut[g]:
                        last = j + 1
                        continue
                    a = opacity[g] * np.exp(power)
                    if a > ALPHA_MAX:
                        a = ALPHA_MAX
                    if a < ALPHA_MIN:
                        last = j + 1
                        continue
                    tn = T * (1.0 - a)
                    if tn < T_MIN:
                        break
                    w = a * T
                    c0 += color[g, 0] * w
                    c1 += color[g, 1] * w
                    c2 += color[g, 2] * w
                    for f in range(nf):
                        acc_f[f] += feature[g, f] * w
                    z += depth[g] * w
                    T = tn
                    last = j + 1
                out_c[py, px, 0] = c0
                out_c[py, px, 1] = c1
                out_c[py, px, 2] = c2
                for f in range(nf):
                    out_f[py, px, f] = acc_f[f]
                out_z[py, px] = z
                out_t[py, px] = T
                n_end[py, px] = last
    return out_c, out_f, out_z, out_t, n_end


@njit(parallel=True, cache=True)
def backward(ranges, entries, means2d, conic, opacity, color, feature, depth,
             width, height, tile, t_final, n_end, g_c, g_f, g_z, g_t):
    """Per-entry adjoints; each tile owns its contiguous entry range."""
    ntx = (width + tile - 1) // tile
    ntiles = ranges.shape[0]
    nf = feature.shape[1]
    ne = entries.shape[0]
    e_mean = np.zeros((ne, 2))
    e_conic = np.zeros((ne, 3))
    e_opac = np.zeros(ne)
    e_color = np.zeros((ne, 3))
    e_feat = np.zeros((ne, nf))
    e_depth = np.zeros(ne)
    cut = _cutoffs(opacity)
    for t in prange(ntiles):
        tx = t % ntx
        ty = t // ntx
        start = ranges[t, 0]
        acc_f = np.zeros(nf)
        for py in range(ty * tile, min((ty + 1) * tile, height)):
            for px in range(tx * tile, min((tx + 1) * tile, width)):
                T_fin = t_final[py, px]
                T = T_fin
                ac0 = 0.0
                ac1 = 0.0
                ac2 = 0.0
                az = 0.0
                for f in range(nf):
                    acc_f[f] = 0.0
                gc0 = g_c[py, px, 0]
                gc1 = g_c[py, px, 1]
                gc2 = g_c[py, px, 2]
                gz = g_z[py, px]
                gt = g_t[py, px]
                for j in range(n_end[py, px] - 1, start - 1, -1):
                    g = entries[j]
                    dx = px - means2d[g, 0]
                    dy = py - means2d[g, 1]
                    power = -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) \
                        - conic[g, 1] * dx * dy
                    if power < cut[g]:
                        continue
                    G = np.exp(power)
                    a = opacity[g] * G
                    clamped = a > ALPHA_MAX
                    if clamped:
                        a = ALPHA_MAX
                    if a < ALPHA_MIN:
                        continue
                    inv = 1.0 / (1.0 - a)
                    T = T * inv
                    w = a * T
                    e_color[j, 0] += gc0 * w
                    e_color[j, 1] += gc1 * w
                    e_color[j, 2] += gc2 * w
                    e_depth[j] += gz * w
                    da = gc0 * (color[g, 0] * T - ac0 * inv) \
                        + gc1 * (color[g, 1] * T - ac1 * inv) \
                        + gc2 * (color[g, 2] * T - ac2 * inv) \
                        + gz * (depth[g] * T - az * inv) \
                        - gt * T_fin * inv
                    for f in range(nf):
                        gf = g_f[py, px, f]
                        e_feat[j, f] += gf * w
                        da += gf * (feature[g, f] * T - acc_f[f] * inv)
                        acc_f[f] += feature[g, f] * w
                    ac0 += color[g, 0] * w
                    ac1 += color[g, 1] * w
                    ac2 += color[g, 2] * w
                    az += depth[g] * w
                    if clamped:
                        continue
                    e_opac[j] += da * G
                    dp = da * opacity[g] * G
                    e_mean[j, 0] += dp * (conic[g, 0] * dx + conic[g, 1] * dy)
                    e_mean[j, 1] += dp * (conic[g, 1] * dx + conic[g, 2] * dy)
                    e_conic[j, 0] += -0.5 * dp * dx * dx
                    e_conic[j, 1] += -dp * dx * dy
                    e_conic[j, 2] += -0.5 * dp * dy * dy
    return e_mean, e_conic, e_opac, e_color, e_feat, e_depth
