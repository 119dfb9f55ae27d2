"""Post-splat feature decoder: blended feature pixels -> surface-embedding pixels.

Two hidden ReLU layers (F -> 32 -> 32) and a sigmoid output layer (32 -> E),
applied per pixel wherever the rendered alpha exceeds 1e-6. Background pixels
decode to 0.
"""
from __future__ import annotations

import numpy as np

from .core import DEFAULT_EMBED_DIM, DEFAULT_FEATURE_DIM, sigmoid

HIDDEN = 32
ALPHA_EPS = 1e-6
LAYERS = ("dec.0", "dec.1", "dec.2")


class DecoderWeights(dict):
    """Ordered mapping ``dec.<i>.weight`` (in, out) / ``dec.<i>.bias`` (out,)."""

    @property
    def feature_dim(self) -> int:
        return self["dec.0.weight"].shape[0]

    @property
    def embed_dim(self) -> int:
        return self["dec.2.weight"].shape[1]

    def validate(self):
        dims = [self[f"{name}.weight"].shape for name in LAYERS]
        for (_, out), (nxt, _) in zip(dims, dims[1:]):
            if out != nxt:
                raise ValueError(f"decoder layer shapes do not chain: {dims}")
        for name in LAYERS:
            if self[f"{name}.bias"].shape != (self[f"{name}.weight"].shape[1],):
                raise ValueError(f"bias shape mismatch in {name}")
            if not (np.all(np.isfinite(self[f"{name}.weight"]))
                    and np.all(np.isfinite(self[f"{name}.bias"]))):
                raise ValueError(f"non-finite weights in {name}")
        return self


def init_decoder(feature_dim: int = DEFAULT_FEATURE_DIM, embed_dim: int = DEFAULT_EMBED_DIM,
                 seed: int = 0, hidden: int = HIDDEN) -> DecoderWeights:
    rng = np.random.default_rng(seed)
    dims = [feature_dim, hidden, hidden, embed_dim]
    w = DecoderWeights()
    for i, name in enumerate(LAYERS):
        bound = np.sqrt(1.0 / dims[i])
        w[f"{name}.weight"] = rng.uniform(-bound, bound, (dims[i], dims[i + 1]))
        w[f"{name}.bias"] = rng.uniform(-bound, bound, dims[i + 1])
    return w


def zero_decoder(feature_dim: int = DEFAULT_FEATURE_DIM, embed_dim: int = DEFAULT_EMBED_DIM,
                 hidden: int = HIDDEN) -> DecoderWeights:
    dims = [feature_dim, hidden, hidden, embed_dim]
    w = DecoderWeights()
    for i, name in enumerate(LAYERS):
        w[f"{name}.weight"] = np.zeros((dims[i], dims[i + 1]))
        w[f"{name}.bias"] = np.zeros(dims[i + 1])
    return w


def mlp_forward(x: np.ndarray, weights: DecoderWeights):
    """Decode rows of ``x`` (M, F); returns (embeddings (M, E), cache)."""
    h0 = x
    z0 = h0 @ weights["dec.0.weight"] + weights["dec.0.bias"]
    h1 = np.maximum(z0, 0.0)
    z1 = h1 @ weights["dec.1.weight"] + weights["dec.1.bias"]
    h2 = np.maximum(z1, 0.0)
    z2 = h2 @ weights["dec.2.weight"] + weights["dec.2.bias"]
    y = sigmoid(z2)
    return y, (h0, z0, h1, z1, h2, y)


def mlp_backward(cache, gy: np.ndarray, weights: DecoderWeights):
    """Returns (weight gradients, gradient w.r.t. the input rows)."""
    h0, z0, h1, z1, h2, y = cache
    g = {}
    gz2 = gy * y * (1.0 - y)
    g["dec.2.weight"] = h2.T @ gz2
    g["dec.2.bias"] = gz2.sum(axis=0)
    gz1 = (gz2 @ weights["dec.2.weight"].T) * (z1 > 0)
    g["dec.1.weight"] = h1.T @ gz1
    g["dec.1.bias"] = gz1.sum(axis=0)
    gz0 = (gz1 @ weights["dec.1.weight"].T) * (z0 > 0)
    g["dec.0.weight"] = h0.T @ gz0
    g["dec.0.bias"] = gz0.sum(axis=0)
    gx = gz0 @ weights["dec.0.weight"].T
    return g, gx


def decode(feature_image: np.ndarray, alpha: np.ndarray, weights: DecoderWeights,
           with_cache: bool = False):
    """Apply the decoder to every pixel with alpha > 1e-6; other pixels are 0."""
    feature_image = np.asarray(feature_image, dtype=np.float64)
    if feature_image.ndim != 3 or feature_image.shape[2] != weights.feature_dim:
        raise ValueError(f"expected {weights.feature_dim} feature channels, got shape "
                         f"{feature_image.shape}")
    H, W, _ = feature_image.shape
    fg = np.asarray(alpha) > ALPHA_EPS
    out = np.zeros((H, W, weights.embed_dim))
    y, cache = mlp_forward(feature_image[fg], weights)
    out[fg] = y
    if with_cache:
        return out, (fg, cache)
    return out


def decode_backward(cache, grad_out: np.ndarray, weights: DecoderWeights):
    """Gradient of <grad_out, decode(...)> w.r.t. decoder weights and the feature image."""
    fg, mcache = cache
    g_w, g_rows = mlp_backward(mcache, grad_out[fg], weights)
    g_img = np.zeros(fg.shape + (weights.feature_dim,))
    g_img[fg] = g_rows
    return g_w, g_img
