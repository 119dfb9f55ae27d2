"""Point-cloud pose regression: PointNet-style global branch, edge-convolution
local branch and an MLP head that regresses 19 joints.

Backbones:

* ``pointnet`` - shared per-point MLP 3->64->128->256, max-pooled over points.
* ``dgcnn``    - edge MLP 6->64->128 over kNN edges (x_j - x_i || x_i), max over
  neighbours and then over points.
* ``hybrid``   - both branches concatenated (384 features).

The head is in->256->128->J*D. Leaky-ReLU (slope 0.01) everywhere except the
linear output. Gradients are hand-written; because both branches end in a max
pool only the arg-max rows carry gradient, which keeps the backward pass cheap.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .grad import DivergenceError, OptimizerState, adam_step
from .losses import loss_pose, mpjpe

log = logging.getLogger(__name__)

JOINT_NAMES = (
    "nose", "neck", "r_shoulder", "r_elbow", "r_wrist", "l_shoulder", "l_elbow", "l_wrist",
    "pelvis", "r_hip", "r_knee", "r_ankle", "l_hip", "l_knee", "l_ankle",
    "r_eye", "l_eye", "r_ear", "l_ear",
)
NUM_JOINTS = len(JOINT_NAMES)

GLOBAL_WIDTHS = (3, 64, 128, 256)
EDGE_WIDTHS = (6, 64, 128)
HEAD_WIDTHS = (256, 128)
DEFAULT_K = 16
SLOPE = 0.01
BACKBONES = ("pointnet", "dgcnn", "hybrid")


def leaky(z):
    return np.maximum(z, SLOPE * z)


def leaky_grad(z):
    return np.where(z > 0, 1.0, SLOPE).astype(z.dtype, copy=False)


class PoseWeights(dict):
    """Ordered mapping of layer tensors: ``<branch>.<i>.weight`` (in, out) and ``.bias`` (out,)."""

    @property
    def backbone(self) -> str:
        has_g = "global.0.weight" in self
        has_e = "edge.0.weight" in self
        if has_g and has_e:
            return "hybrid"
        if has_g:
            return "pointnet"
        if has_e:
            return "dgcnn"
        raise ValueError("weights contain neither a global nor an edge branch")

    @property
    def dim(self) -> int:
        return self["head.2.bias"].shape[0] // NUM_JOINTS

    @property
    def dtype(self):
        return self["head.2.weight"].dtype

    def num_params(self) -> int:
        return int(sum(v.size for v in self.values()))

    def astype(self, dtype) -> "PoseWeights":
        return PoseWeights({k: v.astype(dtype) for k, v in self.items()})

    def validate(self) -> "PoseWeights":
        expect = expected_shapes(self.backbone, self.dim)
        if set(expect) != set(self):
            raise ValueError(f"unexpected layers: {sorted(set(self) ^ set(expect))}")
        for name, shape in expect.items():
            if self[name].shape != shape:
                raise ValueError(f"weight shape mismatch for {name}: {self[name].shape} != {shape}")
            if not np.all(np.isfinite(self[name])):
                raise ValueError(f"non-finite weights in {name}")
        return self


def head_input_width(backbone: str) -> int:
    return {"pointnet": GLOBAL_WIDTHS[-1], "dgcnn": EDGE_WIDTHS[-1],
            "hybrid": GLOBAL_WIDTHS[-1] + EDGE_WIDTHS[-1]}[backbone]


def expected_shapes(backbone: str, dim: int) -> dict:
    if backbone not in BACKBONES:
        raise ValueError(f"unknown backbone {backbone!r}")
    shapes = {}
    if backbone in ("pointnet", "hybrid"):
        for i in range(len(GLOBAL_WIDTHS) - 1):
            shapes[f"global.{i}.weight"] = (GLOBAL_WIDTHS[i], GLOBAL_WIDTHS[i + 1])
            shapes[f"global.{i}.bias"] = (GLOBAL_WIDTHS[i + 1],)
    if backbone in ("dgcnn", "hybrid"):
        for i in range(len(EDGE_WIDTHS) - 1):
            shapes[f"edge.{i}.weight"] = (EDGE_WIDTHS[i], EDGE_WIDTHS[i + 1])
            shapes[f"edge.{i}.bias"] = (EDGE_WIDTHS[i + 1],)
    dims = (head_input_width(backbone),) + HEAD_WIDTHS + (NUM_JOINTS * dim,)
    for i in range(3):
        shapes[f"head.{i}.weight"] = (dims[i], dims[i + 1])
        shapes[f"head.{i}.bias"] = (dims[i + 1],)
    return shapes


def init_pose_weights(backbone: str = "hybrid", dim: int = 3, seed: int = 0,
                      dtype=np.float64) -> PoseWeights:
    """Uniform(-sqrt(1/fan_in), sqrt(1/fan_in)) initialisation."""
    if dim not in (2, 3):
        raise ValueError("dim must be 2 or 3")
    rng = np.random.default_rng(seed)
    w = PoseWeights()
    for name, shape in expected_shapes(backbone, dim).items():
        fan_in = shape[0] if len(shape) == 2 else None
        if fan_in is None:
            fan_in = w[name.replace("bias", "weight")].shape[0]
        bound = np.sqrt(1.0 / fan_in)
        w[name] = rng.uniform(-bound, bound, shape).astype(dtype)
    return w


def knn_graph(points: np.ndarray, k: int = DEFAULT_K) -> np.ndarray:
    """Indices (n, k) of each point's k nearest neighbours, self excluded.

    Rows are ordered by (distance, index), so ties go to the smaller index.
    """
    x = np.asarray(points, dtype=np.float64)
    n = len(x)
    if n < k + 1:
        raise ValueError(f"knn_graph needs at least k+1={k + 1} points, got {n}")
    dx = x[:, None, 0] - x[None, :, 0]
    dy = x[:, None, 1] - x[None, :, 1]
    dz = x[:, None, 2] - x[None, :, 2]
    d = dx * dx + dy * dy + dz * dz
    del dx, dy, dz
    np.fill_diagonal(d, np.inf)
    kth = np.partition(d, k - 1, axis=1)[:, k - 1:k]
    below = d < kth
    tie = d == kth
    need = k - below.sum(axis=1, keepdims=True)
    chosen = below | (tie & (np.cumsum(tie, axis=1) <= need))
    cols = np.nonzero(chosen)[1].reshape(n, k)
    dist = np.take_along_axis(d, cols, axis=1)
    order = np.lexsort((cols, dist), axis=1)
    return np.take_along_axis(cols, order, axis=1)


# -- forward / backward -----------------------------------------------------------

def _forward(x, w: PoseWeights, nbr):
    backbone = w.backbone
    dt = w.dtype
    x = np.asarray(x, dtype=dt)
    cache = {"x": x, "nbr": nbr}
    feats = []
    if backbone in ("pointnet", "hybrid"):
        h = x
        layers = []
        for i in range(len(GLOBAL_WIDTHS) - 1):
            z = h @ w[f"global.{i}.weight"] + w[f"global.{i}.bias"]
            layers.append((h, z))
            h = leaky(z)
        arg = np.ascontiguousarray(h.T).argmax(axis=1)
        feats.append(h[arg, np.arange(h.shape[1])])
        cache["global"] = (layers, arg)
    if backbone in ("dgcnn", "hybrid"):
        if nbr is None:
            raise ValueError("edge branch needs a kNN table")
        W0 = w["edge.0.weight"]
        p = x @ W0[:3]
        q = x @ (W0[3:] - W0[:3]) + w["edge.0.bias"]
        n, k = nbr.shape
        z1 = (p[nbr] + q[:, None, :]).reshape(n * k, -1)
        h1 = leaky(z1)
        # (out, edges) layout keeps the per-channel arg-max contiguous
        z2t = w["edge.1.weight"].T @ h1.T
        arg = z2t.argmax(axis=1)
        zmax = z2t[np.arange(len(arg)), arg] + w["edge.1.bias"]
        feats.append(leaky(zmax))
        cache["edge"] = (arg, z1[arg], h1[arg], zmax)
    f = np.concatenate(feats)
    head = []
    h = f
    for i in range(3):
        z = h @ w[f"head.{i}.weight"] + w[f"head.{i}.bias"]
        head.append((h, z))
        h = leaky(z) if i < 2 else z
    cache["head"] = head
    return h, cache


def _backward(cache, g_out, w: PoseWeights, want_input: bool = False):
    dt = w.dtype
    g = {}
    gh = np.asarray(g_out, dtype=dt)
    for i in (2, 1, 0):
        h_in, z = cache["head"][i]
        gz = gh if i == 2 else gh * leaky_grad(z)
        g[f"head.{i}.weight"] = np.outer(h_in, gz)
        g[f"head.{i}.bias"] = gz
        gh = w[f"head.{i}.weight"] @ gz
    g_f = gh
    x = cache["x"]
    g_x = np.zeros_like(x) if want_input else None
    offset = 0
    if "global" in cache:
        layers, arg = cache["global"]
        width = GLOBAL_WIDTHS[-1]
        gfeat = g_f[offset:offset + width]
        offset += width
        rows, inv = np.unique(arg, return_inverse=True)
        gh = np.zeros((len(rows), width), dtype=dt)
        np.add.at(gh, (inv, np.arange(width)), gfeat)
        for i in range(len(layers) - 1, -1, -1):
            h_in, z = layers[i]
            gz = gh * leaky_grad(z[rows])
            g[f"global.{i}.weight"] = h_in[rows].T @ gz
            g[f"global.{i}.bias"] = gz.sum(axis=0)
            gh = gz @ w[f"global.{i}.weight"].T
        if want_input:
            np.add.at(g_x, rows, gh)
    if "edge" in cache:
        arg, z1_rows, h1_rows, zmax = cache["edge"]
        gz2 = g_f[offset:] * leaky_grad(zmax)
        g["edge.1.weight"] = h1_rows.T * gz2[None, :]
        g["edge.1.bias"] = gz2
        gh1 = (w["edge.1.weight"] * gz2[None, :]).T
        gz1 = gh1 * leaky_grad(z1_rows)
        nbr = cache["nbr"]
        k = nbr.shape[1]
        i_idx = arg // k
        j_idx = nbr[i_idx, arg % k]
        xi, xj = x[i_idx], x[j_idx]
        g["edge.0.weight"] = np.concatenate([xj - xi, xi], axis=1).T @ gz1
        g["edge.0.bias"] = gz1.sum(axis=0)
        if want_input:
            W0 = w["edge.0.weight"]
            np.add.at(g_x, j_idx, gz1 @ W0[:3].T)
            np.add.at(g_x, i_idx, gz1 @ (W0[3:] - W0[:3]).T)
    ordered = {name: g[name] for name in w}
    return (ordered, g_x) if want_input else ordered


def _promote(a):
    return a.astype(np.result_type(a.dtype, np.float64), copy=False)


def _offset_scale(centroid, dim, camera):
    """Map raw network outputs to keypoints: (offset (D,), scale (D,))."""
    if dim == 3:
        return np.asarray(centroid, dtype=np.float64), np.ones(3)
    if camera is None:
        raise ValueError("2D pose output needs a target camera")
    zc = camera.to_camera(centroid)[2]
    return camera.project(centroid), np.array([camera.fx / zc, camera.fy / zc])


def forward_pose(cloud: np.ndarray, weights: PoseWeights, centroid=None, knn=None,
                 camera=None, k: int = DEFAULT_K) -> np.ndarray:
    """Keypoints (19, D) from a centred cloud.

    For D=3 the centroid is added back. For D=2 the outputs are pixel offsets,
    scaled by focal/depth of the centroid and added to its projection in
    ``camera``.
    """
    weights.validate()
    cloud = np.asarray(cloud)
    if centroid is None:
        centroid = np.zeros(3)
    if knn is None and weights.backbone != "pointnet":
        knn = knn_graph(cloud, k)
    out, _ = _forward(cloud, weights, knn)
    offset, scale = _offset_scale(centroid, weights.dim, camera)
    return _promote(out).reshape(NUM_JOINTS, weights.dim) * scale + offset


def pose_forward_backward(cloud, weights: PoseWeights, gt, centroid=None, knn=None,
                          camera=None, want_input: bool = False):
    """L_pose and its gradients for one sample: (loss, prediction, weight grads[, input grad])."""
    if centroid is None:
        centroid = np.zeros(3)
    out, cache = _forward(cloud, weights, knn)
    offset, scale = _offset_scale(centroid, weights.dim, camera)
    pred = _promote(out).reshape(NUM_JOINTS, weights.dim) * scale + offset
    loss, g_pred = loss_pose(pred, gt, with_grad=True)
    g_out = (g_pred * scale).reshape(-1)
    res = _backward(cache, g_out, weights, want_input)
    if want_input:
        grads, g_x = res
        return loss, pred, grads, g_x
    return loss, pred, res


# -- training -------------------------------------------------------------------

@dataclass
class PoseSample:
    points: np.ndarray      # centred cloud (n, 3)
    centroid: np.ndarray
    keypoints: np.ndarray   # (19, D)
    knn: np.ndarray | None = None
    camera: object = None


@dataclass
class PoseTrainConfig:
    backbone: str = "hybrid"
    dim: int = 3
    epochs: int = 20
    lr: float = 2e-4
    weight_decay: float = 1e-5
    batch_size: int = 8
    seed: int = 0
    k: int = DEFAULT_K
    dtype: str = "float32"
    schedule: str = "constant"  # or "cosine": decay to zero over all steps


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"epochs": self.epochs}


def prepare_samples(samples, backbone: str, k: int = DEFAULT_K):
    """Attach kNN tables where the backbone needs them."""
    if backbone == "pointnet":
        return samples
    for s in samples:
        if s.knn is None:
            s.knn = knn_graph(s.points, k)
    return samples


def evaluate_pose(weights: PoseWeights, samples) -> float:
    """Mean MPJPE (3D) or mean pixel error (2D) over samples."""
    errs = [mpjpe(forward_pose(s.points, weights, s.centroid, s.knn, s.camera), s.keypoints)
            for s in samples]
    return float(np.mean(errs)) if errs else float("nan")


def train_pose(train, config: PoseTrainConfig, val=None, init: PoseWeights | None = None,
               callback=None):
    """Fit pose weights with AdamW on the mean L_pose. Returns (weights, TrainLog)."""
    dtype = np.dtype(config.dtype)
    weights = init.astype(dtype) if init is not None else init_pose_weights(
        config.backbone, config.dim, config.seed, dtype)
    prepare_samples(train, weights.backbone, config.k)
    if val:
        prepare_samples(val, weights.backbone, config.k)
    if config.schedule not in ("constant", "cosine"):
        raise ValueError(f"unknown learning-rate schedule {config.schedule!r}")
    rng = np.random.default_rng(config.seed)
    state = OptimizerState()
    tlog = TrainLog()
    steps_per_epoch = -(-len(train) // config.batch_size)
    total_steps = max(1, config.epochs * steps_per_epoch)
    for epoch in range(config.epochs):
        order = rng.permutation(len(train))
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            acc = None
            for idx in batch:
                s = train[idx]
                loss, _, grads = pose_forward_backward(s.points, weights, s.keypoints,
                                                       s.centroid, s.knn, s.camera)
                if not np.isfinite(loss):
                    raise DivergenceError(f"pose training diverged at epoch {epoch}")
                losses.append(loss)
                if acc is None:
                    acc = {k: v.astype(np.float64) for k, v in grads.items()}
                else:
                    for k2, v in grads.items():
                        acc[k2] += v
            acc = {k2: v / len(batch) for k2, v in acc.items()}
            try:
                lr = config.lr
                if config.schedule == "cosine":
                    lr *= 0.5 * (1.0 + math.cos(math.pi * state.step / total_steps))
                new, state = adam_step(dict(weights), acc, state, lr, config.weight_decay)
            except DivergenceError as exc:
                raise DivergenceError(f"pose training diverged at epoch {epoch}: {exc}") from exc
            weights = PoseWeights(new)
        entry = {"epoch": epoch, "train_loss": float(np.mean(losses))}
        if val:
            entry["val_mpjpe"] = evaluate_pose(weights, val)
        tlog.epochs.append(entry)
        log.info("epoch %d %s", epoch, entry)
        if callback is not None:
            callback(entry)
    return weights, tlog
