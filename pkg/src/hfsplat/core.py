"""Domain types, parameter activations and covariance construction.

Gaussians are stored as raw (pre-activation) arrays; :meth:`GaussianSet.activate`
returns the bounded view used by the renderer:

    opacity  = sigmoid(raw)       scale   = exp(raw)
    rotation = raw / |raw|        color   = sigmoid(raw)
    feature  = sigmoid(raw)

Quaternions are stored (w, x, y, z).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

DEFAULT_FEATURE_DIM = 8
DEFAULT_EMBED_DIM = 3

PARAM_NAMES = ("position", "rotation", "scale", "opacity", "color", "feature")


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    p = np.clip(p, 1e-7, 1.0 - 1e-7)
    return np.log(p) - np.log1p(-p)


def normalize_quaternions(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm == 0.0):
        raise ValueError("degenerate rotation")
    return q / norm


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for unit quaternions of shape (..., 4)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotmat_to_quat(R: np.ndarray) -> np.ndarray:
    """Inverse of :func:`quat_to_rotmat` for a single 3x3 matrix (w >= 0)."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.asarray(q)
    return q if q[0] >= 0 else -q


def quat_rotmat_vjp(q: np.ndarray, dR: np.ndarray) -> np.ndarray:
    """Pull an adjoint dL/dR (..., 3, 3) back to dL/dq (..., 4) for unit-quaternion entries."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    G = dR
    gw = 2 * (-z * G[..., 0, 1] + y * G[..., 0, 2] + z * G[..., 1, 0]
              - x * G[..., 1, 2] - y * G[..., 2, 0] + x * G[..., 2, 1])
    gx = 2 * (y * G[..., 0, 1] + z * G[..., 0, 2] + y * G[..., 1, 0] - 2 * x * G[..., 1, 1]
              - w * G[..., 1, 2] + z * G[..., 2, 0] + w * G[..., 2, 1] - 2 * x * G[..., 2, 2])
    gy = 2 * (-2 * y * G[..., 0, 0] + x * G[..., 0, 1] + w * G[..., 0, 2] + x * G[..., 1, 0]
              + z * G[..., 1, 2] - w * G[..., 2, 0] + z * G[..., 2, 1] - 2 * y * G[..., 2, 2])
    gz = 2 * (-2 * z * G[..., 0, 0] - w * G[..., 0, 1] + x * G[..., 0, 2] + w * G[..., 1, 0]
              - 2 * z * G[..., 1, 1] + y * G[..., 1, 2] + x * G[..., 2, 0] + y * G[..., 2, 1])
    return np.stack([gw, gx, gy, gz], axis=-1)


def covariance3d(rotation: np.ndarray, scale: np.ndarray) -> np.ndarray:
    """Sigma = R S S^T R^T for unit quaternions (..., 4) and scales (..., 3)."""
    R = quat_to_rotmat(rotation)
    M = R * np.asarray(scale, dtype=np.float64)[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


@dataclass(frozen=True)
class Gaussians:
    """Activated parameters, ready for rendering."""

    position: np.ndarray
    rotation: np.ndarray
    scale: np.ndarray
    opacity: np.ndarray
    color: np.ndarray
    feature: np.ndarray

    def __len__(self) -> int:
        return len(self.position)

    @property
    def feature_dim(self) -> int:
        return self.feature.shape[1]


@dataclass(frozen=True)
class GaussianSet:
    """Raw optimizable Gaussian parameters. All arrays share the leading length N."""

    position: np.ndarray
    rotation: np.ndarray
    scale: np.ndarray
    opacity: np.ndarray
    color: np.ndarray
    feature: np.ndarray = field(default=None)

    def __post_init__(self):
        n = len(self.position)
        feat = self.feature
        if feat is None:
            feat = np.zeros((n, DEFAULT_FEATURE_DIM))
        arrays = {
            "position": np.asarray(self.position, dtype=np.float64).reshape(n, 3),
            "rotation": np.asarray(self.rotation, dtype=np.float64).reshape(n, 4),
            "scale": np.asarray(self.scale, dtype=np.float64).reshape(n, 3),
            "opacity": np.asarray(self.opacity, dtype=np.float64).reshape(n),
            "color": np.asarray(self.color, dtype=np.float64).reshape(n, 3),
            "feature": np.asarray(feat, dtype=np.float64).reshape(n, -1 if n else np.shape(feat)[-1]),
        }
        for name, arr in arrays.items():
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return len(self.position)

    @property
    def feature_dim(self) -> int:
        return self.feature.shape[1]

    @classmethod
    def empty(cls, feature_dim: int = DEFAULT_FEATURE_DIM) -> "GaussianSet":
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0),
                   np.zeros((0, 3)), np.zeros((0, feature_dim)))

    @classmethod
    def from_activated(cls, position, rotation, scale, opacity, color, feature) -> "GaussianSet":
        """Build raw parameters whose activation reproduces the given values."""
        return cls(
            position=np.asarray(position, dtype=np.float64),
            rotation=normalize_quaternions(rotation),
            scale=np.log(scale),
            opacity=logit(np.asarray(opacity, dtype=np.float64)),
            color=logit(np.asarray(color, dtype=np.float64)),
            feature=logit(np.asarray(feature, dtype=np.float64)),
        )

    def params(self) -> dict:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def with_params(self, **arrays) -> "GaussianSet":
        return replace(self, **arrays)

    def activate(self) -> Gaussians:
        if not all(np.all(np.isfinite(a)) for a in self.params().values()):
            raise ValueError("raw Gaussian parameters must be finite")
        with np.errstate(over="ignore"):
            scale = np.exp(self.scale)
        if not np.all(np.isfinite(scale)):
            raise FloatingPointError("Gaussian scale overflows after activation")
        return Gaussians(
            position=self.position,
            rotation=normalize_quaternions(self.rotation),
            scale=scale,
            opacity=sigmoid(self.opacity),
            color=sigmoid(self.color),
            feature=sigmoid(self.feature),
        )

    def subset(self, index) -> "GaussianSet":
        return GaussianSet(**{k: v[index] for k, v in self.params().items()})

    def concat(self, other: "GaussianSet") -> "GaussianSet":
        return GaussianSet(**{k: np.concatenate([v, getattr(other, k)])
                              for k, v in self.params().items()})


def activate(raw: GaussianSet) -> Gaussians:
    return raw.activate()


@dataclass(frozen=True, eq=False)
class Camera:
    """Pinhole camera. ``world_to_camera`` is the 3x4 rigid transform [R | t]."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_camera: np.ndarray
    near: float = 0.01

    def __post_init__(self):
        W = np.asarray(self.world_to_camera, dtype=np.float64).reshape(3, 4)
        object.__setattr__(self, "world_to_camera", W)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        R = W[:, :3]
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-6:
            raise ValueError("world_to_camera rotation block is not orthonormal")

    def __eq__(self, other) -> bool:
        return isinstance(other, Camera) and self.to_dict() == other.to_dict()

    def __hash__(self) -> int:
        return hash(repr(self.to_dict()))

    @property
    def R(self) -> np.ndarray:
        return self.world_to_camera[:, :3]

    @property
    def t(self) -> np.ndarray:
        return self.world_to_camera[:, 3]

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @property
    def shape(self) -> tuple:
        return (self.height, self.width)

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.R.T + self.t

    def project(self, points: np.ndarray) -> np.ndarray:
        """Pixel coordinates (u, v) of world points, shape (..., 2)."""
        pc = self.to_camera(points)
        return np.stack([self.fx * pc[..., 0] / pc[..., 2] + self.cx,
                         self.fy * pc[..., 1] / pc[..., 2] + self.cy], axis=-1)

    def scaled(self, factor: float) -> "Camera":
        """Same viewpoint at a resolution multiplied by ``factor``."""
        return Camera(self.fx * factor, self.fy * factor,
                      (self.cx + 0.5) * factor - 0.5, (self.cy + 0.5) * factor - 0.5,
                      round(self.width * factor), round(self.height * factor),
                      self.world_to_camera, self.near)

    def to_dict(self) -> dict:
        return {"fx": float(self.fx), "fy": float(self.fy), "cx": float(self.cx),
                "cy": float(self.cy), "width": self.width, "height": self.height,
                "world_to_camera": self.world_to_camera.tolist(), "near": float(self.near)}

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], d["width"], d["height"],
                   np.asarray(d["world_to_camera"]), d.get("near", 0.01))
