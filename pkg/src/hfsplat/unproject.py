"""Lift depth maps to world-space point clouds and sample fixed-size network inputs."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Camera

DEFAULT_POINTS = 2048


@dataclass
class PointCloud:
    points: np.ndarray          # (n, 3) world units
    view: np.ndarray | None = None    # (n,) source-view tag
    pixels: np.ndarray | None = None  # (n,) flat pixel index within its view

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point cloud contains non-finite coordinates")

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 3)), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))


def pixel_rays(cam: Camera) -> np.ndarray:
    """World-space direction per pixel (H, W, 3) such that point = center + depth * ray."""
    v, u = np.mgrid[0:cam.height, 0:cam.width].astype(np.float64)
    d_cam = np.stack([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, np.ones_like(u)], axis=-1)
    return d_cam @ cam.R


def unproject_depth(depth: np.ndarray, mask: np.ndarray, cam: Camera, view: int = 0
                    ) -> PointCloud:
    """World points for masked pixels with positive depth, in row-major pixel order."""
    depth = np.asarray(depth, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if depth.shape != cam.shape or mask.shape != cam.shape:
        raise ValueError(f"depth {depth.shape} / mask {mask.shape} do not match camera {cam.shape}")
    keep = mask & (depth > 0)
    flat = np.flatnonzero(keep)
    v, u = np.divmod(flat, cam.width)
    d = depth.reshape(-1)[flat]
    p_cam = np.stack([(u - cam.cx) * d / cam.fx, (v - cam.cy) * d / cam.fy, d], axis=1)
    world = (p_cam - cam.t) @ cam.R
    return PointCloud(world, np.full(len(flat), view, dtype=np.int64), flat.astype(np.int64))


def merge(left: PointCloud, right: PointCloud) -> PointCloud:
    """Concatenate two world-frame clouds, ``left`` first."""
    def tag(pc, name):
        arr = getattr(pc, name)
        return arr if arr is not None else np.full(len(pc), -1, dtype=np.int64)
    return PointCloud(np.concatenate([left.points, right.points]),
                      np.concatenate([tag(left, "view"), tag(right, "view")]),
                      np.concatenate([tag(left, "pixels"), tag(right, "pixels")]))


@dataclass
class SampledCloud:
    points: np.ndarray      # (n, 3) centred
    centroid: np.ndarray    # (3,)
    index: np.ndarray       # (n,) rows of the source cloud


def sample(cloud: PointCloud, n: int = DEFAULT_POINTS, seed: int = 0) -> SampledCloud:
    """Seeded fixed-size sample, centred on its own centroid.

    Draws without replacement when the cloud has at least ``n`` points and
    with replacement otherwise.
    """
    if len(cloud) == 0:
        raise ValueError("no foreground points")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(cloud), n, replace=len(cloud) < n)
    pts = cloud.points[idx]
    centroid = pts.mean(axis=0)
    return SampledCloud(pts - centroid, centroid, idx)


def cloud_from_views(depths, masks, cameras, views) -> PointCloud:
    """Merged cloud of the listed views, in the order given."""
    out = PointCloud.empty()
    for v in views:
        out = merge(out, unproject_depth(depths[v], masks[v], cameras[v], view=v))
    return out
