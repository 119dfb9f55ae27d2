"""Procedural articulated Gaussian figures, camera rings and rendered ground truth.

The world is y-up and the figure faces +z. Each of the 18 bones of the 19-joint
skeleton carries a row of anisotropic Gaussians aligned with the bone. The
per-Gaussian ground-truth embedding is ``(bone / 18, t, 0.5)`` where ``t`` is the
arc position along the bone, a cheap stand-in for a continuous surface
embedding.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import Camera, Gaussians, GaussianSet, logit, rotmat_to_quat
from .posenet import JOINT_NAMES, NUM_JOINTS
from .splat import rasterize

J = {name: i for i, name in enumerate(JOINT_NAMES)}

# Parent of every joint; the pelvis is the root.
PARENTS = np.array([
    J["neck"], J["pelvis"], J["neck"], J["r_shoulder"], J["r_elbow"],
    J["neck"], J["l_shoulder"], J["l_elbow"], -1, J["pelvis"], J["r_hip"], J["r_knee"],
    J["pelvis"], J["l_hip"], J["l_knee"], J["nose"], J["nose"], J["r_eye"], J["l_eye"],
])
ROOT = J["pelvis"]

# Rest offsets from the parent joint (T-pose). +x is the figure's left.
REST_OFFSETS = np.array([
    (0.0, 0.20, 0.05),     # nose
    (0.0, 0.55, 0.0),      # neck
    (-0.18, 0.0, 0.0),     # r_shoulder
    (-0.28, 0.0, 0.0),     # r_elbow
    (-0.25, 0.0, 0.0),     # r_wrist
    (0.18, 0.0, 0.0),      # l_shoulder
    (0.28, 0.0, 0.0),      # l_elbow
    (0.25, 0.0, 0.0),      # l_wrist
    (0.0, 0.0, 0.0),       # pelvis
    (-0.10, -0.05, 0.0),   # r_hip
    (0.0, -0.42, 0.0),     # r_knee
    (0.0, -0.40, 0.0),     # r_ankle
    (0.10, -0.05, 0.0),    # l_hip
    (0.0, -0.42, 0.0),     # l_knee
    (0.0, -0.40, 0.0),     # l_ankle
    (-0.035, 0.03, 0.05),  # r_eye
    (0.035, 0.03, 0.05),   # l_eye
    (-0.05, -0.01, -0.06),  # r_ear
    (0.05, -0.01, -0.06),   # l_ear
])

# Bone list in joint order of the child; bone b ends at BONE_CHILD[b].
BONE_CHILD = np.array([j for j in range(NUM_JOINTS) if PARENTS[j] >= 0])
NUM_BONES = len(BONE_CHILD)

# Radial half-thickness per bone (keyed by child joint).
_THICK = {"neck": 0.11, "nose": 0.07, "r_shoulder": 0.05, "l_shoulder": 0.05,
          "r_elbow": 0.04, "l_elbow": 0.04, "r_wrist": 0.035, "l_wrist": 0.035,
          "r_hip": 0.07, "l_hip": 0.07, "r_knee": 0.055, "l_knee": 0.055,
          "r_ankle": 0.045, "l_ankle": 0.045,
          "r_eye": 0.015, "l_eye": 0.015, "r_ear": 0.015, "l_ear": 0.015}
BONE_THICKNESS = np.array([_THICK[JOINT_NAMES[c]] for c in BONE_CHILD])

ANGLE_LIMIT = np.deg2rad(60.0)
GAUSSIANS_PER_BONE = 40
FIGURE_CENTER = np.array([0.0, 0.05, 0.0])
RING_RADIUS = 3.0
FOCAL_RATIO = 1.25  # focal length in units of image width


def euler_to_rotmat(angles: np.ndarray) -> np.ndarray:
    """Rotation Rz @ Ry @ Rx for angles (..., 3) = (rx, ry, rz)."""
    a = np.asarray(angles, dtype=np.float64)
    cx, cy, cz = np.cos(a[..., 0]), np.cos(a[..., 1]), np.cos(a[..., 2])
    sx, sy, sz = np.sin(a[..., 0]), np.sin(a[..., 1]), np.sin(a[..., 2])
    R = np.empty(a.shape[:-1] + (3, 3))
    R[..., 0, 0] = cz * cy
    R[..., 0, 1] = cz * sy * sx - sz * cx
    R[..., 0, 2] = cz * sy * cx + sz * sx
    R[..., 1, 0] = sz * cy
    R[..., 1, 1] = sz * sy * sx + cz * cx
    R[..., 1, 2] = sz * sy * cx - cz * sx
    R[..., 2, 0] = -sy
    R[..., 2, 1] = cy * sx
    R[..., 2, 2] = cy * cx
    return R


def _topological_order():
    order, seen = [ROOT], {ROOT}
    while len(order) < NUM_JOINTS:
        for j in range(NUM_JOINTS):
            if j not in seen and PARENTS[j] in seen:
                order.append(j)
                seen.add(j)
    return order


_ORDER = _topological_order()


def forward_kinematics(angles: np.ndarray, offsets: np.ndarray = REST_OFFSETS,
                       root: np.ndarray = np.zeros(3)):
    """Joint positions (19, 3) and global rotations (19, 3, 3).

    ``angles[j]`` rotates the subtree below joint j; the root angle orients the
    whole figure.
    """
    local = euler_to_rotmat(angles)
    pos = np.zeros((NUM_JOINTS, 3))
    glob = np.zeros((NUM_JOINTS, 3, 3))
    for j in _ORDER:
        p = PARENTS[j]
        if p < 0:
            pos[j] = root
            glob[j] = local[j]
        else:
            pos[j] = pos[p] + glob[p] @ offsets[j]
            glob[j] = glob[p] @ local[j]
    return pos, glob


@dataclass(frozen=True)
class FigureSpec:
    angles: np.ndarray          # (19, 3) radians
    offsets: np.ndarray         # (19, 3) bone vectors in the parent frame
    root: np.ndarray
    gaussians_per_bone: int = GAUSSIANS_PER_BONE


@dataclass
class Figure:
    spec: FigureSpec
    gaussians: GaussianSet
    keypoints: np.ndarray       # (19, 3)
    embedding: np.ndarray       # (N, 3) ground-truth embedding per Gaussian
    bone: np.ndarray            # (N,) bone index per Gaussian
    arc: np.ndarray             # (N,) arc position in (0, 1)

    @property
    def height(self) -> float:
        return float(np.ptp(self.keypoints[:, 1]))


def sample_spec(rng: np.random.Generator, gaussians_per_bone: int = GAUSSIANS_PER_BONE
                ) -> FigureSpec:
    angles = rng.uniform(-ANGLE_LIMIT, ANGLE_LIMIT, (NUM_JOINTS, 3))
    # Joints without children (wrists, ankles, ears) do not move anything.
    leaf = np.setdiff1d(np.arange(NUM_JOINTS), PARENTS[PARENTS >= 0])
    angles[leaf] = 0.0
    angles[ROOT, [0, 2]] *= 0.25  # keep the figure roughly upright
    offsets = REST_OFFSETS * rng.uniform(0.9, 1.1, (NUM_JOINTS, 1))
    root = np.array([rng.uniform(-0.1, 0.1), 0.0, rng.uniform(-0.1, 0.1)])
    return FigureSpec(angles, offsets, root, gaussians_per_bone)


def _frame_from_axis(axis: np.ndarray) -> np.ndarray:
    """Rotation whose first column is ``axis`` (unit)."""
    a = axis / np.linalg.norm(axis)
    helper = np.array([0.0, 0.0, 1.0]) if abs(a[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    b = np.cross(a, helper)
    b /= np.linalg.norm(b)
    c = np.cross(a, b)
    return np.stack([a, b, c], axis=1)


def build_figure(spec: FigureSpec, rng: np.random.Generator | None = None,
                 feature_dim: int = 8) -> Figure:
    """Place Gaussians along every bone of ``spec``."""
    rng = rng if rng is not None else np.random.default_rng(0)
    kp, _ = forward_kinematics(spec.angles, spec.offsets, spec.root)
    gpb = spec.gaussians_per_bone
    t = (np.arange(gpb) + 0.5) / gpb
    pos, quat, scale, color, emb, bone_id, arc = [], [], [], [], [], [], []
    palette = rng.uniform(0.15, 0.95, (NUM_BONES, 3))
    for b, child in enumerate(BONE_CHILD):
        a, c = kp[PARENTS[child]], kp[child]
        vec = c - a
        length = np.linalg.norm(vec)
        q = rotmat_to_quat(_frame_from_axis(vec))
        thick = BONE_THICKNESS[b]
        along = max(length / gpb, 0.5 * thick)
        for k in range(gpb):
            pos.append(a + t[k] * vec)
            quat.append(q)
            scale.append((along, thick, thick))
            color.append(np.clip(palette[b] + rng.normal(0.0, 0.03, 3), 0.02, 0.98))
            emb.append((b / NUM_BONES, t[k], 0.5))
            bone_id.append(b)
            arc.append(t[k])
    n = len(pos)
    gs = GaussianSet(
        position=np.array(pos),
        rotation=np.array(quat),
        scale=np.log(np.array(scale)),
        opacity=np.full(n, logit(0.95)),
        color=logit(np.array(color)),
        feature=rng.normal(0.0, 1.0, (n, feature_dim)),
    )
    return Figure(spec, gs, kp, np.array(emb), np.array(bone_id), np.array(arc))


def generate_figure(seed: int, gaussians_per_bone: int = GAUSSIANS_PER_BONE,
                    feature_dim: int = 8) -> Figure:
    """Random posed figure; identical for identical ``seed``."""
    rng = np.random.default_rng(seed)
    spec = sample_spec(rng, gaussians_per_bone)
    return build_figure(spec, rng, feature_dim)


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """3x4 world-to-camera transform for a camera at ``eye`` looking at ``target``.

    Camera axes follow the x-right, y-down, z-forward convention.
    """
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    down = -np.asarray(up, dtype=np.float64)
    down = down - z * (down @ z)
    down /= np.linalg.norm(down)
    x = np.cross(down, z)
    R = np.stack([x, down, z])
    return np.concatenate([R, (-R @ eye)[:, None]], axis=1)


def camera_ring(n: int = 8, radius: float = RING_RADIUS, target=FIGURE_CENTER,
                image_size: int = 512, focal_ratio: float = FOCAL_RATIO) -> list[Camera]:
    """``n`` cameras evenly spaced on a horizontal circle, all looking at ``target``."""
    if n < 2:
        raise ValueError("camera ring needs at least 2 cameras")
    if radius <= 0:
        raise ValueError("ring radius must be positive")
    target = np.asarray(target, dtype=np.float64)
    f = focal_ratio * image_size
    c = (image_size - 1) / 2.0
    cams = []
    for i in range(n):
        theta = 2.0 * np.pi * i / n
        eye = target + radius * np.array([np.sin(theta), 0.0, np.cos(theta)])
        cams.append(Camera(f, f, c, c, image_size, image_size, look_at(eye, target)))
    return cams


@dataclass
class DatasetSample:
    cameras: list
    source: tuple               # indices of the two neighbouring source views
    target: int                 # held-out view index
    color: list                 # per view (H, W, 3)
    depth: list                 # per view (H, W)
    mask: list                  # per view (H, W) bool
    embed: list                 # per view (H, W, 3)
    keypoints: np.ndarray       # (19, 3)
    keypoints2d: list           # per view (19, 2)
    figure: Figure | None = None
    meta: dict = field(default_factory=dict)

    @property
    def num_views(self) -> int:
        return len(self.cameras)


def render_views(figure: Figure, cameras, background=(0.0, 0.0, 0.0)):
    """Ground-truth color, depth, mask and embedding images for each camera."""
    g = figure.gaussians.activate()
    g_emb = Gaussians(g.position, g.rotation, g.scale, g.opacity, g.color, figure.embedding)
    out = {"color": [], "depth": [], "mask": [], "embed": []}
    for cam in cameras:
        r = rasterize(g, cam, background)
        e = rasterize(g_emb, cam, background)
        out["color"].append(r.color)
        out["depth"].append(r.depth)
        out["mask"].append(r.alpha > 0.5)
        out["embed"].append(e.feature)
    return out


def choose_views(n: int, seed: int) -> tuple[tuple[int, int], int]:
    """Seeded (source pair, target): two neighbouring ring views and one other view."""
    rng = np.random.default_rng(seed)
    s = int(rng.integers(n))
    source = (s, (s + 1) % n)
    others = [i for i in range(n) if i not in source]
    return source, int(rng.choice(others))


def make_sample(figure: Figure, cameras, seed: int, views=None) -> DatasetSample:
    """Render ground truth for every camera (or only ``views``; the rest stay None)."""
    n = len(cameras)
    source, target = choose_views(n, seed)
    wanted = range(n) if views is None else sorted(set(views))
    imgs = render_views(figure, [cameras[i] for i in wanted])
    full = {k: [None] * n for k in imgs}
    for slot, i in enumerate(wanted):
        for k in imgs:
            full[k][i] = imgs[k][slot]
    kp2d = [cam.project(figure.keypoints) for cam in cameras]
    return DatasetSample(list(cameras), source, target, full["color"], full["depth"],
                         full["mask"], full["embed"], figure.keypoints.copy(), kp2d, figure,
                         {"seed": int(seed)})


def reference_sample(seed: int = 0, image_size: int = 256, n_views: int = 8,
                     gaussians_per_bone: int = GAUSSIANS_PER_BONE) -> DatasetSample:
    """Figure ``seed`` seen by the default camera ring."""
    fig = generate_figure(seed, gaussians_per_bone)
    return make_sample(fig, camera_ring(n_views, image_size=image_size), seed)
