"""Run configuration: flat ``key = value`` text files with ``#`` comments."""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .posenet import BACKBONES


@dataclass
class RunConfig:
    dataset: str = ""           # directory of sample_%05d folders; empty = synthetic
    sample: int = 0             # sample index inside the dataset
    scene_seed: int = 0         # figure seed when no dataset is given
    image_size: int = 256
    num_views: int = 8
    num_gaussians: int = 1000
    iterations: int = 2000
    seed: int = 0
    feature_dim: int = 8
    embed_dim: int = 3
    knn_k: int = 16
    num_points: int = 2048
    backbone: str = "hybrid"
    feature_mode: str = "splat"   # "splat" or "shared" (colour channels as embeddings)
    # per-group learning rates
    lr_position: float = 1.6e-4
    lr_rotation: float = 1e-3
    lr_scale: float = 5e-3
    lr_opacity: float = 5e-2
    lr_color: float = 2.5e-3
    lr_feature: float = 2.5e-3
    lr_decoder: float = 2e-4
    lr_pose: float = 2e-4
    weight_decay: float = 1e-5
    # losses
    use_image: bool = True
    use_depth: bool = True
    use_pose: bool = True
    use_feature: bool = True
    beta: float = 1.6
    gamma: float = 0.4
    depth_decay: float = 0.9
    pose_every: int = 5
    # output
    out: str = ""
    checkpoint_every: int = 500
    # pose-network training
    epochs: int = 20
    batch_size: int = 8
    pose_lr: float = 2e-4
    pose_schedule: str = "constant"   # or "cosine"
    train_samples: int = 0      # 0 = every sample in the dataset

    def __post_init__(self):
        self.validate()

    def validate(self) -> "RunConfig":
        positive = ("image_size", "num_views", "num_gaussians", "feature_dim", "embed_dim",
                    "knn_k", "num_points", "pose_every", "checkpoint_every", "batch_size")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("iterations", "epochs", "train_samples", "sample", "seed", "scene_seed"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.num_views < 3:
            raise ValueError("num_views must be at least 3 (two sources and a held-out view)")
        for f in fields(self):
            if f.name.startswith("lr_") or f.name in ("weight_decay", "pose_lr", "beta", "gamma"):
                if getattr(self, f.name) < 0:
                    raise ValueError(f"{f.name} must be non-negative")
        if not 0.0 < self.depth_decay <= 1.0:
            raise ValueError("depth_decay must lie in (0, 1]")
        if self.backbone not in BACKBONES:
            raise ValueError(f"backbone must be one of {BACKBONES}")
        if self.pose_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown pose_schedule {self.pose_schedule!r}")
        if self.feature_mode not in ("splat", "shared"):
            raise ValueError("feature_mode must be 'splat' or 'shared'")
        if self.feature_mode == "shared" and self.embed_dim != 3:
            raise ValueError("shared feature mode needs embed_dim = 3")
        if self.dataset and not Path(self.dataset).is_dir():
            raise ValueError(f"dataset path does not exist: {self.dataset}")
        return self

    @property
    def learning_rates(self) -> dict:
        return {"position": self.lr_position, "rotation": self.lr_rotation,
                "scale": self.lr_scale, "opacity": self.lr_opacity, "color": self.lr_color,
                "feature": self.lr_feature, "decoder": self.lr_decoder, "pose": self.lr_pose}

    def to_text(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in asdict(self).items())

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    def replace(self, **changes) -> "RunConfig":
        d = asdict(self)
        d.update(changes)
        return RunConfig(**d)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _parse_value(kind, text: str, key: str):
    if kind is bool or kind == "bool":
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {text!r}")
    if kind is int or kind == "int":
        try:
            return int(text)
        except ValueError:
            raise ValueError(f"{key}: expected an integer, got {text!r}") from None
    if kind is float or kind == "float":
        try:
            return float(text)
        except ValueError:
            raise ValueError(f"{key}: expected a number, got {text!r}") from None
    return text


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    values = asdict(base) if base is not None else {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        values[key] = _parse_value(_TYPES[key], value, key)
    return RunConfig(**values)


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ValueError(f"config file not found: {p}")
    return parse_config(p.read_text(), base)
