"""File formats: Gaussian PLY, PFM, PNG, JSON, weight checkpoints and the dataset layout."""
from __future__ import annotations

import json
import math
import os
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .core import Camera, GaussianSet

POSE_MAGIC = b"HFGPOSE1"
DECODER_MAGIC = b"HFGDEC1\x00"


class FormatError(ValueError):
    """A file could not be parsed; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


# -- PLY ------------------------------------------------------------------------

def ply_properties(feature_dim: int) -> list[str]:
    return (["x", "y", "z"] + [f"rot_{i}" for i in range(4)] + [f"scale_{i}" for i in range(3)]
            + ["opacity", "r", "g", "b"] + [f"feat_{i}" for i in range(feature_dim)])


def write_ply(path, gs: GaussianSet) -> None:
    """Binary little-endian PLY holding raw (pre-activation) float32 parameters."""
    props = ply_properties(gs.feature_dim)
    header = ["ply", "format binary_little_endian 1.0",
              f"comment hfg_feature_dim {gs.feature_dim}", f"element vertex {len(gs)}"]
    header += [f"property float {p}" for p in props]
    header.append("end_header")
    data = np.concatenate([gs.position, gs.rotation, gs.scale, gs.opacity[:, None],
                           gs.color, gs.feature], axis=1).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(data.tobytes())


def read_ply(path) -> GaussianSet:
    raw = Path(path).read_bytes()
    if not raw.startswith(b"ply\n"):
        raise FormatError("missing 'ply' magic", 0)
    end = raw.find(b"end_header\n")
    if end < 0:
        raise FormatError("missing end_header", len(raw))
    body = end + len(b"end_header\n")
    feature_dim, count, props = None, None, []
    offset = 0
    for line in raw[:end].decode("ascii", errors="replace").split("\n"):
        parts = line.split()
        if parts[:2] == ["format", "binary_little_endian"]:
            pass
        elif parts[:1] == ["format"]:
            raise FormatError(f"unsupported PLY format {' '.join(parts[1:])!r}", offset)
        elif parts[:2] == ["comment", "hfg_feature_dim"]:
            feature_dim = int(parts[2])
        elif parts[:2] == ["element", "vertex"]:
            count = int(parts[2])
        elif parts[:1] == ["property"]:
            if parts[1] != "float":
                raise FormatError(f"property {parts[-1]} is not float32", offset)
            props.append(parts[2])
        offset += len(line) + 1
    if count is None:
        raise FormatError("no vertex element", 0)
    if feature_dim is None:
        feature_dim = sum(p.startswith("feat_") for p in props)
    if props != ply_properties(feature_dim):
        raise FormatError("unexpected vertex property layout", 0)
    width = len(props)
    need = count * width * 4
    if len(raw) - body < need:
        raise FormatError(f"truncated vertex data: need {need} bytes", len(raw))
    data = np.frombuffer(raw, dtype="<f4", count=count * width, offset=body)
    data = data.reshape(count, width).astype(np.float64)
    return GaussianSet(position=data[:, 0:3], rotation=data[:, 3:7], scale=data[:, 7:10],
                       opacity=data[:, 10], color=data[:, 11:14], feature=data[:, 14:])


# -- PFM ------------------------------------------------------------------------

def write_pfm(path, image: np.ndarray) -> None:
    """Little-endian PFM; 1-channel ("Pf") or 3-channel ("PF")."""
    img = np.asarray(image, dtype="<f4")
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[..., 0]
    if img.ndim == 2:
        tag = b"Pf"
    elif img.ndim == 3 and img.shape[2] == 3:
        tag = b"PF"
    else:
        raise ValueError(f"PFM stores 1 or 3 channels, got shape {img.shape}")
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(tag + b"\n" + f"{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    lines, pos = [], 0
    for _ in range(3):
        nl = raw.find(b"\n", pos)
        if nl < 0:
            raise FormatError("truncated PFM header", pos)
        lines.append((raw[pos:nl].decode("ascii", errors="replace").strip(), pos))
        pos = nl + 1
    tag, _ = lines[0]
    if tag not in ("Pf", "PF"):
        raise FormatError(f"bad PFM magic {tag!r}", 0)
    try:
        w, h = (int(v) for v in lines[1][0].split())
        scale = float(lines[2][0])
    except ValueError as exc:
        raise FormatError(f"bad PFM header: {exc}", lines[1][1]) from exc
    channels = 3 if tag == "PF" else 1
    dtype = "<f4" if scale < 0 else ">f4"
    count = w * h * channels
    if len(raw) - pos < count * 4:
        raise FormatError("truncated PFM data", len(raw))
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=pos).astype(np.float32)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return data.reshape(shape)[::-1].copy()


# -- PNG / JSON -----------------------------------------------------------------

def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, image: np.ndarray) -> None:
    """Float image in [0, 1] (or a bool mask) as 8-bit PNG."""
    img = np.asarray(image)
    arr = np.where(img, 255, 0).astype(np.uint8) if img.dtype == bool else to_uint8(img)
    Image.fromarray(arr).save(path, format="PNG")


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im).astype(np.float64) / 255.0


def read_mask(path) -> np.ndarray:
    return read_png(path) > 0.5


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return _jsonable(obj.item())
    if isinstance(obj, float) and not math.isfinite(obj):
        return "inf" if obj > 0 else ("-inf" if obj < 0 else "nan")
    return obj


def dumps_json(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"


def write_json(path, obj) -> None:
    Path(path).write_text(dumps_json(obj))


def read_json(path):
    return json.loads(Path(path).read_text())


# -- checkpoints ------------------------------------------------------------------

def write_checkpoint(path, weights: dict, magic: bytes = POSE_MAGIC) -> None:
    """Magic, then per layer: u32 name length, name, u32 rows, u32 cols, float32 data."""
    if len(magic) != 8:
        raise ValueError("checkpoint magic must be 8 bytes")
    with open(path, "wb") as fh:
        fh.write(magic)
        for name, arr in weights.items():
            a = np.asarray(arr)
            if a.ndim > 2:
                raise ValueError(f"layer {name} has rank {a.ndim}")
            rows, cols = (1, a.shape[0]) if a.ndim == 1 else a.shape
            key = name.encode("utf-8")
            fh.write(struct.pack("<I", len(key)) + key + struct.pack("<II", rows, cols))
            fh.write(a.astype("<f4").tobytes())


def read_checkpoint(path, magic: bytes = POSE_MAGIC) -> dict:
    """Inverse of :func:`write_checkpoint`; layers named ``*.bias`` come back 1-D."""
    raw = Path(path).read_bytes()
    if raw[:8] != magic:
        raise FormatError(f"bad checkpoint magic {raw[:8]!r}, expected {magic!r}", 0)
    out, pos = {}, 8
    while pos < len(raw):
        if pos + 4 > len(raw):
            raise FormatError("truncated layer header", pos)
        (nlen,) = struct.unpack_from("<I", raw, pos)
        if pos + 4 + nlen + 8 > len(raw):
            raise FormatError("truncated layer header", pos)
        name = raw[pos + 4:pos + 4 + nlen].decode("utf-8")
        rows, cols = struct.unpack_from("<II", raw, pos + 4 + nlen)
        pos += 4 + nlen + 8
        if pos + rows * cols * 4 > len(raw):
            raise FormatError(f"truncated data for layer {name}", pos)
        a = np.frombuffer(raw, dtype="<f4", count=rows * cols, offset=pos).astype(np.float32)
        out[name] = a.copy() if name.endswith(".bias") else a.reshape(rows, cols).copy()
        pos += rows * cols * 4
    return out


# -- dataset layout ---------------------------------------------------------------

def sample_dir(root, index: int) -> Path:
    return Path(root) / f"sample_{index:05d}"


def write_sample(directory, sample, include_figure: bool = True) -> Path:
    """Write one DatasetSample; views never rendered (None) are skipped."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i, cam in enumerate(sample.cameras):
        write_json(d / f"cam_{i}.json", cam.to_dict())
        write_json(d / f"kp2d_{i}.json", {"keypoints": sample.keypoints2d[i]})
        if sample.color[i] is None:
            continue
        write_png(d / f"color_{i}.png", sample.color[i])
        write_pfm(d / f"depth_{i}.pfm", sample.depth[i])
        write_png(d / f"mask_{i}.png", sample.mask[i])
        write_pfm(d / f"embed_{i}.pfm", sample.embed[i])
    write_json(d / "kp3d.json", {"keypoints": sample.keypoints})
    meta = dict(sample.meta)
    meta.update({"source": list(sample.source), "target": sample.target,
                 "num_views": sample.num_views})
    write_json(d / "meta.json", meta)
    if include_figure and sample.figure is not None:
        write_ply(d / "figure.ply", sample.figure.gaussians)
        np.save(d / "figure_embedding.npy", sample.figure.embedding)
    return d


def read_sample(directory):
    from .scenegen import DatasetSample

    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"no sample directory {d}")
    meta = read_json(d / "meta.json")
    n = int(meta["num_views"])
    cams = [Camera.from_dict(read_json(d / f"cam_{i}.json")) for i in range(n)]
    color, depth, mask, embed = [], [], [], []
    for i in range(n):
        if (d / f"color_{i}.png").exists():
            color.append(read_png(d / f"color_{i}.png"))
            depth.append(read_pfm(d / f"depth_{i}.pfm").astype(np.float64))
            mask.append(read_mask(d / f"mask_{i}.png"))
            embed.append(read_pfm(d / f"embed_{i}.pfm").astype(np.float64))
        else:
            color.append(None)
            depth.append(None)
            mask.append(None)
            embed.append(None)
    kp3d = np.asarray(read_json(d / "kp3d.json")["keypoints"], dtype=np.float64)
    kp2d = [np.asarray(read_json(d / f"kp2d_{i}.json")["keypoints"], dtype=np.float64)
            for i in range(n)]
    return DatasetSample(cams, tuple(meta["source"]), int(meta["target"]), color, depth, mask,
                         embed, kp3d, kp2d, None, meta)


def list_samples(root) -> list[Path]:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"no dataset directory {root}")
    return sorted(p for p in root.iterdir() if p.is_dir() and p.name.startswith("sample_"))


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p
