"""Per-scene optimisation with the combined loss, and pose-dataset helpers.

One optimisation step renders a randomly chosen training view and applies
L_image, L_depth and L_feature to it. Every ``pose_every`` steps the two
source views are rendered as depth maps, unprojected through the ground-truth
masks, sampled to a fixed-size cloud and pushed through the pose network;
L_pose then back-propagates through the network, the unprojection and the
rendered depth into the Gaussians.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .config import RunConfig
from .core import PARAM_NAMES, GaussianSet, logit
from .featdec import DecoderWeights, decode, decode_backward, init_decoder
from .grad import DivergenceError, OptimizerState, adam_step, backward_render
from .losses import (LossReport, image_loss_terms, loss_depth, loss_feature, mpjpe,
                     mse, psnr)
from .posenet import (PoseSample, PoseWeights, forward_pose, init_pose_weights, knn_graph,
                      pose_forward_backward)
from .scenegen import DatasetSample, reference_sample
from .splat import RenderOutput, render
from .unproject import cloud_from_views, merge, pixel_rays, unproject_depth
from .unproject import sample as sample_points

log = logging.getLogger(__name__)

DEC_PREFIX = "dec."
POSE_PREFIX = "pose."


@dataclass
class OptimizeResult:
    gaussians: GaussianSet
    decoder: dict
    pose_weights: dict
    history: list = field(default_factory=list)     # LossReport per iteration
    metrics: dict = field(default_factory=dict)


def init_gaussians(sample: DatasetSample, count: int, feature_dim: int,
                   rng: np.random.Generator) -> GaussianSet:
    """Gaussians at unprojected source-view depth pixels; grey, faint and isotropic."""
    cloud = cloud_from_views(sample.depth, sample.mask, sample.cameras, sample.source)
    if len(cloud) == 0:
        raise ValueError("no foreground points in the source views")
    idx = np.sort(rng.choice(len(cloud), min(count, len(cloud)), replace=False))
    pts = cloud.points[idx]
    n = len(pts)
    # mean distance to the three nearest neighbours sets the initial size
    d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1)
    np.fill_diagonal(d2, np.inf)
    k = min(3, n - 1) if n > 1 else 0
    nn = np.sqrt(np.partition(d2, k - 1, axis=1)[:, :k]).mean(1) if k else np.full(n, 0.05)
    scale = np.clip(nn, 1e-3, 0.2)
    rot = np.zeros((n, 4))
    rot[:, 0] = 1.0
    return GaussianSet(position=pts, rotation=rot, scale=np.log(np.repeat(scale[:, None], 3, 1)),
                       opacity=np.full(n, logit(0.1)), color=np.zeros((n, 3)),
                       feature=rng.normal(0.0, 1.0, (n, feature_dim)))


def load_scene(config: RunConfig) -> DatasetSample:
    if config.dataset:
        return io.read_sample(io.sample_dir(config.dataset, config.sample))
    return reference_sample(config.scene_seed, config.image_size, config.num_views)


def _pack(gs: GaussianSet, dec: dict, pose: dict) -> dict:
    p = dict(gs.params())
    p.update({DEC_PREFIX + k: v for k, v in dec.items()})
    p.update({POSE_PREFIX + k: v for k, v in pose.items()})
    return p


def _unpack(p: dict):
    gs = GaussianSet(**{k: p[k] for k in PARAM_NAMES})
    dec = {k[len(DEC_PREFIX):]: v for k, v in p.items() if k.startswith(DEC_PREFIX)}
    pose = {k[len(POSE_PREFIX):]: v for k, v in p.items() if k.startswith(POSE_PREFIX)}
    return gs, dec, pose


def _rates(config: RunConfig, keys) -> tuple[dict, dict]:
    lrs = config.learning_rates
    lr, wd = {}, {}
    for k in keys:
        if k.startswith(DEC_PREFIX):
            lr[k], wd[k] = lrs["decoder"], config.weight_decay
        elif k.startswith(POSE_PREFIX):
            lr[k], wd[k] = lrs["pose"], config.weight_decay
        else:
            lr[k], wd[k] = lrs[k], 0.0
    return lr, wd


def predicted_embedding(out: RenderOutput, decoder, mode: str) -> np.ndarray:
    if mode == "shared":
        return np.where(out.alpha[..., None] > 1e-6, out.color, 0.0)
    return decode(out.feature, out.alpha, DecoderWeights(decoder))


def held_out_metrics(gs: GaussianSet, decoder, sample: DatasetSample, mode: str) -> dict:
    v = sample.target
    out = render(gs, sample.cameras[v])
    emb = predicted_embedding(out, decoder, mode)
    return {"psnr": psnr(out.color, sample.color[v]),
            "embed_mse": mse(emb, sample.embed[v], sample.mask[v])}


def _pose_term(gs, pose_w, sample, config, step):
    """L_pose through source-view depth renders; returns (loss, render grads, pose grads)."""
    weights = PoseWeights(pose_w)
    renders = {v: render(gs, sample.cameras[v], keep_state=True) for v in sample.source}
    clouds = [unproject_depth(renders[v].depth, sample.mask[v], sample.cameras[v], view=v)
              for v in sample.source]
    merged = merge(*clouds)
    sc = sample_points(merged, config.num_points, seed=config.seed * 1_000_003 + step)
    nbr = None
    if weights.backbone != "pointnet":
        nbr = knn_graph(sc.points, config.knn_k)
    loss, pred, grads, g_x = pose_forward_backward(sc.points, weights, sample.keypoints,
                                                   sc.centroid, nbr, want_input=True)
    g_pred = 2.0 * (pred - sample.keypoints) / pred.size
    n = len(sc.index)
    g_pts = g_x - g_x.mean(axis=0) + g_pred.sum(axis=0) / n
    g_cloud = np.zeros((len(merged), 3))
    np.add.at(g_cloud, sc.index, g_pts)
    render_grads = []
    for v in sample.source:
        cam = sample.cameras[v]
        rows = merged.view == v
        g_d = np.zeros(cam.height * cam.width)
        rays = pixel_rays(cam).reshape(-1, 3)
        pix = merged.pixels[rows]
        np.add.at(g_d, pix, np.einsum("ij,ij->i", g_cloud[rows], rays[pix]))
        adj = RenderOutput(None, None, g_d.reshape(cam.shape), None)
        render_grads.append(backward_render(gs, cam, adj, forward=renders[v]))
    return loss, render_grads, grads


def optimize_scene(config: RunConfig, sample: DatasetSample | None = None,
                   callback=None) -> OptimizeResult:
    """Fit Gaussians, decoder and pose head to the training views of one scene."""
    config.validate()
    if sample is None:
        sample = load_scene(config)
    rng = np.random.default_rng(config.seed)
    train_views = [i for i in range(sample.num_views) if i != sample.target]
    gs = init_gaussians(sample, config.num_gaussians, config.feature_dim, rng)
    decoder = dict(init_decoder(config.feature_dim, config.embed_dim, config.seed))
    pose_w = dict(init_pose_weights(config.backbone, 3, config.seed))
    mode = config.feature_mode
    init_metrics = held_out_metrics(gs, decoder, sample, mode)

    params = _pack(gs, decoder, pose_w)
    lr, wd = _rates(config, params)
    state = OptimizerState()
    history = []
    out_dir = Path(config.out) if config.out else None

    for step in range(config.iterations):
        gs, decoder, pose_w = _unpack(params)
        v = train_views[int(rng.integers(len(train_views)))]
        cam = sample.cameras[v]
        mask = sample.mask[v]
        rep = LossReport()
        out = render(gs, cam, keep_state=True)
        if not (np.all(np.isfinite(out.color)) and np.all(np.isfinite(out.depth))):
            raise DivergenceError(f"diverged: non-finite render at iteration {step}")
        g_color = g_feat = g_depth = None
        dec_grads = {}
        if config.use_image:
            rep.l_mae, rep.l_ssim, g_mae, g_ssim = image_loss_terms(
                out.color, sample.color[v], mask, with_grad=True)
            rep.l_image = config.beta * rep.l_mae + config.gamma * rep.l_ssim
            g_color = config.beta * g_mae + config.gamma * g_ssim
        if config.use_depth:
            value, grads = loss_depth([out.depth], sample.depth[v], mask, config.depth_decay,
                                      with_grad=True)
            rep.l_depth, g_depth = value, grads[-1]
        if config.use_feature:
            if mode == "shared":
                emb = np.where(out.alpha[..., None] > 1e-6, out.color, 0.0)
                value, g_emb = loss_feature(emb, sample.embed[v], mask, with_grad=True)
                g_emb = np.where(out.alpha[..., None] > 1e-6, g_emb, 0.0)
                g_color = g_emb if g_color is None else g_color + g_emb
            else:
                dw = DecoderWeights(decoder)
                emb, cache = decode(out.feature, out.alpha, dw, with_cache=True)
                value, g_emb = loss_feature(emb, sample.embed[v], mask, with_grad=True)
                g_w, g_feat = decode_backward(cache, g_emb, dw)
                dec_grads = {DEC_PREFIX + k: g for k, g in g_w.items()}
            rep.l_feature = value
        adj = RenderOutput(g_color, g_feat, g_depth, None)
        bundle = backward_render(gs, cam, adj, forward=out)
        grads = {k: getattr(bundle, k) for k in PARAM_NAMES}
        grads.update(dec_grads)
        if config.use_pose and step % config.pose_every == 0:
            value, render_grads, pose_grads = _pose_term(gs, pose_w, sample, config, step)
            rep.l_pose = value
            for rg in render_grads:
                for k in PARAM_NAMES:
                    grads[k] = grads[k] + getattr(rg, k)
            grads.update({POSE_PREFIX + k: g for k, g in pose_grads.items()})
        if not np.isfinite(rep.total):
            raise DivergenceError(f"diverged: non-finite loss at iteration {step}")
        params, state = adam_step(params, grads, state, lr, wd)
        history.append(rep)
        if callback is not None:
            callback(step, rep)
        if out_dir is not None and (step + 1) % config.checkpoint_every == 0:
            save_state(out_dir / "checkpoints" / f"iter_{step + 1:06d}", *_unpack(params))

    gs, decoder, pose_w = _unpack(params)
    final = held_out_metrics(gs, decoder, sample, mode)
    metrics = {"psnr_init": init_metrics["psnr"], "psnr_final": final["psnr"],
               "embed_mse_init": init_metrics["embed_mse"], "embed_mse_final": final["embed_mse"],
               "held_out_view": sample.target, "num_gaussians": len(gs)}
    if config.use_pose:
        metrics["mpjpe_final"] = _pose_eval(gs, pose_w, sample, config)
    return OptimizeResult(gs, decoder, pose_w, history, metrics)


def _pose_eval(gs, pose_w, sample, config) -> float:
    depths = {v: render(gs, sample.cameras[v]).depth for v in sample.source}
    cloud = cloud_from_views(depths, sample.mask, sample.cameras, sample.source)
    sc = sample_points(cloud, config.num_points, config.seed)
    return mpjpe(forward_pose(sc.points, PoseWeights(pose_w), sc.centroid, k=config.knn_k),
                 sample.keypoints)


def save_state(directory, gs: GaussianSet, decoder: dict, pose_w: dict) -> Path:
    d = io.ensure_dir(directory)
    io.write_ply(d / "gaussians.ply", gs)
    io.write_checkpoint(d / "decoder.ckpt", decoder, io.DECODER_MAGIC)
    io.write_checkpoint(d / "pose.ckpt", pose_w, io.POSE_MAGIC)
    return d


# -- pose datasets -----------------------------------------------------------------

def pose_sample_from_views(sample: DatasetSample, num_points: int, seed: int,
                           dim: int = 3) -> PoseSample:
    """Merged source-view cloud of ground-truth depth, sampled and centred."""
    cloud = cloud_from_views(sample.depth, sample.mask, sample.cameras, sample.source)
    sc = sample_points(cloud, num_points, seed)
    if dim == 3:
        return PoseSample(sc.points, sc.centroid, sample.keypoints)
    t = sample.target
    return PoseSample(sc.points, sc.centroid, sample.keypoints2d[t], camera=sample.cameras[t])


def synthetic_pose_dataset(seeds, image_size: int = 128, num_points: int = 2048,
                           dim: int = 3, n_views: int = 8) -> list[PoseSample]:
    """Pose samples from generated figures; only the source views are rendered."""
    from .scenegen import camera_ring, choose_views, generate_figure, make_sample

    cams = camera_ring(n_views, image_size=image_size)
    out = []
    for seed in seeds:
        fig = generate_figure(int(seed))
        source, target = choose_views(n_views, int(seed))
        views = source + ((target,) if dim == 2 else ())
        ds = make_sample(fig, cams, int(seed), views=views)
        out.append(pose_sample_from_views(ds, num_points, int(seed), dim))
    return out
