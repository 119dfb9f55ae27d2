"""Command-line interface: ``hfsplat <command> [options]``.

Exit codes: 0 success, 1 invalid input or usage, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, io
from .config import RunConfig, load_config
from .core import Camera, GaussianSet
from .grad import DivergenceError

log = logging.getLogger("hfsplat")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def version_string() -> str:
    """``git describe``-style version; the package version when git is unavailable."""
    try:
        res = subprocess.run(["git", "describe", "--tags", "--always", "--dirty"],
                             cwd=Path(__file__).resolve().parent, capture_output=True,
                             text=True, timeout=5)
        if res.returncode == 0 and res.stdout.strip():
            return f"v{__version__}-g{res.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


def write_manifest(out: Path, command: str, config: RunConfig, seed: int, extra=None) -> None:
    manifest = {"command": command, "config_hash": config.digest(), "seed": int(seed),
                "version": version_string()}
    if extra:
        manifest.update(extra)
    io.write_json(out / "manifest.json", manifest)


def _out_dir(args, default: str | None = None) -> Path:
    out = args.out or default
    if not out:
        raise UsageError("--out is required for this command")
    return io.ensure_dir(out)


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    for name in ("iterations", "backbone", "epochs", "image_size", "num_gaussians", "dataset",
                 "feature_mode"):
        val = getattr(args, name, None)
        if val is not None:
            changes[name] = val
    return cfg.replace(**changes) if changes else cfg


# -- commands ------------------------------------------------------------------------

def cmd_gen(args) -> int:
    from .scenegen import camera_ring, generate_figure, make_sample

    cfg = _config(args)
    out = _out_dir(args)
    cams = camera_ring(cfg.num_views, image_size=cfg.image_size)
    for i in range(args.count):
        seed = cfg.seed + i
        sample = make_sample(generate_figure(seed), cams, seed)
        io.write_sample(io.sample_dir(out, i), sample)
    write_manifest(out, "gen", cfg, cfg.seed, {"count": args.count})
    print(f"wrote {args.count} sample(s) to {out}")
    return EXIT_OK


def cmd_optimize(args) -> int:
    from .pipeline import optimize_scene, save_state

    cfg = _config(args)
    out = _out_dir(args, cfg.out)
    cfg = cfg.replace(out=str(out))

    def progress(step, rep):
        if step % 100 == 0:
            log.info("iter %d total %.5f", step, rep.total)

    res = optimize_scene(cfg, callback=progress)
    save_state(out, res.gaussians, res.decoder, res.pose_weights)
    io.write_json(out / "losses.json", [r.to_dict() for r in res.history])
    io.write_json(out / "metrics.json", res.metrics)
    write_manifest(out, "optimize", cfg.replace(out=""), cfg.seed)
    m = res.metrics
    print(f"held-out PSNR {m['psnr_init']:.2f} -> {m['psnr_final']:.2f} dB; "
          f"embedding MSE {m['embed_mse_init']:.5f} -> {m['embed_mse_final']:.5f}")
    return EXIT_OK


def cmd_train_pose(args) -> int:
    from .pipeline import pose_sample_from_views, synthetic_pose_dataset
    from .posenet import PoseTrainConfig, evaluate_pose, train_pose

    cfg = _config(args)
    out = _out_dir(args, cfg.out)
    if cfg.dataset:
        dirs = io.list_samples(cfg.dataset)
        if cfg.train_samples:
            dirs = dirs[:cfg.train_samples + args.test]
        samples = [pose_sample_from_views(io.read_sample(d), cfg.num_points, cfg.seed + i,
                                          args.dim) for i, d in enumerate(dirs)]
    else:
        total = args.train + args.test
        samples = synthetic_pose_dataset(range(cfg.seed, cfg.seed + total), args.image_size_pose,
                                         cfg.num_points, args.dim)
    if len(samples) <= args.test:
        raise ValueError(f"need more than {args.test} samples, found {len(samples)}")
    split = len(samples) - args.test
    train, test = samples[:split], samples[split:]
    tcfg = PoseTrainConfig(backbone=cfg.backbone, dim=args.dim, epochs=cfg.epochs,
                           lr=cfg.pose_lr, weight_decay=cfg.weight_decay,
                           batch_size=cfg.batch_size, seed=cfg.seed, k=cfg.knn_k,
                           schedule=cfg.pose_schedule)
    weights, tlog = train_pose(train, tcfg, val=test or None)
    io.write_checkpoint(out / "pose.ckpt", weights, io.POSE_MAGIC)
    result = {"train_mpjpe": evaluate_pose(weights, train), "log": tlog.epochs}
    if test:
        result["test_mpjpe"] = evaluate_pose(weights, test)
    io.write_json(out / "train_log.json", result)
    write_manifest(out, "train-pose", cfg.replace(out=""), cfg.seed,
                   {"dim": args.dim, "train": len(train), "test": len(test)})
    print(f"{cfg.backbone}: train error {result['train_mpjpe']:.4f}"
          + (f", test error {result['test_mpjpe']:.4f}" if test else ""))
    return EXIT_OK


def cmd_render(args) -> int:
    from .featdec import DecoderWeights, decode
    from .splat import render

    out = _out_dir(args)
    gs = io.read_ply(args.ply)
    cam = Camera.from_dict(io.read_json(args.camera))
    bg = np.asarray(args.background, dtype=np.float64)
    r = render(gs, cam, bg)
    io.write_png(out / "color.png", r.color)
    io.write_pfm(out / "depth.pfm", r.depth)
    io.write_pfm(out / "alpha.pfm", r.alpha)
    if args.decoder:
        dec = DecoderWeights({k: v.astype(np.float64) for k, v in
                              io.read_checkpoint(args.decoder, io.DECODER_MAGIC).items()})
        dec.validate()
        io.write_pfm(out / "embed.pfm", decode(r.feature, r.alpha, dec))
    print(f"rendered {len(gs)} Gaussians at {cam.width}x{cam.height} to {out}")
    return EXIT_OK


def _load_image(path) -> np.ndarray:
    p = Path(path)
    if p.suffix.lower() == ".pfm":
        return io.read_pfm(p).astype(np.float64)
    return io.read_png(p)


def benchmark(num_gaussians: int, size: int, frames: int, seed: int) -> dict:
    """Frames per second of the tiled renderer on a random scene in front of the camera."""
    from .core import logit
    from .splat import render, set_threads

    rng = np.random.default_rng(seed)
    n = num_gaussians
    f = 1.2 * size
    cam = Camera(f, f, (size - 1) / 2, (size - 1) / 2, size, size,
                 np.hstack([np.eye(3), np.zeros((3, 1))]))
    z = rng.uniform(3.0, 6.0, n)
    uv = rng.uniform(0, size, (n, 2))
    pos = np.stack([(uv[:, 0] - cam.cx) * z / f, (uv[:, 1] - cam.cy) * z / f, z], axis=1)
    gs = GaussianSet(position=pos, rotation=rng.normal(size=(n, 4)),
                     scale=np.log(rng.uniform(0.005, 0.03, (n, 3))),
                     opacity=logit(rng.uniform(0.2, 0.9, n)), color=rng.normal(size=(n, 3)),
                     feature=rng.normal(size=(n, 8)))
    render(gs, cam)  # compile / warm up
    times = []
    for _ in range(frames):
        t0 = time.perf_counter()
        render(gs, cam)
        times.append(time.perf_counter() - t0)
    sec = float(np.median(times))
    return {"fps": 1.0 / sec, "seconds_per_frame": sec, "gaussians": n, "resolution": size,
            "threads": set_threads(None)}


def cmd_eval(args) -> int:
    from .losses import MetricReport, mpjpe, mse, pck, psnr, ssim

    out = _out_dir(args)
    rep = MetricReport()
    if args.pred or args.gt:
        if not (args.pred and args.gt):
            raise UsageError("--pred and --gt must be given together")
        pred, gt = _load_image(args.pred), _load_image(args.gt)
        if pred.shape != gt.shape:
            raise ValueError(f"image sizes differ: {pred.shape} vs {gt.shape}")
        rep.psnr = psnr(pred, gt)
        rep.ssim = ssim(pred, gt)
        rep.extra["mse"] = mse(pred, gt)
    if args.pred_embed or args.gt_embed:
        if not (args.pred_embed and args.gt_embed):
            raise UsageError("--pred-embed and --gt-embed must be given together")
        pe, ge = _load_image(args.pred_embed), _load_image(args.gt_embed)
        if pe.shape != ge.shape:
            raise ValueError(f"embedding sizes differ: {pe.shape} vs {ge.shape}")
        mask = io.read_mask(args.mask) if args.mask else None
        rep.feature_mse = mse(pe, ge, mask)
    if args.pred_kp or args.gt_kp:
        if not (args.pred_kp and args.gt_kp):
            raise UsageError("--pred-kp and --gt-kp must be given together")
        pk = np.asarray(io.read_json(args.pred_kp)["keypoints"], dtype=np.float64)
        gk = np.asarray(io.read_json(args.gt_kp)["keypoints"], dtype=np.float64)
        if pk.shape != gk.shape:
            raise ValueError(f"keypoint shapes differ: {pk.shape} vs {gk.shape}")
        if pk.shape[-1] == 2:
            rep.pck = pck(pk, gk)
        rep.mpjpe = mpjpe(pk, gk)
    timing = None
    if args.benchmark:
        timing = benchmark(args.bench_gaussians, args.bench_size, args.bench_frames,
                           args.seed if args.seed is not None else 0)
        rep.extra["fps"] = timing["fps"]
        io.write_json(out / "benchmark.json", timing)
    (out / "metrics.json").write_text(rep.to_json())
    (out / "metrics.txt").write_text(rep.to_text())
    sys.stdout.write(rep.to_text())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    seed = args.seed if args.seed is not None else 0
    report = run_suite(range(seed, seed + args.seeds))
    summary = report.to_dict()
    for key, err in summary["worst"].items():
        print(f"{key:<28s} max rel err {err:.3e}")
    print(f"{len(report.results)} checks, {'PASS' if report.passed else 'FAIL'}")
    if args.out:
        out = io.ensure_dir(args.out)
        io.write_json(out / "gradcheck.json", summary)
    if not report.passed:
        for line in summary["failures"]:
            print("  " + line, file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


# -- parser ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="key = value config file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS)
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")

    p = _Parser(prog="hfsplat", description="Gaussian feature-splatting toolkit",
                parents=[common])
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen", parents=[common], help="generate synthetic samples")
    g.add_argument("--count", type=int, default=1)
    g.add_argument("--image-size", dest="image_size", type=int)
    g.set_defaults(func=cmd_gen)

    o = sub.add_parser("optimize", parents=[common], help="fit Gaussians to one scene")
    o.add_argument("--dataset")
    o.add_argument("--iterations", type=int)
    o.add_argument("--num-gaussians", dest="num_gaussians", type=int)
    o.add_argument("--image-size", dest="image_size", type=int)
    o.add_argument("--feature-mode", dest="feature_mode", choices=("splat", "shared"))
    o.set_defaults(func=cmd_optimize)

    t = sub.add_parser("train-pose", parents=[common], help="train a pose backbone")
    t.add_argument("--dataset")
    t.add_argument("--backbone", choices=("pointnet", "dgcnn", "hybrid"))
    t.add_argument("--dim", type=int, choices=(2, 3), default=3)
    t.add_argument("--epochs", type=int)
    t.add_argument("--train", type=int, default=16, help="synthetic training figures")
    t.add_argument("--test", type=int, default=4, help="held-out figures")
    t.add_argument("--image-size", dest="image_size_pose", type=int, default=128)
    t.set_defaults(func=cmd_train_pose)

    r = sub.add_parser("render", parents=[common], help="render a Gaussian PLY")
    r.add_argument("--ply", required=True)
    r.add_argument("--camera", required=True, help="camera JSON")
    r.add_argument("--decoder", help="decoder checkpoint for an embedding image")
    r.add_argument("--background", type=float, nargs=3, default=(0.0, 0.0, 0.0))
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", parents=[common], help="metric report")
    e.add_argument("--pred")
    e.add_argument("--gt")
    e.add_argument("--pred-embed", dest="pred_embed")
    e.add_argument("--gt-embed", dest="gt_embed")
    e.add_argument("--mask")
    e.add_argument("--pred-kp", dest="pred_kp")
    e.add_argument("--gt-kp", dest="gt_kp")
    e.add_argument("--benchmark", action="store_true", help="also time the tiled renderer")
    e.add_argument("--bench-gaussians", dest="bench_gaussians", type=int, default=100_000)
    e.add_argument("--bench-size", dest="bench_size", type=int, default=512)
    e.add_argument("--bench-frames", dest="bench_frames", type=int, default=5)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    c.add_argument("--seeds", type=int, default=20)
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        for name in ("config", "seed", "threads", "out"):
            if not hasattr(args, name):
                setattr(args, name, None)
        if args.command is None:
            raise UsageError(parser.format_usage() + "hfsplat: error: a command is required")
        if args.threads is not None:
            if args.threads < 1:
                raise UsageError("--threads must be at least 1")
            from .splat import set_threads
            set_threads(args.threads)
        return args.func(args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_INVALID
    except (FloatingPointError, DivergenceError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, FileNotFoundError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
