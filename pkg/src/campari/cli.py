"""Command-line entry point: train, render, eval-cameras, make-dataset, print-config."""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image

from .camera import ELEVATION, FX, FY, RADIUS, ROTATION, Dist, sample_prior_batch
from .camera_generator import predict_camera, predicted_marginals
from .config import ConfigError, RunConfig, build_config, load_config, reference_text
from .datasets import (DatasetError, ImageStore, Mixture, SyntheticSpec, generate_synthetic,
                       read_pose_record)
from .evaluation import evaluate_cameras
from .radiance_fields import LatentBundle
from .training import (CheckpointError, StageImages, TrainState, TrainingDiverged, checkpoint_load,
                       schedule_points, train)
from .volume_renderer import render_image

log = logging.getLogger("campari")

RENDER_MODES = ("rotation-sweep", "elevation-sweep", "fg-only", "bg-only", "shape-interp",
                "appearance-interp", "depth")


def output_root() -> Path:
    return Path(os.environ.get("CAMPARI_OUT", "out"))


def run_dir(cfg: RunConfig) -> Path:
    return output_root() / cfg.run_name


def _config_from_args(args) -> RunConfig:
    if args.config:
        return load_config(args.config, args.set, args.profile)
    return build_config("", args.set, args.profile)


# ---------------------------------------------------------------------------
# rendering

def _to_uint8(img: torch.Tensor) -> np.ndarray:
    return (img.clamp(0, 1).numpy() * 255.0 + 0.5).astype(np.uint8)


def _grid(frames: List[np.ndarray], cols: Optional[int] = None) -> np.ndarray:
    cols = cols or len(frames)
    rows = math.ceil(len(frames) / cols)
    h, w = frames[0].shape[:2]
    out = np.zeros((rows * h, cols * w) + frames[0].shape[2:], dtype=frames[0].dtype)
    for i, f in enumerate(frames):
        r, c = divmod(i, cols)
        out[r * h:(r + 1) * h, c * w:(c + 1) * w] = f
    return out


def base_camera(state: TrainState, seed: int) -> torch.Tensor:
    """One predicted camera from a seeded prior draw, shape ``(1, 5)``."""
    prior = state.prior
    cams = sample_prior_batch(prior, 1, torch.Generator().manual_seed(seed))
    with torch.no_grad():
        return predict_camera(state.ema_camgen, cams)


def render_frames(state: TrainState, mode: str, count: int, seed: int = 0, resolution: int = 0,
                  n_points: int = 0) -> Dict[str, List[torch.Tensor]]:
    """Render a diagnostic sequence with the EMA weights and midpoint sampling.

    Returns named image sequences; each tensor is ``(H, W, 3)`` (or ``(H, W)``
    for depth) with values in [0, 1].
    """
    if mode not in RENDER_MODES:
        raise ValueError(f"unknown render mode {mode!r}; choose from {', '.join(RENDER_MODES)}")
    if count < 1:
        raise ValueError("count must be >= 1")
    cfg = state.config
    res = resolution or cfg.render_resolution or cfg.final_resolution
    n_fg, n_bg = schedule_points(cfg.max_iters, cfg)
    if n_points:
        n_bg = 0 if not cfg.background else max(1, round(n_points * (1 - cfg.fg_fraction)))
        n_fg = n_points - n_bg
    gen = state.ema_gen
    rng = torch.Generator().manual_seed(seed)
    chunk = cfg.render_chunk or None

    def render(cams, z, **kw):
        with torch.no_grad():
            return render_image(gen, cams, z, n_fg, n_bg, res, None, chunk=chunk, **kw)

    cam0 = base_camera(state, seed)
    if mode in ("rotation-sweep", "elevation-sweep"):
        z = LatentBundle.sample(1, cfg.latent_dim, rng)
        cams = cam0.repeat(count, 1)
        if mode == "rotation-sweep":
            cams[:, ROTATION] = torch.linspace(-math.pi, math.pi, count + 1)[:-1]
        else:
            marg = predicted_marginals(state.ema_camgen, state.prior, 20000, torch.Generator().manual_seed(seed))
            lo, hi = np.quantile(marg["elevation"]["samples"], [0.01, 0.99])
            cams[:, ELEVATION] = torch.linspace(float(lo), float(hi), count)
        z = z.index(torch.zeros(count, dtype=torch.long))
        return {"frames": list(render(cams, z).rgb)}
    if mode in ("shape-interp", "appearance-interp"):
        z0 = LatentBundle.sample(1, cfg.latent_dim, rng)
        z1 = LatentBundle.sample(1, cfg.latent_dim, rng)
        shape = mode == "shape-interp"
        frames = []
        for t in np.linspace(0.0, 1.0, count):
            z = z0.lerp(z1, float(t), shape=shape, appearance=not shape)
            frames.append(render(cam0, z).rgb[0])
        return {"frames": frames}
    cams = predict_camera(state.ema_camgen, sample_prior_batch(state.prior, count, rng))
    z = LatentBundle.sample(count, cfg.latent_dim, rng)
    if mode == "depth":
        out = render(cams, z)
        near = (cams[:, RADIUS] - cfg.r_fg).reshape(-1, 1, 1)
        depth = ((out.depth_map - near) / (2 * cfg.r_fg)).clamp(0, 1)
        # pixels the foreground does not cover are shown as far
        depth = torch.where(out.fg_alpha > 1e-3, depth, torch.ones_like(depth))
        return {"depth": list(depth), "rgb": list(out.rgb)}
    full = render(cams, z)
    fg = render(cams, z, fg_only=True)
    bg = render(cams, z, bg_only=True) if gen.has_background else None
    named = {"full": list(full.rgb), "fg": list(fg.rgb)}
    if bg is not None:
        named["bg"] = list(bg.rgb)
    return named


def save_frames(named: Dict[str, List[torch.Tensor]], out_dir: Path) -> List[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, frames in named.items():
        if name == "depth":
            arrs = [(f.numpy() * 65535.0 + 0.5).astype(np.uint16) for f in frames]
        else:
            arrs = [_to_uint8(f) for f in frames]
        for i, a in enumerate(arrs):
            p = out_dir / f"{name}_{i:03d}.png"
            Image.fromarray(a).save(p)
            written.append(p)
        p = out_dir / f"{name}_grid.png"
        Image.fromarray(_grid(arrs)).save(p)
        written.append(p)
    return written


# ---------------------------------------------------------------------------
# commands

def cmd_print_config(args) -> int:
    if args.config or args.set or args.profile:
        sys.stdout.write(_config_from_args(args).to_text(with_docs=True))
    else:
        sys.stdout.write(reference_text())
    return 0


def cmd_make_dataset(args) -> int:
    cfg = _config_from_args(args)
    out = Path(args.out or cfg.dataset_dir or (run_dir(cfg) / "dataset"))
    try:
        spec = SyntheticSpec(scene=cfg.scene, rotation=Mixture.parse(cfg.data_rotation),
                             elevation=Mixture.parse(cfg.data_elevation), radius=cfg.data_radius,
                             focal=cfg.data_focal, resolution=cfg.data_resolution, n_images=cfg.n_images,
                             seed=cfg.data_seed)
    except ValueError as exc:
        raise ConfigError(str(exc), "data_*") from exc
    generate_synthetic(spec, out, write_poses=cfg.write_poses)
    print(f"wrote {cfg.n_images} images to {out}")
    return 0


def cmd_train(args) -> int:
    root = None
    if args.resume:
        state = checkpoint_load(args.resume)
        cfg = state.config
        if args.set:
            raise ConfigError("--set cannot be combined with --resume; the checkpoint fixes the config")
    else:
        cfg = _config_from_args(args)
        state = None
    if not cfg.dataset_dir:
        raise ConfigError("dataset_dir is required for training", "dataset_dir")
    if not Path(cfg.dataset_dir).is_dir():
        raise ConfigError(f"dataset_dir {cfg.dataset_dir!r} is not a directory", "dataset_dir")
    store = ImageStore(cfg.dataset_dir, crop=cfg.crop)
    root = run_dir(cfg)
    root.mkdir(parents=True, exist_ok=True)
    (root / "config.txt").write_text(cfg.to_text(with_docs=True), encoding="utf-8")
    if state is None:
        state = TrainState.create(cfg)
    until = min(cfg.max_iters, args.iters) if args.iters else cfg.max_iters

    def report(s):
        if s.iteration % max(1, cfg.log_every * 10) == 0:
            log.info("it %6d  loss_G %.4f  loss_D %.4f  r1 %.4f  elev %.3f+-%.3f", s.iteration, s.loss_g,
                     s.loss_d, s.r1, float(s.cams[:, ELEVATION].mean()), float(s.cams[:, ELEVATION].std()))

    train(state, StageImages(store), until, root, report)
    print(f"checkpoint: {root / 'ckpt' / 'latest.cmpr'}")
    return 0


def cmd_render(args) -> int:
    state = checkpoint_load(args.checkpoint)
    named = render_frames(state, args.mode, args.count, args.seed, args.resolution, args.points)
    out = Path(args.out) if args.out else run_dir(state.config) / "renders" / args.mode
    written = save_frames(named, out)
    print(f"wrote {len(written)} files to {out}")
    return 0


def cmd_eval_cameras(args) -> int:
    state = checkpoint_load(args.checkpoint)
    cfg = state.config
    sidecar = args.poses or (Path(cfg.dataset_dir) / "poses.csv" if cfg.dataset_dir else None)
    if sidecar is None:
        raise DatasetError("no pose sidecar given; camera evaluation needs a synthetic dataset with poses.csv")
    poses = read_pose_record(sidecar)
    truth = {"rotation": poses["alpha_r"], "elevation": poses["alpha_e"], "radius": poses["r_cam"]}
    report = evaluate_cameras(state.ema_camgen, state.prior, truth, args.n_samples or cfg.eval_samples,
                              args.seed, cfg.eval_bins)
    out = Path(args.out) if args.out else run_dir(cfg) / "eval"
    out.mkdir(parents=True, exist_ok=True)
    (out / "cameras.json").write_text(json.dumps(report.to_json(), indent=2), encoding="utf-8")
    with open(out / "histograms.csv", "w") as fh:
        fh.write("marginal,bin_lo,bin_hi,density\n")
        for name, (hist, edges) in report.histograms.items():
            for h, lo, hi in zip(hist, edges[:-1], edges[1:]):
                fh.write(f"{name},{lo:.6f},{hi:.6f},{h:.6f}\n")
    print(report.summary())
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="campari", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def config_args(sp):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--profile", help="base profile: paper | desk | smoke")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")

    sp = sub.add_parser("print-config", help="print the documented configuration")
    config_args(sp)
    sp.set_defaults(func=cmd_print_config)

    sp = sub.add_parser("make-dataset", help="render a synthetic dataset with ground-truth poses")
    config_args(sp)
    sp.add_argument("--out", help="output directory (default: dataset_dir)")
    sp.set_defaults(func=cmd_make_dataset)

    sp = sub.add_parser("train", help="train a model")
    config_args(sp)
    sp.add_argument("--resume", help="continue from a checkpoint")
    sp.add_argument("--iters", type=int, default=0, help="stop at this iteration (default: max_iters)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("render", help="render diagnostics from a checkpoint")
    sp.add_argument("checkpoint")
    sp.add_argument("--mode", required=True, choices=RENDER_MODES)
    sp.add_argument("--count", type=int, default=8)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--resolution", type=int, default=0)
    sp.add_argument("--points", type=int, default=0, help="points per ray (default: final training value)")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_render)

    sp = sub.add_parser("eval-cameras", help="compare predicted camera marginals with ground truth")
    sp.add_argument("checkpoint")
    sp.add_argument("--poses", help="pose sidecar CSV (default: <dataset_dir>/poses.csv)")
    sp.add_argument("--n-samples", type=int, default=0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_eval_cameras)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        key = f"[{exc.key}] " if exc.key else ""
        print(f"config error: {key}{exc}", file=sys.stderr)
        return 2
    except (DatasetError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
