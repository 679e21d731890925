"""Adversarial training of the image and camera generators."""

from __future__ import annotations

import copy
import csv
import logging
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .camera import ELEVATION, FX, RADIUS, ROTATION, sample_prior_batch
from .camera_generator import CameraGenerator, predict_camera
from .config import RunConfig, build_config
from .diffmath import grad_of_output_wrt_input
from .discriminator import Discriminator, GrowthState, fade_alpha_at
from .radiance_fields import LatentBundle
from .volume_renderer import ImageGenerator, render_image

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# losses

def generator_loss(logits_fake: torch.Tensor) -> torch.Tensor:
    return F.softplus(-logits_fake).mean()


def discriminator_loss(logits_fake, logits_real, grad_real_normsq, r1_lambda: float = 10.0) -> torch.Tensor:
    return F.softplus(logits_fake).mean() + F.softplus(-logits_real).mean() + r1_lambda * grad_real_normsq.mean()


def gan_losses(logits_fake, logits_real, grad_real_normsq, r1_lambda: float = 10.0):
    """Non-saturating losses ``(loss_G, loss_D)``; both players minimise.

    ``grad_real_normsq`` holds ``|grad_I D(I)|^2`` per real image (R1).
    """
    return (generator_loss(logits_fake),
            discriminator_loss(logits_fake, logits_real, grad_real_normsq, r1_lambda))


def r1_normsq(logits_real: torch.Tensor, real: torch.Tensor) -> torch.Tensor:
    """Per-image squared norm of ``grad_I D(I)``, differentiable w.r.t. D's weights."""
    g = grad_of_output_wrt_input(logits_real.sum(), real)
    return g.pow(2).reshape(g.shape[0], -1).sum(1)


# ---------------------------------------------------------------------------
# optimisation

class RMSprop:
    """RMSprop over named parameters: ``v <- a v + (1-a) g^2; p <- p - lr g / (sqrt(v) + eps)``.

    Parameters whose gradient is ``None`` (frozen) are left alone. A
    non-finite gradient skips that tensor's update and is logged.
    """

    def __init__(self, alpha: float = 0.99, eps: float = 1e-8):
        self.alpha = alpha
        self.eps = eps
        self.moments: Dict[str, torch.Tensor] = {}
        self.skipped = 0

    @torch.no_grad()
    def step(self, params: Dict[str, nn.Parameter], lr: float, lr_scale: Optional[Dict[str, float]] = None) -> None:
        for name, p in params.items():
            g = p.grad
            if g is None:
                continue
            if not bool(torch.isfinite(g).all()):
                self.skipped += 1
                log.warning("non-finite gradient for %s; update skipped", name)
                continue
            v = self.moments.get(name)
            if v is None:
                v = self.moments[name] = torch.zeros_like(p)
            v.mul_(self.alpha).addcmul_(g, g, value=1.0 - self.alpha)
            step_lr = lr * (lr_scale.get(name, 1.0) if lr_scale else 1.0)
            p.addcdiv_(g, v.sqrt().add_(self.eps), value=-step_lr)


@torch.no_grad()
def ema_update(ema: nn.Module, live: nn.Module, decay: float) -> None:
    for (name, e), (_, p) in zip(ema.named_parameters(), live.named_parameters()):
        e.mul_(decay).add_(p.detach(), alpha=1.0 - decay)


def lr_at(base: float, iteration: int, cfg: RunConfig) -> float:
    return base * math.exp(math.log(cfg.lr_decay_rate) * iteration / cfg.lr_decay_iters)


def stage_at(iteration: int, cfg: RunConfig) -> int:
    return sum(1 for s in cfg.stage_switches if iteration >= s)


def schedule_points(iteration: int, cfg: RunConfig) -> Tuple[int, int]:
    """Points per ray ``(n_fg, n_bg)``.

    The total starts at ``points_start`` and steps up at every stage switch
    (or once, halfway, for a single-stage ladder) until it reaches
    ``points_max`` for the final stage.
    """
    breaks = cfg.stage_switches or [cfg.max_iters // 2]
    k = sum(1 for b in breaks if iteration >= b)
    total = int(round(cfg.points_start + (cfg.points_max - cfg.points_start) * k / len(breaks)))
    if not cfg.background:
        return total, 0
    n_bg = max(1, int(round(total * (1.0 - cfg.fg_fraction))))
    return total - n_bg, n_bg


# ---------------------------------------------------------------------------
# state

def build_generator(cfg: RunConfig) -> ImageGenerator:
    return ImageGenerator(latent_dim=cfg.latent_dim, r_fg=cfg.r_fg, background=cfg.background,
                          fg_layers=cfg.fg_layers, fg_width=cfg.fg_width, fg_skip=cfg.fg_skip or None,
                          bg_layers=cfg.bg_layers, bg_width=cfg.bg_width, bg_skip=cfg.bg_skip or None,
                          n_freq_x=cfg.n_freq_x, n_freq_d=cfg.n_freq_d, sigma_init=cfg.sigma_init)


def build_camera_generator(cfg: RunConfig) -> Optional[CameraGenerator]:
    if not cfg.camera_generator:
        return None
    return CameraGenerator(cfg.camera_prior(), cfg.clamp_spec(), hidden=cfg.camgen_width,
                           n_layers=cfg.camgen_layers, last_std=cfg.camgen_last_std)


@dataclass
class TrainState:
    config: RunConfig
    gen: ImageGenerator
    camgen: Optional[CameraGenerator]
    disc: Discriminator
    ema_gen: ImageGenerator
    ema_camgen: Optional[CameraGenerator]
    opt_g: RMSprop
    opt_d: RMSprop
    rng: torch.Generator
    iteration: int = 0
    grow_iteration: int = 0

    @classmethod
    def create(cls, cfg: RunConfig) -> "TrainState":
        torch.manual_seed(cfg.seed)
        gen = build_generator(cfg)
        camgen = build_camera_generator(cfg)
        disc = Discriminator(cfg.resolution_ladder, cfg.disc_channel_div, seed=cfg.seed)
        rng = torch.Generator().manual_seed(cfg.seed)
        state = cls(cfg, gen, camgen, disc, copy.deepcopy(gen),
                    copy.deepcopy(camgen) if camgen is not None else None,
                    RMSprop(cfg.rmsprop_alpha, cfg.rmsprop_eps), RMSprop(cfg.rmsprop_alpha, cfg.rmsprop_eps), rng)
        for m in (state.ema_gen, state.ema_camgen):
            if m is not None:
                m.requires_grad_(False)
        state.apply_schedules()
        return state

    @property
    def prior(self):
        return self.config.camera_prior()

    @property
    def growth(self) -> GrowthState:
        return GrowthState(self.disc.stage, fade_alpha_at(self.iteration, self.grow_iteration, self.config.fade_window)
                           if self.disc.stage > 0 else 1.0)

    @property
    def resolution(self) -> int:
        return self.disc.resolution

    @property
    def batch_size(self) -> int:
        return self.config.batch_ladder[self.disc.stage]

    def camgen_frozen_at(self, iteration: int) -> bool:
        cfg = self.config
        return iteration < cfg.camgen_warmup or (0 <= cfg.camgen_freeze_from <= iteration)

    def apply_schedules(self) -> None:
        """Grow the discriminator and (un)freeze the camera generator for the current iteration."""
        target = stage_at(self.iteration, self.config)
        while self.disc.stage < target:
            self.disc.grow(self.disc.stage + 1)
            self.grow_iteration = self.config.stage_switches[self.disc.stage - 1]
        if self.camgen is not None:
            frozen = self.camgen_frozen_at(self.iteration)
            if frozen and not self.camgen.frozen:
                self.camgen.freeze()
            elif not frozen and self.camgen.frozen:
                self.camgen.unfreeze()

    def generator_params(self) -> Dict[str, nn.Parameter]:
        params = {f"gen/{k}": p for k, p in self.gen.named_parameters()}
        if self.camgen is not None:
            params.update({f"camgen/{k}": p for k, p in self.camgen.named_parameters()})
        return params

    def disc_params(self) -> Dict[str, nn.Parameter]:
        return {f"disc/{k}": p for k, p in self.disc.named_parameters()}


@dataclass
class StepStats:
    iteration: int
    loss_g: float
    loss_d: float
    r1: float
    logit_real: float
    logit_fake: float
    fg_alpha_mean: float
    cams: np.ndarray

    def row(self) -> Dict[str, float]:
        c = self.cams
        return {"iteration": self.iteration, "loss_G": self.loss_g, "loss_D": self.loss_d, "r1": self.r1,
                "logit_real": self.logit_real, "logit_fake": self.logit_fake, "fg_alpha_mean": self.fg_alpha_mean,
                "elev_mean": float(c[:, ELEVATION].mean()), "elev_std": float(c[:, ELEVATION].std()),
                "rot_mean": float(c[:, ROTATION].mean()), "rot_std": float(c[:, ROTATION].std()),
                "radius_mean": float(c[:, RADIUS].mean()), "focal_mean": float(c[:, FX].mean())}


def _render_fakes(state: TrainState, batch: int, n_fg: int, n_bg: int):
    cfg = state.config
    prior_cams = sample_prior_batch(state.prior, batch, state.rng)
    cams = predict_camera(state.camgen, prior_cams)
    z = LatentBundle.sample(batch, cfg.latent_dim, state.rng)
    out = render_image(state.gen, cams, z, n_fg, n_bg, state.resolution,
                       state.rng if cfg.stratified else None, chunk=cfg.render_chunk or None)
    return out, cams


def train_step(state: TrainState, real_batch: torch.Tensor) -> StepStats:
    """One discriminator update followed by one generator update.

    ``real_batch`` is ``(B, R, R, 3)`` at the current stage resolution.
    """
    cfg = state.config
    state.apply_schedules()
    it = state.iteration
    if real_batch.shape[1] != state.resolution:
        raise ValueError(f"real batch at {real_batch.shape[1]}^2, stage expects {state.resolution}^2")
    growth = state.growth
    n_fg, n_bg = schedule_points(it, cfg)
    B = real_batch.shape[0]

    # discriminator: real (with R1) vs detached fakes
    state.disc.requires_grad_(True)
    with torch.no_grad():
        fake, _ = _render_fakes(state, B, n_fg, n_bg)
    real = real_batch.detach().clone().requires_grad_(True)
    logits_real = state.disc(real, growth)
    logits_fake = state.disc(fake.rgb, growth)
    normsq = r1_normsq(logits_real, real)
    loss_d = discriminator_loss(logits_fake, logits_real, normsq, cfg.r1_lambda)
    if not torch.isfinite(loss_d):
        raise TrainingDiverged(f"non-finite discriminator loss at iteration {it}")
    d_params = state.disc_params()
    for p in d_params.values():
        p.grad = None
    loss_d.backward()
    state.opt_d.step(d_params, lr_at(cfg.lr_disc, it, cfg))

    # generator (+ camera generator unless frozen) on fresh fakes
    state.disc.requires_grad_(False)
    g_params = state.generator_params()
    for p in g_params.values():
        p.grad = None
    fake, cams = _render_fakes(state, B, n_fg, n_bg)
    loss_g = generator_loss(state.disc(fake.rgb, growth))
    if not torch.isfinite(loss_g):
        state.disc.requires_grad_(True)
        raise TrainingDiverged(f"non-finite generator loss at iteration {it}")
    loss_g.backward()
    scale = {k: cfg.camgen_lr_mult for k in g_params if k.startswith("camgen/")}
    state.opt_g.step(g_params, lr_at(cfg.lr_gen, it, cfg), scale)
    state.disc.requires_grad_(True)

    ema_update(state.ema_gen, state.gen, cfg.ema_decay)
    if state.camgen is not None:
        ema_update(state.ema_camgen, state.camgen, cfg.ema_decay)
    state.iteration += 1
    state.apply_schedules()
    return StepStats(it, loss_g.item(), loss_d.item(), normsq.mean().item(), logits_real.mean().item(),
                     logits_fake.mean().item(), fake.fg_alpha.mean().item(), cams.detach().numpy())


def sample_real(state: TrainState, images: torch.Tensor) -> torch.Tensor:
    idx = torch.randint(images.shape[0], (state.batch_size,), generator=state.rng)
    return images[idx]


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"CMPR"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


def _bytes_to_f32(b: bytes) -> np.ndarray:
    return np.frombuffer(b, dtype=np.uint8).astype(np.float32)


def _f32_to_bytes(a: np.ndarray) -> bytes:
    return a.astype(np.uint8).tobytes()


def state_tensors(state: TrainState) -> Dict[str, np.ndarray]:
    """Everything needed to resume, as named f32 arrays (integers and bytes stored exactly)."""
    out: Dict[str, np.ndarray] = {}
    out["meta/config"] = _bytes_to_f32(state.config.to_text().encode("utf-8"))
    out["meta/iteration"] = np.array([state.iteration], dtype=np.float32)
    out["meta/stage"] = np.array([state.disc.stage], dtype=np.float32)
    out["meta/grow_iteration"] = np.array([state.grow_iteration], dtype=np.float32)
    out["meta/rng"] = state.rng.get_state().numpy().astype(np.float32)
    out["meta/rmsprop_skipped"] = np.array([state.opt_g.skipped, state.opt_d.skipped], dtype=np.float32)
    modules = [("gen", state.gen), ("camgen", state.camgen), ("disc", state.disc),
               ("ema_gen", state.ema_gen), ("ema_camgen", state.ema_camgen)]
    for prefix, m in modules:
        if m is None:
            continue
        for k, p in m.named_parameters():
            out[f"{prefix}/{k}"] = p.detach().numpy().astype(np.float32)
    for prefix, opt in (("opt_g", state.opt_g), ("opt_d", state.opt_d)):
        for k in sorted(opt.moments):
            out[f"{prefix}/{k}"] = opt.moments[k].numpy().astype(np.float32)
    return out


def write_container(path, tensors: Dict[str, np.ndarray]) -> None:
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        nb = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(b"".join(parts))
    os.replace(tmp, path)


def read_container(path) -> Dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"truncated {what} in {path}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(4, "header") != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version} is not supported (expected {FORMAT_VERSION})")
    out: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4, "tensor name"))
        name = take(n, "tensor name").decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4, "tensor shape"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, "tensor shape"))
        numel = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(take(4 * numel, "tensor"), dtype="<f4").reshape(shape).copy()
    if pos != len(data):
        raise CheckpointError(f"trailing bytes after last tensor in {path}")
    return out


def checkpoint_save(state: TrainState, path) -> None:
    write_container(path, state_tensors(state))


def config_from_tensors(tensors: Dict[str, np.ndarray]) -> RunConfig:
    return build_config(_f32_to_bytes(tensors["meta/config"]).decode("utf-8"))


def checkpoint_load(path) -> TrainState:
    """Rebuild a :class:`TrainState` bit-exactly from a checkpoint file."""
    tensors = read_container(path)
    cfg = config_from_tensors(tensors)
    state = TrainState.create(cfg)
    stage = int(tensors["meta/stage"][0])
    while state.disc.stage < stage:
        state.disc.grow(state.disc.stage + 1)
    state.iteration = int(tensors["meta/iteration"][0])
    state.grow_iteration = int(tensors["meta/grow_iteration"][0])
    state.rng.set_state(torch.from_numpy(tensors["meta/rng"].astype(np.uint8)))
    state.opt_g.skipped, state.opt_d.skipped = (int(x) for x in tensors["meta/rmsprop_skipped"])
    modules = [("gen", state.gen), ("camgen", state.camgen), ("disc", state.disc),
               ("ema_gen", state.ema_gen), ("ema_camgen", state.ema_camgen)]
    with torch.no_grad():
        for prefix, m in modules:
            if m is None:
                continue
            for k, p in m.named_parameters():
                key = f"{prefix}/{k}"
                if key not in tensors:
                    raise CheckpointError(f"checkpoint lacks tensor {key}")
                if tuple(tensors[key].shape) != tuple(p.shape):
                    raise CheckpointError(f"shape mismatch for {key}: {tensors[key].shape} vs {tuple(p.shape)}")
                p.copy_(torch.from_numpy(tensors[key]))
    for prefix, opt in (("opt_g", state.opt_g), ("opt_d", state.opt_d)):
        opt.moments = {k[len(prefix) + 1:]: torch.from_numpy(v.copy()) for k, v in tensors.items()
                       if k.startswith(prefix + "/")}
    state.apply_schedules()
    return state


# ---------------------------------------------------------------------------
# loop

LOG_FIELDS = ["iteration", "loss_G", "loss_D", "r1", "logit_real", "logit_fake", "fg_alpha_mean",
              "elev_mean", "elev_std", "rot_mean", "rot_std", "radius_mean", "focal_mean"]


class StageImages:
    """Real images at each stage resolution, loaded lazily from an ImageStore."""

    def __init__(self, store):
        self.store = store

    def at(self, resolution: int) -> torch.Tensor:
        return self.store.load_all(resolution)


def train(state: TrainState, images: StageImages, until: int, out_dir: Optional[Path] = None,
          on_step: Optional[Callable[[StepStats], None]] = None) -> List[StepStats]:
    """Run training until ``state.iteration == until``.

    With ``out_dir`` set, checkpoints go to ``out_dir/ckpt`` and the scalar
    log to ``out_dir/logs/train.csv`` (appended). A non-finite loss writes
    ``ckpt/diverged.cmpr`` before re-raising.
    """
    cfg = state.config
    history: List[StepStats] = []
    writer = None
    fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        (out_dir / "ckpt").mkdir(parents=True, exist_ok=True)
        (out_dir / "logs").mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "logs" / "train.csv"
        new = not log_path.exists()
        fh = open(log_path, "a", newline="")
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        if new:
            writer.writeheader()
    try:
        while state.iteration < until:
            state.apply_schedules()
            real = sample_real(state, images.at(state.resolution))
            try:
                stats = train_step(state, real)
            except TrainingDiverged:
                if out_dir is not None:
                    checkpoint_save(state, out_dir / "ckpt" / "diverged.cmpr")
                raise
            history.append(stats)
            if on_step is not None:
                on_step(stats)
            if writer is not None and (stats.iteration % cfg.log_every == 0):
                writer.writerow(stats.row())
                fh.flush()
            if out_dir is not None and state.iteration % cfg.ckpt_every == 0:
                checkpoint_save(state, out_dir / "ckpt" / "latest.cmpr")
        if out_dir is not None:
            checkpoint_save(state, out_dir / "ckpt" / "latest.cmpr")
    finally:
        if fh is not None:
            fh.close()
    return history
