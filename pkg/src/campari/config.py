"""Run configuration: a flat ``key = value`` text format with named profiles."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from .camera import CameraPrior, Dist
from .camera_generator import ClampSpec
from .camera import ELEVATION, FX, FY, RADIUS, ROTATION, eval_number


class ConfigError(ValueError):
    """Invalid configuration; ``key`` and ``line`` locate the problem when known."""

    def __init__(self, message: str, key: Optional[str] = None, line: Optional[int] = None):
        self.key = key
        self.line = line
        where = f"line {line}: " if line is not None else ""
        super().__init__(where + message)


def _f(default, doc: str, block: str):
    return field(default=default, metadata={"doc": doc, "block": block})


@dataclass
class RunConfig:
    # dataset
    run_name: str = _f("run", "name of the output directory under the output root", "dataset")
    dataset_dir: str = _f("", "directory of training PNGs (required for train)", "dataset")
    crop: bool = _f(True, "centre-crop images to squares", "dataset")
    scene: str = _f("chair-proxy", "make-dataset: chair-proxy | boxes-on-plane | textured-sphere", "dataset")
    data_rotation: str = _f("uniform(-pi, pi)", "make-dataset: rotation distribution (mixture or uniform)", "dataset")
    data_elevation: str = _f("0.5*N(0.2, 0.1) + 0.5*N(0.7, 0.1)", "make-dataset: elevation distribution", "dataset")
    data_radius: float = _f(0.75, "make-dataset: camera radius", "dataset")
    data_focal: float = _f(0.5, "make-dataset: focal length in image widths", "dataset")
    data_resolution: int = _f(32, "make-dataset: stored image resolution", "dataset")
    n_images: int = _f(5000, "make-dataset: number of images", "dataset")
    data_seed: int = _f(0, "make-dataset: pose/render seed", "dataset")
    write_poses: bool = _f(True, "make-dataset: write the evaluation-only poses.csv sidecar", "dataset")

    # model
    r_fg: float = _f(0.5, "foreground sphere radius (< 1)", "model")
    latent_dim: int = _f(64, "dimension of each latent code", "model")
    background: bool = _f(True, "use the background radiance field", "model")
    camera_generator: bool = _f(True, "learn a residual camera generator (off: prior cameras are used as-is)", "model")
    rotation_range: int = _f(360, "360: rotation as SO(2) matrix, wrapped; 180: rotation angle, clamped", "model")
    prior_focal: str = _f("fixed(0.5)", "prior over focal length (image widths)", "model")
    prior_radius: str = _f("fixed(0.75)", "prior over camera radius", "model")
    prior_rotation: str = _f("uniform(-pi, pi)", "prior over rotation angle", "model")
    prior_elevation: str = _f("uniform(-pi/2, pi/2)", "prior over elevation angle", "model")
    tie_focal: bool = _f(True, "use one focal length for fx and fy", "model")
    clamp_elevation: str = _f("", "camera generator clamp 'lo, hi' (empty: default)", "model")
    clamp_radius: str = _f("", "camera generator clamp 'lo, hi' (empty: default)", "model")
    clamp_focal: str = _f("", "camera generator clamp 'lo, hi' (empty: default)", "model")
    fg_layers: int = _f(8, "foreground MLP hidden layers", "model")
    fg_width: int = _f(128, "foreground MLP width", "model")
    fg_skip: int = _f(4, "layer receiving the skip connection (0: none)", "model")
    bg_layers: int = _f(8, "background MLP hidden layers", "model")
    bg_width: int = _f(128, "background MLP width", "model")
    bg_skip: int = _f(4, "background skip layer (0: none)", "model")
    n_freq_x: int = _f(10, "positional-encoding frequencies for points", "model")
    n_freq_d: int = _f(4, "positional-encoding frequencies for directions", "model")
    sigma_init: float = _f(0.1, "initial density of the radiance fields", "model")
    camgen_layers: int = _f(4, "camera generator hidden layers", "model")
    camgen_width: int = _f(64, "camera generator width", "model")
    camgen_last_std: float = _f(0.05, "std of the camera generator's last-layer weights at init", "model")
    disc_channel_div: int = _f(1, "divide discriminator channel widths by this", "model")

    # training
    seed: int = _f(0, "training seed", "training")
    resolutions: str = _f("32, 64, 128", "progressive-growing resolution ladder", "training")
    stage_iters: str = _f("20000, 70000", "iterations at which the resolution doubles", "training")
    batch_sizes: str = _f("64, 24, 20", "batch size per stage", "training")
    max_iters: int = _f(200000, "total training iterations", "training")
    lr_gen: float = _f(5e-4, "generator learning rate", "training")
    lr_disc: float = _f(1e-4, "discriminator learning rate", "training")
    lr_decay_rate: float = _f(0.1, "learning-rate factor reached after lr_decay_iters", "training")
    lr_decay_iters: int = _f(150000, "iterations over which lr decays by lr_decay_rate", "training")
    r1_lambda: float = _f(10.0, "R1 penalty weight", "training")
    ema_decay: float = _f(0.999, "EMA decay of generator weights", "training")
    rmsprop_alpha: float = _f(0.99, "RMSprop smoothing constant", "training")
    rmsprop_eps: float = _f(1e-8, "RMSprop epsilon", "training")
    points_start: int = _f(20, "points per ray at iteration 0", "training")
    points_max: int = _f(48, "points per ray at the final stage (<= 52)", "training")
    fg_fraction: float = _f(0.75, "share of ray points given to the foreground when a background is used", "training")
    camgen_warmup: int = _f(1000, "iterations the camera generator stays frozen", "training")
    camgen_freeze_from: int = _f(-1, "re-freeze the camera generator from this iteration (-1: never)", "training")
    camgen_lr_mult: float = _f(1.0, "camera generator learning-rate multiplier", "training")
    fade_window: int = _f(10000, "iterations to fade in a new discriminator block", "training")
    stratified: bool = _f(True, "jitter ray samples during training", "training")
    ckpt_every: int = _f(5000, "checkpoint interval (iterations)", "training")
    log_every: int = _f(10, "CSV log interval (iterations)", "training")
    render_chunk: int = _f(0, "max rays per render pass (0: unlimited)", "training")

    # eval
    eval_samples: int = _f(100000, "prior samples pushed through the camera generator", "eval")
    eval_bins: int = _f(64, "histogram bins in evaluation reports", "eval")
    render_resolution: int = _f(0, "render resolution (0: final training resolution)", "eval")
    render_points: int = _f(0, "points per ray when rendering (0: final schedule value)", "eval")

    profile: str = _f("paper", "base profile the other keys override: paper | desk | smoke", "meta")

    # -- derived -----------------------------------------------------------
    def validate(self) -> "RunConfig":
        res = self.resolution_ladder
        iters = self.stage_switches
        bs = self.batch_ladder
        if len(iters) != len(res) - 1:
            raise ConfigError(f"stage_iters needs {len(res) - 1} entries for {len(res)} resolutions", "stage_iters")
        if len(bs) != len(res):
            raise ConfigError(f"batch_sizes needs {len(res)} entries", "batch_sizes")
        if any(b <= a for a, b in zip(iters, iters[1:])) or any(i <= 0 for i in iters):
            raise ConfigError("stage_iters must be positive and ascending", "stage_iters")
        if any(b <= 0 for b in bs):
            raise ConfigError("batch sizes must be positive", "batch_sizes")
        for key in ("lr_gen", "lr_disc", "lr_decay_rate", "lr_decay_iters", "max_iters", "points_start", "points_max",
                    "latent_dim", "fg_layers", "fg_width", "camgen_layers", "camgen_width"):
            if getattr(self, key) <= 0:
                raise ConfigError(f"{key} must be positive", key)
        if self.r1_lambda < 0:
            raise ConfigError("r1_lambda must be non-negative", "r1_lambda")
        if not 0.0 < self.r_fg < 1.0:
            raise ConfigError("r_fg must lie in (0, 1)", "r_fg")
        if not self.points_start <= self.points_max <= 52:
            raise ConfigError("need points_start <= points_max <= 52", "points_max")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ConfigError("ema_decay must lie in [0, 1]", "ema_decay")
        if self.rotation_range not in (180, 360):
            raise ConfigError("rotation_range must be 180 or 360", "rotation_range")
        if not 0.0 < self.fg_fraction < 1.0:
            raise ConfigError("fg_fraction must lie in (0, 1)", "fg_fraction")
        self.camera_prior()
        self.clamp_spec()
        return self

    @property
    def resolution_ladder(self) -> List[int]:
        return _ints(self.resolutions, "resolutions")

    @property
    def stage_switches(self) -> List[int]:
        return _ints(self.stage_iters, "stage_iters") if self.stage_iters.strip() else []

    @property
    def batch_ladder(self) -> List[int]:
        return _ints(self.batch_sizes, "batch_sizes")

    @property
    def final_resolution(self) -> int:
        return self.resolution_ladder[-1]

    def camera_prior(self) -> CameraPrior:
        try:
            focal = Dist.parse(self.prior_focal)
            return CameraPrior(fx=focal, fy=focal, r_cam=Dist.parse(self.prior_radius),
                               alpha_r=Dist.parse(self.prior_rotation), alpha_e=Dist.parse(self.prior_elevation),
                               tie_focal=self.tie_focal, full_rotation=self.rotation_range == 360, r_fg=self.r_fg)
        except ValueError as exc:
            raise ConfigError(str(exc), "prior_*") from exc

    def clamp_spec(self) -> ClampSpec:
        spec = ClampSpec.default_for(self.camera_prior())
        for key, idxs in (("clamp_elevation", (ELEVATION,)), ("clamp_radius", (RADIUS,)), ("clamp_focal", (FX, FY))):
            text = getattr(self, key).strip()
            if text:
                lo, hi = _floats(text, key)
                for i in idxs:
                    spec.ranges[i] = (lo, hi)
        try:
            return ClampSpec(spec.ranges)
        except ValueError as exc:
            raise ConfigError(str(exc), "clamp_*") from exc

    # -- text form ---------------------------------------------------------
    def to_text(self, with_docs: bool = False) -> str:
        lines = []
        block = None
        for f in fields(self):
            if with_docs and f.metadata.get("block") != block:
                block = f.metadata.get("block")
                lines.append(f"\n# --- {block} ---")
            if with_docs:
                lines.append(f"# {f.metadata.get('doc', '')}")
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines).lstrip("\n") + "\n"

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)


PROFILES: Dict[str, Dict[str, object]] = {
    "paper": {},
    # single CPU core: 16^2 -> 32^2, small fields, foreground only
    "desk": dict(
        resolutions="16, 32", stage_iters="3000", batch_sizes="16, 12", max_iters=4000,
        background=False, latent_dim=32, fg_layers=4, fg_width=64, fg_skip=2, n_freq_x=6, n_freq_d=2,
        bg_layers=3, bg_width=32, bg_skip=0, disc_channel_div=4, points_start=20, points_max=24,
        fade_window=500, camgen_warmup=500, lr_decay_iters=20000, ckpt_every=1000, log_every=10,
        sigma_init=1.0,
    ),
    "smoke": dict(
        resolutions="16", stage_iters="", batch_sizes="8", max_iters=200,
        latent_dim=16, fg_layers=3, fg_width=32, fg_skip=0, bg_layers=2, bg_width=16, bg_skip=0,
        n_freq_x=4, n_freq_d=2, disc_channel_div=8, points_start=20, points_max=24,
        fade_window=50, camgen_warmup=50, ckpt_every=100, log_every=10, eval_samples=20000,
        sigma_init=1.0,
    ),
}


def _ints(text: str, key: str) -> List[int]:
    try:
        return [int(float(x)) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"{key}: expected comma-separated integers, got {text!r}", key) from exc


def _floats(text: str, key: str) -> Tuple[float, float]:
    try:
        vals = [eval_number(x) for x in text.split(",")]
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}", key) from exc
    if len(vals) != 2:
        raise ConfigError(f"{key}: expected 'lo, hi'", key)
    return vals[0], vals[1]


def _format(v) -> str:
    if isinstance(v, bool):
        return "on" if v else "off"
    return str(v)


def _convert(f: dataclasses.Field, raw: str, line: Optional[int] = None):
    typ = f.type if isinstance(f.type, str) else f.type.__name__
    raw = raw.strip()
    try:
        if typ == "bool":
            low = raw.lower()
            if low in ("on", "true", "yes", "1"):
                return True
            if low in ("off", "false", "no", "0"):
                return False
            raise ValueError(f"expected on/off, got {raw!r}")
        if typ == "int":
            return int(float(eval_number(raw))) if raw else 0
        if typ == "float":
            return float(eval_number(raw))
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {f.name}: {exc}", f.name, line) from exc


FIELDS = {f.name: f for f in fields(RunConfig)}


def parse_pairs(text: str) -> List[Tuple[str, str, int]]:
    pairs = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"expected 'key = value', got {line.strip()!r}", line=lineno)
        key, value = stripped.split("=", 1)
        key = key.strip()
        if key not in FIELDS:
            raise ConfigError(f"unknown key {key!r}", key, lineno)
        pairs.append((key, value.strip(), lineno))
    return pairs


def build_config(text: str = "", overrides: Sequence[str] = (), profile: Optional[str] = None) -> RunConfig:
    """Defaults <- profile <- config text <- ``key=value`` overrides."""
    pairs = parse_pairs(text)
    over = []
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        if k.strip() not in FIELDS:
            raise ConfigError(f"unknown key {k.strip()!r}", k.strip())
        over.append((k.strip(), v.strip(), None))
    chosen = profile
    for k, v, _ in pairs + over:
        if k == "profile":
            chosen = v
    chosen = chosen or "paper"
    if chosen not in PROFILES:
        raise ConfigError(f"unknown profile {chosen!r}; choose from {sorted(PROFILES)}", "profile")
    values = dict(PROFILES[chosen])
    values["profile"] = chosen
    for k, v, line in pairs + over:
        if k != "profile":
            values[k] = _convert(FIELDS[k], v, line)
    return RunConfig(**values).validate()


def load_config(path, overrides: Sequence[str] = (), profile: Optional[str] = None) -> RunConfig:
    return build_config(Path(path).read_text(encoding="utf-8"), overrides, profile)


def reference_text() -> str:
    """Every key with its documentation and paper-profile default."""
    header = "# campari configuration reference (paper profile defaults)\n"
    header += "# profiles: " + ", ".join(sorted(PROFILES)) + "\n\n"
    return header + RunConfig().to_text(with_docs=True)
