"""Image ingestion and procedurally rendered synthetic datasets with known cameras."""

from __future__ import annotations

import csv
import math
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image

from .camera import eval_number

SIDECAR = "poses.csv"
IMAGE_EXTS = (".png",)


class DatasetError(Exception):
    pass


# ---------------------------------------------------------------------------
# angle distributions

@dataclass(frozen=True)
class Mixture:
    """Mixture of Gaussians ``sum_k w_k N(mu_k, sigma_k)``, or a uniform range."""
    weights: Tuple[float, ...] = (1.0,)
    means: Tuple[float, ...] = (0.0,)
    sigmas: Tuple[float, ...] = (0.1,)
    uniform: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        if self.uniform is not None:
            if not self.uniform[0] < self.uniform[1]:
                raise ValueError("uniform needs lo < hi")
            return
        if not (len(self.weights) == len(self.means) == len(self.sigmas) > 0):
            raise ValueError("mixture components must have matching lengths")
        if abs(sum(self.weights) - 1.0) > 1e-6:
            raise ValueError(f"mixture weights sum to {sum(self.weights)}, not 1")
        if any(s < 0 for s in self.sigmas) or any(w < 0 for w in self.weights):
            raise ValueError("mixture weights and sigmas must be non-negative")

    @classmethod
    def parse(cls, text: str) -> "Mixture":
        """Parse ``"0.5*N(0.2, 0.1) + 0.5*N(0.7, 0.1)"`` or ``"uniform(-pi, pi)"``."""
        text = text.strip()
        m = re.fullmatch(r"uniform\(([^,]+),([^)]+)\)", text.replace(" ", ""))
        if m:
            return cls(uniform=(eval_number(m.group(1)), eval_number(m.group(2))))
        ws, mus, sds = [], [], []
        for term in text.split("+"):
            m = re.fullmatch(r"\s*(?:([^*]+)\*)?\s*N\(([^,]+),([^)]+)\)\s*", term)
            if not m:
                raise ValueError(f"cannot parse mixture term {term!r} in {text!r}")
            ws.append(eval_number(m.group(1)) if m.group(1) else 1.0)
            mus.append(eval_number(m.group(2)))
            sds.append(eval_number(m.group(3)))
        return cls(tuple(ws), tuple(mus), tuple(sds))

    def __str__(self) -> str:
        if self.uniform is not None:
            return f"uniform({self.uniform[0]:g}, {self.uniform[1]:g})"
        return " + ".join(f"{w:g}*N({m:g}, {s:g})" for w, m, s in zip(self.weights, self.means, self.sigmas))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.uniform is not None:
            return rng.uniform(self.uniform[0], self.uniform[1], size=n)
        comp = rng.choice(len(self.weights), size=n, p=np.asarray(self.weights) / sum(self.weights))
        return np.asarray(self.means)[comp] + np.asarray(self.sigmas)[comp] * rng.standard_normal(n)

    def cdf(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.uniform is not None:
            lo, hi = self.uniform
            return np.clip((x - lo) / (hi - lo), 0.0, 1.0)
        out = np.zeros_like(x)
        for w, m, s in zip(self.weights, self.means, self.sigmas):
            if s == 0:
                out += w * (x >= m)
            else:
                out += w * 0.5 * (1.0 + np.vectorize(math.erf)((x - m) / (s * math.sqrt(2.0))))
        return out


# ---------------------------------------------------------------------------
# analytic scenes

@dataclass
class Box:
    center: Tuple[float, float, float]
    half: Tuple[float, float, float]
    color: Tuple[float, float, float]


@dataclass
class Sphere:
    center: Tuple[float, float, float]
    radius: float
    colors: Tuple[Tuple[float, float, float], Tuple[float, float, float]]
    checks: int = 8


def chair_proxy() -> List[Box]:
    """Four legs, a seat and a backrest, all inside a sphere of radius 0.47."""
    seat_c, back_c, leg_c = (0.85, 0.35, 0.20), (0.25, 0.45, 0.85), (0.90, 0.85, 0.30)
    boxes = [Box((0.0, 0.0, 0.0), (0.22, 0.03, 0.22), seat_c),
             Box((0.0, 0.19, -0.19), (0.22, 0.16, 0.03), back_c)]
    for sx in (-1, 1):
        for sz in (-1, 1):
            boxes.append(Box((0.18 * sx, -0.17, 0.18 * sz), (0.03, 0.14, 0.03), leg_c))
    return boxes


def boxes_on_plane() -> List[Box]:
    return [Box((0.0, -0.2, 0.0), (0.34, 0.02, 0.34), (0.7, 0.7, 0.7)),
            Box((-0.15, -0.08, -0.1), (0.08, 0.1, 0.08), (0.85, 0.25, 0.25)),
            Box((0.15, -0.12, 0.05), (0.1, 0.06, 0.06), (0.25, 0.75, 0.3)),
            Box((0.0, -0.03, 0.18), (0.05, 0.15, 0.05), (0.25, 0.35, 0.9))]


def textured_sphere() -> List[Sphere]:
    return [Sphere((0.0, 0.0, 0.0), 0.4, ((0.9, 0.9, 0.9), (0.8, 0.3, 0.2)))]


SCENES = {"chair-proxy": chair_proxy, "boxes-on-plane": boxes_on_plane, "textured-sphere": textured_sphere}
LIGHT = np.array([0.3, 1.0, 0.5]) / np.linalg.norm([0.3, 1.0, 0.5])
AMBIENT = 0.35


def _hit_box(o, d, box: Box):
    c = np.asarray(box.center)
    h = np.asarray(box.half)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (c - h - o) * inv
        t2 = (c + h - o) * inv
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    t_enter = tmin.max(-1)
    t_exit = tmax.min(-1)
    hit = (t_enter <= t_exit) & (t_exit > 0) & (t_enter > 0)
    axis = tmin.argmax(-1)
    normal = np.zeros_like(d)
    idx = np.arange(d.shape[0])
    normal[idx, axis] = -np.sign(d[idx, axis])
    return np.where(hit, t_enter, np.inf), normal, np.broadcast_to(np.asarray(box.color), d.shape)


def _hit_sphere(o, d, sph: Sphere):
    c = np.asarray(sph.center)
    oc = o - c
    b = (oc * d).sum(-1)
    disc = b * b - ((oc * oc).sum(-1) - sph.radius ** 2)
    t = -b - np.sqrt(np.maximum(disc, 0.0))
    hit = (disc > 0) & (t > 0)
    p = o + t[:, None] * d
    n = (p - c) / sph.radius
    lon = np.arctan2(n[:, 0], n[:, 2])
    lat = np.arcsin(np.clip(n[:, 1], -1, 1))
    parity = (np.floor(lon / (2 * math.pi) * sph.checks) + np.floor(lat / math.pi * sph.checks / 2)).astype(int) % 2
    col = np.where(parity[:, None] == 0, np.asarray(sph.colors[0]), np.asarray(sph.colors[1]))
    return np.where(hit, t, np.inf), n, col


def look_at_np(center: np.ndarray) -> np.ndarray:
    forward = -center / np.linalg.norm(center)
    right = np.cross(forward, [0.0, 1.0, 0.0])
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(forward, [0.0, 0.0, 1.0])
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    return np.stack([right, down, forward])


def render_scene(objects, alpha_r: float, alpha_e: float, r_cam: float, focal: float, resolution: int,
                 supersample: int = 3, background=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Lambertian render ``(H, W, 3)`` in [0, 1] with the package's camera convention.

    ``focal`` is in units of the image width; each pixel averages a
    ``supersample x supersample`` grid of rays.
    """
    center = r_cam * np.array([math.cos(alpha_e) * math.sin(alpha_r), math.sin(alpha_e),
                               math.cos(alpha_e) * math.cos(alpha_r)])
    R = look_at_np(center)
    n = resolution * supersample
    coords = (np.arange(n) + 0.5) / supersample
    v, u = np.meshgrid(coords, coords, indexing="ij")
    f = focal * resolution
    cam = np.stack([(u - resolution / 2) / f, (v - resolution / 2) / f, np.ones_like(u)], -1).reshape(-1, 3)
    d = cam @ R
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = np.broadcast_to(center, d.shape)
    best_t = np.full(d.shape[0], np.inf)
    best_n = np.zeros_like(d)
    best_c = np.zeros_like(d)
    for obj in objects:
        t, nrm, col = (_hit_box(o, d, obj) if isinstance(obj, Box) else _hit_sphere(o, d, obj))
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_n = np.where(closer[:, None], nrm, best_n)
        best_c = np.where(closer[:, None], col, best_c)
    shade = AMBIENT + (1.0 - AMBIENT) * np.clip(best_n @ LIGHT, 0.0, 1.0)
    rgb = np.where(np.isfinite(best_t)[:, None], best_c * shade[:, None], np.asarray(background, dtype=np.float64))
    rgb = rgb.reshape(resolution, supersample, resolution, supersample, 3).mean(axis=(1, 3))
    return np.clip(rgb, 0.0, 1.0)


@dataclass
class SyntheticSpec:
    scene: str = "chair-proxy"
    rotation: Mixture = field(default_factory=lambda: Mixture(uniform=(-math.pi, math.pi)))
    elevation: Mixture = field(default_factory=lambda: Mixture((0.5, 0.5), (0.2, 0.7), (0.1, 0.1)))
    radius: float = 0.75
    focal: float = 0.5
    resolution: int = 32
    n_images: int = 5000
    seed: int = 0
    supersample: int = 3

    def __post_init__(self):
        if self.scene not in SCENES:
            raise ValueError(f"unknown scene {self.scene!r}; choose from {sorted(SCENES)}")
        if self.n_images < 1:
            raise ValueError("n_images must be >= 1")


def sample_poses(spec: SyntheticSpec) -> Dict[str, np.ndarray]:
    """Ground-truth poses of a synthetic dataset (deterministic in ``spec.seed``)."""
    rng = np.random.default_rng(spec.seed)
    rot = spec.rotation.sample(spec.n_images, rng)
    ele = spec.elevation.sample(spec.n_images, rng)
    rot = np.mod(rot + math.pi, 2 * math.pi) - math.pi
    ele = np.clip(ele, -math.pi / 2, math.pi / 2)
    return {"alpha_r": rot, "alpha_e": ele, "r_cam": np.full(spec.n_images, spec.radius)}


def generate_synthetic(spec: SyntheticSpec, out_dir, write_poses: bool = True) -> "ImageStore":
    """Render ``spec.n_images`` PNGs into ``out_dir`` plus the ``poses.csv`` sidecar.

    The sidecar is evaluation-only metadata; pass ``write_poses=False`` to
    leave it out.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    poses = sample_poses(spec)
    objects = SCENES[spec.scene]()
    names = []
    for i in range(spec.n_images):
        img = render_scene(objects, poses["alpha_r"][i], poses["alpha_e"][i], poses["r_cam"][i],
                           spec.focal, spec.resolution, spec.supersample)
        name = f"img_{i:05d}.png"
        Image.fromarray(np.round(img * 255).astype(np.uint8), "RGB").save(out_dir / name)
        names.append(name)
    if write_poses:
        write_pose_record(out_dir / SIDECAR, names, poses)
    return ImageStore(out_dir)


def write_pose_record(path, names: Sequence[str], poses: Dict[str, np.ndarray]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["filename", "alpha_r", "alpha_e", "r_cam"])
        for i, name in enumerate(names):
            w.writerow([name, repr(float(poses["alpha_r"][i])), repr(float(poses["alpha_e"][i])),
                        repr(float(poses["r_cam"][i]))])


def read_pose_record(path) -> Dict[str, np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"pose sidecar {path} not found; camera evaluation needs a synthetic dataset "
                           f"generated with its ground-truth poses")
    cols: Dict[str, list] = {"filename": [], "alpha_r": [], "alpha_e": [], "r_cam": []}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            for k in cols:
                cols[k].append(row[k] if k == "filename" else float(row[k]))
    return {k: (np.asarray(v) if k == "filename" else np.asarray(v, dtype=np.float64)) for k, v in cols.items()}


# ---------------------------------------------------------------------------
# ingestion

def center_crop(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[:2]
    s = min(h, w)
    top, left = (h - s) // 2, (w - s) // 2
    return img[top:top + s, left:left + s]


def area_downsample(img: np.ndarray, resolution: int) -> np.ndarray:
    """Box-filter a square ``(S, S, 3)`` float image to ``resolution``."""
    s = img.shape[0]
    if s == resolution:
        return img
    if s % resolution == 0:
        k = s // resolution
        return img.reshape(resolution, k, resolution, k, -1).mean(axis=(1, 3))
    pil = Image.fromarray(np.round(np.clip(img, 0, 1) * 255).astype(np.uint8))
    return np.asarray(pil.resize((resolution, resolution), Image.BOX), dtype=np.float32) / 255.0


def decode_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise DatasetError(f"cannot read image {path}: {exc}") from exc
    return arr


class ImageStore:
    """A directory of PNG images, centre-cropped to squares on load.

    Only image files are read; a ``poses.csv`` sidecar in the same directory
    is never touched here.
    """

    def __init__(self, directory, crop: bool = True):
        self.directory = Path(directory)
        if not self.directory.is_dir():
            raise DatasetError(f"dataset directory {self.directory} does not exist")
        self.files = sorted(p for p in self.directory.iterdir() if p.suffix.lower() in IMAGE_EXTS)
        if not self.files:
            raise DatasetError(f"no PNG images found in {self.directory}")
        self.crop = crop
        self._cache: Dict[int, torch.Tensor] = {}

    def __len__(self) -> int:
        return len(self.files)

    @property
    def stored_resolution(self) -> int:
        with Image.open(self.files[0]) as im:
            return min(im.size)

    def load_image(self, index: int, resolution: int) -> np.ndarray:
        img = decode_image(self.files[index])
        if self.crop:
            img = center_crop(img)
        elif img.shape[0] != img.shape[1]:
            raise DatasetError(f"image {self.files[index]} is not square and cropping is disabled")
        return area_downsample(img, resolution).astype(np.float32)

    def load_all(self, resolution: int) -> torch.Tensor:
        """All images at ``resolution`` as one ``(N, R, R, 3)`` tensor (cached)."""
        if resolution not in self._cache:
            self._cache[resolution] = torch.from_numpy(
                np.stack([self.load_image(i, resolution) for i in range(len(self))]))
        return self._cache[resolution]


def load_batch(store: ImageStore, indices, resolution: int) -> torch.Tensor:
    """Decode, crop and area-downsample the images at ``indices`` -> ``(B, R, R, 3)``."""
    indices = [int(i) for i in indices]
    for i in indices:
        if not 0 <= i < len(store):
            raise IndexError(f"image index {i} out of range for {len(store)} images")
    if resolution in store._cache:
        return store._cache[resolution][indices]
    return torch.from_numpy(np.stack([store.load_image(i, resolution) for i in indices]))
