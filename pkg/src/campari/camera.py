"""Pinhole cameras on a sphere around the origin.

Conventions used throughout the package:

* world space is right-handed with ``+y`` up;
* a camera at spherical pose ``(r, alpha_r, alpha_e)`` sits at
  ``r * (cos(e) sin(a), sin(e), cos(e) cos(a))`` and looks at the origin;
* camera space is x right, y down, z forward (the camera looks down its
  own ``+z`` axis), so a pixel ``(u, v)`` maps to ``K^-1 (u, v, 1)``;
* image row 0 is the top of the image.

When the camera looks straight up or down the world up vector is parallel
to the viewing axis; ``+z`` is used as the up vector there instead.

A camera is also carried around as a flat 5-vector
``(fx, fy, r_cam, alpha_r, alpha_e)``. In that vector the focal lengths are
expressed in units of the image width so that the same camera can be
rendered at every resolution of the growing schedule; :class:`CameraIntr`
holds them in pixels.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
import torch

PARAM_NAMES = ("fx", "fy", "r_cam", "alpha_r", "alpha_e")
FX, FY, RADIUS, ROTATION, ELEVATION = range(5)


@dataclass
class CameraIntr:
    fx: float
    fy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got ({self.fx}, {self.fy})")

    @property
    def K(self) -> torch.Tensor:
        return intrinsics_matrix(self.fx, self.fy, self.width, self.height)


@dataclass
class CameraPose:
    r_cam: float
    alpha_r: float
    alpha_e: float
    rot2x2: Optional[np.ndarray] = None

    def rotation_angle(self) -> float:
        if self.rot2x2 is None:
            return self.alpha_r
        m = torch.as_tensor(np.asarray(self.rot2x2), dtype=torch.float64)
        return float(so2_angle(m))


@dataclass
class CameraMatrices:
    K: torch.Tensor
    R: torch.Tensor
    t: torch.Tensor

    @property
    def center(self) -> torch.Tensor:
        return -(self.R.transpose(-1, -2) @ self.t.unsqueeze(-1)).squeeze(-1)


@dataclass
class Ray:
    origin: torch.Tensor
    direction: torch.Tensor
    t_near: Optional[float] = None
    t_far: Optional[float] = None


def intrinsics_matrix(fx, fy, width: int, height: int) -> torch.Tensor:
    K = torch.zeros(3, 3, dtype=torch.float32)
    K[0, 0] = fx
    K[1, 1] = fy
    K[0, 2] = width / 2.0
    K[1, 2] = height / 2.0
    K[2, 2] = 1.0
    return K


def spherical_to_center(r_cam, alpha_r, alpha_e) -> torch.Tensor:
    """Camera centre(s) for (broadcastable) tensors of radius and angles."""
    r_cam, alpha_r, alpha_e = torch.broadcast_tensors(
        torch.as_tensor(r_cam), torch.as_tensor(alpha_r), torch.as_tensor(alpha_e))
    ce = torch.cos(alpha_e)
    return torch.stack([ce * torch.sin(alpha_r), torch.sin(alpha_e), ce * torch.cos(alpha_r)], dim=-1) * r_cam.unsqueeze(-1)


def center_to_spherical(center: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    r = torch.linalg.norm(center, dim=-1)
    alpha_e = torch.asin(torch.clamp(center[..., 1] / r, -1.0, 1.0))
    alpha_r = torch.atan2(center[..., 0], center[..., 2])
    return r, alpha_r, alpha_e


def look_at_rotation(center: torch.Tensor, eps: float = 1e-9) -> torch.Tensor:
    """World-to-camera rotation(s) for camera(s) at ``center`` facing the origin.

    Rows of the result are the camera's right, down and forward axes in world
    coordinates.
    """
    forward = -center / torch.linalg.norm(center, dim=-1, keepdim=True)
    up = torch.zeros_like(forward)
    up[..., 1] = 1.0
    right = torch.linalg.cross(forward, up, dim=-1)
    norm = torch.linalg.norm(right, dim=-1, keepdim=True)
    degenerate = norm < eps
    if bool(degenerate.any()):
        up_z = torch.zeros_like(forward)
        up_z[..., 2] = 1.0
        right = torch.where(degenerate, torch.linalg.cross(forward, up_z, dim=-1), right)
        norm = torch.linalg.norm(right, dim=-1, keepdim=True)
    right = right / norm
    down = torch.linalg.cross(forward, right, dim=-1)
    return torch.stack([right, down, forward], dim=-2)


def pose_to_rt(r_cam, alpha_r, alpha_e) -> Tuple[torch.Tensor, torch.Tensor]:
    """Batched, differentiable ``(R, t)`` from spherical pose tensors."""
    center = spherical_to_center(r_cam, alpha_r, alpha_e)
    R = look_at_rotation(center)
    t = -(R @ center.unsqueeze(-1)).squeeze(-1)
    return R, t


def pose_to_matrices(pose: CameraPose, intr: CameraIntr, dtype=torch.float32) -> CameraMatrices:
    if not (-math.pi / 2 <= pose.alpha_e <= math.pi / 2):
        raise ValueError(f"elevation {pose.alpha_e} outside [-pi/2, pi/2]")
    alpha_r = pose.rotation_angle()
    R, t = pose_to_rt(torch.tensor(pose.r_cam, dtype=dtype), torch.tensor(alpha_r, dtype=dtype),
                      torch.tensor(pose.alpha_e, dtype=dtype))
    return CameraMatrices(K=intr.K.to(dtype), R=R, t=t)


def so2_angle(m: torch.Tensor) -> torch.Tensor:
    """Angle of the rotation closest (Frobenius) to the 2x2 matrix ``m``."""
    return torch.atan2(m[..., 1, 0] - m[..., 0, 1], m[..., 0, 0] + m[..., 1, 1])


def rotation_2x2(theta: torch.Tensor) -> torch.Tensor:
    c, s = torch.cos(theta), torch.sin(theta)
    return torch.stack([torch.stack([c, -s], -1), torch.stack([s, c], -1)], -2)


def project_so2(m: torch.Tensor, eps: float = 0.0) -> Tuple[torch.Tensor, torch.Tensor]:
    """Project 2x2 matrices onto SO(2).

    Returns the rotations and a boolean mask of degenerate inputs
    (``a + d == 0`` and ``c - b == 0``), which are mapped to the identity.
    """
    m = torch.as_tensor(m)
    s = m[..., 1, 0] - m[..., 0, 1]
    c = m[..., 0, 0] + m[..., 1, 1]
    degenerate = (s.abs() <= eps) & (c.abs() <= eps)
    theta = torch.atan2(s, torch.where(degenerate, torch.ones_like(c), c))
    return rotation_2x2(theta), degenerate


def pixel_grid(height: int, width: int) -> torch.Tensor:
    """``(H, W, 2)`` pixel-centre coordinates ``(u, v)``."""
    v, u = torch.meshgrid(torch.arange(height, dtype=torch.float32) + 0.5,
                          torch.arange(width, dtype=torch.float32) + 0.5, indexing="ij")
    return torch.stack([u, v], dim=-1)


def ray_directions(R: torch.Tensor, fx, fy, height: int, width: int) -> torch.Tensor:
    """Unit world-space directions ``(..., H*W, 3)`` for batched rotations.

    ``fx``/``fy`` are in pixels and broadcast against the batch dims of ``R``.
    """
    grid = pixel_grid(height, width).reshape(-1, 2).to(R.dtype)
    fx = torch.as_tensor(fx, dtype=R.dtype)[..., None]
    fy = torch.as_tensor(fy, dtype=R.dtype)[..., None]
    x = (grid[:, 0] - width / 2.0) / fx
    y = (grid[:, 1] - height / 2.0) / fy
    cam = torch.stack(torch.broadcast_tensors(x, y, torch.ones_like(x)), dim=-1)
    world = cam @ R
    return world / torch.linalg.norm(world, dim=-1, keepdim=True)


def generate_rays(mats: CameraMatrices, grid: torch.Tensor) -> list:
    """One :class:`Ray` per pixel of ``grid`` (``(H, W, 2)`` pixel centres)."""
    Kinv = torch.linalg.inv(mats.K.to(mats.R.dtype))
    uv1 = torch.cat([grid.reshape(-1, 2).to(mats.R.dtype), torch.ones(grid.shape[0] * grid.shape[1], 1, dtype=mats.R.dtype)], -1)
    dirs = uv1 @ Kinv.T @ mats.R
    dirs = dirs / torch.linalg.norm(dirs, dim=-1, keepdim=True)
    origin = mats.center
    return [Ray(origin, d) for d in dirs]


# ---------------------------------------------------------------------------
# priors

@dataclass(frozen=True)
class Dist:
    kind: str
    a: float = 0.0
    b: float = 0.0

    def __post_init__(self):
        if self.kind not in ("gaussian", "uniform", "fixed"):
            raise ValueError(f"unknown distribution kind {self.kind!r}")
        if self.kind == "gaussian" and self.b <= 0:
            raise ValueError("gaussian sigma must be positive")
        if self.kind == "uniform" and not self.a < self.b:
            raise ValueError("uniform needs lo < hi")

    @classmethod
    def parse(cls, text: str) -> "Dist":
        m = re.fullmatch(r"\s*(gaussian|uniform|fixed)\s*\(([^)]*)\)\s*", text)
        if not m:
            raise ValueError(f"cannot parse distribution {text!r}")
        args = [float(eval_number(x)) for x in m.group(2).split(",") if x.strip()]
        expected = 1 if m.group(1) == "fixed" else 2
        if len(args) != expected:
            raise ValueError(f"{m.group(1)} takes {expected} argument(s), got {text!r}")
        return cls(m.group(1), *args)

    def __str__(self) -> str:
        if self.kind == "fixed":
            return f"fixed({self.a:g})"
        return f"{self.kind}({self.a:g}, {self.b:g})"

    @property
    def is_fixed(self) -> bool:
        return self.kind == "fixed"

    @property
    def mean(self) -> float:
        if self.kind == "uniform":
            return 0.5 * (self.a + self.b)
        return self.a

    def sample(self, n: int, generator: torch.Generator) -> torch.Tensor:
        if self.kind == "fixed":
            return torch.full((n,), self.a, dtype=torch.float32)
        if self.kind == "uniform":
            return self.a + (self.b - self.a) * torch.rand(n, generator=generator)
        return self.a + self.b * torch.randn(n, generator=generator)


def eval_number(text: str) -> float:
    """Parse a float that may be written with ``pi`` (e.g. ``-pi/2``)."""
    text = text.strip()
    if not re.fullmatch(r"[-+*/.\deE pi()]+", text):
        raise ValueError(f"not a number: {text!r}")
    return float(eval(text, {"__builtins__": {}}, {"pi": math.pi}))


@dataclass
class CameraPrior:
    fx: Dist = field(default_factory=lambda: Dist("fixed", 0.5))
    fy: Dist = field(default_factory=lambda: Dist("fixed", 0.5))
    r_cam: Dist = field(default_factory=lambda: Dist("fixed", 0.75))
    alpha_r: Dist = field(default_factory=lambda: Dist("uniform", -math.pi, math.pi))
    alpha_e: Dist = field(default_factory=lambda: Dist("uniform", -math.pi / 2, math.pi / 2))
    tie_focal: bool = True
    full_rotation: bool = True
    r_fg: float = 0.5

    def components(self):
        return (self.fx, self.fy, self.r_cam, self.alpha_r, self.alpha_e)

    def free_params(self) -> Tuple[int, ...]:
        """Indices of the flat camera vector that are not fixed."""
        free = [i for i, d in enumerate(self.components()) if not d.is_fixed]
        if self.tie_focal and FY in free:
            free.remove(FY)
        return tuple(free)


def wrap_angle(a: torch.Tensor) -> torch.Tensor:
    """Map angles to ``[-pi, pi)``."""
    return torch.remainder(a + math.pi, 2 * math.pi) - math.pi


def enforce_domain(cams: torch.Tensor, r_fg: float) -> torch.Tensor:
    """Clamp flat camera vectors into their hard domain (focal > 0, camera
    inside the shell between the foreground sphere and the unit sphere,
    elevation within [-pi/2, pi/2], rotation wrapped)."""
    out = cams.clone()
    out[..., FX] = out[..., FX].clamp_min(1e-3)
    out[..., FY] = out[..., FY].clamp_min(1e-3)
    out[..., RADIUS] = out[..., RADIUS].clamp(r_fg + 1e-3, 1.0 - 1e-3)
    out[..., ELEVATION] = out[..., ELEVATION].clamp(-math.pi / 2, math.pi / 2)
    out[..., ROTATION] = wrap_angle(out[..., ROTATION])
    return out


def sample_prior_batch(prior: CameraPrior, n: int, generator: torch.Generator) -> torch.Tensor:
    """``(n, 5)`` flat prior cameras, components sampled independently."""
    cols = [d.sample(n, generator) for d in prior.components()]
    cams = torch.stack(cols, dim=-1)
    if prior.tie_focal:
        cams[:, FY] = cams[:, FX]
    return enforce_domain(cams, prior.r_fg)


def sample_prior(prior: CameraPrior, generator: torch.Generator,
                 width: int = 32, height: int = 32) -> Tuple[torch.Tensor, CameraPose, CameraIntr]:
    cam = sample_prior_batch(prior, 1, generator)[0]
    return cam, flat_to_pose(cam), flat_to_intr(cam, width, height)


def flat_to_pose(cam: torch.Tensor) -> CameraPose:
    return CameraPose(r_cam=float(cam[RADIUS]), alpha_r=float(cam[ROTATION]), alpha_e=float(cam[ELEVATION]))


def flat_to_intr(cam: torch.Tensor, width: int, height: int) -> CameraIntr:
    return CameraIntr(fx=float(cam[FX]) * width, fy=float(cam[FY]) * width, width=width, height=height)


def pose_to_flat(pose: CameraPose, fx: float, fy: float) -> torch.Tensor:
    return torch.tensor([fx, fy, pose.r_cam, pose.rotation_angle(), pose.alpha_e], dtype=torch.float32)
