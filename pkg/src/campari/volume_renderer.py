"""Ray sampling, volume-rendering quadrature and foreground/background compositing."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import torch
import torch.nn as nn

from .camera import ELEVATION, FX, FY, RADIUS, ROTATION, pose_to_rt, ray_directions
from .radiance_fields import LatentBundle, RadianceNet

BG_FAR_CAP = 1.0e4


@dataclass
class RaySamples:
    depths: torch.Tensor   # (..., n) ascending
    points: torch.Tensor   # (..., n, 3) or (..., n, 4)
    deltas: torch.Tensor   # (..., n)


@dataclass
class RenderOutput:
    rgb: torch.Tensor        # (B, H, W, 3)
    fg_alpha: torch.Tensor   # (B, H, W)
    depth_map: torch.Tensor  # (B, H, W)


def fg_bounds(cam_dist, r_fg: float) -> Tuple[torch.Tensor, torch.Tensor]:
    """Near/far depths enclosing the foreground sphere for a camera at distance ``cam_dist``."""
    cam_dist = torch.as_tensor(cam_dist)
    if bool((cam_dist <= r_fg).any()):
        raise ValueError(f"camera at distance {cam_dist.min().item():.4f} lies inside the foreground sphere (r_fg={r_fg})")
    return cam_dist - r_fg, cam_dist + r_fg


def stratified_unit(shape, n: int, generator: Optional[torch.Generator], dtype=torch.float32) -> torch.Tensor:
    """Positions in [0, 1): one uniform draw per equal stratum, or stratum midpoints when ``generator`` is None."""
    base = torch.arange(n, dtype=dtype)
    if generator is None:
        u = torch.full((*shape, n), 0.5, dtype=dtype)
    else:
        u = torch.rand((*shape, n), generator=generator).to(dtype)
    return (base + u) / n


def fg_depths(t_near: torch.Tensor, t_far: torch.Tensor, n_rays: int, n: int,
              generator: Optional[torch.Generator]) -> Tuple[torch.Tensor, torch.Tensor]:
    """Depths ``(B, R, n)`` and deltas for the foreground interval of each image.

    All rays of one image share the image's bounds. The last delta is the
    stratum width so that midpoint samples tile ``[t_near, t_far]`` exactly.
    """
    t_near = t_near.reshape(-1, 1, 1)
    t_far = t_far.reshape(-1, 1, 1)
    u = stratified_unit((t_near.shape[0], n_rays), n, generator, t_near.dtype)
    depths = t_near + (t_far - t_near) * u
    width = (t_far - t_near) / n
    deltas = torch.cat([depths[..., 1:] - depths[..., :-1], width.expand(*depths.shape[:-1], 1)], dim=-1)
    return depths, deltas


def sample_fg(origin: torch.Tensor, dirs: torch.Tensor, bounds, n_fg: int,
              generator: Optional[torch.Generator] = None) -> RaySamples:
    """Foreground samples; origin ``(B, 3)``, dirs ``(B, R, 3)``."""
    if n_fg < 1:
        raise ValueError("n_fg must be >= 1")
    t_near, t_far = (torch.as_tensor(b, dtype=dirs.dtype).expand(dirs.shape[0]) for b in bounds)
    depths, deltas = fg_depths(t_near, t_far, dirs.shape[1], n_fg, generator)
    points = origin[:, None, None, :] + depths[..., None] * dirs[:, :, None, :]
    return RaySamples(depths, points, deltas)


def _depth_at_radius(b: torch.Tensor, c: torch.Tensor, radius: torch.Tensor) -> torch.Tensor:
    # ray o + t d reaches |x| = radius at t = -b + sqrt(b^2 - (|o|^2 - radius^2)), b = o.d
    return -b + torch.sqrt(torch.clamp(b * b - c + radius * radius, min=0.0))


def sample_bg(origin: torch.Tensor, dirs: torch.Tensor, n_bg: int,
              generator: Optional[torch.Generator] = None) -> RaySamples:
    """Background samples uniform in inverse depth ``s = 1/|x|`` over (0, 1].

    Points come back in inverted-sphere form ``(x/|x|, s)``; ``s`` is sorted
    descending so world depths ascend. The last delta extends to the lower
    edge of its ``s`` stratum (infinite for the final one), capped at
    ``BG_FAR_CAP``.
    """
    if n_bg < 1:
        raise ValueError("n_bg must be >= 1")
    B, R = dirs.shape[:2]
    u = stratified_unit((B, R), n_bg, generator, dirs.dtype)
    # strata ((n-1-j)/n, (n-j)/n]; 1 - u keeps s strictly positive
    s = 1.0 - u
    b = (origin[:, None, :] * dirs).sum(-1, keepdim=True)          # (B, R, 1)
    c = (origin * origin).sum(-1)[:, None, None]                    # (B, 1, 1)
    radius = 1.0 / s
    depths = _depth_at_radius(b, c, radius)
    x = origin[:, None, None, :] + depths[..., None] * dirs[:, :, None, :]
    unit = x * s[..., None]
    points = torch.cat([unit, s[..., None]], dim=-1)
    s_lo = s[..., -1:] - 1.0 / n_bg
    far = torch.where(s_lo > 0, _depth_at_radius(b, c, 1.0 / torch.clamp(s_lo, min=1e-12)),
                      torch.full_like(s_lo, float("inf")))
    last = torch.clamp(far - depths[..., -1:], max=BG_FAR_CAP)
    deltas = torch.cat([depths[..., 1:] - depths[..., :-1], last], dim=-1)
    return RaySamples(depths, points, deltas)


def integrate_ray(sigma: torch.Tensor, rgb: torch.Tensor, deltas: torch.Tensor
                  ) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Quadrature of the rendering integral along the last axis.

    Returns (colour ``(..., 3)``, transmittance left after the last sample,
    per-sample weights ``T_i * alpha_i``).
    """
    tau = sigma * deltas
    alpha = 1.0 - torch.exp(-tau)
    cum = torch.cumsum(tau, dim=-1)
    trans = torch.exp(-torch.cat([torch.zeros_like(cum[..., :1]), cum[..., :-1]], dim=-1))
    weights = trans * alpha
    color = (weights[..., None] * rgb).sum(dim=-2)
    return color, torch.exp(-cum[..., -1]), weights


class ImageGenerator(nn.Module):
    """Renders images of the decomposed scene for given cameras and latents."""

    def __init__(self, latent_dim: int = 64, r_fg: float = 0.5, background: bool = True,
                 fg_layers: int = 8, fg_width: int = 128, fg_skip: Optional[int] = 4,
                 bg_layers: int = 8, bg_width: int = 128, bg_skip: Optional[int] = 4,
                 n_freq_x: int = 10, n_freq_d: int = 4, sigma_init: float = 0.1):
        super().__init__()
        if not 0.0 < r_fg < 1.0:
            raise ValueError(f"r_fg must lie in (0, 1), got {r_fg}")
        self.latent_dim = latent_dim
        self.r_fg = r_fg
        self.fg = RadianceNet(3, latent_dim, fg_layers, fg_width, fg_skip, n_freq_x, n_freq_d, sigma_init=sigma_init)
        self.bg = RadianceNet(4, latent_dim, bg_layers, bg_width, bg_skip, n_freq_x, n_freq_d,
                              sigma_init=sigma_init) if background else None

    @property
    def has_background(self) -> bool:
        return self.bg is not None

    def forward(self, cams, latents, resolution, n_fg, n_bg=0, generator=None, **kw) -> RenderOutput:
        return render_image(self, cams, latents, n_fg, n_bg, resolution, generator, **kw)


def render_image(gen: ImageGenerator, cams: torch.Tensor, latents: LatentBundle, n_fg: int, n_bg: int,
                 resolution: int, generator: Optional[torch.Generator] = None, chunk: Optional[int] = None,
                 fg_only: bool = False, bg_only: bool = False) -> RenderOutput:
    """Render ``(B, H, W, 3)`` images for flat cameras ``(B, 5)``.

    Foreground and background are integrated on their own samples and
    composited as ``fg + T_fg * bg``: the foreground sphere lies in front of
    every admissible camera and the background behind it. ``fg_only`` /
    ``bg_only`` force the other field's density to zero. ``generator=None``
    gives deterministic midpoint samples. ``chunk`` bounds the rays per pass.
    """
    B = cams.shape[0]
    H = W = int(resolution)
    dtype = next(gen.parameters()).dtype
    cams = cams.to(dtype)
    R, t = pose_to_rt(cams[:, RADIUS], cams[:, ROTATION], cams[:, ELEVATION])
    origin = -(R.transpose(-1, -2) @ t.unsqueeze(-1)).squeeze(-1)
    dirs = ray_directions(R, cams[:, FX] * W, cams[:, FY] * W, H, W)  # (B, HW, 3)
    bounds = fg_bounds(cams[:, RADIUS], gen.r_fg)
    use_bg = gen.bg is not None and n_bg > 0
    n_rays = H * W
    chunk = n_rays if chunk is None else max(1, chunk // max(B, 1))
    rgbs, alphas, depths_out = [], [], []
    for start in range(0, n_rays, chunk):
        d = dirs[:, start:start + chunk]
        fg = sample_fg(origin, d, bounds, n_fg, generator)
        sigma, rgb = gen.fg(fg.points, d, latents.z_s_fg.to(dtype), latents.z_a_fg.to(dtype))
        if bg_only:
            sigma = torch.zeros_like(sigma)
        color, t_fg, w = integrate_ray(sigma, rgb, fg.deltas)
        depth = (w * fg.depths).sum(-1) / (w.sum(-1) + 1e-8)
        if use_bg:
            bg = sample_bg(origin, d, n_bg, generator)
            sigma_b, rgb_b = gen.bg(bg.points, d, latents.z_s_bg.to(dtype), latents.z_a_bg.to(dtype))
            if fg_only:
                sigma_b = torch.zeros_like(sigma_b)
            color_b, _, _ = integrate_ray(sigma_b, rgb_b, bg.deltas)
            color = color + t_fg[..., None] * color_b
        rgbs.append(color)
        alphas.append(1.0 - t_fg)
        depths_out.append(depth)
    rgb = torch.cat(rgbs, 1).reshape(B, H, W, 3)
    fg_alpha = torch.cat(alphas, 1).reshape(B, H, W)
    depth_map = torch.cat(depths_out, 1).reshape(B, H, W)
    return RenderOutput(rgb, fg_alpha, depth_map)
