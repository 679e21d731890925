"""Conditional radiance fields for the foreground and background."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class SceneBounds:
    r_fg: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.r_fg < 1.0:
            raise ValueError(f"r_fg must lie in (0, 1), got {self.r_fg}")


@dataclass
class LatentBundle:
    z_s_fg: torch.Tensor
    z_a_fg: torch.Tensor
    z_s_bg: torch.Tensor
    z_a_bg: torch.Tensor

    @classmethod
    def sample(cls, batch: int, dim: int, generator: torch.Generator) -> "LatentBundle":
        z = torch.randn(4, batch, dim, generator=generator)
        return cls(*z.unbind(0))

    def lerp(self, other: "LatentBundle", t: float, shape: bool = True, appearance: bool = True) -> "LatentBundle":
        def mix(a, b, on):
            return a + t * (b - a) if on else a
        return LatentBundle(mix(self.z_s_fg, other.z_s_fg, shape), mix(self.z_a_fg, other.z_a_fg, appearance),
                            mix(self.z_s_bg, other.z_s_bg, shape), mix(self.z_a_bg, other.z_a_bg, appearance))

    def index(self, idx) -> "LatentBundle":
        return LatentBundle(self.z_s_fg[idx], self.z_a_fg[idx], self.z_s_bg[idx], self.z_a_bg[idx])


class PosEncoding(nn.Module):
    """``[x, sin(2^i pi x), cos(2^i pi x)]_{i < n_freq}`` applied element-wise."""

    def __init__(self, in_dim: int, n_freq: int, include_input: bool = True):
        super().__init__()
        self.in_dim = in_dim
        self.n_freq = n_freq
        self.include_input = include_input
        self.register_buffer("freqs", (2.0 ** torch.arange(n_freq, dtype=torch.float64)) * math.pi, persistent=False)

    @property
    def out_dim(self) -> int:
        return self.in_dim * (2 * self.n_freq + int(self.include_input))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        parts = [x] if self.include_input else []
        if self.n_freq:
            xf = x.unsqueeze(-2) * self.freqs.to(x.dtype)[:, None]  # (..., n_freq, in_dim)
            parts.append(torch.stack([torch.sin(xf), torch.cos(xf)], dim=-2).flatten(-3))
        return torch.cat(parts, dim=-1)


def encode(x: torch.Tensor, n_freq: int, include_input: bool = True) -> torch.Tensor:
    return PosEncoding(x.shape[-1], n_freq, include_input).to(x.dtype)(x)


def inverted_sphere(x: torch.Tensor) -> torch.Tensor:
    """``x -> (x / |x|, 1 / |x|)`` for points outside the unit sphere."""
    inv = 1.0 / torch.linalg.norm(x, dim=-1, keepdim=True)
    return torch.cat([x * inv, inv], dim=-1)


def he_uniform_(layer: nn.Linear) -> nn.Linear:
    bound = math.sqrt(6.0 / layer.in_features)
    with torch.no_grad():
        layer.weight.uniform_(-bound, bound)
        layer.bias.zero_()
    return layer


class RadianceNet(nn.Module):
    """Density and colour of a point, conditioned on shape/appearance codes.

    Layout: the encoded point and ``z_s`` feed a ReLU trunk with a skip
    connection re-injecting them at layer ``skip``; density is read off the
    trunk through a softplus, colour through a small branch that also sees
    the encoded view direction and ``z_a``. Concatenations with per-ray or
    per-image inputs are computed as separate matmuls and broadcast, which
    is numerically the same as concatenating.
    """

    def __init__(self, point_dim: int = 3, latent_dim: int = 64, n_layers: int = 8, width: int = 128,
                 skip: Optional[int] = 4, n_freq_x: int = 10, n_freq_d: int = 4,
                 include_input: bool = True, sigma_init: float = 0.1):
        super().__init__()
        self.enc_x = PosEncoding(point_dim, n_freq_x, include_input)
        self.enc_d = PosEncoding(3, n_freq_d, include_input)
        self.latent_dim = latent_dim
        self.n_layers = n_layers
        self.skip = skip if skip is not None and 0 < skip < n_layers else None
        in_dim = self.enc_x.out_dim + latent_dim
        self.layers = nn.ModuleList()
        for i in range(n_layers):
            fan_in = in_dim if i == 0 else width + (in_dim if i == self.skip else 0)
            self.layers.append(he_uniform_(nn.Linear(fan_in, width)))
        self.sigma_head = he_uniform_(nn.Linear(width, 1))
        self.feature = he_uniform_(nn.Linear(width, width))
        self.color_hidden = he_uniform_(nn.Linear(width + self.enc_d.out_dim + latent_dim, width // 2))
        self.color_out = he_uniform_(nn.Linear(width // 2, 3))
        with torch.no_grad():
            # start semi-transparent: softplus(bias) = sigma_init, weights scaled down
            self.sigma_head.weight.mul_(0.01)
            self.sigma_head.bias.fill_(math.log(math.expm1(sigma_init)))

    def _split_linear(self, layer: nn.Linear, pieces):
        """``layer(cat(pieces))`` with pieces allowed to have broadcastable leading dims."""
        out = None
        start = 0
        for p in pieces:
            w = layer.weight[:, start:start + p.shape[-1]]
            y = p @ w.T
            out = y if out is None else out + y
            start += p.shape[-1]
        return out + layer.bias

    def forward(self, x: torch.Tensor, d: torch.Tensor, z_s: torch.Tensor, z_a: torch.Tensor,
                ) -> Tuple[torch.Tensor, torch.Tensor]:
        """Evaluate the field.

        x: ``(B, R, S, point_dim)`` sample points; d: ``(B, R, 3)`` unit ray
        directions; z_s, z_a: ``(B, L_z)``. Returns sigma ``(B, R, S)`` and
        colour ``(B, R, S, 3)``.
        """
        ex = self.enc_x(x)
        zs = z_s[:, None, None, :]
        h = x.new_zeros(())
        for i, layer in enumerate(self.layers):
            if i == 0:
                h = self._split_linear(layer, [ex, zs])
            elif i == self.skip:
                h = self._split_linear(layer, [h, ex, zs])
            else:
                h = layer(h)
            h = torch.relu(h)
        sigma = F.softplus(self.sigma_head(h)).squeeze(-1)
        feat = self.feature(h)
        ed = self.enc_d(d)[:, :, None, :]
        za = z_a[:, None, None, :]
        c = torch.relu(self._split_linear(self.color_hidden, [feat, ed, za]))
        rgb = torch.sigmoid(self.color_out(c))
        return sigma, rgb


def eval_fg(net: RadianceNet, x, d, z_s, z_a):
    return net(x, d, z_s, z_a)


def eval_bg(net: RadianceNet, x4, d, z_s, z_a):
    return net(x4, d, z_s, z_a)
