"""Progressive-growing discriminator made of CoordConv residual blocks."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .diffmath import LEAKY_SLOPE

# channels of the feature map entering the block at each resolution
CHANNELS = {256: 32, 128: 64, 64: 128, 32: 128, 16: 256, 8: 256, 4: 256}


def coordconv_augment(x: torch.Tensor) -> torch.Tensor:
    """Append x and y coordinate channels, each spanning [-1, 1], to ``(B, C, H, W)``."""
    B, _, H, W = x.shape
    ys = torch.linspace(-1.0, 1.0, H, dtype=x.dtype, device=x.device)
    xs = torch.linspace(-1.0, 1.0, W, dtype=x.dtype, device=x.device)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    coords = torch.stack([gx, gy])[None].expand(B, 2, H, W)
    return torch.cat([x, coords], dim=1)


class CoordConv(nn.Module):
    def __init__(self, cin: int, cout: int, kernel: int, stride: int = 1):
        super().__init__()
        self.conv = nn.Conv2d(cin + 2, cout, kernel, stride=stride, padding=kernel // 2)

    def forward(self, x):
        return self.conv(coordconv_augment(x))


class ResBlock(nn.Module):
    """Two CoordConvs (the second with stride 2) plus a strided 1x1 shortcut."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv1 = CoordConv(cin, cout, 3)
        self.conv2 = CoordConv(cout, cout, 3, stride=2)
        self.skip = nn.Conv2d(cin, cout, 1, stride=2)

    def forward(self, x):
        y = F.leaky_relu(self.conv1(x), LEAKY_SLOPE)
        y = F.leaky_relu(self.conv2(y), LEAKY_SLOPE)
        return (y + self.skip(x)) / math.sqrt(2.0)


class FromRGB(nn.Module):
    def __init__(self, cout: int):
        super().__init__()
        self.conv = CoordConv(3, cout, 1)

    def forward(self, img):
        return F.leaky_relu(self.conv(img), LEAKY_SLOPE)


@dataclass
class GrowthState:
    stage: int = 0
    fade_alpha: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.fade_alpha <= 1.0:
            raise ValueError("fade_alpha must lie in [0, 1]")


def fade_alpha_at(iteration: int, grow_iteration: int, fade_window: int) -> float:
    if fade_window <= 0:
        return 1.0
    return float(min(1.0, max(0.0, (iteration - grow_iteration) / fade_window)))


class Discriminator(nn.Module):
    """Discriminator for a ladder of resolutions, grown one block at a time.

    At stage ``k`` the network consumes images at ``resolutions[k]``. Every
    block halves the resolution; the final 4x4 map feeds a linear head. A
    stage adds one block (plus its fromRGB adapter) in front of the existing
    ones. New modules are initialised from a generator seeded by
    ``(seed, stage)`` so the architecture and weights do not depend on when
    growth happens relative to other random draws.
    """

    def __init__(self, resolutions: Sequence[int] = (32, 64, 128), channel_div: int = 1, seed: int = 0):
        super().__init__()
        resolutions = [int(r) for r in resolutions]
        for r in resolutions:
            if r < 8 or r & (r - 1):
                raise ValueError(f"resolution {r} is not a power of two >= 8")
        if any(b != 2 * a for a, b in zip(resolutions, resolutions[1:])):
            raise ValueError(f"resolutions must double at each stage: {resolutions}")
        self.resolutions = resolutions
        self.channel_div = channel_div
        self.seed = seed
        self.blocks = nn.ModuleDict()
        self.from_rgb = nn.ModuleDict()
        self.stage = -1
        with self._seeded(0):
            self.head = nn.Linear(self.channels(4) * 16, 1)
            r = 8
            while r <= resolutions[0]:
                self.blocks[str(r)] = ResBlock(self.channels(r), self.channels(r // 2))
                r *= 2
            self.from_rgb[str(resolutions[0])] = FromRGB(self.channels(resolutions[0]))
        self.stage = 0

    def channels(self, res: int) -> int:
        return max(4, CHANNELS.get(res, 32) // self.channel_div)

    def _seeded(self, stage: int) -> "_SeededScope":
        return _SeededScope((self.seed * 1000003 + stage * 7919) % (2 ** 63))

    @property
    def resolution(self) -> int:
        return self.resolutions[self.stage]

    def grow(self, new_stage: int) -> None:
        if new_stage != self.stage + 1 or new_stage >= len(self.resolutions):
            raise ValueError(f"cannot grow from stage {self.stage} to {new_stage}")
        res = self.resolutions[new_stage]
        with self._seeded(new_stage):
            self.blocks[str(res)] = ResBlock(self.channels(res), self.channels(res // 2))
            self.from_rgb[str(res)] = FromRGB(self.channels(res))
        self.stage = new_stage

    def _trunk(self, h: torch.Tensor, res: int) -> torch.Tensor:
        while res > 4:
            h = self.blocks[str(res)](h)
            res //= 2
        return self.head(h.flatten(1)).squeeze(-1)

    def forward(self, img: torch.Tensor, growth: GrowthState = None) -> torch.Tensor:
        """Logits ``(B,)`` for images ``(B, H, W, 3)`` with values in [0, 1]."""
        growth = growth if growth is not None else GrowthState(self.stage, 1.0)
        if growth.stage != self.stage:
            raise ValueError(f"growth stage {growth.stage} does not match network stage {self.stage}")
        res = self.resolutions[self.stage]
        if img.shape[1] != res or img.shape[2] != res:
            raise ValueError(f"expected {res}x{res} images at stage {self.stage}, got {tuple(img.shape[1:3])}")
        x = img.permute(0, 3, 1, 2) * 2.0 - 1.0
        alpha = growth.fade_alpha
        if self.stage == 0 or alpha >= 1.0:
            return self._trunk(self.blocks[str(res)](self.from_rgb[str(res)](x)), res // 2)
        old = self.from_rgb[str(res // 2)](F.avg_pool2d(x, 2))
        if alpha <= 0.0:
            return self._trunk(old, res // 2)
        new = self.blocks[str(res)](self.from_rgb[str(res)](x))
        return self._trunk(alpha * new + (1.0 - alpha) * old, res // 2)


class _SeededScope:
    """Run module construction under a fixed torch seed without disturbing the global RNG."""

    def __init__(self, seed: int):
        self.seed = seed
        self._fork = None

    def __enter__(self):
        self._fork = torch.random.fork_rng(devices=[])
        self._fork.__enter__()
        torch.manual_seed(self.seed)
        return self

    def __exit__(self, *exc):
        return self._fork.__exit__(*exc)
