"""Residual camera generator: prior camera -> predicted camera."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn

from .camera import (ELEVATION, FX, FY, RADIUS, ROTATION, CameraPrior, project_so2,
                     rotation_2x2, sample_prior_batch, so2_angle, wrap_angle)


@dataclass
class ClampSpec:
    """Hard ``(lo, hi)`` range per flat camera component.

    ``None`` leaves a component unclamped (rotation in 360 degree mode,
    which is wrapped instead).
    """
    ranges: Dict[int, Optional[Tuple[float, float]]] = field(default_factory=dict)

    def __post_init__(self):
        for k, rng in self.ranges.items():
            if rng is not None and not rng[0] < rng[1]:
                raise ValueError(f"empty clamp range {rng} for component {k}")

    @classmethod
    def default_for(cls, prior: CameraPrior) -> "ClampSpec":
        eps = 0.01
        ranges = {
            ELEVATION: (-math.pi / 2 + eps, math.pi / 2 - eps),
            RADIUS: (prior.r_fg + 0.05, 0.95),
            ROTATION: None if prior.full_rotation else (-math.pi, math.pi),
        }
        for idx, dist in ((FX, prior.fx), (FY, prior.fy)):
            m = abs(dist.mean)
            ranges[idx] = (0.5 * m, 1.5 * m)
        return cls(ranges)

    def apply(self, cams: torch.Tensor) -> torch.Tensor:
        cols = list(cams.unbind(-1))
        for idx, rng in self.ranges.items():
            if rng is not None:
                cols[idx] = torch.clamp(cols[idx], rng[0], rng[1])
        return torch.stack(cols, dim=-1)


class CameraGenerator(nn.Module):
    """MLP predicting a residual offset for the free camera parameters.

    Only components whose prior is not fixed enter the network; the others
    pass through. In 360 degree mode the rotation is fed as the four entries
    of its 2x2 rotation matrix, the offset is added in matrix space and the
    result projected back onto SO(2).
    """

    def __init__(self, prior: CameraPrior, clamp: Optional[ClampSpec] = None,
                 hidden: int = 64, n_layers: int = 4, last_std: float = 0.05):
        super().__init__()
        self.prior = prior
        self.clamp = clamp if clamp is not None else ClampSpec.default_for(prior)
        self.free = prior.free_params()
        self.full_rotation = prior.full_rotation
        self.dim = sum(4 if (i == ROTATION and self.full_rotation) else 1 for i in self.free)
        self.frozen = False
        layers = []
        d = max(self.dim, 1)
        for _ in range(n_layers):
            layers += [nn.Linear(d, hidden), nn.ReLU()]
            d = hidden
        self.trunk = nn.Sequential(*layers)
        self.last = nn.Linear(d, max(self.dim, 1))
        with torch.no_grad():
            self.last.weight.normal_(0.0, last_std)
            self.last.bias.zero_()

    def zero_last_layer(self) -> None:
        """Make the generator the exact identity (on in-range priors)."""
        with torch.no_grad():
            self.last.weight.zero_()
            self.last.bias.zero_()

    def freeze(self) -> None:
        self.frozen = True
        for p in self.parameters():
            p.requires_grad_(False)

    def unfreeze(self) -> None:
        self.frozen = False
        for p in self.parameters():
            p.requires_grad_(True)

    def encode(self, cams: torch.Tensor) -> torch.Tensor:
        parts = []
        for i in self.free:
            if i == ROTATION and self.full_rotation:
                parts.append(rotation_2x2(cams[:, ROTATION]).reshape(-1, 4))
            else:
                parts.append(cams[:, i:i + 1])
        return torch.cat(parts, dim=-1)

    def offsets(self, cams: torch.Tensor) -> torch.Tensor:
        return self.last(self.trunk(self.encode(cams)))

    def forward(self, prior_cams: torch.Tensor) -> torch.Tensor:
        """Map ``(B, 5)`` prior cameras to ``(B, 5)`` predicted cameras."""
        if not self.free:
            return prior_cams
        x = self.encode(prior_cams)
        y = x + self.last(self.trunk(x))
        cols = list(prior_cams.unbind(-1))
        j = 0
        for i in self.free:
            if i == ROTATION and self.full_rotation:
                rot, _ = project_so2(y[:, j:j + 4].reshape(-1, 2, 2))
                cols[ROTATION] = so2_angle(rot)
                j += 4
            else:
                cols[i] = y[:, j]
                j += 1
        if self.prior.tie_focal:
            cols[FY] = cols[FX]
        out = self.clamp.apply(torch.stack(cols, dim=-1))
        if not self.full_rotation:
            return out
        # atan2 already lands in (-pi, pi]; fold pi onto -pi
        return torch.cat([out[:, :ROTATION], wrap_angle(out[:, ROTATION:ROTATION + 1]), out[:, ROTATION + 1:]], -1)


def predict_camera(net: Optional[CameraGenerator], prior_cams: torch.Tensor) -> torch.Tensor:
    """Predicted cameras; with no generator (ablation) the prior passes through."""
    if net is None:
        return prior_cams
    return net(prior_cams)


def predicted_marginals(net: Optional[CameraGenerator], prior: CameraPrior, n: int,
                        generator: torch.Generator, reference: Optional[Dict[str, np.ndarray]] = None,
                        bins: int = 64, batch: int = 65536) -> Dict[str, dict]:
    """Push ``n`` prior samples through the generator and summarise each marginal.

    Returns ``{name: {"samples", "hist", "edges", "w1"?}}`` for rotation,
    elevation, radius and focal. ``w1`` is present when ``reference`` holds
    samples for that name; rotation is compared up to a circular shift.
    """
    from .evaluation import circular_w1, wasserstein_1d

    if n < 1:
        raise ValueError("n must be >= 1")
    chunks = []
    with torch.no_grad():
        for start in range(0, n, batch):
            cams = sample_prior_batch(prior, min(batch, n - start), generator)
            chunks.append(predict_camera(net, cams))
    cams = torch.cat(chunks).double().numpy()
    names = {"focal": FX, "radius": RADIUS, "rotation": ROTATION, "elevation": ELEVATION}
    ranges = {"rotation": (-math.pi, math.pi), "elevation": (-math.pi / 2, math.pi / 2)}
    out = {}
    for name, idx in names.items():
        s = cams[:, idx]
        lo, hi = ranges.get(name, (s.min(), s.max() if s.max() > s.min() else s.min() + 1e-6))
        hist, edges = np.histogram(s, bins=bins, range=(lo, hi), density=True)
        entry = {"samples": s, "hist": hist, "edges": edges}
        if reference is not None and name in reference:
            if name == "rotation":
                entry["w1"], entry["shift"] = circular_w1(s, reference[name])
            else:
                entry["w1"] = wasserstein_1d(s, reference[name])
        out[name] = entry
    return out
