"""Camera-distribution recovery metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np


def wasserstein_1d(a, b) -> float:
    """Exact 1-Wasserstein distance between two 1-D empirical distributions.

    Integrates ``|F_a - F_b|`` over the merged sorted support.
    """
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    if a.size == 0 or b.size == 0:
        raise ValueError("empty sample")
    allv = np.concatenate([a, b])
    allv.sort(kind="mergesort")
    widths = np.diff(allv)
    cdf_a = np.searchsorted(a, allv[:-1], side="right") / a.size
    cdf_b = np.searchsorted(b, allv[:-1], side="right") / b.size
    return float(np.sum(np.abs(cdf_a - cdf_b) * widths))


def wrap(x):
    return np.mod(np.asarray(x) + math.pi, 2 * math.pi) - math.pi


def circular_w1(pred, ref, n_shifts: int = 360) -> Tuple[float, float]:
    """W1 between rotation samples after the best circular shift of ``pred``.

    Rotations are only recoverable up to a global offset, so ``pred`` is
    shifted over an ``n_shifts``-point grid on ``[-pi, pi)``, wrapped and
    compared on the line. Returns ``(w1, shift)``.
    """
    pred = np.asarray(pred, dtype=np.float64)
    best = (math.inf, 0.0)
    for k in range(n_shifts):
        s = -math.pi + 2 * math.pi * k / n_shifts
        d = wasserstein_1d(wrap(pred + s), ref)
        if d < best[0]:
            best = (d, s)
    return best


@dataclass
class EvalReport:
    """Per-marginal W1 of predicted (and prior) cameras against ground truth."""

    w1: Dict[str, float]
    prior_w1: Dict[str, float]
    rotation_shift: float
    n_samples: int
    histograms: Dict[str, Tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"w1": self.w1, "prior_w1": self.prior_w1, "rotation_shift": self.rotation_shift,
                "n_samples": self.n_samples}

    def summary(self) -> str:
        lines = [f"{'marginal':<10} {'W1 pred':>10} {'W1 prior':>10}"]
        for k in self.w1:
            lines.append(f"{k:<10} {self.w1[k]:>10.4f} {self.prior_w1[k]:>10.4f}")
        lines.append(f"rotation aligned by a shift of {self.rotation_shift:+.4f} rad")
        return "\n".join(lines)


def evaluate_cameras(camgen, prior, truth: Dict[str, np.ndarray], n_samples: int, seed: int = 0,
                     bins: int = 64) -> EvalReport:
    """Compare the predicted camera marginals with ground-truth poses.

    ``truth`` maps ``rotation`` / ``elevation`` / ``radius`` to samples.
    Both the camera generator (``None`` means prior cameras are used as-is)
    and the bare prior are scored, from the same prior draws.
    """
    import torch

    from .camera_generator import predicted_marginals

    ref = {k: v for k, v in truth.items() if k in ("rotation", "elevation", "radius")}
    pred = predicted_marginals(camgen, prior, n_samples, torch.Generator().manual_seed(seed), ref, bins)
    base = predicted_marginals(None, prior, n_samples, torch.Generator().manual_seed(seed), ref, bins)
    w1 = {k: float(pred[k]["w1"]) for k in ref}
    prior_w1 = {k: float(base[k]["w1"]) for k in ref}
    hists = {k: (v["hist"], v["edges"]) for k, v in pred.items()}
    return EvalReport(w1, prior_w1, float(pred["rotation"].get("shift", 0.0)) if "rotation" in ref else 0.0,
                      n_samples, hists)
