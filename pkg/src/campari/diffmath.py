"""Dense f32 tensor ops with reverse-mode differentiation.

The tape is torch's autograd graph: every op below records its local
derivative on the graph of its inputs, ``backward`` replays the graph in
reverse insertion order and ``grad_of_output_wrt_input`` keeps the gradient
itself on the graph so penalties on it can be differentiated again.

The rest of the package calls torch directly; this module pins down the
contract (shapes, tie rules, clamp subgradients, double backward) that the
networks rely on, and its tests check it against finite differences.
"""

from __future__ import annotations

from typing import Dict, Iterable, Optional, Union

import torch
import torch.nn.functional as F

Tensor = torch.Tensor

LEAKY_SLOPE = 0.2

UNARY_OPS = ("exp", "log", "sin", "cos", "relu", "leaky_relu", "softplus", "negate", "clampv")
BINARY_OPS = ("add", "sub", "mul", "div")


def tensor(data, requires_grad: bool = False) -> Tensor:
    """Create an f32 tensor, optionally registered as a leaf of the tape."""
    return torch.tensor(data, dtype=torch.float32, requires_grad=requires_grad)


def _check_broadcast(a: Tensor, b: Tensor) -> None:
    # only leading-dim broadcasting: b's shape must be a suffix of a's
    if a.shape == b.shape or b.dim() == 0:
        return
    if b.dim() <= a.dim() and tuple(a.shape[a.dim() - b.dim():]) == tuple(b.shape):
        return
    raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def elementwise(op_kind: str, a: Tensor, b: Optional[Tensor] = None,
                lo: float = None, hi: float = None) -> Tensor:
    if op_kind in BINARY_OPS:
        if b is None:
            raise ValueError(f"{op_kind} needs two operands")
        _check_broadcast(a, b)
        if op_kind == "add":
            return a + b
        if op_kind == "sub":
            return a - b
        if op_kind == "mul":
            return a * b
        return a / b
    if op_kind not in UNARY_OPS:
        raise ValueError(f"unknown op_kind {op_kind!r}")
    if b is not None:
        raise ValueError(f"{op_kind} is unary")
    if op_kind == "exp":
        return torch.exp(a)
    if op_kind == "log":
        return torch.log(a)
    if op_kind == "sin":
        return torch.sin(a)
    if op_kind == "cos":
        return torch.cos(a)
    if op_kind == "relu":
        return torch.relu(a)
    if op_kind == "leaky_relu":
        return F.leaky_relu(a, LEAKY_SLOPE)
    if op_kind == "softplus":
        return F.softplus(a)
    if op_kind == "negate":
        return -a
    if lo is None or hi is None or lo > hi:
        raise ValueError("clampv needs lo <= hi")
    # hard clamp: gradient 1 inside [lo, hi], 0 outside
    return torch.clamp(a, lo, hi)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.dim() != 2 or b.dim() != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul dim mismatch: {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def reduce(op_kind: str, a: Tensor, axis: Union[int, str] = "all") -> Tensor:
    """Reduce by ``sum``, ``mean`` or ``max``.

    ``max`` routes the whole gradient to the first maximal element, so
    ``max([2, 2, 1])`` is differentiable only through index 0.
    """
    if op_kind not in ("sum", "mean", "max"):
        raise ValueError(f"unknown reduction {op_kind!r}")
    if axis == "all":
        if a.numel() == 0:
            raise ValueError("cannot reduce an empty tensor")
        flat = a.reshape(-1)
        if op_kind == "sum":
            return flat.sum()
        if op_kind == "mean":
            return flat.mean()
        return flat[torch.argmax(flat)]
    if not isinstance(axis, int) or not -a.dim() <= axis < a.dim():
        raise ValueError(f"invalid axis {axis!r} for shape {tuple(a.shape)}")
    if a.shape[axis] == 0:
        raise ValueError("cannot reduce over an empty axis")
    if op_kind == "sum":
        return a.sum(dim=axis)
    if op_kind == "mean":
        return a.mean(dim=axis)
    idx = torch.argmax(a, dim=axis, keepdim=True)
    return torch.gather(a, axis, idx).squeeze(axis)


def argmax(a: Tensor) -> int:
    """Index of the first maximal element of the flattened tensor."""
    return int(torch.argmax(a.reshape(-1)))


def backward(loss: Tensor, params: Optional[Iterable[Tensor]] = None) -> Dict[int, Tensor]:
    """Backpropagate a scalar loss; gradients accumulate into ``.grad``.

    Returns a map from ``id(param)`` to its gradient buffer for ``params``
    (or nothing when no parameters are given).
    """
    if loss.numel() != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if not loss.requires_grad:
        raise ValueError("loss is not on the tape")
    loss.reshape(()).backward()
    if params is None:
        return {}
    return {id(p): p.grad for p in params}


def grad_of_output_wrt_input(scalar_out: Tensor, inp: Tensor) -> Tensor:
    """Gradient of ``scalar_out`` w.r.t. ``inp``, kept on the tape.

    The result can itself be differentiated (double backward), which is what
    gradient penalties need. If ``inp`` does not feed ``scalar_out`` the
    gradient is a zero tensor of ``inp``'s shape.
    """
    if scalar_out.numel() != 1:
        raise ValueError("scalar_out must be a scalar")
    if not scalar_out.requires_grad:
        return torch.zeros_like(inp)
    (g,) = torch.autograd.grad(scalar_out.reshape(()), inp, create_graph=True, allow_unused=True)
    if g is None:
        return torch.zeros_like(inp)
    return g
