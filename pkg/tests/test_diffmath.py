import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from campari import diffmath as dm


def central_fd(f, x: np.ndarray, h: float) -> np.ndarray:
    """Central finite differences of scalar ``f`` in float64."""
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        g.flat[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def test_add_relu_softplus_examples():
    assert dm.elementwise("add", dm.tensor([1, 2]), dm.tensor([3, 4])).tolist() == [4, 6]
    assert dm.elementwise("relu", dm.tensor([-1, 0, 2])).tolist() == [0, 0, 2]
    assert dm.elementwise("softplus", dm.tensor(0.0)).item() == pytest.approx(math.log(2), abs=1e-7)
    assert dm.elementwise("leaky_relu", dm.tensor([-1.0])).item() == pytest.approx(-0.2)


def test_leading_dim_broadcast_only():
    a = dm.tensor(np.ones((2, 3)))
    assert dm.elementwise("mul", a, dm.tensor([1, 2, 3])).shape == (2, 3)
    with pytest.raises(ValueError):
        dm.elementwise("add", a, dm.tensor([1, 2]))
    with pytest.raises(ValueError):
        dm.elementwise("add", a, dm.tensor(np.ones((2, 1))))


def test_unknown_and_misused_ops():
    with pytest.raises(ValueError):
        dm.elementwise("tanh", dm.tensor([1.0]))
    with pytest.raises(ValueError):
        dm.elementwise("add", dm.tensor([1.0]))
    with pytest.raises(ValueError):
        dm.elementwise("clampv", dm.tensor([1.0]), lo=1.0, hi=0.0)


def test_clampv_gradient_is_one_inside_zero_outside():
    x = dm.tensor([-2.0, 0.5, 3.0], requires_grad=True)
    dm.backward(dm.reduce("sum", dm.elementwise("clampv", x, lo=-1.0, hi=1.0)))
    assert x.grad.tolist() == [0.0, 1.0, 0.0]


def test_matmul_examples_and_errors():
    m = dm.tensor([[1, 2], [3, 4]])
    assert torch.equal(dm.matmul(dm.tensor(np.eye(2)), m), m)
    assert dm.matmul(dm.tensor([[1, 2]]), dm.tensor([[3], [4]])).tolist() == [[11]]
    with pytest.raises(ValueError):
        dm.matmul(m, dm.tensor([[1, 2, 3]]))


def test_matmul_gradient_is_column_sums_of_b():
    rng = np.random.default_rng(0)
    A0, B0 = rng.normal(size=(3, 4)), rng.normal(size=(4, 5))
    A = dm.tensor(A0, requires_grad=True)
    dm.backward(dm.reduce("sum", dm.matmul(A, dm.tensor(B0))))
    fd = central_fd(lambda a: (a @ B0).sum(), A0, 1e-3)
    np.testing.assert_allclose(A.grad.numpy(), fd, rtol=1e-4, atol=1e-5)
    np.testing.assert_allclose(A.grad.numpy(), np.tile(B0.sum(1), (3, 1)), rtol=1e-5)


def test_reduce_examples():
    assert dm.reduce("sum", dm.tensor([1, 2, 3])).item() == 6
    assert dm.reduce("mean", dm.tensor([[1, 3], [5, 7]]), axis=0).tolist() == [3, 5]
    v = dm.tensor([2.0, 2.0, 1.0], requires_grad=True)
    m = dm.reduce("max", v)
    assert m.item() == 2 and dm.argmax(v) == 0
    dm.backward(m)
    assert v.grad.tolist() == [1.0, 0.0, 0.0]


def test_reduce_max_axis_tie_goes_to_lowest_index():
    v = dm.tensor([[1.0, 4.0, 4.0], [3.0, 3.0, 0.0]], requires_grad=True)
    dm.backward(dm.reduce("sum", dm.reduce("max", v, axis=1)))
    assert v.grad.tolist() == [[0, 1, 0], [1, 0, 0]]


def test_reduce_errors():
    with pytest.raises(ValueError):
        dm.reduce("sum", dm.tensor(np.zeros((2, 0))), axis=1)
    with pytest.raises(ValueError):
        dm.reduce("prod", dm.tensor([1.0]))
    with pytest.raises(ValueError):
        dm.reduce("sum", dm.tensor([1.0]), axis=3)


def test_backward_square_and_nonscalar_error():
    x = dm.tensor(3.0, requires_grad=True)
    dm.backward(dm.elementwise("mul", x, x))
    assert x.grad.item() == 6.0
    y = dm.tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError):
        dm.backward(dm.elementwise("mul", y, y))


def test_backward_returns_param_gradients_and_accumulates_on_dags():
    x = dm.tensor([1.0, -2.0], requires_grad=True)
    y = dm.elementwise("mul", x, x)
    loss = dm.reduce("sum", dm.elementwise("add", y, x))  # x feeds two paths
    grads = dm.backward(loss, [x])
    assert grads[id(x)].tolist() == [3.0, -3.0]


def test_relu_network_matches_finite_differences():
    rng = np.random.default_rng(1)
    W0, x0 = rng.normal(size=(6, 4)), rng.normal(size=(4, 1))
    W = dm.tensor(W0, requires_grad=True)
    dm.backward(dm.reduce("sum", dm.elementwise("relu", dm.matmul(W, dm.tensor(x0)))))

    def f(w):
        return np.maximum(w @ x0, 0).sum()

    fd = central_fd(f, W0, 1e-2)
    rel = np.abs(W.grad.numpy() - fd).max() / np.abs(fd).max()
    assert rel < 1e-3


UNARY_REF = {
    "exp": np.exp, "log": np.log, "sin": np.sin, "cos": np.cos,
    "softplus": lambda x: np.log1p(np.exp(x)), "negate": lambda x: -x,
    "relu": lambda x: np.maximum(x, 0), "leaky_relu": lambda x: np.where(x > 0, x, 0.2 * x),
}
BINARY_REF = {"add": np.add, "sub": np.subtract, "mul": np.multiply, "div": np.divide}


@pytest.mark.parametrize("op", sorted(UNARY_REF) + sorted(BINARY_REF))
@pytest.mark.parametrize("seed", range(100))
def test_elementwise_gradients_vs_fd(op, seed):
    rng = np.random.default_rng(seed)
    x0 = rng.normal(size=10)
    if op == "log":
        x0 = np.abs(x0) + 0.5
    if op in ("relu", "leaky_relu"):
        # keep probes away from the kink
        x0 = np.sign(x0) * (np.abs(x0) + 0.05)
    b0 = rng.normal(size=10)
    if op == "div":
        b0 = np.sign(b0) * (np.abs(b0) + 0.5)
    w = rng.normal(size=10)
    x = dm.tensor(x0, requires_grad=True)
    out = dm.elementwise(op, x, dm.tensor(b0)) if op in BINARY_REF else dm.elementwise(op, x)
    dm.backward(dm.reduce("sum", dm.elementwise("mul", out, dm.tensor(w))))
    if op in BINARY_REF:
        def f(v):
            return (BINARY_REF[op](v, b0) * w).sum()
    else:
        def f(v):
            return (UNARY_REF[op](v) * w).sum()
    scale = max(1.0, np.abs(x0).max())
    fd = central_fd(f, x0, 1e-2 * scale * 1e-2)
    err = np.abs(x.grad.numpy() - fd).max() / max(np.abs(fd).max(), 1e-6)
    assert err < 1e-3


def test_grad_of_output_linear_and_quadratic():
    I = dm.tensor(np.ones((4, 4, 3)), requires_grad=True)
    g = dm.grad_of_output_wrt_input(dm.reduce("sum", I), I)
    assert torch.equal(g, torch.ones(4, 4, 3))
    assert (g ** 2).sum().item() == 48.0
    g2 = dm.grad_of_output_wrt_input(dm.reduce("sum", I * I), I)
    assert torch.equal(g2, 2 * torch.ones(4, 4, 3))


def test_grad_of_output_unused_input_is_zero():
    a = dm.tensor([1.0, 2.0], requires_grad=True)
    b = dm.tensor([3.0], requires_grad=True)
    g = dm.grad_of_output_wrt_input(dm.reduce("sum", a * a), b)
    assert torch.equal(g, torch.zeros(1))


def test_linear_discriminator_penalty_is_constant_in_the_image():
    # D(I) = sum(w0 * I) with constant w0: |grad|^2 does not depend on I, and
    # its gradient w.r.t. I is zero.
    I = dm.tensor(np.random.default_rng(0).normal(size=(2, 3)), requires_grad=True)
    w0 = dm.tensor(np.full((2, 3), 0.7))
    g = dm.grad_of_output_wrt_input(dm.reduce("sum", w0 * I), I)
    pen = dm.reduce("sum", g * g)
    assert pen.item() == pytest.approx(6 * 0.49)
    assert torch.count_nonzero(dm.grad_of_output_wrt_input(pen, I)) == 0


def test_penalty_gradient_wrt_weight_matches_fd():
    # D(I) = phi * sum(I^2 / 2 + I): grad_I = phi (I + 1); pen = phi^2 sum((I+1)^2)
    I0 = np.random.default_rng(2).normal(size=(4, 4, 3))
    phi = dm.tensor(0.3, requires_grad=True)
    I = dm.tensor(I0, requires_grad=True)
    out = dm.reduce("sum", phi * (I * I / 2 + I))
    g = dm.grad_of_output_wrt_input(out, I)
    dm.backward(dm.reduce("sum", g * g), [phi])

    def pen(p):
        return (p[0] ** 2) * ((I0 + 1) ** 2).sum()

    fd = central_fd(pen, np.array([0.3]), 1e-3)
    assert phi.grad.item() == pytest.approx(fd[0], rel=1e-4)


def test_tape_replay_is_deterministic():
    def run():
        torch.manual_seed(5)
        W = torch.randn(8, 8, requires_grad=True)
        x = torch.randn(8, 3)
        dm.backward(dm.reduce("sum", dm.elementwise("softplus", dm.matmul(W, x))))
        return W.grad.clone()

    assert torch.equal(run(), run())


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=12))
def test_max_reduce_matches_numpy(values):
    v = dm.tensor(values)
    assert dm.reduce("max", v).item() == pytest.approx(np.float32(max(values)))
    assert dm.argmax(v) == int(np.argmax(np.asarray(values, dtype=np.float32)))
