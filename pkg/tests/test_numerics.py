import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from apgcl.numerics import (
    Linear,
    NumericsError,
    ParameterSet,
    check_gradient,
    layer_norm,
    linear,
    precision,
    softmax,
)


def test_softmax_examples():
    assert torch.allclose(softmax(torch.zeros(4)), torch.full((4,), 0.25))
    assert softmax(torch.tensor([3.7])).item() == 1.0
    # 1/(1+e), e/(1+e)
    out = softmax(torch.tensor([1.0, 2.0], dtype=torch.float64))
    assert out.tolist() == pytest.approx([0.2689414213699951, 0.7310585786300049], abs=1e-12)


def test_softmax_shift_invariant_and_large_logits():
    v = torch.tensor([1000.0, 1001.0, 999.0])
    out = softmax(v)
    assert torch.isfinite(out).all()
    assert torch.allclose(out, softmax(v - 1000.0))


@pytest.mark.parametrize("bad", [float("nan"), float("inf"), -float("inf")])
def test_softmax_rejects_non_finite(bad):
    with pytest.raises(NumericsError):
        softmax(torch.tensor([0.0, bad]))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-50, 50, allow_nan=False), min_size=1, max_size=10_000))
def test_softmax_is_a_distribution(xs):
    with precision(64):
        out = softmax(torch.tensor(xs))
    assert abs(float(out.sum()) - 1.0) <= 1e-6
    assert bool((out > 0).all())


def test_linear_examples():
    x = torch.randn(3, 5)
    assert torch.equal(linear(x, torch.eye(5)), x)
    assert linear(torch.tensor([[1.0, 2.0]]), torch.tensor([[1.0], [1.0]])).tolist() == [[3.0]]


def test_linear_matches_triple_loop(f64):
    rng = np.random.default_rng(3)
    x, w, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=2)
    ref = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            ref[i, j] = sum(x[i, k] * w[k, j] for k in range(4)) + b[j]
    out = linear(torch.tensor(x), torch.tensor(w), torch.tensor(b)).numpy()
    assert np.abs(out - ref).max() <= 1e-9


def test_linear_error_names_shapes():
    with pytest.raises(NumericsError, match=r"\(2, 3\).*\(4, 5\)"):
        linear(torch.zeros(2, 3), torch.zeros(4, 5))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_linear_bilinear(seed, a, b):
    g = torch.Generator().manual_seed(seed)
    x, y = torch.randn(3, 4, generator=g, dtype=torch.float64), torch.randn(3, 4, generator=g, dtype=torch.float64)
    w = torch.randn(4, 2, generator=g, dtype=torch.float64)
    lhs = linear(a * x + b * y, w)
    rhs = a * linear(x, w) + b * linear(y, w)
    assert (lhs - rhs).abs().max() <= 1e-9


def test_layer_norm_zero_mean_unit_var(f64):
    x = torch.randn(5, 8) * 3 + 2
    y = layer_norm(x, torch.ones(8), torch.zeros(8), eps=0.0)
    assert torch.allclose(y.mean(-1), torch.zeros(5), atol=1e-12)
    assert torch.allclose(y.var(-1, unbiased=False), torch.ones(5), atol=1e-10)


def test_parameter_set_names_and_freezing():
    m = Linear(3, 2)
    ps = ParameterSet.from_module(m, prefix="lin.")
    assert list(ps) == ["lin.weight", "lin.bias"]
    with pytest.raises(NumericsError):
        ps.add("lin.weight", torch.zeros(1))
    ps.set_trainable(False, prefix="lin.w")
    assert not ps.is_trainable("lin.weight") and ps.is_trainable("lin.bias")
    before = ps.snapshot()
    opt = torch.optim.SGD(ps.trainable(), lr=0.1)
    m(torch.randn(4, 3)).sum().backward()
    opt.step()
    assert torch.equal(before["lin.weight"], m.weight)
    assert not torch.equal(before["lin.bias"], m.bias)


def test_precision_context_restores_dtype():
    assert torch.get_default_dtype() == torch.float32
    with precision(64):
        assert torch.zeros(1).dtype == torch.float64
    assert torch.get_default_dtype() == torch.float32
    with pytest.raises(NumericsError):
        with precision(16):
            pass


def test_check_gradient_quadratic_and_constant(f64):
    w = torch.tensor([3.0], requires_grad=True)
    assert check_gradient(lambda: (w**2).sum(), {"w": w}, eps=1e-4) <= 1e-6
    assert check_gradient(lambda: torch.tensor(2.0) + 0 * w.sum(), {"w": w}) == 0.0


def test_check_gradient_classification_head(f64):
    from apgcl.losses import classification_loss

    w = torch.randn(6, 4, requires_grad=True)
    b = torch.randn(4, requires_grad=True)
    x, y = torch.randn(5, 6), torch.tensor([0, 1, 2, 3, 1])
    err = check_gradient(lambda: classification_loss(softmax(linear(x, w, b)), y), {"w": w, "b": b})
    assert err <= 1e-4


def test_check_gradient_detects_wrong_backward(f64):
    class Bad(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return x**2

        @staticmethod
        def backward(ctx, g):
            return g  # should be 2x

    w = torch.tensor([1.5, -2.0], requires_grad=True)
    assert check_gradient(lambda: Bad.apply(w).sum(), {"w": w}) > 0.1


def test_check_gradient_rejects_non_finite(f64):
    w = torch.tensor([0.0], requires_grad=True)
    with pytest.raises(NumericsError):
        check_gradient(lambda: torch.log(w).sum(), {"w": w})


def test_check_gradient_skips_frozen(f64):
    w = torch.tensor([1.0], requires_grad=False)
    v = torch.tensor([2.0], requires_grad=True)
    errs = check_gradient(lambda: (w * v**3).sum(), {"w": w, "v": v}, per_parameter=True)
    assert list(errs) == ["v"]
    assert errs["v"] <= 1e-8
