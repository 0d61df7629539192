import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vita import numerics
from vita.numerics import finite_diff_grad_check, gelu, layer_norm, reparameterize, softmax

D = torch.float64


def t(x):
    return torch.tensor(x, dtype=D)


def phi(x):
    return 0.5 * (1 + math.erf(x / math.sqrt(2)))


def test_gelu_examples():
    assert gelu(t(0.0)).item() == 0.0
    assert abs(gelu(t(10.0)).item() - 10.0) < 1e-6
    assert gelu(t(1.0)).item() == pytest.approx(phi(1.0), abs=1e-12)
    assert gelu(t(1.0)).item() == pytest.approx(0.841345, abs=1e-6)


def test_gelu_monotone_and_bounded():
    x = torch.linspace(-10, 10, 20001, dtype=D)
    y = gelu(x)
    # GELU dips below zero with a minimum near x = -0.75, so monotonicity only holds right of it
    right = x >= -0.7517915
    assert torch.all(torch.diff(y[right]) >= 0)
    lo, hi = torch.minimum(x, torch.zeros_like(x)), torch.maximum(x, torch.zeros_like(x))
    assert torch.all((y >= lo) & (y <= hi))


def test_gelu_matches_erf_oracle():
    xs = np.linspace(-6, 6, 97)
    got = gelu(t(xs)).numpy()
    want = np.array([x * phi(x) for x in xs])
    np.testing.assert_allclose(got, want, atol=1e-14)


def test_softmax_examples():
    np.testing.assert_allclose(softmax(t([0.0, 0.0, 0.0])).numpy(), [1 / 3] * 3, atol=1e-15)
    np.testing.assert_allclose(softmax(t([0.0, math.log(2)])).numpy(), [1 / 3, 2 / 3], atol=1e-15)
    np.testing.assert_allclose(softmax(t([5.0, 5.0, 5.0]) + 1e3).numpy(), [1 / 3] * 3, atol=1e-15)


def test_softmax_large_inputs_stable():
    y = softmax(t([1e4, 1e4, -1e4]))
    assert torch.isfinite(y).all()
    np.testing.assert_allclose(y.numpy(), [0.5, 0.5, 0.0], atol=1e-15)


@given(
    arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 9)), elements=st.floats(-50, 50)),
    st.floats(-100, 100),
    st.sampled_from([0, 1, -1]),
)
def test_softmax_properties(v, c, axis):
    v = t(v)
    y = softmax(v, axis)
    assert torch.all(y >= 0)
    np.testing.assert_allclose(y.sum(axis).numpy(), 1.0, atol=1e-9)
    np.testing.assert_allclose(softmax(v + c, axis).numpy(), y.numpy(), atol=1e-12)


def test_softmax_gradient():
    torch.manual_seed(0)
    w = torch.randn(4, 7, dtype=D)
    rep = finite_diff_grad_check(lambda p: (softmax(p["v"], -1) * w).sum() ** 2, {"v": torch.randn(4, 7, dtype=D)})
    assert rep.passed(1e-8), rep


def test_layer_norm_examples():
    np.testing.assert_allclose(layer_norm(t([1.0, 1.0, 1.0]), t([1.0] * 3), t([0.0] * 3)).numpy(), 0.0, atol=1e-12)
    out = layer_norm(t([-1.0, 1.0]))
    np.testing.assert_allclose(out.numpy(), np.array([-1.0, 1.0]) / math.sqrt(1 + 1e-5), atol=1e-15)


@given(arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(2, 12)), elements=st.floats(-1e3, 1e3)))
def test_layer_norm_mean_zero(v):
    out = layer_norm(t(v)).numpy()
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out.mean(-1), 0.0, atol=1e-9)
    spread = v.var(-1)
    var = out.var(-1)
    assert np.all(var[spread > 1.0] == pytest.approx(1.0, abs=1e-4))


def test_layer_norm_errors():
    with pytest.raises(ValueError):
        layer_norm(t([1.0]))
    with pytest.raises(ValueError):
        layer_norm(t([1.0, 2.0]), eps=0.0)


def test_layer_norm_gradient():
    torch.manual_seed(1)
    params = {"v": torch.randn(3, 6, dtype=D), "g": torch.randn(6, dtype=D), "b": torch.randn(6, dtype=D)}
    w = torch.randn(3, 6, dtype=D)
    rep = finite_diff_grad_check(lambda p: (layer_norm(p["v"], p["g"], p["b"]) * w).sum() ** 2, params)
    assert rep.passed(1e-6), rep


def test_gelu_gradient():
    rep = finite_diff_grad_check(lambda p: gelu(p["x"]).pow(2).sum(), {"x": torch.linspace(-4, 4, 33, dtype=D)})
    assert rep.passed(1e-6), rep


def test_reparameterize_examples():
    mu, sigma = t([0.0]), t([2.0])
    assert reparameterize(mu, sigma, noise=t([1.0])).item() == 2.0
    mu = t([1.5, -2.0])
    z = reparameterize(mu, t([1e-300, 1e-300]), generator=numerics.make_generator(0))
    assert torch.equal(z, mu)


def test_reparameterize_monte_carlo_mean():
    n = 100_000
    mu, sigma = torch.full((n,), 0.7, dtype=D), torch.full((n,), 1.3, dtype=D)
    z = reparameterize(mu, sigma, generator=numerics.make_generator(123))
    se = 1.3 / math.sqrt(n)
    assert abs(z.mean().item() - 0.7) < 4 * se


def test_reparameterize_reproducible_and_differentiable():
    mu = torch.zeros(5, dtype=D, requires_grad=True)
    sigma = torch.ones(5, dtype=D, requires_grad=True)
    a = reparameterize(mu, sigma, generator=numerics.make_generator(9))
    b = reparameterize(mu, sigma, generator=numerics.make_generator(9))
    assert torch.equal(a, b)
    a.sum().backward()
    assert torch.equal(mu.grad, torch.ones(5, dtype=D))
    assert torch.equal(sigma.grad, (a - mu).detach())


def test_reparameterize_errors():
    with pytest.raises(ValueError):
        reparameterize(t([0.0]), t([0.0]), noise=t([1.0]))
    with pytest.raises(ValueError):
        reparameterize(t([0.0, 1.0]), t([1.0]), noise=t([1.0]))


def test_grad_check_quadratic():
    rep = finite_diff_grad_check(lambda p: 0.5 * (p["p"] ** 2).sum(), {"p": t([3.0, 4.0])})
    assert rep.max_relative_error < 1e-8
    assert rep.num_params_checked == 2
    assert rep.passed()


class _WrongGrad(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return x**2

    @staticmethod
    def backward(ctx, g):
        (x,) = ctx.saved_tensors
        return g * 3 * x  # should be 2x


def test_grad_check_flags_wrong_gradient():
    rep = finite_diff_grad_check(lambda p: _WrongGrad.apply(p["w"]).sum(), {"w": t([1.0, 2.0])})
    assert not rep.passed()
    assert rep.worst_parameter == "w"


def test_grad_check_flags_nonfinite():
    rep = finite_diff_grad_check(lambda p: torch.sqrt(p["w"]).sum(), {"w": t([0.0, 1.0])})
    assert not rep.finite
    assert not rep.passed()


def test_grad_check_subsamples_large_tensors():
    rep = finite_diff_grad_check(lambda p: (p["a"] ** 3).sum() + p["b"].sum(), {"a": torch.rand(500, dtype=D), "b": t([1.0])})
    assert rep.num_params_checked == 64 + 1
    assert rep.passed()


def test_configure_runtime_rejects_zero_threads():
    with pytest.raises(ValueError):
        numerics.configure_runtime(0)
