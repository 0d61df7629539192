import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from vita import numerics
from vita.data import BASIC_INDICES, DETAILED_INDICES, N_CHANNELS
from vita.encoder import (
    LOGVAR_CLAMP, ModelConfig, VitaModel, build_input, collate, count_parameters, plain_transformer_parameters,
)
from vita.numerics import finite_diff_grad_check

TOY = ModelConfig(d_model=32, n_layers=2, n_heads=4, d_mlp=64, max_len=8, scorer_hidden=8, yield_hidden=16)


class _YieldPath(torch.nn.Module):
    def __init__(self, model):
        super().__init__()
        self.model = model

    def forward(self, x, y_past, noise):
        return self.model.forward_yield(x, y_past, noise=noise)[0]


def toy_model(seed=0, cfg=TOY):
    torch.manual_seed(seed)
    return VitaModel(cfg).double()


def years(T, start=2000):
    return np.repeat(np.arange(start, start + 7), 52)[:T]


def test_parameter_shapes_and_overhead():
    cfg = ModelConfig()
    m = VitaModel(cfg)
    shapes = {k: tuple(v.shape) for k, v in m.named_parameters()}
    assert shapes["input_proj.weight"] == (200, 34)
    assert shapes["pos_embed"] == (364, 200)
    assert shapes["layers.3.attn.qkv.weight"] == (600, 200)
    assert shapes["layers.3.mlp.fc1.weight"] == (800, 200)
    assert shapes["posterior_head.weight"] == (62, 200)
    assert shapes["scorer.fc1.weight"] == (16, 31) and shapes["scorer.fc2.weight"] == (1, 16)
    assert shapes["yield_head.fc1.weight"] == (120, 37) and shapes["yield_head.fc2.weight"] == (1, 120)
    assert sum(v.numel() for k, v in m.named_parameters() if k.startswith("prior.")) == 124
    assert "layers.4.ln1.gain" not in shapes
    total, plain = count_parameters(m), plain_transformer_parameters(cfg)
    assert 0 < (total - plain) / plain < 0.02


def test_build_input_finetune_mode():
    rng = np.random.default_rng(0)
    basic = rng.standard_normal((364, 6))
    inp = build_input(basic, DETAILED_INDICES, years(364), (42.0, -90.0))
    assert inp.channels.shape == (364, 34)
    assert int(inp.mask[0].sum()) == 25
    np.testing.assert_allclose(inp.channels[:, list(BASIC_INDICES)].numpy(), basic, rtol=1e-6)
    assert torch.all(inp.channels[:, list(DETAILED_INDICES)] == 0)
    assert inp.channels[0, 31].item() == 0.0 and inp.channels[-1, 31].item() == pytest.approx(6 / 50)
    assert inp.channels[0, 32].item() == pytest.approx(42 / 90) and inp.channels[0, 33].item() == pytest.approx(-0.5)
    assert inp.positions[0].item() == 1 and inp.positions[-1].item() == 364


def test_build_input_pretraining_modes():
    full = np.random.default_rng(1).standard_normal((52, 31))
    k10 = list(DETAILED_INDICES[:10])
    inp = build_input(full, k10, years(52), (40.0, -95.0), dtype=torch.float64)
    assert int(inp.mask[0].sum()) == 10
    assert torch.all(inp.channels[:, k10] == 0)
    ident = build_input(full, [], years(52), (40.0, -95.0), dtype=torch.float64)
    assert not ident.mask.any()
    np.testing.assert_array_equal(ident.channels[:, :31].numpy(), full)


def test_build_input_errors():
    with pytest.raises(ValueError):
        build_input(np.zeros((365, 31)), [], np.zeros(365), (0.0, 0.0))
    with pytest.raises(ValueError):
        build_input(np.zeros((4, 31)), [31], np.zeros(4), (0.0, 0.0))
    with pytest.raises(ValueError):
        build_input(np.zeros((4, 6)), DETAILED_INDICES[:-1], np.zeros(4), (0.0, 0.0))
    with pytest.raises(ValueError):
        build_input(np.zeros((4, 7)), [], np.zeros(4), (0.0, 0.0))


def test_encode_shapes_and_determinism():
    cfg = ModelConfig(d_model=32, n_layers=1, n_heads=4, d_mlp=64)
    torch.manual_seed(0)
    m = VitaModel(cfg).eval()
    x = torch.randn(2, 364, 34)
    q1, q2 = m.encode(x), m.encode(x)
    assert q1.mu.shape == q1.sigma.shape == (2, 364, 31)
    assert torch.equal(q1.mu, q2.mu) and torch.equal(q1.sigma, q2.sigma)
    assert m.encode(x[0]).mu.shape == (364, 31)


def test_encode_sigma_positive_and_clamped():
    m = toy_model(1)
    for i in range(100):
        x = torch.randn(1, 8, 34, generator=torch.Generator().manual_seed(i), dtype=torch.float64) * (1 + i)
        s = m.encode(x).sigma
        assert torch.all(s > 0)
    with torch.no_grad():
        m.posterior_head.bias[31:] = 1e3
    s = m.encode(torch.randn(1, 8, 34, dtype=torch.float64)).sigma
    assert torch.allclose(s, torch.full_like(s, np.exp(LOGVAR_CLAMP / 2)))


def test_encode_rejects_long_and_nonfinite():
    m = toy_model()
    with pytest.raises(ValueError):
        m.encode(torch.zeros(1, 9, 34, dtype=torch.float64))
    x = torch.zeros(1, 8, 34, dtype=torch.float64)
    x[0, 3, 2] = float("nan")
    with pytest.raises(FloatingPointError, match="input_proj"):
        m.encode(x)


def test_attention_aggregate_examples():
    m = toy_model(2)
    z = torch.randn(1, 31, dtype=torch.float64)
    assert torch.allclose(m.attention_aggregate(z), z[0], atol=1e-15)
    with torch.no_grad():
        m.scorer.fc2.weight.zero_()
    z = torch.randn(6, 31, dtype=torch.float64)
    assert torch.allclose(m.attention_aggregate(z), z.mean(0), atol=1e-14)


def test_attention_aggregate_loop_oracle():
    m = toy_model(3)
    z = torch.randn(8, 31, dtype=torch.float64)
    scores = [m.scorer(z[t]).item() for t in range(8)]
    e = np.exp(np.array(scores) - max(scores))
    w = e / e.sum()
    want = sum(w[t] * z[t].numpy() for t in range(8))
    np.testing.assert_allclose(m.attention_aggregate(z).detach().numpy(), want, rtol=1e-12)


@given(st.integers(0, 10_000), st.integers(1, 8), st.floats(0.1, 50))
def test_attention_weights_are_distribution(seed, T, scale):
    m = toy_model(4)
    z = scale * torch.randn(T, 31, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
    w = m.attention_weights(z)
    assert torch.all(w >= 0)
    assert abs(w.sum().item() - 1) < 1e-12


def test_predict_yield_examples():
    m = toy_model(5)
    z, yp = torch.randn(31, dtype=torch.float64), torch.randn(6, dtype=torch.float64)
    out = m.predict_yield(z, yp)
    assert out.shape == ()
    yp2 = yp[[1, 0, 2, 3, 4, 5]]
    assert m.predict_yield(z, yp2).item() != out.item()
    with torch.no_grad():
        for p in m.yield_head.parameters():
            p.zero_()
        m.yield_head.fc2.bias.fill_(0.37)
    assert m.predict_yield(z, yp).item() == 0.37


def test_yield_head_gradients():
    m = toy_model(6)
    z, yp = torch.randn(3, 31, dtype=torch.float64), torch.randn(3, 6, dtype=torch.float64)
    names = [k for k, _ in m.yield_head.named_parameters()]

    def f(p):
        sd = dict(zip(names, [p[k] for k in names]))
        out = torch.func.functional_call(m.yield_head, sd, (torch.cat([z, yp], -1),))
        return (out**2).sum()

    rep = finite_diff_grad_check(f, {k: v.detach().clone() for k, v in m.yield_head.named_parameters()})
    assert rep.passed(1e-4), rep


def test_end_to_end_gradient_toy():
    m = toy_model(7)
    x = torch.randn(2, 8, 34, dtype=torch.float64)
    yp = torch.randn(2, 6, dtype=torch.float64)
    eps = torch.randn(2, 8, 31, dtype=torch.float64)
    wrapped = _YieldPath(m)
    params = {k: v.detach().clone() for k, v in wrapped.named_parameters()}

    def f(p):
        out = torch.func.functional_call(wrapped, p, args=(x, yp), kwargs={"noise": eps})
        return ((out - 1.0) ** 2).sum()

    rep = finite_diff_grad_check(f, params)
    assert rep.passed(1e-4), rep


def test_forward_yield_eval_mode_is_sampling_free():
    m = toy_model(8)
    x, yp = torch.randn(3, 8, 34, dtype=torch.float64), torch.randn(3, 6, dtype=torch.float64)
    a, _ = m.forward_yield(x, yp, sample=False)
    b, _ = m.forward_yield(x, yp, sample=False)
    assert torch.equal(a, b)


def test_model_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(d_model=30, n_heads=4).validate()
    with pytest.raises(ValueError):
        ModelConfig.from_dict({"d_model": 32, "bogus": 1})
    with pytest.raises(ValueError):
        ModelConfig(prior="laplace").validate()
    assert ModelConfig.from_dict(TOY.to_dict()) == TOY


def test_collate():
    inputs = [build_input(np.zeros((8, 31)), [], np.full(8, 2001), (0.0, 0.0)) for _ in range(3)]
    assert collate(inputs).shape == (3, 8, 34)
    assert N_CHANNELS == 31
