import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from vita.checkpoint import DATA_FILE, MANIFEST, load_checkpoint
from vita.data import SyntheticSpec, generate_synthetic, permute_years, window_pretraining
from vita.encoder import ModelConfig, VitaModel, build_input
from vita.numerics import finite_diff_grad_check
from vita.priors import DiagGaussian, SinusoidalPrior, StandardNormalPrior, kl_to_prior
from vita.pretrain import (
    PretrainConfig, gaussian_nll, lr_schedule_pretrain, mask_schedule, pretrain_loss, run_pretraining, sample_mask,
)

D = torch.float64
TOY = ModelConfig(d_model=32, n_layers=2, n_heads=4, d_mlp=64, max_len=64, scorer_hidden=8, yield_hidden=16)


def desk_windows(n_grids=8, seed=0):
    ds = generate_synthetic(SyntheticSpec(num_grids=n_grids, num_years=5, start_year=2000), seed=seed)
    return [w for g in ds.grids for w in window_pretraining(g, length=64)]


def test_mask_schedule_examples():
    cfg = PretrainConfig()
    assert [mask_schedule(e, cfg) for e in (0, 2, 3, 99)] == [10, 11, 11, 25]
    with pytest.raises(ValueError):
        mask_schedule(-1, cfg)


@given(st.integers(0, 30), st.integers(0, 30), st.integers(1, 5), st.integers(0, 200))
def test_mask_schedule_monotone_and_capped(a, b, step, epoch):
    k0, kmax = min(a, b), max(a, b)
    cfg = PretrainConfig(mask_start=k0, mask_cap=kmax, mask_step_epochs=step)
    assert mask_schedule(epoch + 1, cfg) >= mask_schedule(epoch, cfg)
    if epoch >= step * (kmax - k0):
        assert mask_schedule(epoch, cfg) == kmax


def test_sample_mask_examples():
    g = torch.Generator().manual_seed(0)
    assert sample_mask(0, g).masked_channels == ()
    assert sample_mask(31, g).masked_channels == tuple(range(31))
    with pytest.raises(ValueError):
        sample_mask(32, g)


def test_sample_mask_frequency():
    g = torch.Generator().manual_seed(1)
    counts = np.zeros(31)
    for _ in range(10_000):
        plan = sample_mask(10, g)
        assert len(set(plan.masked_channels)) == 10
        counts[list(plan.masked_channels)] += 1
    assert np.all(np.abs(counts / 10_000 - 10 / 31) <= 0.02)


def test_lr_schedule_examples():
    cfg = PretrainConfig()
    assert lr_schedule_pretrain(9, cfg) == pytest.approx(5e-4, rel=1e-15)
    assert lr_schedule_pretrain(4, cfg) == pytest.approx(2.5e-4, rel=1e-15)
    assert lr_schedule_pretrain(12, cfg) == pytest.approx(4.9005e-4, rel=1e-12)


def test_config_validation():
    for bad in ({"alpha": -1}, {"decay": 0.0}, {"decay": 1.5}, {"mask_start": 20, "mask_cap": 10}, {"mask_cap": 32}):
        with pytest.raises(ValueError):
            PretrainConfig(**bad).validate()
    with pytest.raises(ValueError):
        PretrainConfig.from_dict({"alpha": 0.5, "gamma": 1})
    cfg = PretrainConfig.from_dict({"alpha": 0.25, "model": {"d_model": 32, "n_heads": 4}})
    assert cfg.alpha == 0.25 and cfg.model.d_model == 32


def test_loss_examples():
    z = torch.randn(2, 5, 31, dtype=D)
    q = DiagGaussian(z.clone(), torch.ones_like(z))
    per_entry = pretrain_loss(q, z, StandardNormalPrior(), alpha=0.0).item() / (5 * 31)
    assert per_entry == pytest.approx(0.5 * math.log(2 * math.pi), abs=1e-12)
    assert per_entry == pytest.approx(0.918939, abs=1e-6)

    zero = torch.zeros(2, 5, 31, dtype=D)
    q0 = DiagGaussian(zero, torch.ones_like(zero))
    assert pretrain_loss(q0, zero, StandardNormalPrior(), alpha=0.5).item() == pytest.approx(
        pretrain_loss(q0, zero, StandardNormalPrior(), alpha=0.0).item(), abs=0)


def test_loss_scalar_oracle():
    rng = np.random.default_rng(3)
    B, T, C = 2, 3, 31
    mu, z = rng.normal(size=(B, T, C)), rng.normal(size=(B, T, C))
    sd = np.exp(rng.normal(0, 0.5, size=(B, T, C)))
    prior = SinusoidalPrior(amplitude=0.3, sigma=1.2).double()
    amp, fr, ph = (p.detach().numpy() for p in (prior.amplitude, prior.frequency, prior.phase))
    psd = prior.sigma.detach().numpy()
    total = 0.0
    for b in range(B):
        for t in range(T):
            for c in range(C):
                m, s, x = mu[b, t, c], sd[b, t, c], z[b, t, c]
                pm, ps = amp[c] * math.sin(fr[c] * (t + 1) + ph[c]), psd[c]
                nll = 0.5 * (math.log(2 * math.pi) + math.log(s * s) + (x - m) ** 2 / (s * s))
                kl = math.log(ps / s) + (s * s + (m - pm) ** 2) / (2 * ps * ps) - 0.5
                total += nll + 0.7 * kl
    got = pretrain_loss(DiagGaussian(torch.tensor(mu), torch.tensor(sd)), torch.tensor(z), prior, alpha=0.7).item()
    assert got == pytest.approx(total / B, rel=1e-10)


def test_nll_minimized_at_truth():
    rng = np.random.default_rng(4)
    for _ in range(20):
        z = torch.tensor(rng.normal(size=(1, 4, 31)))
        sd = torch.tensor(np.exp(rng.normal(0, 0.3, size=(1, 4, 31))))
        base = gaussian_nll(DiagGaussian(z, sd), z).item()
        for delta in (0.1, -0.1):
            assert gaussian_nll(DiagGaussian(z + delta, sd), z).item() > base


def test_loss_rejects_shape_mismatch_and_nan():
    z = torch.zeros(1, 4, 31, dtype=D)
    with pytest.raises(ValueError):
        pretrain_loss(DiagGaussian(z[:, :3], torch.ones(1, 3, 31, dtype=D)), z, StandardNormalPrior(), 0.5)
    bad = z.clone()
    bad[0, 0, 0] = float("nan")
    with pytest.raises(FloatingPointError):
        pretrain_loss(DiagGaussian(z, torch.ones_like(z)), bad, StandardNormalPrior(), 0.5)


def test_loss_gradient_toy_model():
    cfg = ModelConfig(d_model=32, n_layers=2, n_heads=4, d_mlp=64, max_len=8, scorer_hidden=8, yield_hidden=16)
    torch.manual_seed(0)
    m = VitaModel(cfg).double()
    x = torch.randn(2, 8, 34, dtype=D)
    z = torch.randn(2, 8, 31, dtype=D)

    class Path(torch.nn.Module):
        def __init__(self):
            super().__init__()
            self.m = m

        def forward(self, x, z):
            return pretrain_loss(self.m.encode(x), z, self.m.prior, 0.5)

    wrapped = Path()
    rep = finite_diff_grad_check(
        lambda p: torch.func.functional_call(wrapped, p, (x, z)),
        {k: v.detach().clone() for k, v in wrapped.named_parameters()},
    )
    assert rep.passed(1e-4), rep


def test_year_permutation_only_touches_year_column():
    wins = desk_windows(2)
    perm = permute_years(wins, seed=5)
    changed = False
    for a, b in zip(wins, perm):
        assert np.array_equal(a.detailed, b.detailed)
        ia = build_input(a.detailed, [0, 1], a.year_per_week, (a.lat, a.lon), dtype=D)
        ib = build_input(b.detailed, [0, 1], b.year_per_week, (b.lat, b.lon), dtype=D)
        assert torch.equal(ia.channels[:, :31], ib.channels[:, :31])
        assert torch.equal(ia.channels[:, 32:], ib.channels[:, 32:])
        changed |= not torch.equal(ia.channels[:, 31], ib.channels[:, 31])
    assert changed


def _toy_cfg(seed=1234, alpha=0.5):
    return PretrainConfig(alpha=alpha, base_lr=2e-3, batch_size=8, epochs=4, warmup_epochs=1, seed=seed, model=TOY)


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_training_loss_decreases(seed):
    wins = desk_windows()[:32]
    assert len(wins) == 32
    losses = [r["train_loss"] for r in run_pretraining(_toy_cfg(seed), wins).log]
    assert all(losses[e] <= losses[e - 1] for e in range(1, 4)), losses


def test_alpha_adds_penalty():
    wins = desk_windows()[:32]
    a0 = run_pretraining(_toy_cfg(alpha=0.0), wins).log[-1]["train_loss"]
    a5 = run_pretraining(_toy_cfg(alpha=0.5), wins).log[-1]["train_loss"]
    assert a5 > a0


def test_checkpoint_bitwise_determinism(tmp_path):
    wins = desk_windows()[:16]
    val = desk_windows(2, seed=9)[:4]
    r1 = run_pretraining(_toy_cfg(), wins, val, out_dir=tmp_path / "a")
    r2 = run_pretraining(_toy_cfg(), wins, val, out_dir=tmp_path / "b")
    for name in (DATA_FILE, MANIFEST):
        assert (tmp_path / "a" / "checkpoint" / name).read_bytes() == (tmp_path / "b" / "checkpoint" / name).read_bytes()
    assert r1.log == r2.log
    assert (tmp_path / "a" / "pretrain_log.csv").read_text().splitlines()[0] == "epoch,k,lr,train_loss,val_nll"
    model, man = load_checkpoint(r1.checkpoint)
    for (k, v), (_, w) in zip(model.state_dict().items(), r1.model.state_dict().items()):
        assert torch.equal(v, w), k


def test_run_pretraining_errors():
    with pytest.raises(ValueError):
        run_pretraining(_toy_cfg(), [])
    long = desk_windows(1)[:1]
    cfg = _toy_cfg()
    cfg.model = ModelConfig(d_model=32, n_layers=1, n_heads=4, d_mlp=64, max_len=32)
    with pytest.raises(ValueError):
        run_pretraining(cfg, long)
