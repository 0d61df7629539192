"""Priors over the weekly weather latent and KL divergences to them.

Latents have shape ``(..., T, C)`` with ``C = 31`` weather channels. KL terms
are summed over time and channels; loss code averages over the batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn

from vita.numerics import reparameterize

N_CHANNELS = 31
LOG_FLOOR = 1e-12
LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class DiagGaussian:
    """Diagonal Gaussian ``N(mu, diag(sigma**2))``."""

    mu: torch.Tensor
    sigma: torch.Tensor

    def __post_init__(self):
        if self.mu.shape != self.sigma.shape:
            raise ValueError(
                f"mu shape {tuple(self.mu.shape)} != sigma shape {tuple(self.sigma.shape)}"
            )
        if not bool(torch.all(self.sigma > 0)):
            raise ValueError("sigma must be strictly positive")

    @property
    def shape(self) -> torch.Size:
        return self.mu.shape

    def log_prob(self, z: torch.Tensor) -> torch.Tensor:
        """Elementwise log density (no reduction)."""
        var = self.sigma**2
        return -0.5 * (LOG_2PI + torch.log(var.clamp_min(LOG_FLOOR)) + (z - self.mu) ** 2 / var)


@dataclass
class KLResult:
    total: torch.Tensor
    per_channel: torch.Tensor


class StandardNormalPrior(nn.Module):
    """``N(0, I)``; has no parameters."""

    kind = "normal"

    def mean_std(self, length: int, dtype=torch.float64):
        mu = torch.zeros(length, N_CHANNELS, dtype=dtype)
        return mu, torch.ones_like(mu)


class SinusoidalPrior(nn.Module):
    """Seasonal prior with mean ``A_k sin(theta_k * pos + theta0_k)`` per channel.

    Four learnable values per channel (124 in total). ``sigma`` is stored as a
    log so it stays positive under gradient updates.
    """

    kind = "sinusoidal"

    def __init__(
        self,
        n_channels: int = N_CHANNELS,
        amplitude: float = 0.1,
        frequency: float = 2.0 * math.pi / 52.0,
        phase: float = 0.0,
        sigma: float = 1.0,
    ):
        super().__init__()
        if sigma <= 0:
            raise ValueError("sigma must be positive")
        self.amplitude = nn.Parameter(torch.full((n_channels,), float(amplitude)))
        self.frequency = nn.Parameter(torch.full((n_channels,), float(frequency)))
        self.phase = nn.Parameter(torch.full((n_channels,), float(phase)))
        self.log_sigma = nn.Parameter(torch.full((n_channels,), math.log(sigma)))

    @property
    def sigma(self) -> torch.Tensor:
        return torch.exp(self.log_sigma)

    def mean_std(self, length: int, dtype=None):
        mu = sinusoidal_mean(self.amplitude, self.frequency, self.phase, length)
        return mu, self.sigma.expand_as(mu)


class MixturePrior(nn.Module):
    """Weighted mixture of sinusoidal components. KL needs Monte Carlo."""

    kind = "mixture"

    def __init__(self, weights: Sequence[float], components: Sequence[SinusoidalPrior]):
        super().__init__()
        w = torch.as_tensor(weights, dtype=torch.float64)
        if len(w) != len(components) or len(w) == 0:
            raise ValueError("need one weight per component")
        if bool(torch.any(w < 0)) or float(w.sum()) <= 0:
            raise ValueError("mixture weights must be nonnegative with positive total")
        if abs(float(w.sum()) - 1.0) > 1e-9:
            raise ValueError("mixture weights must sum to 1")
        self.register_buffer("weights", w)
        self.components = nn.ModuleList(components)

    def log_prob(self, z: torch.Tensor) -> torch.Tensor:
        """Joint log density of ``z`` with shape ``(..., T, C)``, reduced over (T, C)."""
        length = z.shape[-2]
        terms = []
        for w, comp in zip(self.weights, self.components):
            mu, sd = comp.mean_std(length)
            lp = DiagGaussian(mu.to(z.dtype), sd.to(z.dtype)).log_prob(z).sum(dim=(-2, -1))
            terms.append(torch.log(w.clamp_min(LOG_FLOOR)).to(z.dtype) + lp)
        return torch.logsumexp(torch.stack(terms, dim=0), dim=0)


def sinusoidal_mean(amplitude, frequency, phase, length: int) -> torch.Tensor:
    """``(T, C)`` table of ``A_k sin(theta_k * t + theta0_k)`` for weeks ``t = 1..T``."""
    amplitude = torch.as_tensor(amplitude)
    frequency = torch.as_tensor(frequency, dtype=amplitude.dtype)
    phase = torch.as_tensor(phase, dtype=amplitude.dtype)
    pos = torch.arange(1, length + 1, dtype=amplitude.dtype).unsqueeze(-1)
    return amplitude * torch.sin(frequency * pos + phase)


def _check_sigma(*sigmas: torch.Tensor) -> None:
    for s in sigmas:
        if not bool(torch.all(s > 0)):
            raise ValueError("sigma must be strictly positive")


def _result(terms: torch.Tensor) -> KLResult:
    per_channel = terms.reshape(-1, terms.shape[-1]).sum(dim=0)
    return KLResult(per_channel.sum(), per_channel)


def kl_terms_standard(q: DiagGaussian) -> torch.Tensor:
    var = q.sigma**2
    return 0.5 * (var + q.mu**2 - 1.0 - torch.log(var.clamp_min(LOG_FLOOR)))


def kl_terms_diag(q: DiagGaussian, p_mu: torch.Tensor, p_sigma: torch.Tensor) -> torch.Tensor:
    _check_sigma(p_sigma)
    ratio = q.sigma**2 / p_sigma**2
    return 0.5 * (ratio + (q.mu - p_mu) ** 2 / p_sigma**2 - 1.0 - torch.log(ratio.clamp_min(LOG_FLOOR)))


def kl_to_standard_normal(q: DiagGaussian) -> KLResult:
    _check_sigma(q.sigma)
    return _result(kl_terms_standard(q))


def kl_diag_to_diag(q: DiagGaussian, p_mu: torch.Tensor, p_sigma: torch.Tensor) -> KLResult:
    _check_sigma(q.sigma, p_sigma)
    p_mu = torch.broadcast_to(p_mu, q.shape)
    p_sigma = torch.broadcast_to(p_sigma, q.shape)
    return _result(kl_terms_diag(q, p_mu, p_sigma))


def prior_log_prob(prior: nn.Module, z: torch.Tensor) -> torch.Tensor:
    """Log density of ``z`` (``(..., T, C)``) under ``prior``, reduced over (T, C)."""
    if isinstance(prior, MixturePrior):
        return prior.log_prob(z)
    mu, sd = prior.mean_std(z.shape[-2], dtype=z.dtype)
    return DiagGaussian(mu.to(z.dtype), sd.to(z.dtype)).log_prob(z).sum(dim=(-2, -1))


def kl_monte_carlo(
    q: DiagGaussian,
    prior: nn.Module,
    num_samples: int,
    generator: torch.Generator | None = None,
    noise: torch.Tensor | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Estimate ``KL(q || prior)`` as the sample mean of ``log q(z) - log p(z)``.

    Returns ``(estimate, std_error)``; the estimate stays differentiable.
    Batch dimensions in ``q`` are summed, matching the closed forms.
    """
    if num_samples < 2:
        raise ValueError("num_samples must be >= 2")
    shape = (num_samples, *q.shape)
    mu = q.mu.expand(shape)
    sigma = q.sigma.expand(shape)
    z = reparameterize(mu, sigma, generator=generator, noise=noise)
    log_q = q.log_prob(z).sum(dim=(-2, -1))
    log_p = prior_log_prob(prior, z)
    diff = (log_q - log_p).reshape(num_samples, -1).sum(dim=1)
    estimate = diff.mean()
    std_error = diff.detach().std(unbiased=True) / math.sqrt(num_samples)
    return estimate, std_error


def kl_terms(q: DiagGaussian, prior: nn.Module, generator=None, mc_samples: int = 16) -> torch.Tensor:
    """Per-item KL summed over (T, C); shape is ``q.shape[:-2]``."""
    if isinstance(prior, StandardNormalPrior):
        return kl_terms_standard(q).sum(dim=(-2, -1))
    if isinstance(prior, SinusoidalPrior):
        p_mu, p_sd = prior.mean_std(q.shape[-2])
        return kl_terms_diag(q, p_mu.to(q.mu.dtype), p_sd.to(q.mu.dtype)).sum(dim=(-2, -1))
    if isinstance(prior, MixturePrior):
        z = reparameterize(
            q.mu.expand(mc_samples, *q.shape),
            q.sigma.expand(mc_samples, *q.shape),
            generator=generator,
        )
        return (q.log_prob(z).sum(dim=(-2, -1)) - prior.log_prob(z)).mean(dim=0)
    raise TypeError(f"unsupported prior {type(prior).__name__}")


def kl_to_prior(q: DiagGaussian, prior: nn.Module) -> KLResult:
    """Closed-form KL for the standard and sinusoidal priors."""
    if isinstance(prior, StandardNormalPrior):
        return kl_to_standard_normal(q)
    if isinstance(prior, SinusoidalPrior):
        p_mu, p_sd = prior.mean_std(q.shape[-2])
        return kl_diag_to_diag(q, p_mu.to(q.mu.dtype), p_sd.to(q.mu.dtype))
    raise TypeError("no closed form for this prior; use kl_monte_carlo")


def build_prior(kind: str, **kwargs) -> nn.Module:
    if kind == "normal":
        return StandardNormalPrior()
    if kind == "sinusoidal":
        return SinusoidalPrior(**kwargs)
    raise ValueError(f"unknown prior '{kind}' (expected 'normal' or 'sinusoidal')")
