"""
KL divergence to the seasonal prior
===================================

Closed-form KL for a diagonal Gaussian posterior, checked against a
Monte-Carlo estimate.
"""

import math

import torch

from vita import numerics
from vita.priors import DiagGaussian, SinusoidalPrior, StandardNormalPrior, kl_monte_carlo, kl_to_prior, sinusoidal_mean

# mean of one channel: A sin(theta * t + theta0), weeks start at 1
print(sinusoidal_mean(torch.tensor([2.0]), torch.tensor([1.0]), torch.tensor([0.5]), 3)[:, 0])
print("2 sin(3.5) =", 2 * math.sin(3.5))

# a posterior over 52 weeks x 31 channels
gen = torch.Generator().manual_seed(0)
q = DiagGaussian(0.3 * torch.randn(52, 31, generator=gen, dtype=torch.float64),
                 torch.full((52, 31), 0.8, dtype=torch.float64))

for prior in (StandardNormalPrior(), SinusoidalPrior(amplitude=0.5).double()):
    closed = kl_to_prior(q, prior)
    with torch.no_grad():
        est, se = kl_monte_carlo(q, prior, 20_000, generator=numerics.make_generator(1))
    print(f"{type(prior).__name__:>20s}  closed={closed.total.item():.3f}  mc={est.item():.3f} +/- {se.item():.3f}")

# the per-channel split sums back to the total
print(closed.per_channel[:5].detach(), closed.per_channel.sum().item())
