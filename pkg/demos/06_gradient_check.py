"""
Checking gradients with central differences
===========================================
"""

import torch

from vita.numerics import finite_diff_grad_check
from vita.priors import DiagGaussian, kl_to_standard_normal

gen = torch.Generator().manual_seed(0)
params = {"mu": torch.randn(4, 31, generator=gen, dtype=torch.float64),
          "log_sigma": 0.3 * torch.randn(4, 31, generator=gen, dtype=torch.float64)}


def kl(p):
    return kl_to_standard_normal(DiagGaussian(p["mu"], p["log_sigma"].exp())).total


rep = finite_diff_grad_check(kl, params)
print(rep, rep.passed(1e-4))


# a custom op with a wrong backward gets caught
class BadSquare(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return x * x

    @staticmethod
    def backward(ctx, g):
        (x,) = ctx.saved_tensors
        return g * x  # should be 2x


rep = finite_diff_grad_check(lambda p: BadSquare.apply(p["x"]).sum(), {"x": torch.randn(8, dtype=torch.float64)})
print(rep, rep.passed(1e-4))
