"""Differentiable building blocks and a finite-difference gradient checker.

Everything here operates on ``torch`` tensors so reverse-mode gradients come
from autograd. Oracle tests run in float64; training may use float32.
"""

from __future__ import annotations

import ctypes
import ctypes.util
import math
from dataclasses import dataclass
from typing import Callable, Mapping

import torch

SQRT_HALF = 1.0 / math.sqrt(2.0)


def make_generator(seed: int) -> torch.Generator:
    """CPU generator (Mersenne Twister MT19937) seeded from config."""
    gen = torch.Generator(device="cpu")
    gen.manual_seed(int(seed))
    return gen


_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3


def configure_runtime(threads: int = 1) -> None:
    """Pin torch to ``threads`` intra-op threads and keep freed buffers in the heap.

    On glibc the default mmap threshold makes every attention-sized buffer a
    fresh mapping, so about half of CPU time goes to page faults. Raising the
    thresholds is a no-op elsewhere.
    """
    if threads < 1:
        raise ValueError("threads must be >= 1")
    torch.set_num_threads(threads)
    name = ctypes.util.find_library("c")
    if not name:
        return
    try:
        libc = ctypes.CDLL(name)
        libc.mallopt(_M_MMAP_THRESHOLD, 1 << 30)
        libc.mallopt(_M_TRIM_THRESHOLD, 2**31 - 1)
    except (OSError, AttributeError):
        pass


def gelu(x: torch.Tensor) -> torch.Tensor:
    """Exact GELU, ``x * Phi(x)`` with the erf-based normal CDF."""
    return x * 0.5 * (1.0 + torch.erf(x * SQRT_HALF))


class _Softmax(torch.autograd.Function):
    @staticmethod
    def forward(ctx, v, axis):
        y = torch.exp(v - v.amax(dim=axis, keepdim=True))
        y.div_(y.sum(dim=axis, keepdim=True))
        ctx.save_for_backward(y)
        ctx.axis = axis
        return y

    @staticmethod
    def backward(ctx, g):
        (y,) = ctx.saved_tensors
        # dL/dv = y * (g - <g, y>)
        gy = g * y
        gy.sub_(y * gy.sum(dim=ctx.axis, keepdim=True))
        return gy, None


def softmax(v: torch.Tensor, axis: int = -1) -> torch.Tensor:
    """Max-subtracted softmax with an explicit vector-Jacobian product.

    Attention score tensors are the largest in the model, so the backward
    works in place on one buffer instead of letting autograd chain exp/div.
    """
    return _Softmax.apply(v, axis)


def layer_norm(
    v: torch.Tensor,
    gain: torch.Tensor | None = None,
    bias: torch.Tensor | None = None,
    eps: float = 1e-5,
) -> torch.Tensor:
    """Normalize over the last axis using the population variance."""
    if v.shape[-1] < 2:
        raise ValueError("layer_norm needs a last axis of length >= 2")
    if eps <= 0:
        raise ValueError("eps must be positive")
    mean = v.mean(dim=-1, keepdim=True)
    var = ((v - mean) ** 2).mean(dim=-1, keepdim=True)
    out = (v - mean) / torch.sqrt(var + eps)
    if gain is not None:
        out = out * gain
    if bias is not None:
        out = out + bias
    return out


def reparameterize(
    mu: torch.Tensor,
    sigma: torch.Tensor,
    generator: torch.Generator | None = None,
    noise: torch.Tensor | None = None,
) -> torch.Tensor:
    """Draw ``mu + sigma * eps`` with ``eps ~ N(0, I)``.

    Pass ``noise`` to freeze eps (gradient checks); otherwise it is drawn
    from ``generator``.
    """
    if mu.shape != sigma.shape:
        raise ValueError(f"mu shape {tuple(mu.shape)} != sigma shape {tuple(sigma.shape)}")
    if not bool(torch.all(sigma > 0)):
        raise ValueError("sigma must be strictly positive")
    if noise is None:
        noise = torch.randn(mu.shape, generator=generator, dtype=mu.dtype, device=mu.device)
    elif noise.shape != mu.shape:
        raise ValueError("noise shape must match mu")
    return mu + sigma * noise


@dataclass
class GradCheckReport:
    max_relative_error: float
    worst_parameter: str
    num_params_checked: int

    @property
    def finite(self) -> bool:
        return math.isfinite(self.max_relative_error)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.finite and self.max_relative_error <= tol


def finite_diff_grad_check(
    loss_fn: Callable[[Mapping[str, torch.Tensor]], torch.Tensor],
    params: Mapping[str, torch.Tensor],
    eps: float = 1e-6,
    coords_per_tensor: int = 64,
    seed: int = 0,
) -> GradCheckReport:
    """Compare autograd gradients with central differences.

    ``loss_fn`` maps a dict of named tensors to a scalar. Up to
    ``coords_per_tensor`` coordinates (all of them when the tensor is smaller)
    are perturbed per tensor. Relative error is ``|a - n| / max(1, |a|, |n|)``.
    A non-finite gradient on either side yields ``inf``.
    """
    if coords_per_tensor < 64:
        raise ValueError("at least 64 coordinates per tensor are required")
    base = {k: v.detach().clone().to(torch.float64) for k, v in params.items()}
    leaves = {k: v.clone().requires_grad_(True) for k, v in base.items()}
    loss = loss_fn(leaves)
    if loss.numel() != 1:
        raise ValueError("loss_fn must return a scalar")
    grads = torch.autograd.grad(loss, list(leaves.values()), allow_unused=True)
    analytic = {
        k: (g if g is not None else torch.zeros_like(leaves[k])).detach()
        for k, g in zip(leaves, grads)
    }

    rng = torch.Generator().manual_seed(seed)
    worst, worst_name, checked = 0.0, "", 0
    for name, value in base.items():
        n = value.numel()
        if n <= coords_per_tensor:
            idx = torch.arange(n)
        else:
            idx = torch.randperm(n, generator=rng)[:coords_per_tensor]
        flat_grad = analytic[name].reshape(-1)
        for i in idx.tolist():
            plus = {k: v for k, v in base.items()}
            minus = {k: v for k, v in base.items()}
            p = value.clone().reshape(-1)
            m = value.clone().reshape(-1)
            p[i] += eps
            m[i] -= eps
            plus[name] = p.reshape(value.shape)
            minus[name] = m.reshape(value.shape)
            with torch.no_grad():
                numeric = (loss_fn(plus).item() - loss_fn(minus).item()) / (2 * eps)
            a = flat_grad[i].item()
            checked += 1
            if not (math.isfinite(a) and math.isfinite(numeric)):
                return GradCheckReport(math.inf, name, checked)
            rel = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            if not worst_name or rel > worst:
                worst, worst_name = rel, name
    return GradCheckReport(worst, worst_name, checked)
