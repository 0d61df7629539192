"""Transformer weather encoder, posterior head, time attention and yield head."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn

from vita import numerics
from vita.data import BASIC_INDICES, DETAILED_INDICES, N_CHANNELS, WINDOW_WEEKS
from vita.priors import DiagGaussian, build_prior

N_META = 3  # year, latitude, longitude
N_PAST_YIELDS = 6
LOGVAR_CLAMP = 10.0


@dataclass
class ModelConfig:
    d_model: int = 200
    n_layers: int = 4
    n_heads: int = 10
    d_mlp: int = 800
    max_len: int = WINDOW_WEEKS
    scorer_hidden: int = 16
    yield_hidden: int = 120
    dropout: float = 0.0
    prior: str = "sinusoidal"

    def validate(self) -> None:
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.max_len > WINDOW_WEEKS or self.max_len < 1:
            raise ValueError(f"max_len must be in 1..{WINDOW_WEEKS}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.prior not in ("normal", "sinusoidal"):
            raise ValueError("prior must be 'normal' or 'sinusoidal'")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ValueError(f"unknown model field(s): {sorted(extra)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EncoderInput:
    """One sequence ready for the encoder.

    ``channels`` is ``(T, 34)``: 31 z-scored weather channels (hidden ones are
    exactly zero) followed by normalized year, latitude and longitude.
    """

    channels: torch.Tensor
    mask: torch.Tensor
    positions: torch.Tensor = field(default=None)

    def __post_init__(self):
        if self.positions is None:
            self.positions = torch.arange(1, self.channels.shape[-2] + 1)


def normalize_year(year):
    return (np.asarray(year, dtype=float) - 2000.0) / 50.0


def normalize_coords(lat: float, lon: float) -> tuple[float, float]:
    return lat / 90.0, lon / 180.0


def build_input(
    weather: np.ndarray,
    mask_channels: Sequence[int],
    year_per_week: np.ndarray,
    coords: tuple[float, float],
    dtype=torch.float32,
) -> EncoderInput:
    """Place z-scored weather into the 31-channel layout and append metadata.

    ``weather`` is either ``(T, 31)`` detailed or ``(T, 6)`` basic; basic columns
    land at their fixed positions. ``mask_channels`` must cover every channel
    that is not supplied.
    """
    weather = np.asarray(weather, dtype=float)
    T = weather.shape[0]
    if T > WINDOW_WEEKS:
        raise ValueError(f"sequence length {T} exceeds {WINDOW_WEEKS}")
    mask_channels = sorted(set(int(c) for c in mask_channels))
    for c in mask_channels:
        if not 0 <= c < N_CHANNELS:
            raise ValueError(f"unknown channel index {c}")

    full = np.zeros((T, N_CHANNELS))
    if weather.shape[1] == N_CHANNELS:
        full[:] = weather
    elif weather.shape[1] == len(BASIC_INDICES):
        full[:, BASIC_INDICES] = weather
        missing = set(DETAILED_INDICES) - set(mask_channels)
        if missing:
            raise ValueError(f"basic-only input must mask detailed channels {sorted(missing)}")
    else:
        raise ValueError(f"expected 6 or {N_CHANNELS} weather columns, got {weather.shape[1]}")

    mask = np.zeros((T, N_CHANNELS), dtype=bool)
    mask[:, mask_channels] = True
    full[mask] = 0.0

    year_col = normalize_year(year_per_week).reshape(T, 1)
    lat, lon = normalize_coords(*coords)
    meta = np.concatenate([year_col, np.full((T, 1), lat), np.full((T, 1), lon)], axis=1)
    channels = torch.as_tensor(np.concatenate([full, meta], axis=1), dtype=dtype)
    return EncoderInput(channels, torch.as_tensor(mask))


def collate(inputs: Sequence[EncoderInput]) -> torch.Tensor:
    return torch.stack([inp.channels for inp in inputs])


class Linear(nn.Module):
    def __init__(self, d_in: int, d_out: int):
        super().__init__()
        bound = 1.0 / math.sqrt(d_in)
        self.weight = nn.Parameter(torch.empty(d_out, d_in).uniform_(-bound, bound))
        self.bias = nn.Parameter(torch.empty(d_out).uniform_(-bound, bound))

    def forward(self, x):
        return x @ self.weight.T + self.bias


class LayerNorm(nn.Module):
    def __init__(self, d: int, eps: float = 1e-5):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(d))
        self.bias = nn.Parameter(torch.zeros(d))
        self.eps = eps

    def forward(self, x):
        return numerics.layer_norm(x, self.gain, self.bias, self.eps)


class MLP(nn.Module):
    def __init__(self, d_in: int, d_hidden: int, d_out: int):
        super().__init__()
        self.fc1 = Linear(d_in, d_hidden)
        self.fc2 = Linear(d_hidden, d_out)

    def forward(self, x):
        return self.fc2(numerics.gelu(self.fc1(x)))


class SelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.qkv = Linear(d_model, 3 * d_model)
        self.out = Linear(d_model, d_model)

    def forward(self, x):
        B, T, D = x.shape
        h = self.n_heads
        q, k, v = self.qkv(x).reshape(B, T, 3, h, D // h).permute(2, 0, 3, 1, 4)
        attn = numerics.softmax((q * (D // h) ** -0.5) @ k.transpose(-2, -1), axis=-1)
        y = (attn @ v).transpose(1, 2).reshape(B, T, D)
        return self.out(y)


class Block(nn.Module):
    """Pre-norm transformer layer."""

    def __init__(self, d_model: int, n_heads: int, d_mlp: int, dropout: float):
        super().__init__()
        self.ln1 = LayerNorm(d_model)
        self.attn = SelfAttention(d_model, n_heads)
        self.ln2 = LayerNorm(d_model)
        self.mlp = MLP(d_model, d_mlp, d_model)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        x = x + self.drop(self.attn(self.ln1(x)))
        return x + self.drop(self.mlp(self.ln2(x)))


class VitaModel(nn.Module):
    """Encoder producing ``q(z | x)`` plus the aggregation and yield heads."""

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        cfg.validate()
        self.cfg = cfg
        self.input_proj = Linear(N_CHANNELS + N_META, cfg.d_model)
        self.pos_embed = nn.Parameter(0.02 * torch.randn(cfg.max_len, cfg.d_model))
        self.layers = nn.ModuleList(
            Block(cfg.d_model, cfg.n_heads, cfg.d_mlp, cfg.dropout) for _ in range(cfg.n_layers)
        )
        self.ln_f = LayerNorm(cfg.d_model)
        self.posterior_head = Linear(cfg.d_model, 2 * N_CHANNELS)
        self.scorer = MLP(N_CHANNELS, cfg.scorer_hidden, 1)
        self.yield_head = MLP(N_CHANNELS + N_PAST_YIELDS, cfg.yield_hidden, 1)
        self.prior = build_prior(cfg.prior)

    # -- encoder ----------------------------------------------------------

    def encode(self, channels: torch.Tensor) -> DiagGaussian:
        """``channels`` is ``(B, T, 34)`` (or ``(T, 34)``); returns ``q(z | x)``."""
        squeeze = channels.dim() == 2
        if squeeze:
            channels = channels.unsqueeze(0)
        T = channels.shape[1]
        if T > self.cfg.max_len:
            raise ValueError(f"sequence length {T} exceeds max_len {self.cfg.max_len}")
        h = self.input_proj(channels) + self.pos_embed[:T]
        _check_finite(h, "input_proj")
        for i, layer in enumerate(self.layers):
            h = layer(h)
            _check_finite(h, f"layers.{i}")
        out = self.posterior_head(self.ln_f(h))
        _check_finite(out, "posterior_head")
        mu, logvar = out[..., :N_CHANNELS], out[..., N_CHANNELS:]
        sigma = torch.exp(0.5 * logvar.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP))
        if squeeze:
            mu, sigma = mu[0], sigma[0]
        return DiagGaussian(mu, sigma)

    def attention_weights(self, z: torch.Tensor) -> torch.Tensor:
        scores = self.scorer(z).squeeze(-1)
        return numerics.softmax(scores, axis=-1)

    def attention_aggregate(self, z: torch.Tensor) -> torch.Tensor:
        """Softmax-weighted sum over time of ``z`` (``(..., T, 31)``)."""
        w = self.attention_weights(z)
        return (w.unsqueeze(-1) * z).sum(dim=-2)

    def predict_yield(self, z_agg: torch.Tensor, y_past: torch.Tensor) -> torch.Tensor:
        x = torch.cat([z_agg, y_past], dim=-1)
        return self.yield_head(x).squeeze(-1)

    def forward_yield(
        self,
        channels: torch.Tensor,
        y_past: torch.Tensor,
        sample: bool = True,
        generator: torch.Generator | None = None,
        noise: torch.Tensor | None = None,
    ):
        """Full yield pathway. Returns ``(y_hat, posterior)``.

        With ``sample=False`` the posterior mean is used (evaluation).
        """
        q = self.encode(channels)
        z = numerics.reparameterize(q.mu, q.sigma, generator, noise) if sample else q.mu
        return self.predict_yield(self.attention_aggregate(z), y_past), q


def _check_finite(t: torch.Tensor, where: str) -> None:
    if not bool(torch.isfinite(t).all()):
        raise FloatingPointError(f"non-finite activations after {where}")


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def plain_transformer_parameters(cfg: ModelConfig) -> int:
    """Same backbone with a deterministic 200->31 output head, no prior."""
    d, m = cfg.d_model, cfg.d_mlp
    per_layer = 4 * d + (3 * d * d + 3 * d) + (d * d + d) + (d * m + m) + (m * d + d)
    return (
        (N_CHANNELS + N_META) * d + d
        + cfg.max_len * d
        + cfg.n_layers * per_layer
        + 2 * d
        + d * N_CHANNELS + N_CHANNELS
    )
