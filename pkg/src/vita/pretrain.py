"""Masked variational pretraining on detailed weather windows."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from vita import numerics
from vita.checkpoint import save_checkpoint
from vita.data import N_CHANNELS, NormStats, WeatherWindow, apply_norm, compute_norm_stats
from vita.encoder import ModelConfig, VitaModel, build_input, collate
from vita.priors import LOG_2PI, DiagGaussian, kl_terms

log = logging.getLogger(__name__)


@dataclass
class PretrainConfig:
    alpha: float = 0.5
    base_lr: float = 5e-4
    batch_size: int = 256
    epochs: int = 100
    warmup_epochs: int = 10
    decay: float = 0.99
    mask_start: int = 10
    mask_cap: int = 25
    mask_step_epochs: int = 2
    grad_clip: float = 1.0
    seed: int = 1234
    model: ModelConfig = field(default_factory=ModelConfig)

    def validate(self) -> None:
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")
        if not 0 < self.decay <= 1:
            raise ValueError("decay must be in (0, 1]")
        if not 0 <= self.mask_start <= self.mask_cap <= N_CHANNELS:
            raise ValueError("mask_start/mask_cap must satisfy 0 <= mask_start <= mask_cap <= 31")
        if self.mask_step_epochs < 1:
            raise ValueError("mask_step_epochs must be >= 1")
        self.model.validate()

    @classmethod
    def from_dict(cls, d: dict) -> "PretrainConfig":
        d = dict(d)
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ValueError(f"unknown pretrain config field(s): {sorted(extra)}")
        model = ModelConfig.from_dict(d.pop("model", {}))
        cfg = cls(model=model, **d)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MaskPlan:
    k: int
    masked_channels: tuple[int, ...]


def mask_schedule(epoch: int, cfg: PretrainConfig) -> int:
    """Masked-feature count: starts at ``mask_start``, +1 every ``mask_step_epochs``."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return min(cfg.mask_start + epoch // cfg.mask_step_epochs, cfg.mask_cap)


def sample_mask(k: int, generator: torch.Generator | None = None) -> MaskPlan:
    if not 0 <= k <= N_CHANNELS:
        raise ValueError(f"k must be in 0..{N_CHANNELS}, got {k}")
    chosen = torch.randperm(N_CHANNELS, generator=generator)[:k]
    return MaskPlan(k, tuple(sorted(chosen.tolist())))


def lr_schedule_pretrain(epoch: int, cfg: PretrainConfig) -> float:
    if epoch < cfg.warmup_epochs:
        return cfg.base_lr * (epoch + 1) / cfg.warmup_epochs
    return cfg.base_lr * cfg.decay ** (epoch - cfg.warmup_epochs)


def gaussian_nll(posterior: DiagGaussian, z_true: torch.Tensor) -> torch.Tensor:
    """Per-item negative log-likelihood summed over (T, C)."""
    var = posterior.sigma**2
    nll = 0.5 * (LOG_2PI + torch.log(var) + (z_true - posterior.mu) ** 2 / var)
    return nll.sum(dim=(-2, -1))


def pretrain_terms(posterior: DiagGaussian, z_true: torch.Tensor, prior, generator=None):
    """Batch-mean ``(nll, kl)``."""
    if posterior.shape != z_true.shape:
        raise ValueError(f"posterior shape {tuple(posterior.shape)} != target shape {tuple(z_true.shape)}")
    nll = gaussian_nll(posterior, z_true).mean()
    kl = kl_terms(posterior, prior, generator=generator).mean()
    return nll, kl


def pretrain_loss(posterior: DiagGaussian, z_true: torch.Tensor, prior, alpha: float, generator=None) -> torch.Tensor:
    """``-log N(z_true; mu, sigma^2) + alpha * KL(q || p)``, batch mean."""
    nll, kl = pretrain_terms(posterior, z_true, prior, generator)
    loss = nll + alpha * kl
    if not bool(torch.isfinite(loss)):
        raise FloatingPointError(f"non-finite pretraining loss (nll={nll.item()}, kl={kl.item()})")
    return loss


@dataclass
class PretrainResult:
    model: VitaModel
    norm: NormStats
    log: list[dict]
    checkpoint: Path | None = None


def _batch(windows: Sequence[WeatherWindow], norm: NormStats, k: int, gen: torch.Generator, dtype):
    inputs, targets = [], []
    for w in windows:
        z = apply_norm(w.detailed, norm)
        plan = sample_mask(k, gen)
        inputs.append(build_input(z, plan.masked_channels, w.year_per_week, (w.lat, w.lon), dtype=dtype))
        targets.append(torch.as_tensor(z, dtype=dtype))
    return collate(inputs), torch.stack(targets)


def evaluate_nll(model: VitaModel, windows, norm: NormStats, k: int, seed: int, batch_size: int = 64) -> float:
    """Mean per-window NLL with a fixed, seed-determined mask draw."""
    if not windows:
        return float("nan")
    dtype = next(model.parameters()).dtype
    gen = numerics.make_generator(seed)
    total = 0.0
    model.eval()
    with torch.no_grad():
        for i in range(0, len(windows), batch_size):
            x, z = _batch(windows[i : i + batch_size], norm, k, gen, dtype)
            total += float(gaussian_nll(model.encode(x), z).sum())
    model.train()
    return total / len(windows)


def run_pretraining(
    cfg: PretrainConfig,
    train: Sequence[WeatherWindow],
    val: Sequence[WeatherWindow] = (),
    out_dir: str | Path | None = None,
    dtype=torch.float32,
) -> PretrainResult:
    """Train the encoder to predict all 31 channels from partially masked input.

    Writes ``checkpoint/`` and ``pretrain_log.csv`` under ``out_dir`` when given.
    """
    cfg.validate()
    train = list(train)
    if not train:
        raise ValueError("empty pretraining dataset")
    for w in list(train) + list(val):
        if w.detailed.shape[0] > cfg.model.max_len:
            raise ValueError(f"window from {w.grid_id} longer than max_len {cfg.model.max_len}")
    norm = compute_norm_stats(train)

    torch.manual_seed(cfg.seed)
    model = VitaModel(cfg.model).to(dtype)
    gen = numerics.make_generator(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.base_lr, betas=(0.9, 0.999), eps=1e-8)

    rows = []
    for epoch in range(cfg.epochs):
        k = mask_schedule(epoch, cfg)
        lr = lr_schedule_pretrain(epoch, cfg)
        for group in opt.param_groups:
            group["lr"] = lr
        order = torch.randperm(len(train), generator=gen).tolist()
        total, n = 0.0, 0
        for i in range(0, len(order), cfg.batch_size):
            batch = [train[j] for j in order[i : i + cfg.batch_size]]
            x, z = _batch(batch, norm, k, gen, dtype)
            loss = pretrain_loss(model.encode(x), z, model.prior, cfg.alpha, generator=gen)
            opt.zero_grad()
            loss.backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            total += loss.item() * len(batch)
            n += len(batch)
        val_nll = evaluate_nll(model, list(val), norm, k, seed=cfg.seed + 1)
        row = {"epoch": epoch, "k": k, "lr": lr, "train_loss": total / n, "val_nll": val_nll}
        rows.append(row)
        log.info("pretrain epoch %d k=%d lr=%.3g loss=%.4f val_nll=%.4f", epoch, k, lr, row["train_loss"], val_nll)

    ckpt = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        ckpt = save_checkpoint(model, out_dir / "checkpoint", config=cfg.to_dict(), extra={"norm": norm.to_dict()})
        write_log(rows, out_dir / "pretrain_log.csv")
    return PretrainResult(model, norm, rows, ckpt)


def write_log(rows: list[dict], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        for r in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
