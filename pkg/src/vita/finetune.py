"""Decoder-free variational fine-tuning for county yield regression."""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from vita import numerics
from vita.checkpoint import load_checkpoint, save_checkpoint
from vita.data import (
    BASIC_INDICES, DETAILED_INDICES, N_CHANNELS, WEEKS_PER_YEAR, CountyYields, NormStats, WeatherGrid,
    apply_norm,
)
from vita.encoder import N_PAST_YIELDS, ModelConfig, VitaModel, build_input, collate
from vita.evaluation import MetricsReport, r2_rmse
from vita.priors import DiagGaussian, kl_terms

log = logging.getLogger(__name__)

HISTORY = N_PAST_YIELDS  # years t-6 .. t-1
SPAN = HISTORY + 1


@dataclass
class YieldSequence:
    county_id: str
    target_year: int
    weather_basic: np.ndarray
    coords: tuple[float, float]
    y_past: np.ndarray
    y_target: float
    crop: str = "corn"

    @property
    def year_per_week(self) -> np.ndarray:
        return np.repeat(np.arange(self.target_year - HISTORY, self.target_year + 1), WEEKS_PER_YEAR)


@dataclass
class FinetuneConfig:
    beta: float = 1e-3
    lr: float = 5e-4
    batch_size: int = 32
    epochs: int = 40
    warmup_epochs: int = 10
    grad_clip: float = 1.0
    seed: int = 1234
    checkpoint: str | None = None
    model: ModelConfig = field(default_factory=ModelConfig)

    def validate(self) -> None:
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError("warmup_epochs must be in [0, epochs)")
        self.model.validate()

    @classmethod
    def from_dict(cls, d: dict) -> "FinetuneConfig":
        d = dict(d)
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ValueError(f"unknown finetune config field(s): {sorted(extra)}")
        model = ModelConfig.from_dict(d.pop("model", {}))
        cfg = cls(model=model, **d)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)


def county_weather(grid: WeatherGrid) -> dict[int, np.ndarray]:
    """Split a grid's weekly series into ``{year: (52, 31)}`` blocks."""
    out = {}
    for year in np.unique(grid.years):
        block = grid.values[grid.years == year]
        if block.shape[0] == WEEKS_PER_YEAR and not np.isnan(block).any():
            out[int(year)] = block
    return out


def match_weather(grids: Sequence[WeatherGrid], counties: Sequence[CountyYields]) -> dict[str, dict[int, np.ndarray]]:
    """Weather blocks per county: the grid with the same id, else the nearest grid by lat/lon."""
    if not grids:
        raise ValueError("no weather grids")
    by_id = {g.grid_id: g for g in grids}
    coords = np.array([(g.lat, g.lon) for g in grids])
    cache: dict[str, dict[int, np.ndarray]] = {}
    out = {}
    for c in counties:
        g = by_id.get(c.county_id)
        if g is None:
            g = grids[int(np.argmin(((coords - (c.lat, c.lon)) ** 2).sum(axis=1)))]
        if g.grid_id not in cache:
            cache[g.grid_id] = county_weather(g)
        out[c.county_id] = cache[g.grid_id]
    return out


def build_sequences(
    weather: dict[str, dict[int, np.ndarray]],
    yields: Sequence[CountyYields],
    years: range,
) -> list[YieldSequence]:
    """Overlapping 7-year sequences for every target year in ``years``.

    A county contributes ``max(0, len(years) - 6)`` sequences when all required
    weather years and yields are present; counties with gaps are skipped.
    """
    years = list(years)
    out, skipped = [], 0
    for c in yields:
        blocks = weather.get(c.county_id)
        targets = years[HISTORY:]
        if not targets:
            continue
        if blocks is None or any(y not in blocks or y not in c.yields for y in years):
            skipped += 1
            continue
        for t in targets:
            span = range(t - HISTORY, t + 1)
            wx = np.concatenate([blocks[y] for y in span], axis=0)
            if wx.shape[1] == N_CHANNELS:
                wx = wx[:, BASIC_INDICES]
            out.append(
                YieldSequence(
                    c.county_id, t, wx, (c.lat, c.lon),
                    np.array([c.yields[y] for y in span[:-1]]), c.yields[t], c.crop,
                )
            )
    if skipped:
        log.warning("skipped %d counties with missing years in %d..%d", skipped, years[0], years[-1])
    return out


def yield_loss(
    y: torch.Tensor,
    y_hat: torch.Tensor,
    posterior: DiagGaussian,
    prior,
    beta: float,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Batch mean of ``(y - y_hat)^2 + beta * KL(q || p)``."""
    if beta < 0:
        raise ValueError("beta must be >= 0")
    sq = ((y - y_hat) ** 2).mean()
    if beta == 0:
        return sq
    return sq + beta * kl_terms(posterior, prior, generator=generator).mean()


def deterministic_decoder_log_prob(basic: np.ndarray, detailed: np.ndarray, basic_map: np.ndarray) -> float:
    """``log p(x | z)`` for a point-mass decoder ``x = basic_map @ u``.

    ``basic`` is ``(T, 6)`` and ``detailed`` is ``(T, 25)``; returns 0 for a
    valid pair and ``-inf`` otherwise. Equality is up to float round-off
    (1e-12), since the product order can differ from the generator's.
    """
    ok = np.allclose(basic, detailed @ basic_map.T, rtol=1e-12, atol=1e-12)
    return 0.0 if ok else -math.inf


def full_elbo_loss(y, y_hat, posterior, prior, beta, decoder_log_prob, generator=None) -> torch.Tensor:
    """Yield loss with the input-reconstruction term kept explicitly."""
    return yield_loss(y, y_hat, posterior, prior, beta, generator) - decoder_log_prob


def lr_schedule_finetune(epoch: int, cfg: FinetuneConfig) -> float:
    if epoch < cfg.warmup_epochs:
        return cfg.lr * (epoch + 1) / cfg.warmup_epochs
    span = cfg.epochs - cfg.warmup_epochs
    frac = (epoch - cfg.warmup_epochs) / span
    # cos(pi f) as sin(pi (1/2 - f)): exact at the midpoint and both ends
    return cfg.lr * 0.5 * (1.0 + math.sin(math.pi * (0.5 - frac)))


@dataclass
class FinetuneResult:
    model: VitaModel
    best_epoch: int
    metrics: MetricsReport
    history: list[dict]
    predictions: list[tuple[str, int, float, float]]
    norm: NormStats


class _Encoded:
    """Pre-normalized tensors for a list of sequences."""

    def __init__(self, seqs: Sequence[YieldSequence], norm: NormStats, crop: str, dtype):
        mean, std = norm.yield_mean[crop], norm.yield_std[crop]
        self.x = collate([
            build_input(apply_norm(s.weather_basic, norm, BASIC_INDICES), DETAILED_INDICES, s.year_per_week, s.coords, dtype)
            for s in seqs
        ])
        self.y_past = torch.as_tensor(np.stack([(s.y_past - mean) / std for s in seqs]), dtype=dtype)
        self.y = torch.as_tensor([(s.y_target - mean) / std for s in seqs], dtype=dtype)
        self.truth = np.array([s.y_target for s in seqs])
        self.keys = [(s.county_id, s.target_year) for s in seqs]

    def __len__(self):
        return len(self.keys)


def predict(model: VitaModel, enc: _Encoded, batch_size: int = 64) -> np.ndarray:
    """Sampling-free predictions (posterior mean latent), z-scored units."""
    out = []
    model.eval()
    with torch.no_grad():
        for i in range(0, len(enc), batch_size):
            y_hat, _ = model.forward_yield(enc.x[i : i + batch_size], enc.y_past[i : i + batch_size], sample=False)
            out.append(y_hat.double().numpy())
    model.train()
    return np.concatenate(out)


def _init_model(cfg: FinetuneConfig, seqs: Sequence[YieldSequence], dtype):
    torch.manual_seed(cfg.seed)
    if cfg.checkpoint:
        model, manifest = load_checkpoint(cfg.checkpoint, dtype=dtype)
        norm = NormStats.from_dict(manifest["extra"]["norm"])
    else:
        model = VitaModel(cfg.model).to(dtype)
        basic = np.concatenate([s.weather_basic for s in seqs], axis=0)
        mean, std = np.zeros(N_CHANNELS), np.ones(N_CHANNELS)
        mean[list(BASIC_INDICES)] = basic.mean(axis=0)
        std[list(BASIC_INDICES)] = basic.std(axis=0)
        if not np.all(std > 0):
            raise ValueError("zero-variance basic weather channel in training split")
        norm = NormStats(mean, std)
    return model, norm


def run_finetune(
    cfg: FinetuneConfig,
    train: Sequence[YieldSequence],
    val: Sequence[YieldSequence],
    out_dir: str | Path | None = None,
    dtype=torch.float32,
) -> FinetuneResult:
    """Fine-tune all parameters; keep the epoch with the lowest validation RMSE.

    Yield z-scoring uses the training targets only. Metrics are reported in
    original units.
    """
    cfg.validate()
    train, val = list(train), list(val)
    if not train or not val:
        raise ValueError("fine-tuning needs nonempty train and validation splits")
    crop = train[0].crop
    model, norm = _init_model(cfg, train, dtype)
    targets = np.array([s.y_target for s in train])
    norm.yield_mean = {crop: float(targets.mean())}
    norm.yield_std = {crop: float(targets.std())}
    if not norm.yield_std[crop] > 0:
        raise ValueError("training yields are constant")
    tr = _Encoded(train, norm, crop, dtype)
    va = _Encoded(val, norm, crop, dtype)

    gen = numerics.make_generator(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8)
    mean, std = norm.yield_mean[crop], norm.yield_std[crop]

    history, best = [], None
    for epoch in range(cfg.epochs):
        lr = lr_schedule_finetune(epoch, cfg)
        for group in opt.param_groups:
            group["lr"] = lr
        order = torch.randperm(len(tr), generator=gen)
        total = 0.0
        for i in range(0, len(tr), cfg.batch_size):
            idx = order[i : i + cfg.batch_size]
            y_hat, q = model.forward_yield(tr.x[idx], tr.y_past[idx], sample=True, generator=gen)
            loss = yield_loss(tr.y[idx], y_hat, q, model.prior, cfg.beta, generator=gen)
            if not bool(torch.isfinite(loss)):
                raise FloatingPointError(f"non-finite fine-tuning loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            total += loss.item() * len(idx)
        pred = predict(model, va) * std + mean
        m = r2_rmse(pred, va.truth)
        history.append({
            "crop": crop, "target_year": val[0].target_year, "epoch": epoch,
            "lr": lr, "train_loss": total / len(tr), "val_rmse": m.rmse, "val_r2": m.r2,
        })
        log.info("finetune epoch %d lr=%.3g loss=%.4f val_rmse=%.3f val_r2=%.4f",
                 epoch, lr, total / len(tr), m.rmse, m.r2)
        if best is None or m.rmse < best[1].rmse:
            best = (epoch, m, copy.deepcopy(model.state_dict()), pred)

    epoch, metrics, state, pred = best
    model.load_state_dict(state)
    predictions = [(k[0], k[1], float(t), float(p)) for k, t, p in zip(va.keys, va.truth, pred)]
    result = FinetuneResult(model, epoch, metrics, history, predictions, norm)
    if out_dir is not None:
        write_outputs(result, cfg, Path(out_dir))
    return result


def write_outputs(result: FinetuneResult, cfg: FinetuneConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(
        result.model, out_dir / "best", config=cfg.to_dict(),
        extra={"tag": "best", "epoch": result.best_epoch, "norm": result.norm.to_dict()},
    )
    with open(out_dir / "results.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["crop", "target_year", "epoch", "val_rmse", "val_r2"])
        for h in result.history:
            w.writerow([h["crop"], h["target_year"], h["epoch"], repr(h["val_rmse"]), repr(h["val_r2"])])
    with open(out_dir / "predictions.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["county_id", "year", "truth", "pred"])
        for row in result.predictions:
            w.writerow([row[0], row[1], repr(row[2]), repr(row[3])])


def year_latents(
    model: VitaModel, norm: NormStats, grids: Sequence[WeatherGrid], years: Sequence[int], dtype=torch.float32
) -> tuple[list[tuple[str, int]], np.ndarray]:
    """Posterior-mean latents averaged over each target year's weeks.

    Each grid/year is encoded from basic channels of the 7-year window ending at
    that year, the same input the yield pathway sees. Returns ``(keys, (N, 31))``.
    """
    keys, inputs = [], []
    for g in grids:
        blocks = county_weather(g)
        for year in years:
            span = range(year - HISTORY, year + 1)
            if not all(y in blocks for y in span):
                continue
            wx = np.concatenate([blocks[y] for y in span])[:, BASIC_INDICES]
            yw = np.repeat(np.asarray(span), WEEKS_PER_YEAR)
            inputs.append(build_input(apply_norm(wx, norm, BASIC_INDICES), DETAILED_INDICES, yw, (g.lat, g.lon), dtype))
            keys.append((g.grid_id, int(year)))
    if not inputs:
        raise ValueError("no grid has the 7 complete years needed for the requested years")
    out = []
    model.eval()
    with torch.no_grad():
        for i in range(0, len(inputs), 64):
            q = model.encode(collate(inputs[i : i + 64]).to(dtype))
            out.append(q.mu[:, -WEEKS_PER_YEAR:].mean(dim=1).double().numpy())
    model.train()
    return keys, np.concatenate(out)
