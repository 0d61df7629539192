"""Probe checking that basic channels are a deterministic function of detailed ones.

A one-hidden-layer MLP maps a year of detailed weather (25 x 52, flattened)
to the matching year of basic weather (6 x 52).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from vita import numerics
from vita.data import BASIC_CHANNELS, BASIC_INDICES, DETAILED_INDICES, WEEKS_PER_YEAR, WeatherGrid
from vita.encoder import MLP
from vita.evaluation import r2_rmse

log = logging.getLogger(__name__)


@dataclass
class ProbeFeature:
    feature: str
    rmse: float
    r2: float


def yearly_blocks(grids: Sequence[WeatherGrid]) -> tuple[np.ndarray, np.ndarray]:
    """Stack complete years as ``(N, 25, 52)`` detailed and ``(N, 6, 52)`` basic."""
    det, bas = [], []
    for g in grids:
        for year in np.unique(g.years):
            block = g.values[g.years == year]
            if block.shape[0] != WEEKS_PER_YEAR or np.isnan(block).any():
                continue
            det.append(block[:, DETAILED_INDICES].T)
            bas.append(block[:, BASIC_INDICES].T)
    if not det:
        return np.empty((0, len(DETAILED_INDICES), WEEKS_PER_YEAR)), np.empty((0, len(BASIC_INDICES), WEEKS_PER_YEAR))
    return np.stack(det), np.stack(bas)


def _probe_lr(epoch: int, lr: float, warmup: int, gamma: float) -> float:
    if epoch < warmup:
        return lr * (epoch + 1) / warmup
    return lr * gamma ** (epoch - warmup)


def determinism_probe(
    train: Sequence[WeatherGrid],
    val: Sequence[WeatherGrid],
    epochs: int = 25,
    lr: float = 5e-4,
    hidden: int = 128,
    batch_size: int = 32,
    warmup_epochs: int = 10,
    gamma: float = 0.99,
    seed: int = 1234,
    shuffle_pairs: bool = False,
    deseasonalize: bool = True,
) -> list[ProbeFeature]:
    """Train the probe and report validation RMSE (z-scored units) and R² per basic feature.

    ``shuffle_pairs`` breaks the detailed/basic correspondence in the training
    set, as a control.
    """
    xd, xb = yearly_blocks(train)
    vd, vb = yearly_blocks(val)
    if len(xd) < 2 or len(vd) < 1:
        raise ValueError("determinism probe needs at least two training years and one validation year")
    if deseasonalize:
        # per-(channel, week) climatology from the training years
        d_clim, b_clim = xd.mean(axis=0, keepdims=True), xb.mean(axis=0, keepdims=True)
        xd, vd, xb, vb = xd - d_clim, vd - d_clim, xb - b_clim, vb - b_clim
    d_mean, d_std = xd.mean(axis=(0, 2), keepdims=True), xd.std(axis=(0, 2), keepdims=True)
    b_mean, b_std = xb.mean(axis=(0, 2), keepdims=True), xb.std(axis=(0, 2), keepdims=True)
    if not (np.all(d_std > 0) and np.all(b_std > 0)):
        raise ValueError("zero-variance channel in probe training data")

    rng = np.random.default_rng(seed)
    if shuffle_pairs:
        xb = xb[rng.permutation(len(xb))]

    def tensors(d, b):
        x = torch.as_tensor(((d - d_mean) / d_std).reshape(len(d), -1), dtype=torch.float32)
        y = torch.as_tensor(((b - b_mean) / b_std).reshape(len(b), -1), dtype=torch.float32)
        return x, y

    x, y = tensors(xd, xb)
    vx, vy = tensors(vd, vb)

    torch.manual_seed(seed)
    gen = numerics.make_generator(seed)
    net = MLP(x.shape[1], hidden, y.shape[1])
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    loss_fn = nn.MSELoss()
    for epoch in range(epochs):
        for group in opt.param_groups:
            group["lr"] = _probe_lr(epoch, lr, warmup_epochs, gamma)
        order = torch.randperm(len(x), generator=gen)
        for i in range(0, len(x), batch_size):
            idx = order[i : i + batch_size]
            loss = loss_fn(net(x[idx]), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()

    with torch.no_grad():
        pred = net(vx).double().numpy().reshape(len(vd), len(BASIC_INDICES), WEEKS_PER_YEAR)
    truth = vy.double().numpy().reshape(pred.shape)
    out = []
    for j, name in enumerate(BASIC_CHANNELS):
        m = r2_rmse(pred[:, j].ravel(), truth[:, j].ravel())
        out.append(ProbeFeature(name, m.rmse, m.r2))
        log.info("probe %s rmse=%.5f r2=%.5f", name, m.rmse, m.r2)
    return out
