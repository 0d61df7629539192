"""Metrics, extreme-year selection, significance tests and latent PCA."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy import special

log = logging.getLogger(__name__)


@dataclass
class MetricsReport:
    r2: float
    rmse: float
    n: int


def r2_rmse(pred: Sequence[float], truth: Sequence[float]) -> MetricsReport:
    """Coefficient of determination about the truth mean, and RMSE.

    R² is NaN when the truth is constant.
    """
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape or pred.size == 0:
        raise ValueError("pred and truth must have equal nonzero length")
    resid = truth - pred
    ss_res = float(np.sum(resid**2))
    ss_tot = float(np.sum((truth - truth.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else math.nan
    return MetricsReport(r2, math.sqrt(ss_res / truth.size), int(truth.size))


# ------------------------------------------------------------- extreme years


@dataclass
class ExtremeYearRow:
    year: int
    mean_yield: float
    rolling_mean_5y: float
    deviation_pct: float
    abs_zscore: float


def deviation_pct(value: float, rolling_mean: float) -> float:
    return 100.0 * abs(value - rolling_mean) / rolling_mean


def select_extreme_years(
    yearly_mean_yields: Mapping[int, float],
    window: int = 5,
    top_n: int = 5,
    first_year: int | None = None,
    last_year: int | None = None,
) -> list[ExtremeYearRow]:
    """Rank years by ``|y_t - mean| / std`` over the ``window`` preceding years.

    The rolling statistics exclude the candidate year; the std is the sample
    (n-1) standard deviation. Candidates with zero rolling std are skipped.
    """
    series = {int(k): float(v) for k, v in yearly_mean_yields.items()}
    years = sorted(series)
    rows = []
    skipped = 0
    for t in years:
        if first_year is not None and t < first_year:
            continue
        if last_year is not None and t > last_year:
            continue
        prev = [t - i for i in range(window, 0, -1)]
        if not all(p in series for p in prev):
            continue
        hist = np.array([series[p] for p in prev])
        mean, std = float(hist.mean()), float(hist.std(ddof=1))
        if not std > 0:
            skipped += 1
            continue
        z = abs(series[t] - mean) / std
        rows.append(ExtremeYearRow(t, series[t], mean, deviation_pct(series[t], mean), z))
    if skipped:
        log.warning("skipped %d candidate years with zero rolling std", skipped)
    rows.sort(key=lambda r: (-r.abs_zscore, r.year))
    return rows[:top_n]


# ------------------------------------------------------------ significance


@dataclass
class TTestResult:
    t: float
    p_two_tailed: float
    df: int
    degenerate: bool = False


def student_t_sf(t: float, df: float) -> float:
    """Upper tail ``P(T > t)`` via the regularized incomplete beta."""
    x = df / (df + t * t)
    tail = 0.5 * special.betainc(df / 2.0, 0.5, x)
    return tail if t >= 0 else 1.0 - tail


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> TTestResult:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be 1-D with equal length")
    n = a.size
    if n < 2:
        raise ValueError("need at least two pairs")
    d = a - b
    df = n - 1
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(0.0, 1.0, df, degenerate=True)
        return TTestResult(math.copysign(math.inf, mean), 0.0, df, degenerate=True)
    t = mean / (sd / math.sqrt(n))
    p = 2.0 * student_t_sf(abs(t), df)
    return TTestResult(t, min(p, 1.0), df)


def permutation_test(a: Sequence[float], b: Sequence[float], iterations: int = 10_000, seed: int = 1234) -> float:
    """Two-tailed paired sign-flip test with add-one smoothing.

    Signs come from a Philox (counter-based) generator so the result depends
    only on ``seed``.
    """
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    if d.ndim != 1 or d.size == 0:
        raise ValueError("paired samples must be 1-D and nonempty")
    rng = np.random.Generator(np.random.Philox(seed))
    signs = rng.integers(0, 2, size=(iterations, d.size), dtype=np.int8) * 2 - 1
    observed = abs(d.mean())
    permuted = np.abs((signs * d).mean(axis=1))
    tol = 1e-12 * max(1.0, float(np.abs(d).max()))
    count = int(np.count_nonzero(permuted >= observed - tol))
    return (count + 1) / (iterations + 1)


# --------------------------------------------------------------------- PCA


@dataclass
class PCAResult:
    fractions: np.ndarray
    coords: np.ndarray
    components: np.ndarray


def pca_variance(latents: np.ndarray, n_components: int = 2) -> PCAResult:
    """Explained-variance fractions from the covariance eigendecomposition."""
    x = np.asarray(latents, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need an (N, D) matrix with N >= 2")
    n_components = min(n_components, x.shape[1])
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / (x.shape[0] - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    vals = np.clip(vals[order], 0.0, None)
    vecs = vecs[:, order]
    total = vals.sum()
    if total <= 0:
        raise ValueError("latents have zero variance")
    comps = vecs[:, :n_components]
    return PCAResult(vals[:n_components] / total, xc @ comps, comps.T)
