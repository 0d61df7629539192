"""Weather/yield ingestion, normalization, windowing and the synthetic oracle."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

log = logging.getLogger(__name__)

CHANNELS = (
    "T2M", "T2M_MAX", "T2M_MIN", "WD2M", "WS2M", "PS", "QV2M", "PRECTOTCORR",
    "ALLSKY_SFC_SW_DWN", "EVPTRNS", "GWETPROF", "SNODP", "T2MDEW", "CLOUD_AMT",
    "EVLAND", "T2MWET", "FRSNO", "ALLSKY_SFC_LW_DWN", "ALLSKY_SFC_PAR_TOT",
    "ALLSKY_SRF_ALB", "PW", "Z0M", "RHOA", "RH2M", "CDD18_3", "HDD18_3", "TO3",
    "AOD_55", "ET0", "VAP", "VAD",
)
N_CHANNELS = len(CHANNELS)
WEEKS_PER_YEAR = 52
WINDOW_WEEKS = 7 * WEEKS_PER_YEAR

# min/max temperature, solar radiation, precipitation, snow, vapor pressure
BASIC_CHANNELS = ("T2M_MAX", "T2M_MIN", "ALLSKY_SFC_SW_DWN", "PRECTOTCORR", "SNODP", "VAP")


def channel_indices(names: Sequence[str]) -> list[int]:
    out = []
    for name in names:
        if name not in CHANNELS:
            raise ValueError(f"unknown weather channel '{name}'")
        out.append(CHANNELS.index(name))
    return out


BASIC_INDICES = tuple(channel_indices(BASIC_CHANNELS))
DETAILED_INDICES = tuple(i for i in range(N_CHANNELS) if i not in BASIC_INDICES)

WEATHER_HEADER = ("grid_id", "lat", "lon", "year", "week", *CHANNELS)
YIELD_HEADER = ("county_id", "crop", "year", "yield", "lat", "lon")


@dataclass
class WeatherGrid:
    """Contiguous weekly series for one grid cell, 52 weeks per year.

    ``values`` is ``(weeks, 31)``; entries left NaN mark gaps that were too
    long to interpolate.
    """

    grid_id: str
    lat: float
    lon: float
    years: np.ndarray
    weeks: np.ndarray
    values: np.ndarray

    @property
    def num_weeks(self) -> int:
        return len(self.years)


@dataclass
class WeatherWindow:
    grid_id: str
    lat: float
    lon: float
    year_per_week: np.ndarray
    detailed: np.ndarray
    split: str = "train"

    @property
    def basic(self) -> np.ndarray:
        return self.detailed[:, BASIC_INDICES]


@dataclass
class CountyYields:
    county_id: str
    crop: str
    lat: float
    lon: float
    yields: dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        years = sorted(self.yields)
        if any(v <= 0 for v in self.yields.values()):
            raise ValueError(f"county {self.county_id}: yields must be positive")
        self.yields = {y: float(self.yields[y]) for y in years}


# --------------------------------------------------------------------- CSV I/O


def load_weather_csv(path: str | Path, max_gap: int = 2) -> list[WeatherGrid]:
    """Parse a weekly weather CSV into validated grids.

    Week-53 rows are dropped. Missing weeks are linearly interpolated when a gap
    is at most ``max_gap`` weeks long; longer gaps stay NaN so windows covering
    them are rejected later.
    """
    df = pd.read_csv(path, dtype=str, keep_default_na=False)
    if tuple(df.columns) != WEATHER_HEADER:
        if len(df.columns) != len(WEATHER_HEADER):
            raise ValueError(
                f"{path}: expected {len(WEATHER_HEADER)} columns, found {len(df.columns)}"
            )
        bad = [c for c, e in zip(df.columns, WEATHER_HEADER) if c != e]
        raise ValueError(f"{path}: unexpected column(s) {bad}")
    numeric = {}
    for col in WEATHER_HEADER[1:]:
        try:
            numeric[col] = df[col].astype(float)  # exact round trip, unlike to_numeric
        except (ValueError, TypeError) as exc:
            raise ValueError(f"{path}: non-numeric value in column '{col}': {exc}") from None
    num = pd.DataFrame(numeric)
    num.insert(0, "grid_id", df["grid_id"].astype(str))
    num["year"] = num["year"].astype(int)
    num["week"] = num["week"].astype(int)

    dup = num.duplicated(subset=["grid_id", "year", "week"], keep="first")
    if dup.any():
        row = num[dup].iloc[0]
        raise ValueError(
            f"{path}: duplicate row for (grid_id={row['grid_id']}, year={row['year']}, week={row['week']})"
        )
    week53 = num["week"] > WEEKS_PER_YEAR
    if week53.any():
        log.info("dropped %d week-53 rows from %s", int(week53.sum()), path)
        num = num[~week53]
    if ((num["week"] < 1)).any():
        raise ValueError(f"{path}: week index must be >= 1")

    grids = []
    for grid_id in sorted(num["grid_id"].unique()):
        g = num[num["grid_id"] == grid_id]
        grids.append(_assemble_grid(grid_id, g, max_gap, path))
    return grids


def _assemble_grid(grid_id, g: pd.DataFrame, max_gap: int, path) -> WeatherGrid:
    lat, lon = float(g["lat"].iloc[0]), float(g["lon"].iloc[0])
    y0, y1 = int(g["year"].min()), int(g["year"].max())
    years = np.repeat(np.arange(y0, y1 + 1), WEEKS_PER_YEAR)
    weeks = np.tile(np.arange(1, WEEKS_PER_YEAR + 1), y1 - y0 + 1)
    values = np.full((len(years), N_CHANNELS), np.nan)
    pos = (g["year"].to_numpy() - y0) * WEEKS_PER_YEAR + g["week"].to_numpy() - 1
    values[pos] = g[list(CHANNELS)].to_numpy(dtype=float)

    missing = np.isnan(values[:, 0])
    if missing.any():
        log.warning("%s: grid %s is missing %d weeks", path, grid_id, int(missing.sum()))
        values = _interpolate_short_gaps(values, missing, max_gap)
    return WeatherGrid(str(grid_id), lat, lon, years, weeks, values)


def _interpolate_short_gaps(values: np.ndarray, missing: np.ndarray, max_gap: int) -> np.ndarray:
    out = values.copy()
    n = len(missing)
    i = 0
    while i < n:
        if not missing[i]:
            i += 1
            continue
        j = i
        while j < n and missing[j]:
            j += 1
        if j - i <= max_gap and i > 0 and j < n:
            left, right = out[i - 1], out[j]
            for s in range(i, j):
                frac = (s - i + 1) / (j - i + 1)
                out[s] = left + frac * (right - left)
        i = j
    return out


def write_weather_csv(grids: Iterable[WeatherGrid], path: str | Path) -> None:
    frames = []
    for g in grids:
        df = pd.DataFrame(g.values, columns=list(CHANNELS))
        df.insert(0, "week", g.weeks)
        df.insert(0, "year", g.years)
        df.insert(0, "lon", g.lon)
        df.insert(0, "lat", g.lat)
        df.insert(0, "grid_id", g.grid_id)
        frames.append(df)
    pd.concat(frames, ignore_index=True).to_csv(path, index=False, float_format="%.17g")


def load_yields_csv(path: str | Path) -> list[CountyYields]:
    df = pd.read_csv(path, dtype={"county_id": str, "crop": str}, float_precision="round_trip")
    missing = [c for c in YIELD_HEADER if c not in df.columns]
    if missing:
        raise ValueError(f"{path}: missing column(s) {missing}")
    if df.duplicated(subset=["county_id", "crop", "year"]).any():
        row = df[df.duplicated(subset=["county_id", "crop", "year"])].iloc[0]
        raise ValueError(f"{path}: duplicate yield for ({row['county_id']}, {row['crop']}, {row['year']})")
    out = []
    for (cid, crop), g in df.groupby(["county_id", "crop"], sort=True):
        out.append(
            CountyYields(
                str(cid), str(crop), float(g["lat"].iloc[0]), float(g["lon"].iloc[0]),
                dict(zip(g["year"].astype(int), g["yield"].astype(float))),
            )
        )
    return out


def write_yields_csv(counties: Iterable[CountyYields], path: str | Path) -> None:
    rows = [
        (c.county_id, c.crop, y, v, c.lat, c.lon) for c in counties for y, v in c.yields.items()
    ]
    pd.DataFrame(rows, columns=list(YIELD_HEADER)).to_csv(path, index=False, float_format="%.17g")


# ------------------------------------------------------------------ windowing


def window_pretraining(grid: WeatherGrid, length: int = WINDOW_WEEKS, split: str = "train") -> list[WeatherWindow]:
    """Non-overlapping windows, earliest first; the tail is discarded.

    Windows containing unfilled gaps are rejected.
    """
    out = []
    for w in range(grid.num_weeks // length):
        sl = slice(w * length, (w + 1) * length)
        block = grid.values[sl]
        if np.isnan(block).any():
            log.warning("grid %s: window %d rejected (gap in data)", grid.grid_id, w)
            continue
        out.append(
            WeatherWindow(grid.grid_id, grid.lat, grid.lon, grid.years[sl].copy(), block.copy(), split)
        )
    return out


def split_grids(grids: Sequence[WeatherGrid], val_ids: Sequence[str]):
    val_ids = set(map(str, val_ids))
    unknown = val_ids - {g.grid_id for g in grids}
    if unknown:
        raise ValueError(f"validation grid ids not found: {sorted(unknown)}")
    train = [g for g in grids if g.grid_id not in val_ids]
    val = [g for g in grids if g.grid_id in val_ids]
    return train, val


def permute_years(
    windows: Sequence[WeatherWindow], seed: int | None = None, permutation: dict[int, int] | None = None
) -> list[WeatherWindow]:
    """Relabel calendar years by a random permutation; weather is untouched."""
    years = sorted({int(y) for w in windows for y in np.unique(w.year_per_week)})
    if permutation is None:
        rng = np.random.default_rng(seed)
        permutation = dict(zip(years, (years[i] for i in rng.permutation(len(years)))))
    out = []
    for w in windows:
        relabeled = np.array([permutation[int(y)] for y in w.year_per_week], dtype=w.year_per_week.dtype)
        out.append(replace(w, year_per_week=relabeled))
    return out


# -------------------------------------------------------------- normalization


@dataclass
class NormStats:
    weather_mean: np.ndarray
    weather_std: np.ndarray
    yield_mean: dict[str, float] = field(default_factory=dict)
    yield_std: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "weather_mean": [float(v) for v in self.weather_mean],
            "weather_std": [float(v) for v in self.weather_std],
            "yield_mean": dict(self.yield_mean),
            "yield_std": dict(self.yield_std),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(
            np.asarray(d["weather_mean"], dtype=float),
            np.asarray(d["weather_std"], dtype=float),
            dict(d.get("yield_mean", {})),
            dict(d.get("yield_std", {})),
        )


def _zscore_stats(x: np.ndarray, what: str):
    mean = x.mean(axis=0)
    std = x.std(axis=0)  # population std
    bad = np.flatnonzero(~(std > 0))
    if bad.size:
        raise ValueError(f"zero-variance {what} column(s): {bad.tolist()}")
    return mean, std


def compute_norm_stats(
    weather: np.ndarray | Sequence[WeatherWindow],
    yields: dict[str, np.ndarray] | None = None,
) -> NormStats:
    """Per-channel z-score statistics from the training split only."""
    if not isinstance(weather, np.ndarray):
        windows = list(weather)
        leaked = [w.grid_id for w in windows if w.split != "train"]
        if leaked:
            raise ValueError(f"normalization must use training rows only (got split tags from {leaked[:3]})")
        weather = np.concatenate([w.detailed for w in windows], axis=0)
    mean, std = _zscore_stats(np.asarray(weather, dtype=float), "weather")
    ym, ys = {}, {}
    for crop, arr in (yields or {}).items():
        m, s = _zscore_stats(np.asarray(arr, dtype=float).reshape(-1, 1), f"yield[{crop}]")
        ym[crop], ys[crop] = float(m[0]), float(s[0])
    return NormStats(mean, std, ym, ys)


def apply_norm(x: np.ndarray, stats: NormStats, channels: Sequence[int] | None = None) -> np.ndarray:
    idx = slice(None) if channels is None else list(channels)
    return (x - stats.weather_mean[idx]) / stats.weather_std[idx]


def invert_norm(x: np.ndarray, stats: NormStats, channels: Sequence[int] | None = None) -> np.ndarray:
    idx = slice(None) if channels is None else list(channels)
    return x * stats.weather_std[idx] + stats.weather_mean[idx]


# --------------------------------------------------------------- synthetic data


@dataclass
class SyntheticSpec:
    """Desk-scale generator settings.

    Detailed channels are an affine image of ``num_factors`` smooth seasonal
    factors. With ``degree_days`` on, T2M instead follows a seasonal cycle plus
    the factor-0 anomaly, and CDD18_3/HDD18_3 become weekly degree sums
    above/below ``base_temp``. Basic channels are an exact linear map of the
    detailed ones with zero weight on the degree-day channels. Yields load
    linearly on growing-season factor anomalies and on standardized
    growing-season degree days, which no linear functional of the basic
    channels recovers. ``stress_seasons`` > 1 makes the degree-day term a
    trailing mean over that many growing seasons (carry-over stress), so the
    signal is spread across a multi-year input window rather than confined
    to its last year.
    """

    num_grids: int = 32
    start_year: int = 1984
    num_years: int = 39
    num_factors: int = 3
    mixing_seed: int = 7
    anomaly_scale: float = 0.6
    anomaly_ar: float = 0.9
    smoothing_weeks: float = 8.0
    persistence: float = 0.7
    idio_scale: float = 0.0
    growing_season: tuple[int, int] = (18, 40)
    yield_coefs: tuple[float, ...] = (4.0, -3.0)
    degree_days: bool = True
    degree_day_coef: float = 10.0
    base_temp: float = 18.3
    stress_seasons: int = 1
    base_yield: float = 150.0
    trend: float = 1.2
    county_effect_sd: float = 8.0
    yield_noise_sd: float = 2.0
    crop: str = "corn"

    def validate(self) -> None:
        if self.num_grids < 1 or self.num_years < 1:
            raise ValueError("num_grids and num_years must be positive")
        if not 1 <= self.num_factors <= len(DETAILED_INDICES):
            raise ValueError("num_factors must be in 1..25")
        if len(self.yield_coefs) > self.num_factors:
            raise ValueError("yield_coefs longer than num_factors")
        if not 0 <= self.anomaly_ar < 1:
            raise ValueError("anomaly_ar must be in [0, 1)")
        if self.stress_seasons < 1:
            raise ValueError("stress_seasons must be >= 1")
        lo, hi = self.growing_season
        if not 1 <= lo <= hi <= WEEKS_PER_YEAR:
            raise ValueError("growing_season must be a week range within 1..52")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown synthetic spec field(s): {sorted(extra)}")
        d = dict(d)
        if "growing_season" in d:
            d["growing_season"] = tuple(d["growing_season"])
        if "yield_coefs" in d:
            d["yield_coefs"] = tuple(d["yield_coefs"])
        spec = cls(**d)
        spec.validate()
        return spec


@dataclass
class SyntheticDataset:
    grids: list[WeatherGrid]
    yields: list[CountyYields]
    basic_map: np.ndarray
    season_signal: np.ndarray

    def detailed_of(self, grid: WeatherGrid) -> np.ndarray:
        return grid.values[:, DETAILED_INDICES]


def _smooth_ar(rng, n_series: int, length: int, ar: float, width: float) -> np.ndarray:
    """Unit-variance AR(1) noise smoothed by a Gaussian kernel along time."""
    eps = rng.standard_normal((n_series, length))
    x = np.empty_like(eps)
    x[:, 0] = eps[:, 0]
    scale = math.sqrt(1 - ar * ar)
    for t in range(1, length):
        x[:, t] = ar * x[:, t - 1] + scale * eps[:, t]
    if width > 0:
        half = int(math.ceil(3 * width))
        k = np.exp(-0.5 * (np.arange(-half, half + 1) / width) ** 2)
        k /= k.sum()
        x = np.stack([np.convolve(np.pad(row, half, mode="reflect"), k, mode="valid") for row in x])
    return x / x.std(axis=1, keepdims=True)


def generate_synthetic(spec: SyntheticSpec, seed: int = 1234) -> SyntheticDataset:
    spec.validate()
    mix_rng = np.random.default_rng(spec.mixing_seed)
    rng = np.random.default_rng(seed)
    n_det, f = len(DETAILED_INDICES), spec.num_factors
    weeks_total = spec.num_years * WEEKS_PER_YEAR
    d_temp, d_cdd, d_hdd = (DETAILED_INDICES.index(CHANNELS.index(c)) for c in ("T2M", "CDD18_3", "HDD18_3"))

    mixing = mix_rng.standard_normal((n_det, f)) / math.sqrt(f)
    offsets = mix_rng.uniform(-5, 20, size=n_det)
    scales = mix_rng.uniform(0.5, 3.0, size=n_det)
    basic_map = mix_rng.standard_normal((len(BASIC_INDICES), n_det)) / math.sqrt(n_det)
    if spec.degree_days:
        basic_map[:, [d_cdd, d_hdd]] = 0.0
    season_phase = mix_rng.uniform(0, 2 * math.pi, size=f)
    season_amp = mix_rng.uniform(0.5, 1.5, size=f)

    years = np.repeat(np.arange(spec.start_year, spec.start_year + spec.num_years), WEEKS_PER_YEAR)
    weeks = np.tile(np.arange(1, WEEKS_PER_YEAR + 1), spec.num_years)
    t = np.arange(weeks_total)
    lo, hi = spec.growing_season
    in_season = (weeks >= lo) & (weeks <= hi)
    coefs = np.zeros(f)
    coefs[: len(spec.yield_coefs)] = spec.yield_coefs

    grids, meta = [], []
    linear = np.zeros((spec.num_grids, spec.num_years))
    degree_days = np.zeros((spec.num_grids, spec.num_years))
    for g in range(spec.num_grids):
        lat = float(rng.uniform(36.0, 48.0))
        lon = float(rng.uniform(-100.0, -82.0))
        phase_shift = (lat - 42.0) / 12.0
        seasonal = season_amp[:, None] * np.sin(2 * math.pi * t[None, :] / WEEKS_PER_YEAR + season_phase[:, None] + phase_shift)
        weekly = _smooth_ar(rng, f, weeks_total, spec.anomaly_ar, spec.smoothing_weeks)
        yearly = rng.standard_normal((f, spec.num_years))
        anomaly = math.sqrt(1 - spec.persistence) * weekly + math.sqrt(spec.persistence) * np.repeat(yearly, WEEKS_PER_YEAR, axis=1)
        factors = seasonal + spec.anomaly_scale * anomaly

        latent = mixing @ factors
        if spec.idio_scale > 0:
            latent = latent + spec.idio_scale * _smooth_ar(rng, n_det, weeks_total, spec.anomaly_ar, spec.smoothing_weeks)
        detailed = offsets[:, None] + scales[:, None] * latent
        if spec.degree_days:
            # peaks near week 30, colder further north
            temp = 10.0 - 0.4 * (lat - 42.0) + 11.0 * np.sin(2 * math.pi * (t - 16) / WEEKS_PER_YEAR) + 4.0 * anomaly[0]
            detailed[d_temp] = temp
            detailed[d_cdd] = 7.0 * np.maximum(temp - spec.base_temp, 0.0)
            detailed[d_hdd] = 7.0 * np.maximum(spec.base_temp - temp, 0.0)
        basic = basic_map @ detailed

        values = np.empty((weeks_total, N_CHANNELS))
        values[:, DETAILED_INDICES] = detailed.T
        values[:, BASIC_INDICES] = basic.T
        grid_id = f"g{g:03d}"
        grids.append(WeatherGrid(grid_id, lat, lon, years.copy(), weeks.copy(), values))
        meta.append((grid_id, lat, lon))

        season_anom = anomaly[:, in_season].reshape(f, spec.num_years, -1).mean(axis=2)
        linear[g] = coefs @ season_anom
        if spec.degree_days:
            degree_days[g] = np.abs(temp - spec.base_temp)[in_season].reshape(spec.num_years, -1).mean(axis=1)

    if spec.stress_seasons > 1:
        # trailing mean; early years average whatever seasons exist
        csum = np.cumsum(np.pad(degree_days, ((0, 0), (1, 0))), axis=1)
        end = np.arange(1, spec.num_years + 1)
        start = np.maximum(end - spec.stress_seasons, 0)
        degree_days = (csum[:, end] - csum[:, start]) / (end - start)
    signal = linear
    if spec.degree_days and spec.degree_day_coef != 0 and degree_days.std() > 0:
        signal = linear - spec.degree_day_coef * (degree_days - degree_days.mean()) / degree_days.std()
    counties = []
    for g, (grid_id, lat, lon) in enumerate(meta):
        county_effect = rng.normal(0.0, spec.county_effect_sd)
        noise = rng.normal(0.0, spec.yield_noise_sd, size=spec.num_years)
        trend = spec.trend * np.arange(spec.num_years)
        y = np.maximum(spec.base_yield + county_effect + trend + signal[g] + noise, 1.0)
        counties.append(
            CountyYields(grid_id, spec.crop, lat, lon,
                         dict(zip(range(spec.start_year, spec.start_year + spec.num_years), y.tolist())))
        )
    return SyntheticDataset(grids, counties, basic_map, signal)
