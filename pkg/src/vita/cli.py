"""Command-line entry point: ``vita <command> [--config FILE] [--out-dir DIR] ...``.

Exit codes: 0 success, 1 validation or usage error, 2 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from vita import __version__

log = logging.getLogger("vita")

LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}
MANIFEST_NAME = "run_manifest.json"
EXIT_OK, EXIT_VALIDATION, EXIT_IO = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ------------------------------------------------------------------ helpers


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path) as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ValueError(f"config {path} must be a JSON object")
    return cfg


def _pop_keys(cfg: dict, defaults: dict) -> dict:
    """Remove command-level keys from ``cfg`` and return them merged over ``defaults``."""
    out = dict(defaults)
    for key in defaults:
        if key in cfg:
            out[key] = cfg.pop(key)
    return out


def _reject_unknown(cfg: dict, what: str) -> None:
    if cfg:
        raise ValueError(f"unknown {what} config field(s): {sorted(cfg)}")


def _apply_seed(cfg: dict, seed: int) -> None:
    if "seed" in cfg and cfg["seed"] != seed:
        log.warning("config seed %s overridden by --seed %s", cfg["seed"], seed)
    cfg["seed"] = seed


def _prepare_out_dir(path: str | None, force: bool, required: bool = True) -> Path | None:
    if path is None:
        if required:
            raise UsageError("--out-dir is required for this command")
        return None
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise UsageError(f"--out-dir {out} exists and is not a directory")
    if out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"--out-dir {out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, args, config: dict, inputs: dict, outputs: list[str], started: float) -> None:
    manifest = {
        "command": args.command,
        "argv": list(args.argv),
        "config": config,
        "seed": args.seed,
        "threads": args.threads,
        "inputs": {k: str(v) for k, v in inputs.items() if v is not None},
        "outputs": sorted(outputs),
        "version": __version__,
        "started": _iso(started),
        "finished": _iso(time.time()),
    }
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))


def _iso(ts: float) -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(ts))


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=float))


def _year_range(pair, name: str) -> range:
    if not (isinstance(pair, (list, tuple)) and len(pair) == 2):
        raise ValueError(f"{name} must be [first_year, last_year]")
    first, last = int(pair[0]), int(pair[1])
    if last < first:
        raise ValueError(f"{name}: last year precedes first year")
    return range(first, last + 1)


# ----------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    from vita.data import SyntheticSpec, generate_synthetic, write_weather_csv, write_yields_csv

    started = time.time()
    raw = _load_config(args.config)
    spec = SyntheticSpec.from_dict(raw)
    out = _prepare_out_dir(args.out_dir, args.force)
    ds = generate_synthetic(spec, seed=args.seed)
    write_weather_csv(ds.grids, out / "weather.csv")
    write_yields_csv(ds.yields, out / "yields.csv")
    np.save(out / "basic_map.npy", ds.basic_map)
    log.info("wrote %d grids x %d years", spec.num_grids, spec.num_years)
    _write_manifest(out, args, asdict(spec), {"config": args.config},
                    ["weather.csv", "yields.csv", "basic_map.npy"], started)
    return EXIT_OK


def cmd_pretrain(args) -> int:
    import torch

    from vita.data import load_weather_csv, permute_years, split_grids, window_pretraining
    from vita.pretrain import PretrainConfig, run_pretraining

    started = time.time()
    raw = _load_config(args.config)
    extra = _pop_keys(raw, {"val_grids": [], "permute_years": False, "window_weeks": 364})
    _apply_seed(raw, args.seed)
    cfg = PretrainConfig.from_dict(raw)
    if not args.weather:
        raise UsageError("pretrain needs --weather")
    out = _prepare_out_dir(args.out_dir, args.force)
    grids = load_weather_csv(args.weather)
    train_g, val_g = split_grids(grids, extra["val_grids"])
    train = [w for g in train_g for w in window_pretraining(g, extra["window_weeks"], "train")]
    val = [w for g in val_g for w in window_pretraining(g, extra["window_weeks"], "val")]
    if extra["permute_years"]:
        train = permute_years(train, seed=args.seed)
    log.info("pretraining on %d windows (%d validation)", len(train), len(val))
    run_pretraining(cfg, train, val, out_dir=out, dtype=torch.float32)
    _write_manifest(out, args, {**cfg.to_dict(), **extra}, {"config": args.config, "weather": args.weather},
                    ["checkpoint", "pretrain_log.csv"], started)
    return EXIT_OK


def cmd_finetune(args) -> int:
    import torch

    from vita.data import load_weather_csv, load_yields_csv
    from vita.finetune import FinetuneConfig, build_sequences, match_weather, run_finetune

    started = time.time()
    raw = _load_config(args.config)
    extra = _pop_keys(raw, {"crop": None, "train_years": None, "val_year": None})
    _apply_seed(raw, args.seed)
    if args.checkpoint:
        raw["checkpoint"] = args.checkpoint
    cfg = FinetuneConfig.from_dict(raw)
    if not args.weather or not args.yields:
        raise UsageError("finetune needs --weather and --yields")
    if extra["train_years"] is None or extra["val_year"] is None:
        raise ValueError("finetune config needs train_years and val_year")
    train_years = _year_range(extra["train_years"], "train_years")
    val_year = int(extra["val_year"])
    if val_year in train_years:
        raise ValueError("val_year must lie outside train_years")
    out = _prepare_out_dir(args.out_dir, args.force)

    grids = load_weather_csv(args.weather)
    counties = load_yields_csv(args.yields)
    crops = sorted({c.crop for c in counties})
    crop = extra["crop"] or (crops[0] if len(crops) == 1 else None)
    if crop is None:
        raise ValueError(f"yields contain several crops {crops}; set crop in the config")
    counties = [c for c in counties if c.crop == crop]
    weather = match_weather(grids, counties)
    train = build_sequences(weather, counties, train_years)
    val = build_sequences(weather, counties, range(val_year - 6, val_year + 1))
    log.info("fine-tuning %s on %d sequences, validating on %d", crop, len(train), len(val))
    result = run_finetune(cfg, train, val, out_dir=out, dtype=torch.float32)
    summary = {"crop": crop, "val_year": val_year, "best_epoch": result.best_epoch, **asdict(result.metrics)}
    _write_json(out / "summary.json", summary)
    print(f"best epoch {result.best_epoch}: val R2={result.metrics.r2:.4f} RMSE={result.metrics.rmse:.4f}")
    _write_manifest(out, args, {**cfg.to_dict(), **extra},
                    {"config": args.config, "weather": args.weather, "yields": args.yields},
                    ["best", "results.csv", "predictions.csv", "summary.json"], started)
    return EXIT_OK


def _read_predictions(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or not {"truth", "pred"} <= set(rows[0]):
        raise ValueError(f"{path}: expected columns county_id, year, truth, pred")
    try:
        truth = np.array([float(r["truth"]) for r in rows])
        pred = np.array([float(r["pred"]) for r in rows])
    except ValueError as exc:
        raise ValueError(f"{path}: non-numeric truth/pred value ({exc})") from exc
    return truth, pred


def cmd_eval(args) -> int:
    from vita.data import load_yields_csv
    from vita.evaluation import r2_rmse, select_extreme_years

    started = time.time()
    raw = _load_config(args.config)
    opts = _pop_keys(raw, {"window": 5, "top_n": 5, "first_year": None, "last_year": None})
    _reject_unknown(raw, "eval")
    if not args.predictions and not args.yields:
        raise UsageError("eval needs --predictions and/or --yields")
    out = _prepare_out_dir(args.out_dir, args.force)
    outputs, report = [], {}
    if args.predictions:
        truth, pred = _read_predictions(args.predictions)
        m = r2_rmse(pred, truth)
        report["metrics"] = asdict(m)
        print(f"R2={m.r2:.4f} RMSE={m.rmse:.4f} n={m.n}")
    if args.yields:
        counties = load_yields_csv(args.yields)
        rows = []
        for crop in sorted({c.crop for c in counties}):
            per_year: dict[int, list[float]] = {}
            for c in counties:
                if c.crop == crop:
                    for y, v in c.yields.items():
                        per_year.setdefault(y, []).append(v)
            means = {y: float(np.mean(v)) for y, v in per_year.items()}
            for r in select_extreme_years(means, opts["window"], opts["top_n"], opts["first_year"], opts["last_year"]):
                rows.append({"crop": crop, **asdict(r)})
        with open(out / "extreme_years.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["crop", "year", "mean_yield", "rolling_mean_5y", "deviation_pct", "abs_zscore"])
            w.writeheader()
            w.writerows(rows)
        outputs.append("extreme_years.csv")
        report["extreme_years"] = rows
    _write_json(out / "summary.json", report)
    outputs.append("summary.json")
    _write_manifest(out, args, opts, {"config": args.config, "predictions": args.predictions, "yields": args.yields},
                    outputs, started)
    return EXIT_OK


def _read_pairs(path: str, a_col: str | None, b_col: str | None) -> tuple[np.ndarray, np.ndarray, str, str]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if len(rows) < 2:
        raise ValueError(f"{path}: need at least two pairs")
    cols = list(rows[0])
    if a_col is None or b_col is None:
        numeric = [c for c in cols if _all_float(r[c] for r in rows)]
        if len(numeric) < 2:
            raise ValueError(f"{path}: need two numeric columns")
        # convention: the last column is the candidate, the one before it the baseline
        a_col, b_col = a_col or numeric[-1], b_col or numeric[-2]
    for c in (a_col, b_col):
        if c not in cols:
            raise ValueError(f"{path}: no column named {c!r}")
    try:
        a = np.array([float(r[a_col]) for r in rows])
        b = np.array([float(r[b_col]) for r in rows])
    except ValueError as exc:
        raise ValueError(f"{path}: non-numeric value ({exc})") from exc
    return a, b, a_col, b_col


def _all_float(values) -> bool:
    try:
        for v in values:
            float(v)
    except ValueError:
        return False
    return True


def cmd_stats(args) -> int:
    from vita.evaluation import paired_t_test, permutation_test

    started = time.time()
    raw = _load_config(args.config)
    opts = _pop_keys(raw, {"iterations": 10_000, "a_col": None, "b_col": None})
    _reject_unknown(raw, "stats")
    if not args.pairs:
        raise UsageError("stats needs --pairs")
    out = _prepare_out_dir(args.out_dir, args.force, required=False)
    a, b, a_col, b_col = _read_pairs(args.pairs, opts["a_col"], opts["b_col"])
    tt = paired_t_test(a, b)
    p_perm = permutation_test(a, b, iterations=int(opts["iterations"]), seed=args.seed)
    print(f"paired t-test ({a_col} - {b_col}, n={a.size}): t={tt.t:.4f} p={tt.p_two_tailed:.4f} df={tt.df}")
    print(f"permutation test ({opts['iterations']} iterations): p={p_perm:.4f}")
    if out is not None:
        _write_json(out / "stats.json", {"a": a_col, "b": b_col, "n": int(a.size), "t": tt.t,
                                         "p_two_tailed": tt.p_two_tailed, "df": tt.df, "p_permutation": p_perm})
        _write_manifest(out, args, opts, {"config": args.config, "pairs": args.pairs}, ["stats.json"], started)
    return EXIT_OK


def cmd_probe(args) -> int:
    from vita.data import load_weather_csv, split_grids
    from vita.probe import determinism_probe

    started = time.time()
    raw = _load_config(args.config)
    opts = _pop_keys(raw, {
        "epochs": 25, "lr": 5e-4, "hidden": 128, "batch_size": 32, "warmup_epochs": 10, "gamma": 0.99,
        "val_grids": None, "val_fraction": 0.04, "shuffle_pairs": False, "deseasonalize": True,
    })
    _reject_unknown(raw, "probe")
    if not args.weather:
        raise UsageError("probe needs --weather")
    out = _prepare_out_dir(args.out_dir, args.force)
    grids = load_weather_csv(args.weather)
    val_ids = opts["val_grids"]
    if val_ids is None:
        n_val = max(1, int(round(len(grids) * float(opts["val_fraction"]))))
        if n_val >= len(grids):
            raise ValueError("probe needs at least two grids")
        val_ids = [g.grid_id for g in grids[-n_val:]]
    train_g, val_g = split_grids(grids, val_ids)
    res = determinism_probe(
        train_g, val_g, epochs=opts["epochs"], lr=opts["lr"], hidden=opts["hidden"], batch_size=opts["batch_size"],
        warmup_epochs=opts["warmup_epochs"], gamma=opts["gamma"], seed=args.seed,
        shuffle_pairs=opts["shuffle_pairs"], deseasonalize=opts["deseasonalize"],
    )
    with open(out / "probe.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["feature", "rmse", "r2"])
        for r in res:
            w.writerow([r.feature, repr(r.rmse), repr(r.r2)])
            print(f"{r.feature:>20s}  rmse={r.rmse:.5f}  r2={r.r2:.5f}")
    _write_manifest(out, args, opts, {"config": args.config, "weather": args.weather}, ["probe.csv"], started)
    return EXIT_OK


def cmd_pca(args) -> int:
    from vita.checkpoint import load_checkpoint
    from vita.data import NormStats, load_weather_csv
    from vita.evaluation import pca_variance
    from vita.finetune import year_latents

    started = time.time()
    raw = _load_config(args.config)
    opts = _pop_keys(raw, {"years": None, "n_components": 2})
    _reject_unknown(raw, "pca")
    if not args.checkpoint or not args.weather:
        raise UsageError("pca needs --checkpoint and --weather")
    if not opts["years"]:
        raise ValueError("pca config needs a nonempty years list")
    out = _prepare_out_dir(args.out_dir, args.force)
    model, manifest = load_checkpoint(args.checkpoint)
    if "norm" not in manifest.get("extra", {}):
        raise ValueError(f"checkpoint {args.checkpoint} carries no normalization statistics")
    norm = NormStats.from_dict(manifest["extra"]["norm"])
    keys, latents = year_latents(model, norm, load_weather_csv(args.weather), [int(y) for y in opts["years"]])
    res = pca_variance(latents, int(opts["n_components"]))
    with open(out / "pca.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["grid_id", "year", *[f"pc{i + 1}" for i in range(res.coords.shape[1])]])
        for (gid, year), row in zip(keys, res.coords):
            w.writerow([gid, year, *map(repr, row.tolist())])
    fractions = res.fractions.tolist()
    _write_json(out / "summary.json", {"explained_variance": fractions, "total": float(sum(fractions)), "n": len(keys)})
    print("explained variance: " + ", ".join(f"{f:.4f}" for f in fractions) + f" (total {sum(fractions):.4f})")
    _write_manifest(out, args, opts, {"config": args.config, "checkpoint": args.checkpoint, "weather": args.weather},
                    ["pca.csv", "summary.json"], started)
    return EXIT_OK


COMMANDS = {
    "synth": (cmd_synth, "generate synthetic weather and yields"),
    "pretrain": (cmd_pretrain, "masked variational pretraining on weather"),
    "finetune": (cmd_finetune, "fine-tune on county yields"),
    "eval": (cmd_eval, "metrics from a predictions table and extreme-year selection"),
    "stats": (cmd_stats, "paired t-test and permutation test on paired scores"),
    "probe": (cmd_probe, "basic-from-detailed determinism probe"),
    "pca": (cmd_pca, "PCA of per-year latent representations"),
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, default=1234)
    common.add_argument("--out-dir")
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--force", action="store_true", help="write into a non-empty --out-dir")
    parser = _Parser(prog="vita", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"vita {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text)
        if name in ("pretrain", "finetune", "probe", "pca"):
            p.add_argument("--weather", help="weather CSV")
        if name in ("finetune", "eval"):
            p.add_argument("--yields", help="yields CSV")
        if name in ("finetune", "pca"):
            p.add_argument("--checkpoint", help="checkpoint directory")
        if name == "eval":
            p.add_argument("--predictions", help="predictions CSV (county_id, year, truth, pred)")
        if name == "stats":
            p.add_argument("--pairs", help="CSV with paired score columns")
    return parser


def _setup_logging() -> None:
    level = os.environ.get("VITA_LOG_LEVEL", "warn").lower()
    if level not in LOG_LEVELS:
        raise UsageError(f"VITA_LOG_LEVEL must be one of {sorted(LOG_LEVELS)}, got {level!r}")
    root = logging.getLogger()
    for h in list(root.handlers):
        if getattr(h, "_vita", False):
            root.removeHandler(h)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    handler._vita = True
    root.addHandler(handler)
    root.setLevel(LOG_LEVELS[level])


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        _setup_logging()
        args = build_parser().parse_args(argv)
        args.argv = argv
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        from vita.numerics import configure_runtime

        configure_runtime(args.threads)
        return COMMANDS[args.command][0](args)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_VALIDATION
    except (ValueError, TypeError, KeyError, FloatingPointError) as exc:
        print(f"vita: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"vita: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
