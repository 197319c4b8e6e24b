"""Per-symbol pipelines behind the CLI subcommands.

Every command takes a resolved :class:`RunConfig`, processes each symbol
independently (optionally on a thread pool) and writes under
``output_dir/<symbol>/``.  A failing symbol is recorded, never fatal to the
others.
"""
from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import CHANNELS, SampleSet, ingest_csv, windowize
from .downstream import forest_fit, forest_predict_proba, ridge_fit, ridge_predict, ridge_select_alpha
from .errors import CheckpointIncompatibleError, ConfigError, DeconfuseError
from .metrics import SELL, backtest_ar, classification_metrics, mae, roc_points
from .model import build_model, infer_features
from .optimizer import train

log = logging.getLogger(__name__)

METRIC_COLUMNS = (
    "symbol",
    "mae_close",
    "mae_open",
    "mae_high",
    "mae_low",
    "mae_nav",
    "precision",
    "recall",
    "f1",
    "auc",
    "predicted_ar",
    "true_ar",
)
FORECAST_KEYS = METRIC_COLUMNS[1:6]
TRADE_KEYS = METRIC_COLUMNS[6:]


@dataclass
class RunSummary:
    results: dict[str, dict] = field(default_factory=dict)
    failures: dict[str, str] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.failures


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def discover_symbols(config: RunConfig) -> dict[str, Path]:
    if not config.data_dir:
        raise ConfigError("data_dir is not set (use --data-dir or the config file)")
    root = Path(config.data_dir)
    if not root.is_dir():
        raise ConfigError(f"data directory {root} does not exist")
    files = {p.stem: p for p in sorted(root.glob("*.csv"))}
    if config.symbols:
        missing = [s for s in config.symbols if s not in files]
        if missing:
            raise ConfigError(f"no CSV for symbols {missing} in {root}")
        files = {s: files[s] for s in sorted(config.symbols)}
    if not files:
        raise ConfigError(f"no CSV files in {root}")
    return files


def _run_all(config: RunConfig, job: Callable[[str, Path], dict]) -> RunSummary:
    files = discover_symbols(config)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.yaml").write_text(config.dump())

    def guarded(item):
        sym, path = item
        try:
            (out / sym).mkdir(exist_ok=True)
            return sym, job(sym, path), None
        except DeconfuseError as exc:
            log.error("%s: %s", sym, exc)
            return sym, None, f"{type(exc).__name__}: {exc}"

    if config.workers > 1:
        with ThreadPoolExecutor(config.workers) as pool:
            outcomes = list(pool.map(guarded, files.items()))
    else:
        outcomes = [guarded(item) for item in files.items()]
    summary = RunSummary()
    for sym, res, err in sorted(outcomes, key=lambda o: o[0]):
        if err is None:
            summary.results[sym] = res
        else:
            summary.failures[sym] = err
    if summary.failures:
        _write_json(out / "failures.json", summary.failures)
    return summary


def load_samples(config: RunConfig, path: Path) -> SampleSet:
    series = ingest_csv(path, window=config.window)
    return windowize(series, config.window, config.eval.split_fraction)


def _load_model(config: RunConfig, sym: str, checkpoint: str | Path | None):
    path = Path(checkpoint) if checkpoint else Path(config.output_dir) / sym / "model.ckpt"
    if not path.exists():
        raise CheckpointIncompatibleError(f"{sym}: checkpoint {path} not found (run train first)")
    model = load_checkpoint(path).model
    if model is None:
        raise CheckpointIncompatibleError(f"{path} has no model section")
    if model.window != config.window or model.num_channels != len(CHANNELS):
        raise CheckpointIncompatibleError(
            f"{path}: checkpoint expects window {model.window} and {model.num_channels} channels, "
            f"config has window {config.window} and {len(CHANNELS)} channels"
        )
    return model


def cmd_train(config: RunConfig) -> RunSummary:
    def job(sym, path):
        samples = load_samples(config, path)
        seed = config.symbol_seed(sym)
        model = build_model(len(CHANNELS), config.window, config.layer_specs(), config.architecture.alpha, seed)
        sym_dir = Path(config.output_dir) / sym
        result = train(
            model,
            samples,
            config.train.to_train_config(seed),
            trace_path=sym_dir / "loss.csv",
            checkpoint_every=config.train.checkpoint_every,
            checkpoint_path=sym_dir / "model.ckpt",
        )
        save_checkpoint(sym_dir / "model.ckpt", result.model)
        return {"initial_J": result.losses[0], "final_J": result.losses[-1], "epochs": len(result.losses) - 1}

    return _run_all(config, job)


def cmd_features(config: RunConfig, checkpoint: str | Path | None = None) -> RunSummary:
    def job(sym, path):
        samples = load_samples(config, path)
        model = _load_model(config, sym, checkpoint)
        Z = infer_features(model, samples.all_windows()).Z
        write_features(Path(config.output_dir) / sym / "features.csv", samples, Z)
        return {"rows": Z.shape[0], "features": Z.shape[1]}

    return _run_all(config, job)


def write_features(path: Path, samples: SampleSet, Z: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["date", "split"] + [f"z{i}" for i in range(Z.shape[1])])
        for k, day in enumerate(samples.end_dates):
            split = "train" if k < samples.split else "test"
            w.writerow([day.isoformat(), split] + [repr(float(v)) for v in Z[k]])


def forecast_symbol(config: RunConfig, samples: SampleSet, Z: np.ndarray):
    tr, te = samples.train_slice, samples.test_slice
    y = samples.targets_normalized
    alpha = config.heads.ridge_alpha
    if config.heads.ridge_cv:
        alpha = ridge_select_alpha(Z[tr], y[tr, 0])
    ridge = ridge_fit(Z[tr], y[tr], alpha)
    pred = ridge_predict(ridge, Z[te])
    pred_raw = samples.denormalize(pred)
    res = {"alpha_reg": alpha}
    for c, name in enumerate(CHANNELS):
        res[f"mae_{name}"] = mae(pred[:, c], y[te, c])
        res[f"mae_raw_{name}"] = mae(pred_raw[:, c], samples.targets[te, c])
    return ridge, pred_raw, res


def trade_symbol(config: RunConfig, samples: SampleSet, Z: np.ndarray, seed: int):
    tr, te = samples.train_slice, samples.test_slice
    forest = forest_fit(Z[tr], samples.labels[tr], seed, config.heads.forest_trees, config.heads.forest_depth)
    scores = forest_predict_proba(forest, Z[te])
    pred = (scores >= 0.5).astype(np.int64)
    truth = samples.labels[te]
    res = classification_metrics(pred, scores, truth)
    # closes at each test decision day, plus the day after the last one
    closes = np.concatenate([samples.end_closes[te], samples.targets[-1:, CHANNELS.index("close")]])
    ev = config.eval
    bt = lambda sig: backtest_ar(np.append(sig, SELL), closes, ev.capital0, ev.charge, ev.trading_days_per_year)
    res["predicted_ar"] = bt(pred).ar_percent
    res["true_ar"] = bt(truth).ar_percent
    return forest, scores, res


def _update_heads(path: Path, ridge=None, forest=None) -> None:
    ckpt = load_checkpoint(path) if path.exists() else Checkpoint()
    save_checkpoint(path, None, ridge or ckpt.ridge, forest or ckpt.forest)


def cmd_forecast(config: RunConfig, checkpoint: str | Path | None = None) -> RunSummary:
    def job(sym, path):
        samples = load_samples(config, path)
        model = _load_model(config, sym, checkpoint)
        Z = infer_features(model, samples.all_windows()).Z
        ridge, pred_raw, res = forecast_symbol(config, samples, Z)
        sym_dir = Path(config.output_dir) / sym
        _update_heads(sym_dir / "heads.ckpt", ridge=ridge)
        _write_json(sym_dir / "forecast.json", res)
        te = samples.test_slice
        ci = CHANNELS.index("close")
        with open(sym_dir / "forecast_plot.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["date", "true_close", "predicted_close"])
            for k, day in enumerate(samples.end_dates[te]):
                w.writerow([day.isoformat(), repr(float(samples.targets[te][k, ci])), repr(float(pred_raw[k, ci]))])
        return res

    summary = _run_all(config, job)
    write_metrics(config.output_dir)
    return summary


def cmd_trade(config: RunConfig, checkpoint: str | Path | None = None) -> RunSummary:
    def job(sym, path):
        samples = load_samples(config, path)
        model = _load_model(config, sym, checkpoint)
        Z = infer_features(model, samples.all_windows()).Z
        forest, scores, res = trade_symbol(config, samples, Z, config.symbol_seed(sym))
        sym_dir = Path(config.output_dir) / sym
        _update_heads(sym_dir / "heads.ckpt", forest=forest)
        _write_json(sym_dir / "trade.json", res)
        with open(sym_dir / "roc.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["fpr", "tpr", "threshold"])
            for row in roc_points(scores, samples.labels[samples.test_slice]):
                w.writerow([repr(v) for v in row])
        return res

    summary = _run_all(config, job)
    write_metrics(config.output_dir)
    return summary


def collect_rows(output_dir: str | Path) -> list[dict]:
    rows = []
    for sym_dir in sorted(p for p in Path(output_dir).iterdir() if p.is_dir()):
        row = {"symbol": sym_dir.name}
        found = False
        for name in ("forecast.json", "trade.json"):
            f = sym_dir / name
            if f.exists():
                row.update(json.loads(f.read_text()))
                found = True
        if found:
            rows.append(row)
    return rows


def _mean_table(rows: list[dict], keys) -> tuple[dict, dict]:
    means, notes = {}, {}
    for k in keys:
        vals = [r.get(k) for r in rows]
        present = [v for v in vals if v is not None]
        missing = [r["symbol"] for r in rows if r.get(k) is None]
        means[k] = float(np.mean(present)) if present else None
        if missing:
            notes[k] = f"excluded incomplete symbols: {', '.join(missing)}"
    return means, notes


def write_metrics(output_dir: str | Path) -> dict:
    """Per-symbol metric rows plus the cross-symbol summary JSON."""
    out = Path(output_dir)
    rows = collect_rows(out)
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in METRIC_COLUMNS])
    means, notes = _mean_table(rows, METRIC_COLUMNS[1:])
    summary = {"symbols": [r["symbol"] for r in rows], "means": means, "notes": notes}
    _write_json(out / "summary.json", summary)
    return summary


def cmd_report(output_dir: str | Path, baselines: str | Path | None = None) -> dict:
    """Cross-symbol means in forecasting and trading summary layouts.

    ``baselines`` is an optional CSV with a ``method`` column and any of the
    metric columns; the best value per column is marked in ``report.md``.
    """
    out = Path(output_dir)
    if not out.is_dir():
        raise ConfigError(f"output directory {out} does not exist")
    rows = collect_rows(out)
    if not rows:
        raise ConfigError(f"no completed runs under {out}")
    raw_keys = [f"mae_raw_{c}" for c in CHANNELS]
    f_means, f_notes = _mean_table(rows, FORECAST_KEYS)
    r_means, r_notes = _mean_table(rows, raw_keys)
    t_means, t_notes = _mean_table(rows, TRADE_KEYS)
    report = {
        "symbols": [r["symbol"] for r in rows],
        "forecasting_normalized_mae": f_means,
        "forecasting_raw_mae": r_means,
        "trading": t_means,
        "notes": {**f_notes, **r_notes, **t_notes},
    }
    methods = {"DeConFuse": {**f_means, **t_means}}
    if baselines:
        with open(baselines, newline="") as fh:
            for row in csv.DictReader(fh):
                name = row.pop("method")
                methods[name] = {k: (float(v) if v not in ("", None) else None) for k, v in row.items()}
    report["methods"] = methods
    _write_json(out / "report.json", report)
    (out / "report.md").write_text(_markdown(methods, r_means, report["notes"]))
    return report


def _markdown(methods: dict, raw_means: dict, notes: dict) -> str:
    lower_better = set(FORECAST_KEYS)

    def table(title, keys, header):
        best = {}
        for k in keys:
            vals = [(m[k], name) for name, m in methods.items() if m.get(k) is not None]
            if vals:
                best[k] = (min if k in lower_better else max)(vals)[1]
        lines = [f"## {title}", "", "| Method | " + " | ".join(header) + " |", "|---" * (len(keys) + 1) + "|"]
        for name, m in methods.items():
            cells = []
            for k in keys:
                v = m.get(k)
                s = "" if v is None else f"{v:.3f}"
                cells.append(f"**{s}**" if best.get(k) == name and len(methods) > 1 else s)
            lines.append(f"| {name} | " + " | ".join(cells) + " |")
        return "\n".join(lines) + "\n"

    parts = [
        "# Summary\n",
        table("Forecasting (normalized MAE)", FORECAST_KEYS, ["Close", "Open", "High", "Low", "NAV"]),
        table("Trading", TRADE_KEYS, ["Precision", "Recall", "F1 Score", "AUC", "Predicted AR", "True AR"]),
        "## Forecasting (raw-scale MAE)\n\n| Close | Open | High | Low | NAV |\n|---|---|---|---|---|\n| "
        + " | ".join("" if raw_means[f"mae_raw_{c}"] is None else f"{raw_means[f'mae_raw_{c}']:.4f}" for c in CHANNELS)
        + " |\n",
    ]
    if notes:
        parts.append("## Notes\n\n" + "\n".join(f"- {k}: {v}" for k, v in sorted(notes.items())) + "\n")
    return "\n".join(parts)
