"""Command-line entry point: ``deconfuse <subcommand> [flags]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import runner
from .config import RunConfig, json_schema, load_config
from .errors import DeconfuseError


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--data-dir", help="directory of <SYMBOL>.csv files")
    p.add_argument("--symbols", help="comma-separated subset of symbols")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--out", help="output directory")


def _resolve(args) -> RunConfig:
    flags = {
        "data_dir": args.data_dir,
        "symbols": args.symbols.split(",") if args.symbols else None,
        "seed": args.seed,
        "workers": args.workers,
        "output_dir": args.out,
    }
    if getattr(args, "epochs", None) is not None:
        flags["train"] = {"epochs": args.epochs}
    return load_config(args.config, flags)


def _finish(summary: runner.RunSummary, what: str) -> int:
    done = len(summary.results)
    print(f"{what}: {done} symbol(s) succeeded, {len(summary.failures)} failed")
    for sym, err in summary.failures.items():
        print(f"  {sym}: {err}", file=sys.stderr)
    return 0 if summary.ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deconfuse", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model per symbol")
    _common(p)
    p.add_argument("--epochs", type=int, help="override train.epochs")

    for name, text in (
        ("features", "write fused features per window"),
        ("forecast", "ridge forecasting head and MAE"),
        ("trade", "random-forest trading head, classification metrics and AR"),
    ):
        p = sub.add_parser(name, help=text)
        _common(p)
        p.add_argument("--checkpoint", help="model checkpoint (default <out>/<symbol>/model.ckpt)")

    p = sub.add_parser("report", help="cross-symbol summary tables")
    p.add_argument("--out", default="runs")
    p.add_argument("--baselines", help="CSV of externally computed baseline means")

    p = sub.add_parser("gradcheck", help="compare reverse-mode gradients to finite differences")
    p.add_argument("--channels", type=int, default=2)
    p.add_argument("--window", type=int, default=8)
    p.add_argument("--samples", type=int, default=4)
    p.add_argument("--coords", type=int, default=200)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("synth", help="write synthetic planted-signal stock CSVs")
    p.add_argument("--out", required=True)
    p.add_argument("--symbols", default="SYNA,SYNB")
    p.add_argument("--days", type=int, default=400)
    p.add_argument("--seed", type=int, default=0)

    sub.add_parser("schema", help="print the JSON schema of the run configuration")
    return parser


def _gradcheck(args) -> int:
    from .model import build_model
    from .optimizer import gradcheck, objective_graph, pack_params

    rng = np.random.default_rng(args.seed)
    model = build_model(args.channels, args.window, seed=rng)
    S = [rng.normal(size=(args.samples, 1, args.window)) for _ in range(args.channels)]
    M, D = model.feature_shape
    X = [rng.uniform(0.1, 1.0, size=(args.samples, M, D)) for _ in range(args.channels)]
    Z = rng.uniform(0.1, 1.0, size=(args.samples, model.output_dim))
    report = gradcheck(objective_graph(model, S, 0.01, 0.01), pack_params(model, X, Z), args.coords, args.tol, args.seed)
    print(
        f"checked {report.checked} coordinates, skipped {report.skipped_kinks} at kinks, "
        f"max relative error {report.max_rel_error:.3e} (tol {report.tol:g}): {'PASS' if report.passed else 'FAIL'}"
    )
    for name, idx, a, n, err in report.failures[:20]:
        print(f"  {name}{list(idx)}: analytic {a:.6e} numeric {n:.6e} rel {err:.2e}")
    return 0 if report.passed else 1


def _synth(args) -> int:
    from .data import synthetic_stock, write_csv

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, sym in enumerate(s for s in args.symbols.split(",") if s):
        write_csv(synthetic_stock(args.days, args.seed + i, sym), out / f"{sym}.csv")
    print(f"wrote {i + 1} file(s) to {out}")
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "train":
            return _finish(runner.cmd_train(_resolve(args)), "train")
        if args.command == "features":
            return _finish(runner.cmd_features(_resolve(args), args.checkpoint), "features")
        if args.command == "forecast":
            return _finish(runner.cmd_forecast(_resolve(args), args.checkpoint), "forecast")
        if args.command == "trade":
            return _finish(runner.cmd_trade(_resolve(args), args.checkpoint), "trade")
        if args.command == "report":
            runner.cmd_report(args.out, args.baselines)
            print(Path(args.out, "report.md").read_text())
            return 0
        if args.command == "gradcheck":
            return _gradcheck(args)
        if args.command == "synth":
            return _synth(args)
        if args.command == "schema":
            print(json.dumps(json_schema(), indent=2, sort_keys=True))
            return 0
    except DeconfuseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 2


if __name__ == "__main__":
    sys.exit(main())
