import csv
import json

import numpy as np
import pytest
import yaml

from deconfuse.cli import main
from deconfuse.config import RunConfig, env_overrides, json_schema, load_config
from deconfuse.data import synthetic_stock, write_csv
from deconfuse.errors import ConfigError
from deconfuse.runner import cmd_report, write_metrics


def snapshot(root):
    skip = {"config.resolved.yaml"}
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file() and p.name not in skip}


def run_pipeline(data, out, *extra):
    common = ["--data-dir", str(data), "--out", str(out), *extra]
    codes = [main(["train", *common, "--epochs", "3"])]
    for cmd in ("features", "forecast", "trade"):
        codes.append(main([cmd, *common]))
    return codes


@pytest.fixture
def data_dir(tmp_path):
    d = tmp_path / "data"
    d.mkdir()
    for i, sym in enumerate(["AAA", "BBB"]):
        write_csv(synthetic_stock(140, seed=i, symbol=sym), d / f"{sym}.csv")
    return d


class TestConfig:
    def test_defaults(self):
        cfg = RunConfig()
        assert cfg.window == 20 and cfg.architecture.alpha == 0.5
        assert [l.out_channels for l in cfg.architecture.layers] == [4, 8]
        assert cfg.train.epochs == 500 and cfg.heads.forest_trees == 5 and cfg.heads.forest_depth == 3
        assert cfg.eval.capital0 == 100_000 and cfg.eval.charge == 10

    def test_unknown_key_rejected(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("train:\n  epochz: 3\n")
        with pytest.raises(ConfigError, match="epochz"):
            load_config(p)

    def test_precedence(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("seed: 1\ntrain:\n  epochs: 7\n  mu: 0.5\n")
        env = {"DECONFUSE_TRAIN__EPOCHS": "9", "DECONFUSE_SEED": "2", "OTHER": "x"}
        cfg = load_config(p, {"seed": 3}, env)
        assert (cfg.seed, cfg.train.epochs, cfg.train.mu) == (3, 9, 0.5)
        assert env_overrides(env) == {"train": {"epochs": 9}, "seed": 2}

    def test_schema(self):
        schema = json_schema()
        assert schema["additionalProperties"] is False
        assert {"window", "architecture", "train", "heads", "eval"} <= set(schema["properties"])

    def test_round_trip(self, tmp_path):
        cfg = load_config(None, {"seed": 5, "window": 10}, {})
        p = tmp_path / "r.yaml"
        p.write_text(cfg.dump())
        assert load_config(p, environ={}) == cfg

    def test_symbol_seeds_are_stable_and_distinct(self):
        cfg = RunConfig(seed=4)
        assert cfg.symbol_seed("AAA") == RunConfig(seed=4).symbol_seed("AAA")
        assert cfg.symbol_seed("AAA") != cfg.symbol_seed("BBB")

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "nope.yaml")


class TestCommands:
    def test_missing_data_dir(self, tmp_path, capsys):
        assert main(["train", "--data-dir", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) != 0
        assert "does not exist" in capsys.readouterr().err

    def test_smoke(self, data_dir, tmp_path, capsys):
        out = tmp_path / "out"
        assert run_pipeline(data_dir, out) == [0, 0, 0, 0]
        for sym in ("AAA", "BBB"):
            d = out / sym
            for name in ("model.ckpt", "model.json", "loss.csv", "features.csv", "forecast.json", "trade.json",
                         "forecast_plot.csv", "roc.csv", "heads.ckpt"):
                assert (d / name).exists(), name
            assert len((d / "loss.csv").read_text().splitlines()) == 5
        rows = list(csv.DictReader(open(out / "metrics.csv")))
        assert [r["symbol"] for r in rows] == ["AAA", "BBB"]
        assert (out / "config.resolved.yaml").exists()
        assert main(["report", "--out", str(out)]) == 0
        report = json.loads((out / "report.json").read_text())
        assert set(report) >= {"forecasting_normalized_mae", "forecasting_raw_mae", "trading"}
        assert "raw" in (out / "report.md").read_text().lower()

    def test_deterministic_across_worker_counts(self, data_dir, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert run_pipeline(data_dir, a, "--workers", "1") == [0, 0, 0, 0]
        assert run_pipeline(data_dir, b, "--workers", "2") == [0, 0, 0, 0]
        assert snapshot(a) == snapshot(b)

    def test_feature_file_shape(self, tmp_path):
        data = tmp_path / "d"
        data.mkdir()
        write_csv(synthetic_stock(14, seed=3, symbol="TINY"), data / "TINY.csv")
        cfg = {
            "window": 4,
            "architecture": {"layers": [{"out_channels": 1, "kernel_size": 4}], "alpha": 0.8},
            "train": {"epochs": 2},
        }
        p = tmp_path / "c.yaml"
        p.write_text(yaml.safe_dump(cfg))
        out = tmp_path / "o"
        common = ["--config", str(p), "--data-dir", str(data), "--out", str(out)]
        assert main(["train", *common]) == 0
        assert main(["features", *common]) == 0
        rows = list(csv.reader(open(out / "TINY" / "features.csv")))
        assert rows[0] == ["date", "split", "z0", "z1", "z2", "z3"]
        assert len(rows) == 11
        assert [r[1] for r in rows[1:]].count("test") == 1

    def test_incompatible_checkpoint(self, data_dir, tmp_path):
        out = tmp_path / "o"
        assert main(["train", "--data-dir", str(data_dir), "--out", str(out), "--epochs", "1", "--symbols", "AAA"]) == 0
        cfg_path = tmp_path / "c.yaml"
        cfg_path.write_text("window: 10\n")
        code = main(["features", "--config", str(cfg_path), "--data-dir", str(data_dir), "--out", str(out), "--symbols", "AAA"])
        assert code == 1
        assert "CheckpointIncompatibleError" in (out / "failures.json").read_text()

    def test_single_class_test_labels_leave_auc_empty(self, tmp_path):
        data = tmp_path / "d"
        data.mkdir()
        s = synthetic_stock(150, seed=5, symbol="UP")
        # strictly rising closes across the whole test period
        tail = slice(150 - 16, 150)
        s.close[tail] = s.close[tail.start - 1] + np.arange(1, 17) * 0.5
        s.high[tail] = np.maximum(s.high[tail], s.close[tail])
        write_csv(s, data / "UP.csv")
        out = tmp_path / "o"
        assert run_pipeline(data, out) == [0, 0, 0, 0]
        row = next(csv.DictReader(open(out / "metrics.csv")))
        assert row["auc"] == ""
        assert row["f1"] != "" and row["mae_close"] != ""


class TestReport:
    def _fake_runs(self, root, rows):
        for sym, (mae_close, ar) in rows.items():
            d = root / sym
            d.mkdir(parents=True)
            fc = {f"mae_{c}": mae_close for c in ("close", "open", "high", "low", "nav")}
            fc.update({f"mae_raw_{c}": 10 * mae_close for c in ("close", "open", "high", "low", "nav")})
            (d / "forecast.json").write_text(json.dumps(fc))
            tr = {"precision": 0.5, "recall": 0.5, "f1": 0.5, "auc": 0.5, "predicted_ar": ar, "true_ar": 1.0}
            (d / "trade.json").write_text(json.dumps(tr))

    def test_means_and_incomplete_note(self, tmp_path):
        self._fake_runs(tmp_path, {"A": (0.1, 5.0), "B": (0.2, None), "C": (0.6, 7.0)})
        summary = write_metrics(tmp_path)
        assert summary["means"]["mae_close"] == pytest.approx(0.3)
        assert summary["means"]["predicted_ar"] == pytest.approx(6.0)
        report = cmd_report(tmp_path)
        assert report["forecasting_normalized_mae"]["mae_close"] == pytest.approx(0.3)
        assert report["forecasting_raw_mae"]["mae_raw_close"] == pytest.approx(3.0)
        assert "B" in report["notes"]["predicted_ar"]
        assert "B" in (tmp_path / "report.md").read_text()

    def test_baselines_marked(self, tmp_path):
        self._fake_runs(tmp_path, {"A": (0.1, 5.0)})
        base = tmp_path / "base.csv"
        base.write_text("method,mae_close,f1\nOther,0.05,0.9\n")
        report = cmd_report(tmp_path, base)
        assert set(report["methods"]) == {"DeConFuse", "Other"}
        assert "**" in (tmp_path / "report.md").read_text()

    def test_empty_directory(self, tmp_path):
        with pytest.raises(ConfigError):
            cmd_report(tmp_path)
