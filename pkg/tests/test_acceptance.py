"""Acceptance suite: one marked test per criterion, each at its stated tolerance."""
import itertools
import json
import os
import time

import numpy as np
import pytest
from oracles import brute_auc, naive_conv1d, ridge_gradient_descent, svd_logdet
from scipy.optimize import minimize
from synthetic import acceptance_runs, raw_window_features

from deconfuse.cli import main
from deconfuse.config import load_config
from deconfuse.ctl import CtlProblem, ctl_fit, ctl_objective_terms
from deconfuse.data import planted_windows, synthetic_stock, write_csv
from deconfuse.downstream import ridge_fit, ridge_predict, ridge_select_alpha
from deconfuse.metrics import auc_score, backtest_ar, truth_signals
from deconfuse.model import build_model, fused_preactivation, joint_objective, pipeline_forward
from deconfuse.optimizer import TrainConfig, gradcheck, objective_graph, pack_params, train
from deconfuse.runner import cmd_forecast, cmd_trade, cmd_train, discover_symbols
from deconfuse.tensor_ops import (
    SV_FLOOR,
    FilterBank,
    conv1d,
    conv1d_raw,
    logdet_gradient,
    logdet_rect,
    relu,
    svd,
)
from test_ctl import planted_problem


def random_instance(r, C, W, K):
    model = build_model(C, W, seed=r)
    S = [r.normal(size=(K, 1, W)) for _ in range(C)]
    M, D = model.feature_shape
    X = [r.uniform(0.1, 1.0, size=(K, M, D)) for _ in range(C)]
    Z = r.uniform(0.1, 1.0, size=(K, model.output_dim))
    return model, S, X, Z


@pytest.mark.criterion(1, "reverse-mode gradients of J match central differences (1e-5, <60 s)")
def test_gradient_correctness():
    start = time.perf_counter()
    shapes = list(itertools.product((2, 5), (8, 20)))
    for i in range(20):
        r = np.random.default_rng(100 + i)
        C, W = shapes[i % 4]
        K = int(r.integers(1, 17))
        model, S, X, Z = random_instance(r, C, W, K)
        assert len(model.pipelines[0].layers) == 2
        report = gradcheck(objective_graph(model, S, 0.01, 0.01), pack_params(model, X, Z), samples=100, tol=1e-5, seed=i)
        assert report.checked > 0
        assert report.max_rel_error <= 1e-5, (i, C, W, K, report.failures[:3])
    assert time.perf_counter() - start < 60


@pytest.mark.criterion(2, "relu is the nonnegative prox; block-optimal X and Z are relu of pre-activations (1e-8)")
def test_prox_identities():
    xs = np.linspace(-3, 3, 1000)
    cand = np.unique(np.concatenate([np.linspace(0, 3, 3001), xs[xs >= 0]]))
    for x in xs:
        assert relu(x) == cand[np.argmin(0.5 * (cand - x) ** 2)]

    opts = {"ftol": 0, "gtol": 1e-14, "maxiter": 2000}
    for seed in range(5):
        r = np.random.default_rng(seed)
        model, S, X, Z = random_instance(r, 2, 8, 3)
        for c, pipe in enumerate(model.pipelines):
            pre = pipeline_forward(pipe, S[c])
            res = minimize(
                lambda x: 0.5 * float(np.sum((pre.ravel() - x) ** 2)), X[c].ravel(), jac=lambda x: x - pre.ravel(),
                method="L-BFGS-B", bounds=[(0, None)] * pre.size, options=opts,
            )
            np.testing.assert_allclose(res.x.reshape(pre.shape), relu(pre), atol=1e-8)
        pre = fused_preactivation(model, X)
        res = minimize(
            lambda z: joint_objective(model, X, z.reshape(Z.shape), S), Z.ravel(), jac=lambda z: z - pre.ravel(),
            method="L-BFGS-B", bounds=[(0, None)] * Z.size, options=opts,
        )
        np.testing.assert_allclose(res.x.reshape(Z.shape), relu(pre), atol=1e-8)


@pytest.mark.criterion(3, "conv1d vs loops (1e-12), logdet vs SVD (1e-10), logdet gradient vs differences (1e-5)")
def test_convolution_and_svd_oracles():
    r = np.random.default_rng(3)
    for _ in range(50):
        C, M, P = (int(v) for v in r.integers(1, 5, size=3))
        D = int(r.integers(P, 30))
        stride, padding = int(r.integers(1, 3)), int(r.integers(0, 3))
        x, w = r.normal(size=(3, C, D)), r.normal(size=(M, C, P))
        assert np.abs(conv1d_raw(x, w, stride, padding) - naive_conv1d(x, w, stride, padding)).max() <= 1e-12
    # the bank wrapper agrees with the raw kernel it wraps
    x, w = r.normal(size=(4, 1, 20)), r.normal(size=(4, 1, 5))
    assert np.abs(conv1d(x, FilterBank(w)) - naive_conv1d(x, w, 1, 0)).max() <= 1e-12

    for shape in [(3, 2), (2, 3), (8, 5), (6, 6)]:
        for _ in range(20):
            T = r.normal(size=shape)
            assert abs(logdet_rect(T) - svd_logdet(T)) <= 1e-10

    checked = 0
    while checked < 20:
        T = r.normal(size=(5, 3))
        if svd(T).singular_values.min() <= 10 * SV_FLOOR:
            continue
        h = 1e-6
        num = np.zeros_like(T)
        for idx in np.ndindex(T.shape):
            e = np.zeros_like(T)
            e[idx] = h
            num[idx] = (logdet_rect(T + e) - logdet_rect(T - e)) / (2 * h)
        rel = np.abs(logdet_gradient(T) - num) / np.maximum(np.abs(num), 1e-8)
        assert rel.max() <= 1e-5
        checked += 1


@pytest.mark.criterion(4, "shallow CTL descent is monotone (1e-8, 100 runs); planted residual <= 1e-3")
def test_shallow_descent():
    for seed in range(100):
        r = np.random.default_rng(2000 + seed)
        prob = CtlProblem(r.normal(size=(8, 1, 16)), 3, 3)
        h = np.array(ctl_fit(prob, 30, seed=seed).objective_history)
        assert np.all(np.isfinite(h)) and np.all(np.diff(h) <= 1e-8), seed
    for seed in range(10):
        prob = planted_problem(seed)
        state = ctl_fit(prob, 1000, seed=seed)
        assert ctl_objective_terms(state, prob).residual <= 1e-3, seed


@pytest.mark.criterion(5, "training on planted data reaches 10% of J0 in 500 epochs, feasible throughout (<5 min)")
def test_end_to_end_training():
    start = time.perf_counter()
    S = planted_windows(5, 20, 200, seed=0)
    infeasible = []

    def check(epoch, params):
        if min(float(v.min()) for k, v in params.items() if k[0] in "XZ") < 0:
            infeasible.append(epoch)

    res = train(build_model(5, 20, seed=0), S, TrainConfig(epochs=500), callback=check)
    losses = np.array(res.losses)
    assert not infeasible
    assert losses[-1] <= 0.1 * losses[0]
    # settles: the last 50 epochs move J by under 1% of its starting value
    assert abs(losses[-1] - losses[-51]) <= 0.01 * losses[0]
    assert np.all(np.isfinite(losses))
    assert time.perf_counter() - start < 300


@pytest.mark.criterion(6, "ridge vs gradient descent (1e-6), exact AUC, worked backtest, truth-signal optimality")
def test_downstream_oracles():
    r = np.random.default_rng(6)
    for alpha in (0.1, 1.0, 10.0):
        Z, y = r.normal(size=(30, 6)), r.normal(size=30)
        m = ridge_fit(Z, y, alpha)
        w, b = ridge_gradient_descent(Z, y, alpha)
        assert np.abs(m.coef - w).max() <= 1e-6 and abs(float(m.intercept) - b) <= 1e-6

    for _ in range(200):
        n = int(r.integers(2, 30))
        truth = r.integers(0, 2, size=n)
        if truth.min() == truth.max():
            assert auc_score(np.zeros(n), truth) is None
            continue
        scores = r.integers(0, 5, size=n).astype(float)
        expected = brute_auc(scores, truth)
        assert auc_score(scores, truth) == expected

    res = backtest_ar(np.array([1, 0]), np.array([100.0, 110.0]), capital0=100_000, charge=10)
    assert res.final_capital == 109979.0

    for n in range(2, 13):
        # without charges, holding exactly over the rising days is the best any signal can do
        closes = np.round(np.random.default_rng(n).uniform(50, 150, size=n), 2)
        truth = backtest_ar(truth_signals(closes), closes, charge=0.0).final_capital
        best = max(backtest_ar(np.array(s), closes, charge=0.0).final_capital for s in itertools.product((0, 1), repeat=n))
        assert truth == pytest.approx(best, rel=1e-12)


def check_real_market(data_dir, out):
    found = discover_symbols(load_config(None, {"data_dir": data_dir}, {}))
    symbols = sorted(found)[:10]
    assert len(symbols) == 10
    cfg = load_config(None, {"data_dir": data_dir, "symbols": symbols, "output_dir": str(out)}, {})
    for cmd in (cmd_train, cmd_forecast, cmd_trade):
        assert cmd(cfg).ok
    means = json.loads((out / "summary.json").read_text())["means"]
    assert means["mae_close"] <= 0.1 and means["f1"] >= 0.45, means


@pytest.mark.slow
@pytest.mark.criterion(7, "features + ridge within 2x of raw-window ridge close MAE (synthetic replacement)")
def test_forecasting_quality(tmp_path):
    real = os.environ.get("DECONFUSE_NSE_DIR")
    if real:
        check_real_market(real, tmp_path)
        return
    for samples, Z in acceptance_runs():
        tr, te = samples.train_slice, samples.test_slice
        y = samples.targets_normalized[:, 0]
        errs = []
        for F in (Z, raw_window_features(samples)):
            alpha = ridge_select_alpha(F[tr], y[tr])
            errs.append(float(np.mean(np.abs(ridge_predict(ridge_fit(F[tr], y[tr], alpha), F[te]) - y[te]))))
        assert errs[0] <= 2 * errs[1], (samples.symbol, errs)


@pytest.mark.criterion(8, "identical seed, config and data give byte-identical outputs at any worker count")
def test_determinism(tmp_path):
    data = tmp_path / "data"
    data.mkdir()
    for i, sym in enumerate(["AAA", "BBB", "CCC"]):
        write_csv(synthetic_stock(160, seed=i, symbol=sym), data / f"{sym}.csv")

    def run(out, workers):
        common = ["--data-dir", str(data), "--out", str(out), "--workers", str(workers), "--seed", "7"]
        assert main(["train", *common, "--epochs", "20"]) == 0
        for cmd in ("features", "forecast", "trade"):
            assert main([cmd, *common]) == 0
        return {
            str(p.relative_to(out)): p.read_bytes()
            for p in sorted(out.rglob("*"))
            if p.is_file() and p.name != "config.resolved.yaml"
        }

    a = run(tmp_path / "a", 1)
    assert any(k.endswith("model.ckpt") for k in a) and "metrics.csv" in a
    assert run(tmp_path / "b", 2) == a
    assert run(tmp_path / "c", 3) == a
    assert run(tmp_path / "a2", 1) == a
