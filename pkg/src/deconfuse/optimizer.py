"""End-to-end training by projected, Adam-accelerated gradient descent.

Learnable blocks are keyed by name: ``T{c}_{l}`` (conv filters), ``X{c}``
(channel features), ``F{c}`` (fusion maps) and ``Z`` (fused features).  The
first character of the key selects the block behaviour: transforms get
decoupled weight decay, features get projected onto the nonnegative orthant.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .errors import DivergenceError, NumericOverflowError
from .model import DeconfuseModel, _channels, infer_features

log = logging.getLogger(__name__)

FEATURE_BLOCKS = ("X", "Z")
TRANSFORM_BLOCKS = ("T", "F")


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    betas: tuple[float, float] = (0.9, 0.999)
    adam_epsilon: float = 1e-8
    weight_decay: float = 5e-5
    mu: float = 0.01
    lam: float = 0.01
    epochs: int = 500
    batch_size: int | None = None
    seed: int = 0
    #: per-block learning rates keyed by "T", "X", "F" or "Z"
    lr_overrides: dict[str, float] = field(default_factory=dict)
    #: "zeros" starts X and Z at the origin; "inferred" starts them at the closed-form features
    feature_init: str = "zeros"

    def __post_init__(self):
        b1, b2 = self.betas
        if self.learning_rate <= 0 or self.adam_epsilon <= 0:
            raise ValueError("learning_rate and adam_epsilon must be positive")
        if not (0 < b1 < 1 and 0 < b2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        if self.weight_decay < 0 or self.mu < 0 or self.lam < 0:
            raise ValueError("weight_decay, mu and lam must be nonnegative")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.feature_init not in ("zeros", "inferred"):
            raise ValueError(f"unknown feature_init {self.feature_init!r}")
        bad = set(self.lr_overrides) - set(FEATURE_BLOCKS + TRANSFORM_BLOCKS)
        if bad:
            raise ValueError(f"unknown parameter blocks in lr_overrides: {sorted(bad)}")

    def lr_for(self, name: str) -> float:
        return self.lr_overrides.get(name[0], self.learning_rate)


def pack_params(model: DeconfuseModel, X: Sequence[np.ndarray], Z: np.ndarray) -> dict[str, np.ndarray]:
    params = dict(model.transforms())
    for c, x in enumerate(X):
        params[f"X{c}"] = np.asarray(x, dtype=np.float64)
    params["Z"] = np.asarray(Z, dtype=np.float64)
    return params


def unpack_params(model: DeconfuseModel, params: dict[str, np.ndarray]):
    new_model = model.with_transforms(params)
    X = [params[f"X{c}"] for c in range(model.num_channels)]
    return new_model, X, params["Z"]


def objective_graph(model: DeconfuseModel, S, mu: float, lam: float) -> Callable:
    """Build ``fn(vars) -> (J, terms)`` evaluating the joint objective on the tape.

    ``model`` only supplies the architecture (strides, padding, pooling,
    activations); the transform values come from ``vars``.
    """
    S = _channels(S, model.num_channels)
    arch = [[(L.bank.stride, L.bank.padding, L.pool, L.activation) for L in p.layers] for p in model.pipelines]

    def fn(P):
        tape = P["Z"].tape
        conv_terms, fused_terms, reg_terms = [], [], []
        for c, layers in enumerate(arch):
            h = tape.const(S[c])
            for l, (stride, padding, pool, act) in enumerate(layers):
                h = ad.conv1d(h, P[f"T{c}_{l}"], stride, padding)
                if pool is not None:
                    h = ad.maxpool1d(h, *pool)
                h = ad.ACTIVATIONS[act](h)
            conv_terms.append(0.5 * ad.frobenius_sq(h - P[f"X{c}"]))
            fused_terms.append(ad.flatten(P[f"X{c}"]) @ P[f"F{c}"])
        fusion = 0.5 * ad.frobenius_sq(P["Z"] - ad.add_n(fused_terms))
        for name, v in P.items():
            if name[0] in TRANSFORM_BLOCKS:
                term = mu * ad.frobenius_sq(v)
                if lam:
                    term = term - lam * ad.logdet(v)
                reg_terms.append(term)
        conv = ad.add_n(conv_terms)
        reg = ad.add_n(reg_terms)
        J = conv + fusion + reg
        return J, {"fusion_residual": float(fusion.value), "conv_residual": float(conv.value), "regularizers": float(reg.value)}

    return fn


def joint_gradients(model: DeconfuseModel, X, Z, S, mu: float = 0.01, lam: float = 0.01):
    """Reverse-mode gradients of the joint objective for every parameter block.

    Returns ``(value, grads, terms)`` where ``grads`` is keyed like :func:`pack_params`.
    """
    value, grads, terms, _ = ad.value_and_grad(objective_graph(model, S, mu, lam), pack_params(model, X, Z))
    return value, grads, terms


def projected_adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    moments: dict[str, tuple[np.ndarray, np.ndarray]],
    config: TrainConfig,
    step_index: int,
) -> tuple[dict[str, np.ndarray], dict[str, tuple[np.ndarray, np.ndarray]]]:
    """One Adam step with bias correction, then P+ on the feature blocks."""
    if step_index < 1:
        raise ValueError("step_index starts at 1")
    b1, b2 = config.betas
    c1 = 1.0 - b1**step_index
    c2 = 1.0 - b2**step_index
    new_params, new_moments = {}, {}
    for name, p in params.items():
        g = grads[name]
        m, v = moments.get(name, (np.zeros_like(p), np.zeros_like(p)))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        lr = config.lr_for(name)
        step = lr * (m / c1) / (np.sqrt(v / c2) + config.adam_epsilon)
        if name[0] in TRANSFORM_BLOCKS and config.weight_decay:
            p_new = p - step - lr * config.weight_decay * p
        else:
            p_new = p - step
        if name[0] in FEATURE_BLOCKS:
            p_new = np.maximum(p_new, 0.0)
        if not np.all(np.isfinite(p_new)):
            raise NumericOverflowError("projected_adam_step", f"block {name}")
        new_params[name] = p_new
        new_moments[name] = (m, v)
    return new_params, new_moments


class EpochRecord(NamedTuple):
    epoch: int
    J: float
    fusion_residual: float
    conv_residual: float
    regularizers: float


@dataclass
class TrainResult:
    model: DeconfuseModel
    X: list[np.ndarray]
    Z: np.ndarray
    history: list[EpochRecord]

    @property
    def losses(self) -> list[float]:
        return [r.J for r in self.history]


def _initial_features(model, S, how: str):
    if how == "inferred":
        feats = infer_features(model, S)
        return [x.copy() for x in feats.X], feats.Z.copy()
    K = S[0].shape[0]
    M, D = model.feature_shape
    X = [np.zeros((K, M, D)) for _ in range(model.num_channels)]
    return X, np.zeros((K, model.output_dim))


def _batch_params(params, idx, C):
    sub = {k: v for k, v in params.items() if k[0] in TRANSFORM_BLOCKS}
    for c in range(C):
        sub[f"X{c}"] = params[f"X{c}"][idx]
    sub["Z"] = params["Z"][idx]
    return sub


def train(
    model: DeconfuseModel,
    data,
    config: TrainConfig | None = None,
    trace_path: str | Path | None = None,
    checkpoint_every: int | None = None,
    checkpoint_path: str | Path | None = None,
    callback: Callable[[int, dict], None] | None = None,
) -> TrainResult:
    """Minimize the joint objective on the given windows.

    ``data`` is a :class:`~deconfuse.data.SampleSet` (its training windows are
    used) or a sequence of per-channel ``(K, 1, W)`` arrays.  ``history[0]``
    is the objective at initialization; ``history[e]`` is the value after
    epoch ``e``.
    """
    config = config or TrainConfig()
    S = data.train_windows() if hasattr(data, "train_windows") else data
    S = _channels(S, model.num_channels)
    K = S[0].shape[0]
    if K < 1:
        raise ValueError("training data is empty")
    C = model.num_channels
    rng = np.random.default_rng(config.seed)
    X, Z = _initial_features(model, S, config.feature_init)
    params = pack_params(model, X, Z)
    moments: dict = {}
    full_fn = objective_graph(model, S, config.mu, config.lam)
    history: list[EpochRecord] = []
    above = 0
    step = 0

    def full_eval(p):
        value, grads, terms, _ = ad.value_and_grad(full_fn, p)
        return value, grads, terms

    value, grads, terms = full_eval(params)
    for epoch in range(config.epochs + 1):
        history.append(EpochRecord(epoch, value, terms["fusion_residual"], terms["conv_residual"], terms["regularizers"]))
        if callback is not None:
            callback(epoch, params)
        if epoch and checkpoint_every and checkpoint_path and epoch % checkpoint_every == 0:
            from .checkpoint import save_checkpoint

            save_checkpoint(checkpoint_path, model.with_transforms(params))
        if epoch == config.epochs:
            break
        if abs(value) > 1e3 * max(abs(history[0].J), 1e-12):
            above += 1
            if above >= 10:
                raise DivergenceError(
                    f"objective exceeded 1000x its initial value for 10 epochs (J={value:.4g}); "
                    "reduce the learning rate"
                )
        else:
            above = 0

        if config.batch_size is None or config.batch_size >= K:
            step += 1
            params, moments = projected_adam_step(params, grads, moments, config, step)
        else:
            order = rng.permutation(K)
            for start in range(0, K, config.batch_size):
                idx = np.sort(order[start : start + config.batch_size])
                fn = objective_graph(model, [s[idx] for s in S], config.mu, config.lam)
                sub = _batch_params(params, idx, C)
                _, g_sub, _, _ = ad.value_and_grad(fn, sub)
                g_full = {k: np.zeros_like(v) for k, v in params.items()}
                for k, g in g_sub.items():
                    if k[0] in FEATURE_BLOCKS:
                        g_full[k][idx] = g
                    else:
                        g_full[k] = g
                step += 1
                params, moments = projected_adam_step(params, g_full, moments, config, step)
        for k in params:
            if k[0] in FEATURE_BLOCKS and params[k].min() < 0:
                raise AssertionError(f"feature block {k} left the nonnegative orthant")
        value, grads, terms = full_eval(params)

    new_model, X, Z = unpack_params(model, params)
    result = TrainResult(new_model, X, Z, history)
    if trace_path is not None:
        write_loss_trace(trace_path, history)
    return result


def write_loss_trace(path: str | Path, history: Sequence[EpochRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "J", "fusion_residual", "conv_residual", "regularizers"])
        for r in history:
            w.writerow([r.epoch, repr(r.J), repr(r.fusion_residual), repr(r.conv_residual), repr(r.regularizers)])


@dataclass
class GradcheckReport:
    max_rel_error: float
    checked: int
    tol: float
    failures: list[tuple[str, tuple, float, float, float]]
    skipped_kinks: int = 0

    @property
    def passed(self) -> bool:
        return not self.failures


_EPS = float(np.finfo(np.float64).eps)


def _rel_error(a: float, n: float, floor: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def gradcheck(
    objective: Callable,
    params: dict[str, np.ndarray],
    samples: int = 200,
    tol: float = 1e-5,
    seed: int = 0,
    step: float = 2e-5,
    floor: float = 1e-6,
) -> GradcheckReport:
    """Compare reverse-mode gradients to five-point central differences on random coordinates.

    ``objective`` maps a dict of tape variables to a scalar ``Var`` (or a
    ``(Var, aux)`` pair).  Coordinates whose perturbations change a
    relu/selu/maxpool branch are skipped and counted, never silently passed.
    Differencing an objective of size ``|J|`` in double precision carries an
    absolute error near ``eps * |J| / step``; the relative-error denominator
    never drops below that resolution divided by ``tol``, nor below ``floor``.
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    _, grads, _, tape = ad.value_and_grad(objective, params)
    base_sig = tape.signature()
    rng = np.random.default_rng(seed)
    names = sorted(params)
    sizes = np.array([params[k].size for k in names])
    picks = rng.choice(int(sizes.sum()), size=min(samples, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    failures, worst, checked, skipped = [], 0.0, 0, 0
    for flat in np.sort(picks):
        b = int(np.searchsorted(offsets, flat, side="right") - 1)
        name = names[b]
        idx = np.unravel_index(int(flat - offsets[b]), params[name].shape)
        x0 = params[name][idx]
        h = step * max(1.0, abs(x0))
        vals, kink = {}, False
        for m in (-2, -1, 1, 2):
            params[name][idx] = x0 + m * h
            vals[m], tape_m = ad.evaluate(objective, params)
            kink = kink or tape_m.signature() != base_sig
        params[name][idx] = x0
        if kink:
            skipped += 1
            continue
        numeric = (8.0 * (vals[1] - vals[-1]) - (vals[2] - vals[-2])) / (12.0 * h)
        analytic = float(grads[name][idx])
        noise = 10.0 * _EPS * max(abs(v) for v in vals.values()) / h
        err = _rel_error(analytic, numeric, max(floor, noise / tol))
        checked += 1
        worst = max(worst, err)
        if not err <= tol:
            failures.append((name, tuple(int(i) for i in idx), analytic, numeric, err))
    return GradcheckReport(worst, checked, tol, failures, skipped)
