"""Task heads on fused features: ridge regression and a small random forest."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .errors import DegenerateLabelsError, IllPosedError, ShapeError


@dataclass
class RidgeModel:
    coef: np.ndarray
    intercept: np.ndarray
    alpha_reg: float
    trained: bool = True

    @property
    def weights(self) -> np.ndarray:
        """Intercept first, then one weight per feature."""
        if self.coef.ndim == 1:
            return np.concatenate([[float(self.intercept)], self.coef])
        return np.vstack([self.intercept[None, :], self.coef])

    @property
    def n_features(self) -> int:
        return self.coef.shape[0]


def ridge_fit(Z, y, alpha_reg: float = 1.0) -> RidgeModel:
    """Minimize ||Zw + b - y||^2 + alpha_reg ||w||^2 with an unpenalized intercept.

    ``y`` may be a vector or a (K, targets) matrix.  Solved from the centered
    normal equations with a Cholesky factorization.
    """
    Z = np.asarray(Z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[0] != y.shape[0]:
        raise ShapeError(f"Z {Z.shape} and y {y.shape} disagree on the number of rows")
    if Z.shape[0] < 2:
        raise ValueError("ridge regression needs at least two rows")
    if alpha_reg < 0:
        raise ValueError("alpha_reg must be nonnegative")
    z_mean = Z.mean(axis=0)
    y_mean = y.mean(axis=0)
    Zc = Z - z_mean
    yc = y - y_mean
    A = Zc.T @ Zc + alpha_reg * np.eye(Z.shape[1])
    if alpha_reg == 0 and np.linalg.matrix_rank(Zc) < Z.shape[1]:
        raise IllPosedError("features are rank deficient; use alpha_reg > 0")
    try:
        coef = cho_solve(cho_factor(A), Zc.T @ yc)
    except LinAlgError as exc:
        raise IllPosedError(f"normal equations are not positive definite ({exc}); use alpha_reg > 0") from None
    intercept = y_mean - z_mean @ coef
    return RidgeModel(coef, np.asarray(intercept), float(alpha_reg))


def ridge_predict(model: RidgeModel, Z) -> np.ndarray:
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    if Z.shape[1] != model.n_features:
        raise ShapeError(f"model expects {model.n_features} features, got {Z.shape[1]}")
    return Z @ model.coef + model.intercept


def ridge_select_alpha(Z, y, alphas: Sequence[float] = (0.01, 0.1, 1.0, 10.0, 100.0), folds: int = 5) -> float:
    """Forward-chaining (time-ordered) cross-validation over ``alphas`` by MAE."""
    Z = np.asarray(Z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    K = Z.shape[0]
    edges = np.linspace(0, K, folds + 2).astype(int)[1:]
    best, best_err = alphas[0], math.inf
    for a in alphas:
        errs = []
        for lo, hi in zip(edges[:-1], edges[1:]):
            if lo < 2 or hi <= lo:
                continue
            m = ridge_fit(Z[:lo], y[:lo], a) if a > 0 else ridge_fit(Z[:lo], y[:lo], 1e-12)
            errs.append(np.mean(np.abs(ridge_predict(m, Z[lo:hi]) - y[lo:hi])))
        err = float(np.mean(errs)) if errs else math.inf
        if err < best_err:
            best, best_err = a, err
    return float(best)


@dataclass
class Tree:
    """Array-encoded binary tree; ``feature[i] == -1`` marks a leaf.

    ``proba[i]`` is the fraction of class 1 (buy) among training rows in node i.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    proba: np.ndarray

    def depth(self) -> int:
        def walk(i):
            if self.feature[i] < 0:
                return 0
            return 1 + max(walk(self.left[i]), walk(self.right[i]))

        return walk(0)

    def leaf_index(self, Z: np.ndarray) -> np.ndarray:
        node = np.zeros(Z.shape[0], dtype=np.int64)
        while True:
            feat = self.feature[node]
            inner = feat >= 0
            if not inner.any():
                return node
            rows = np.nonzero(inner)[0]
            go_left = Z[rows, feat[rows]] <= self.threshold[node[rows]]
            node[rows] = np.where(go_left, self.left[node[rows]], self.right[node[rows]])

    def predict_proba(self, Z: np.ndarray) -> np.ndarray:
        return self.proba[self.leaf_index(Z)]


@dataclass
class ForestModel:
    trees: list[Tree]
    n_features: int
    max_depth: int
    oob_accuracy: float | None = None
    seeds: list[int] = field(default_factory=list)


def _gini(pos: np.ndarray, n: np.ndarray) -> np.ndarray:
    p = pos / n
    return 2.0 * p * (1.0 - p)


def _best_split(Z: np.ndarray, y: np.ndarray, features: np.ndarray):
    n = y.size
    best = (math.inf, -1, 0.0)
    for f in features:
        order = np.argsort(Z[:, f], kind="stable")
        vals = Z[order, f]
        cum_pos = np.cumsum(y[order])
        # candidate cut after position i keeps rows 0..i on the left
        cut = np.nonzero(vals[1:] > vals[:-1])[0]
        if cut.size == 0:
            continue
        n_left = cut + 1.0
        n_right = n - n_left
        pos_left = cum_pos[cut]
        pos_right = cum_pos[-1] - pos_left
        score = (n_left * _gini(pos_left, n_left) + n_right * _gini(pos_right, n_right)) / n
        i = int(np.argmin(score))
        if score[i] < best[0] - 1e-12:
            best = (float(score[i]), int(f), 0.5 * (vals[cut[i]] + vals[cut[i] + 1]))
    return best


def _grow_tree(Z: np.ndarray, y: np.ndarray, rng: np.random.Generator, max_depth: int, max_features: int) -> Tree:
    feature, threshold, left, right, proba = [], [], [], [], []

    def build(rows: np.ndarray, depth: int) -> int:
        i = len(feature)
        ys = y[rows]
        p = float(ys.mean())
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        proba.append(p)
        if depth >= max_depth or p in (0.0, 1.0) or rows.size < 2:
            return i
        feats = np.sort(rng.choice(Z.shape[1], size=max_features, replace=False))
        score, f, thr = _best_split(Z[rows], ys, feats)
        if f < 0 or score >= 2.0 * p * (1.0 - p) - 1e-12:
            return i
        mask = Z[rows, f] <= thr
        feature[i], threshold[i] = f, thr
        left[i] = build(rows[mask], depth + 1)
        right[i] = build(rows[~mask], depth + 1)
        return i

    build(np.arange(y.size), 0)
    return Tree(
        np.array(feature, dtype=np.int64),
        np.array(threshold),
        np.array(left, dtype=np.int64),
        np.array(right, dtype=np.int64),
        np.array(proba),
    )


def forest_fit(
    Z,
    labels,
    seed: int = 0,
    n_trees: int = 5,
    max_depth: int = 3,
    bootstrap: Sequence[np.ndarray] | None = None,
) -> ForestModel:
    """Bagged Gini trees with sqrt(features) candidates per split.

    ``bootstrap`` optionally fixes each tree's resampled row indices.
    """
    Z = np.asarray(Z, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64)
    K, O = Z.shape
    if y.shape != (K,):
        raise ShapeError("labels must be a vector with one entry per row of Z")
    if K < 10:
        raise ValueError("forest_fit needs at least 10 rows")
    if np.unique(y).size < 2:
        raise DegenerateLabelsError("training labels contain a single class")
    max_features = max(1, int(math.sqrt(O)))
    seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n_trees)]
    trees, oob_votes, oob_counts = [], np.zeros(K), np.zeros(K)
    for t, s in enumerate(seeds):
        rng = np.random.default_rng(s)
        idx = rng.integers(0, K, size=K) if bootstrap is None else np.asarray(bootstrap[t])
        tree = _grow_tree(Z[idx], y[idx], rng, max_depth, max_features)
        trees.append(tree)
        oob = np.ones(K, dtype=bool)
        oob[idx] = False
        if oob.any():
            oob_votes[oob] += tree.predict_proba(Z[oob])
            oob_counts[oob] += 1
    seen = oob_counts > 0
    oob_acc = None
    if seen.any():
        oob_pred = (oob_votes[seen] / oob_counts[seen]) >= 0.5
        oob_acc = float(np.mean(oob_pred == y[seen].astype(bool)))
    return ForestModel(trees, O, max_depth, oob_acc, seeds)


def forest_predict_proba(model: ForestModel, Z) -> np.ndarray:
    """Mean over trees of the leaf probability of class 1 (buy)."""
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    if Z.shape[1] != model.n_features:
        raise ShapeError(f"forest expects {model.n_features} features, got {Z.shape[1]}")
    return np.mean([t.predict_proba(Z) for t in model.trees], axis=0)


def forest_predict(model: ForestModel, Z, threshold: float = 0.5) -> np.ndarray:
    return (forest_predict_proba(model, Z) >= threshold).astype(np.int64)
