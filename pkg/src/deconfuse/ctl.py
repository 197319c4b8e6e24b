"""Shallow convolutional transform learning.

Learns a bank of filters ``T`` and nonnegative (optionally sparse) codes
``X`` from unlabeled 1D samples by alternating proximal steps on

    F(T, X) = 1/2 ||T*S - X||_F^2 + Psi(X) + mu ||T||_F^2 - lam * logdet(T)

The filter step has no closed form because of the log-det term; it is solved
by a preconditioned gradient method with Armijo backtracking.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.linalg import cho_factor, cho_solve

from .errors import NonConvergenceError, ShapeError
from .tensor_ops import (
    SV_FLOOR,
    FilterBank,
    as_tensor3,
    conv1d,
    frobenius_sq,
    logdet_value_and_gradient,
)

log = logging.getLogger(__name__)

INNER_TOL = 1e-6
INNER_MAX_ITER = 200


@dataclass(frozen=True)
class Penalty:
    """Feature penalty Psi.

    ``kind`` is ``"nonneg"`` (indicator of the nonnegative orthant),
    ``"nonneg_l1"`` (indicator plus ``weight * ||X||_1``) or ``"none"``.
    """

    kind: str = "nonneg"
    weight: float = 0.0

    def __post_init__(self):
        if self.kind not in ("nonneg", "nonneg_l1", "none"):
            raise ValueError(f"unknown penalty kind {self.kind!r}")
        if self.weight < 0:
            raise ValueError("penalty weight must be nonnegative")

    @property
    def has_indicator(self) -> bool:
        return self.kind != "none"

    def value(self, X: np.ndarray) -> float:
        """Penalty value; ``inf`` when the indicator is violated."""
        if self.has_indicator and np.any(X < 0):
            return math.inf
        if self.kind == "nonneg_l1":
            return self.weight * float(np.sum(X))
        return 0.0

    def prox(self, V: np.ndarray, scale: float = 1.0) -> np.ndarray:
        """prox of ``scale * Psi`` evaluated at ``V``."""
        if self.kind == "none":
            return np.array(V, dtype=np.float64, copy=True)
        if self.kind == "nonneg_l1":
            return np.maximum(V - scale * self.weight, 0.0)
        return np.maximum(V, 0.0)


NONNEG = Penalty("nonneg")


@dataclass
class CtlProblem:
    samples: np.ndarray
    num_filters: int
    kernel_size: int
    mu: float = 0.01
    lam: float = 0.01
    penalty: Penalty = NONNEG
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        self.samples = as_tensor3(self.samples)
        K, _, D = self.samples.shape
        if K < 1 or self.num_filters < 1:
            raise ValueError("need at least one sample and one filter")
        if self.kernel_size > D + 2 * self.padding:
            raise ValueError(f"kernel size {self.kernel_size} exceeds sample length {D}")
        if self.mu < 0 or self.lam < 0:
            raise ValueError("mu and lam must be nonnegative")

    @property
    def in_channels(self) -> int:
        return self.samples.shape[1]


@dataclass
class CtlState:
    T: FilterBank
    X: np.ndarray
    objective_history: list[float] = field(default_factory=list)
    inner_iterations: list[int] = field(default_factory=list)


class CtlObjective(NamedTuple):
    value: float
    residual: float
    penalty: float
    frobenius: float
    logdet: float
    feasible: bool


def patch_matrix(S: np.ndarray, kernel: int, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Rows are the (channel, tap) patches that each output position sees.

    Column order matches :func:`deconfuse.tensor_ops.filter_matrix`, so
    ``patch_matrix(S) @ bank.matrix()`` is the convolution with positions as rows.
    """
    if padding:
        S = np.pad(S, ((0, 0), (0, 0), (padding, padding)))
    win = sliding_window_view(S, kernel, axis=2)[:, :, ::stride, :]
    K, C, D_out, P = win.shape
    return win.transpose(0, 2, 1, 3).reshape(K * D_out, C * P)


def _codes_as_matrix(X: np.ndarray) -> np.ndarray:
    # (K, M, D_out) -> (K*D_out, M)
    return X.transpose(0, 2, 1).reshape(-1, X.shape[1])


def _matrix_to_weights(Tm: np.ndarray, in_channels: int) -> np.ndarray:
    M = Tm.shape[1]
    return Tm.T.reshape(M, in_channels, -1)


def ctl_objective_terms(state: CtlState, problem: CtlProblem) -> CtlObjective:
    bank = state.T
    if bank.kernel_size != problem.kernel_size or bank.out_channels != problem.num_filters:
        raise ShapeError("filter bank does not match the problem dimensions")
    A = conv1d(problem.samples, bank)
    if A.shape != state.X.shape:
        raise ShapeError(f"codes have shape {state.X.shape}, transform output is {A.shape}")
    residual = 0.5 * float(np.sum((A - state.X) ** 2))
    pen = problem.penalty.value(state.X)
    frob = problem.mu * frobenius_sq(bank.weights)
    ld = 0.0
    if problem.lam:
        ld, _ = logdet_value_and_gradient(bank.matrix())
    total = residual + pen + frob - problem.lam * ld
    return CtlObjective(total, residual, pen, frob, ld, math.isfinite(pen))


def ctl_objective(state: CtlState, problem: CtlProblem) -> float:
    """Objective value; ``math.inf`` marks codes outside the indicator's domain."""
    return ctl_objective_terms(state, problem).value


def x_update(
    T: FilterBank,
    S,
    penalty: Penalty = NONNEG,
    gamma: float | None = None,
    X_prev: np.ndarray | None = None,
) -> np.ndarray:
    """Code update for fixed filters.

    With ``gamma=None`` this is the exact minimizer ``prox_Psi(T*S)``.  With a
    step ``gamma`` it is the proximal step ``prox_{gamma F(T, .)}(X_prev)``.
    """
    A = conv1d(S, T)
    if gamma is None:
        return penalty.prox(A)
    if X_prev is None or X_prev.shape != A.shape:
        raise ShapeError("proximal code update needs X_prev with the transform output shape")
    blend = (gamma * A + X_prev) / (1.0 + gamma)
    return penalty.prox(blend, gamma / (1.0 + gamma))


class _FilterSubproblem:
    """h(T) = F(T, X) + ||T - T_prev||^2 / (2 gamma) in filters-as-columns form."""

    def __init__(self, P: np.ndarray, Xm: np.ndarray, T_prev: np.ndarray, mu: float, lam: float, gamma: float):
        self.P, self.Xm, self.T_prev = P, Xm, T_prev
        self.mu, self.lam, self.inv_gamma = mu, lam, 1.0 / gamma
        self.gram = P.T @ P
        self.cross = P.T @ Xm
        n = self.gram.shape[0]
        self.precond = cho_factor(self.gram + (2.0 * mu + self.inv_gamma) * np.eye(n))

    def value_and_grad(self, Tm: np.ndarray) -> tuple[float, np.ndarray]:
        R = self.P @ Tm - self.Xm
        diff = Tm - self.T_prev
        val = 0.5 * np.sum(R * R) + self.mu * np.sum(Tm * Tm) + 0.5 * self.inv_gamma * np.sum(diff * diff)
        grad = self.gram @ Tm - self.cross + 2.0 * self.mu * Tm + self.inv_gamma * diff
        if self.lam:
            ld, ld_grad = logdet_value_and_gradient(Tm, SV_FLOOR)
            val -= self.lam * ld
            grad = grad - self.lam * ld_grad
        return float(val), grad

    def direction(self, grad: np.ndarray) -> np.ndarray:
        return -cho_solve(self.precond, grad)


def t_update(
    state: CtlState,
    problem: CtlProblem,
    gamma1: float = 1.0,
    tol: float = INNER_TOL,
    max_iter: int = INNER_MAX_ITER,
) -> FilterBank:
    """Approximate ``prox_{gamma1 F(., X)}`` at the current filters."""
    return _t_update(state, problem, gamma1, tol, max_iter)[0]


def _t_update(state, problem, gamma1, tol, max_iter) -> tuple[FilterBank, int]:
    if gamma1 <= 0:
        raise ValueError("gamma1 must be positive")
    bank = state.T
    P = patch_matrix(problem.samples, problem.kernel_size, bank.stride, bank.padding)
    Xm = _codes_as_matrix(state.X)
    if P.shape[0] != Xm.shape[0]:
        raise ShapeError("codes do not match the transform output geometry")
    T_prev = bank.matrix().copy()
    sub = _FilterSubproblem(P, Xm, T_prev, problem.mu, problem.lam, gamma1)

    Tm = T_prev.copy()
    val, grad = sub.value_and_grad(Tm)
    it = 0
    for it in range(1, max_iter + 1):
        if np.linalg.norm(grad) <= tol:
            it -= 1
            break
        d = sub.direction(grad)
        slope = float(np.sum(grad * d))
        step = 1.0
        while True:
            cand = Tm + step * d
            if not problem.lam or np.any(cand):
                c_val, c_grad = sub.value_and_grad(cand)
                if not math.isfinite(c_val):
                    raise NonConvergenceError(
                        "filter subproblem produced a non-finite value",
                        {"iteration": it, "step": step, "objective": val},
                    )
                if c_val <= val + 1e-4 * step * slope:
                    break
            step *= 0.5
            if step < 1e-14:
                break
        if step < 1e-14:
            # no measurable descent left at working precision
            break
        Tm, val, grad = cand, c_val, c_grad
    else:
        log.debug("filter subproblem hit %d iterations, |grad|=%.3g", max_iter, np.linalg.norm(grad))

    if not np.all(np.isfinite(Tm)):
        raise NonConvergenceError("filter subproblem diverged", {"iterations": it})
    weights = _matrix_to_weights(Tm, problem.in_channels)
    return FilterBank(weights, bank.stride, bank.padding), it


def init_filters(problem: CtlProblem, rng: np.random.Generator) -> FilterBank:
    P, M = problem.kernel_size, problem.num_filters
    a = math.sqrt(6.0 / (P * (1 + M)))
    w = rng.uniform(-a, a, size=(M, problem.in_channels, P))
    return FilterBank(w, problem.stride, problem.padding)


def ctl_fit(
    problem: CtlProblem,
    iters: int,
    gamma1: float = 1.0,
    gamma2: float = 1.0,
    seed: int = 0,
    init: FilterBank | None = None,
    trace_path: str | Path | None = None,
) -> CtlState:
    """Alternating proximal minimization; ``objective_history[0]`` is the start point."""
    if iters < 1:
        raise ValueError("iters must be at least 1")
    if gamma2 <= 0:
        raise ValueError("gamma2 must be positive")
    bank = init if init is not None else init_filters(problem, np.random.default_rng(seed))
    state = CtlState(bank, x_update(bank, problem.samples, problem.penalty))
    rows = []

    def record(n):
        terms = ctl_objective_terms(state, problem)
        state.objective_history.append(terms.value)
        rows.append((n, terms.value, terms.residual, terms.logdet))

    record(0)
    for n in range(1, iters + 1):
        state.T, inner = _t_update(state, problem, gamma1, INNER_TOL, INNER_MAX_ITER)
        state.inner_iterations.append(inner)
        state.X = x_update(state.T, problem.samples, problem.penalty, gamma2, state.X)
        record(n)

    if trace_path is not None:
        write_trace(trace_path, rows)
    return state


def write_trace(path: str | Path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "objective", "residual", "logdet"])
        for n, obj, res, ld in rows:
            w.writerow([n, repr(obj), repr(res), repr(ld)])
