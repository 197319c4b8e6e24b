import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize_scalar

from deconfuse.ctl import (
    NONNEG,
    CtlProblem,
    CtlState,
    Penalty,
    ctl_fit,
    ctl_objective,
    ctl_objective_terms,
    t_update,
    x_update,
)
from deconfuse.errors import ShapeError
from deconfuse.tensor_ops import SV_FLOOR, FilterBank, conv1d, relu, svd


def planted_problem(seed):
    """Nonnegative signals produced by a known nonnegative filter."""
    r = np.random.default_rng(seed)
    base = r.normal(size=(16, 1, 22))
    T0 = FilterBank(np.abs(r.normal(size=(1, 1, 3))))
    S = relu(conv1d(base, T0))
    return CtlProblem(S, num_filters=2, kernel_size=3, mu=0.01, lam=0.01)


def loop_patches(S, P):
    K, _, D = S.shape
    rows = []
    for k in range(K):
        for d in range(D - P + 1):
            rows.append([S[k, 0, d + p] for p in range(P)])
    return np.array(rows)


def loop_codes(X):
    K, M, D = X.shape
    return np.array([[X[k, m, d] for m in range(M)] for k in range(K) for d in range(D)])


class TestObjective:
    def test_exact_fit(self):
        prob = CtlProblem(np.array([1.0, 2.0]), 1, 1, mu=0.0, lam=0.0)
        state = CtlState(FilterBank([1.0]), np.array([[[1.0, 2.0]]]))
        assert ctl_objective(state, prob) == 0.0

    def test_zero_codes(self):
        prob = CtlProblem(np.array([1.0, 2.0]), 1, 1, mu=0.0, lam=0.0)
        state = CtlState(FilterBank([1.0]), np.zeros((1, 1, 2)))
        assert ctl_objective(state, prob) == 2.5

    def test_frobenius_only(self):
        prob = CtlProblem(np.array([1.0, 2.0]), 1, 1, mu=1.0, lam=0.0)
        state = CtlState(FilterBank([2.0]), np.array([[[2.0, 4.0]]]))
        assert ctl_objective(state, prob) == 4.0

    def test_infeasible_codes(self):
        prob = CtlProblem(np.array([1.0, 2.0]), 1, 1, mu=0.0, lam=0.0)
        state = CtlState(FilterBank([1.0]), np.array([[[-1.0, 2.0]]]))
        assert ctl_objective(state, prob) == np.inf
        assert not ctl_objective_terms(state, prob).feasible

    def test_precondition_errors(self):
        with pytest.raises(ValueError):
            CtlProblem(np.ones((2, 1, 3)), 1, 5)
        with pytest.raises(ValueError):
            CtlProblem(np.ones((2, 1, 3)), 1, 2, mu=-1.0)


class TestXUpdate:
    def test_projection(self):
        X = x_update(FilterBank([1.0]), np.array([-1.0, 2.0]))
        np.testing.assert_array_equal(X[0, 0], [0.0, 2.0])

    def test_positive_unchanged(self, rng):
        S = rng.uniform(0.1, 1, size=(3, 1, 6))
        np.testing.assert_array_equal(x_update(FilterBank([0.5, 1.0]), S), conv1d(S, FilterBank([0.5, 1.0])))

    def test_nonneg_soft_threshold(self):
        pen = Penalty("nonneg_l1", 0.5)
        X = x_update(FilterBank([1.0]), np.array([1.2, -3.0]), pen)
        np.testing.assert_allclose(X[0, 0], [0.7, 0.0], atol=1e-15)
        for a, got in zip([1.2, -3.0], X[0, 0]):
            res = minimize_scalar(
                lambda u: 0.5 * (u - a) ** 2 + 0.5 * u, bounds=(0.0, 10.0), method="bounded", options={"xatol": 1e-12}
            )
            assert got == pytest.approx(res.x, abs=1e-8)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), c=st.floats(0.01, 100.0))
    def test_nonnegative_and_positively_homogeneous(self, seed, c):
        r = np.random.default_rng(seed)
        S = r.normal(size=(3, 1, 12))
        T = FilterBank(r.normal(size=(2, 1, 3)))
        X = x_update(T, S)
        assert X.min() >= 0
        np.testing.assert_allclose(x_update(T, c * S), c * X, rtol=1e-12, atol=1e-12)

    def test_proximal_step_needs_previous(self, rng):
        with pytest.raises(ShapeError):
            x_update(FilterBank([1.0]), rng.normal(size=(1, 1, 4)), NONNEG, gamma=1.0)


class TestTUpdate:
    def _instance(self, rng):
        S = rng.normal(size=(4, 1, 8))
        X = rng.uniform(0, 1, size=(4, 2, 6))
        T = FilterBank(rng.normal(size=(2, 1, 3)))
        return S, X, T

    @pytest.mark.parametrize("gamma", [0.5, 1.0, 1e8])
    def test_quadratic_prox_matches_normal_equations(self, rng, gamma):
        S, X, T = self._instance(rng)
        prob = CtlProblem(S, 2, 3, mu=0.0, lam=0.0)
        new = t_update(CtlState(T, X), prob, gamma1=gamma)
        P = loop_patches(S, 3)
        Xm = loop_codes(X)
        Tn = T.weights[:, 0, :].T
        expected = np.linalg.solve(gamma * P.T @ P + np.eye(3), gamma * P.T @ Xm + Tn)
        np.testing.assert_allclose(new.weights[:, 0, :].T, expected, atol=1e-6)

    def test_large_step_is_least_squares_filter(self, rng):
        S, X, T = self._instance(rng)
        prob = CtlProblem(S, 2, 3, mu=0.0, lam=0.0)
        new = t_update(CtlState(T, X), prob, gamma1=1e12)
        P = loop_patches(S, 3)
        ls, *_ = np.linalg.lstsq(P, loop_codes(X), rcond=None)
        np.testing.assert_allclose(new.weights[:, 0, :].T, ls, atol=1e-6)

    def test_tiny_step_keeps_filters(self, rng):
        S, X, T = self._instance(rng)
        prob = CtlProblem(S, 2, 3)
        new = t_update(CtlState(T, X), prob, gamma1=1e-10)
        np.testing.assert_allclose(new.weights, T.weights, atol=1e-8)

    def test_gamma_must_be_positive(self, rng):
        S, X, T = self._instance(rng)
        with pytest.raises(ValueError):
            t_update(CtlState(T, X), CtlProblem(S, 2, 3), gamma1=0.0)

    def test_one_alternation_decreases(self):
        for seed in range(100):
            r = np.random.default_rng(seed)
            prob = CtlProblem(r.normal(size=(6, 1, 12)), 3, 3)
            T = FilterBank(r.normal(size=(3, 1, 3)))
            state = CtlState(T, x_update(T, prob.samples))
            before = ctl_objective(state, prob)
            state.T = t_update(state, prob)
            state.X = x_update(state.T, prob.samples, NONNEG, 1.0, state.X)
            assert ctl_objective(state, prob) < before


class TestFit:
    def test_monotone_over_seeds(self):
        for seed in range(100):
            r = np.random.default_rng(1000 + seed)
            prob = CtlProblem(r.normal(size=(8, 1, 16)), 3, 3)
            h = np.array(ctl_fit(prob, 15, seed=seed).objective_history)
            assert np.all(np.isfinite(h))
            assert np.all(np.diff(h) <= 1e-8)

    def test_planted_recovery(self):
        prob = planted_problem(1)
        state = ctl_fit(prob, 100, seed=1)
        assert ctl_objective_terms(state, prob).residual <= 1e-3

    def test_iters_must_be_positive(self, rng):
        with pytest.raises(ValueError):
            ctl_fit(CtlProblem(rng.normal(size=(2, 1, 8)), 2, 3), 0)

    def test_learnt_filters_stay_diverse(self):
        for seed in range(5):
            r = np.random.default_rng(seed)
            prob = CtlProblem(r.normal(size=(8, 1, 16)), 3, 3, mu=0.01, lam=0.01)
            state = ctl_fit(prob, 50, seed=seed)
            assert svd(state.T.matrix()).singular_values.min() > SV_FLOOR

    def test_codes_stay_feasible(self, rng):
        state = ctl_fit(CtlProblem(rng.normal(size=(5, 1, 10)), 2, 3), 10)
        assert state.X.min() >= 0

    def test_matches_alternating_least_squares(self):
        for seed in range(5):
            r = np.random.default_rng(seed)
            S = r.normal(size=(6, 1, 14))
            mu = 0.1
            prob = CtlProblem(S, 2, 3, mu=mu, lam=0.0, penalty=Penalty("none"))
            init = FilterBank(r.normal(size=(2, 1, 3)))
            state = ctl_fit(prob, 10, gamma1=1e8, gamma2=1e8, init=init)

            P = loop_patches(S, 3)
            T = init.weights[:, 0, :].T
            X = P @ T
            for _ in range(10):
                T = np.linalg.solve(P.T @ P + 2 * mu * np.eye(3), P.T @ X)
                X = P @ T
            oracle = 0.5 * np.sum((P @ T - X) ** 2) + mu * np.sum(T * T)
            assert abs(state.objective_history[-1] - oracle) <= 1e-4

    def test_trace_csv(self, rng, tmp_path):
        path = tmp_path / "trace.csv"
        state = ctl_fit(CtlProblem(rng.normal(size=(3, 1, 8)), 2, 3), 4, trace_path=path)
        rows = list(csv.reader(open(path)))
        assert rows[0] == ["iteration", "objective", "residual", "logdet"]
        assert len(rows) == 6
        np.testing.assert_allclose([float(r[1]) for r in rows[1:]], state.objective_history)
