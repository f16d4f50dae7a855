from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize as scipy_minimize

from deformtree import nsopt
from deformtree.nsopt import NsoptProblem, minimize


def quadratic(A, b):
    def f(x):
        return 0.5 * x @ A @ x - b @ x, A @ x - b

    return f


def spd(rng, d, cond=20.0):
    Q, _ = np.linalg.qr(rng.normal(size=(d, d)))
    return Q @ np.diag(np.geomspace(1.0, cond, d)) @ Q.T


def max_of_quadratics(As, cs, ks):
    def f(x):
        vals = [0.5 * (x - c) @ A @ (x - c) + k for A, c, k in zip(As, cs, ks)]
        i = int(np.argmax(vals))
        return vals[i], As[i] @ (x - cs[i])

    return f


def grid_min(f_batch, lo, hi, n=11, rounds=12):
    """Dense tensor grid search that zooms onto the best cell each round."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    best = None
    for _ in range(rounds):
        axes = [np.linspace(a, b, n) for a, b in zip(lo, hi)]
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, lo.size)
        vals = f_batch(pts)
        i = int(np.argmin(vals))
        best = (vals[i], pts[i])
        half = (hi - lo) / (n - 1) * 2
        lo, hi = pts[i] - half, pts[i] + half
    return best


@pytest.mark.parametrize("seed", range(5))
def test_convex_quadratic_reaches_argmin(seed):
    rng = np.random.default_rng(seed)
    A, b = spd(rng, 10), rng.normal(size=10)
    res = minimize(NsoptProblem(quadratic(A, b), rng.normal(size=10), max_iter=100, max_eval=100, eps=1e-14))
    assert res.evaluations <= 100
    assert np.linalg.norm(res.x - np.linalg.solve(A, b)) < 1e-6


def test_absolute_value_kink():
    res = minimize(NsoptProblem(lambda x: (abs(x[0]), np.sign(x)), np.array([1.0]), max_iter=200, max_eval=500))
    assert abs(res.x[0]) < 1e-4


def test_l1_norm_in_several_dimensions():
    x0 = np.array([1.0, -2.0, 0.5, 3.0])
    res = minimize(NsoptProblem(lambda x: (np.abs(x).sum(), np.sign(x)), x0, max_iter=500, max_eval=2000))
    assert np.abs(res.x).max() < 1e-4


@pytest.mark.parametrize("seed", range(3))
def test_max_of_three_quadratics_matches_grid(seed):
    rng = np.random.default_rng(10 + seed)
    As = [spd(rng, 5, 5.0) for _ in range(3)]
    cs = [rng.uniform(-1, 1, 5) for _ in range(3)]
    ks = list(rng.uniform(-0.5, 0.5, 3))

    def batch(X):
        return np.max([0.5 * np.einsum("ni,ij,nj->n", X - c, A, X - c) + k for A, c, k in zip(As, cs, ks)], axis=0)

    f_grid, _ = grid_min(batch, [-2] * 5, [2] * 5)
    # independent check of the grid oracle: smooth epigraph reformulation
    cons = [{"type": "ineq", "fun": lambda z, A=A, c=c, k=k: z[5] - 0.5 * (z[:5] - c) @ A @ (z[:5] - c) - k} for A, c, k in zip(As, cs, ks)]
    epi = scipy_minimize(lambda z: z[5], np.r_[np.zeros(5), 10.0], constraints=cons, method="SLSQP", options={"ftol": 1e-12})
    assert epi.fun == pytest.approx(f_grid, abs=1e-3)

    res = minimize(NsoptProblem(max_of_quadratics(As, cs, ks), np.full(5, 1.5), max_iter=500, max_eval=3000, eps=1e-10))
    assert res.f == pytest.approx(f_grid, abs=1e-3)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_history_monotone_and_bounds_respected(seed):
    rng = np.random.default_rng(seed)
    A, b = spd(rng, 6), rng.normal(size=6) * 3
    lower = np.r_[np.full(3, -np.inf), rng.uniform(-0.5, 0.5, 3)]
    seen = []
    base = quadratic(A, b)

    def f(x):
        seen.append(x.copy())
        return base(x)

    x0 = np.maximum(rng.normal(size=6), lower)
    res = minimize(NsoptProblem(f, x0, lower))
    assert np.all(np.diff(res.history) <= 0)
    assert res.f <= res.f0
    assert all(np.all(x >= lower) for x in seen)
    assert np.all(res.x >= lower)


def test_bound_constrained_minimum_is_projection():
    # separable quadratic with minimum outside the box: the answer is the clipped argmin
    target = np.array([-1.0, 2.0, -3.0])
    lower = np.array([0.0, 0.0, -np.inf])
    res = minimize(NsoptProblem(lambda x: (0.5 * ((x - target) ** 2).sum(), x - target), np.ones(3), lower, eps=1e-12))
    assert np.allclose(res.x, [0.0, 2.0, -3.0], atol=1e-6)


def test_deterministic():
    rng = np.random.default_rng(3)
    As = [spd(rng, 5) for _ in range(3)]
    f = max_of_quadratics(As, [rng.normal(size=5) for _ in range(3)], [0.0, 0.1, -0.1])
    a = minimize(NsoptProblem(f, np.ones(5)))
    b = minimize(NsoptProblem(f, np.ones(5)))
    assert a.x.tobytes() == b.x.tobytes() and a.history == b.history and a.evaluations == b.evaluations


def test_non_finite_value_aborts_with_last_finite_point():
    def f(x):
        if x[0] < 0.5:
            return np.nan, np.zeros(1)
        return (x[0] - 0.0) ** 2, 2 * x

    res = minimize(NsoptProblem(f, np.array([1.0])))
    assert res.reason == nsopt.LINE_SEARCH_FAILURE
    assert np.isfinite(res.f) and res.x[0] >= 0.5


def test_non_finite_at_start():
    res = minimize(NsoptProblem(lambda x: (np.inf, x), np.zeros(2)))
    assert res.reason == nsopt.LINE_SEARCH_FAILURE and res.iterations == 0


def test_budget_reason():
    rng = np.random.default_rng(0)
    A, b = spd(rng, 10, 1e4), rng.normal(size=10)
    res = minimize(NsoptProblem(quadratic(A, b), np.zeros(10), max_iter=3, eps=1e-16))
    assert res.reason == nsopt.BUDGET and res.iterations == 3


def test_problem_validation():
    with pytest.raises(ValueError):
        NsoptProblem(lambda x: (0.0, x), np.array([]))
    with pytest.raises(ValueError):
        NsoptProblem(lambda x: (0.0, x), np.zeros(2), np.ones(2))


def test_check_gradient_quadratic_and_bad_step():
    rng = np.random.default_rng(1)
    f = quadratic(spd(rng, 4), rng.normal(size=4))
    assert nsopt.check_gradient(f, rng.normal(size=4)) < 1e-8
    wrong = lambda x: (f(x)[0], f(x)[1] + 1e-2)
    assert nsopt.check_gradient(wrong, rng.normal(size=4)) > 1e-3
    with pytest.raises(ValueError):
        nsopt.check_gradient(f, np.zeros(4), 0.0)
