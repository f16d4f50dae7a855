"""Limited memory bundle method for small nonsmooth unconstrained problems.

Serious steps update the inverse-Hessian approximation with BFGS pairs, null
steps with SR1 pairs; the approximation is rebuilt each iteration from the
last ``memory`` pairs on top of a scaled identity.  On null steps the search
direction uses an aggregate of three subgradients (current serious point,
trial point, previous aggregate) chosen by a tiny simplex QP.  Coordinates
listed in ``lower`` are projected back onto their bounds after every step.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable

import numba
import numpy as np

Evaluator = Callable[[np.ndarray], tuple[float, np.ndarray]]

TOLERANCE = "tolerance"
BUDGET = "budget"
LINE_SEARCH_FAILURE = "line-search failure"


@dataclass
class NsoptProblem:
    evaluate: Evaluator
    x0: np.ndarray
    lower: np.ndarray | None = None  # -inf for unbounded coordinates
    max_iter: int = 50
    max_eval: int = 200
    eps: float = 1e-5
    memory: int = 7

    def __post_init__(self) -> None:
        self.x0 = np.asarray(self.x0, dtype=float).copy()
        if self.x0.ndim != 1 or self.x0.size < 1:
            raise ValueError("initial point must be a non-empty vector")
        if self.lower is None:
            self.lower = np.full(self.x0.size, -np.inf)
        self.lower = np.asarray(self.lower, dtype=float)
        if np.any(self.x0 < self.lower):
            raise ValueError("initial point violates lower bounds")


@dataclass
class NsoptResult:
    x: np.ndarray
    f: float
    f0: float
    evaluations: int
    iterations: int
    reason: str
    history: list[float] = field(default_factory=list)


# line-search and null-step constants
_EPS_L = 1e-4
_EPS_R = 0.25
_GAMMA = 0.5
_OMEGA = 2.0
_MAX_TRIALS = 12
_T_NULL = 1e-2
_FIRST_STEP = 1.0


def _aggregate(g_m, g_new, g_agg, D, beta_new, beta_agg):
    """Minimize (sum l_i g_i)^T D (sum l_i g_i) + 2 (l2 beta_new + l3 beta_agg) on the simplex."""
    G = np.stack([g_m, g_new, g_agg])
    H = G @ D @ G.T
    c = np.array([0.0, beta_new, beta_agg])
    best_val, best = math.inf, np.array([1.0, 0.0, 0.0])
    # enumerate supports of the 3-simplex and solve each face's equality-constrained QP
    for size in (1, 2, 3):
        for supp in itertools.combinations(range(3), size):
            idx = list(supp)
            Hs = H[np.ix_(idx, idx)]
            K = np.zeros((size + 1, size + 1))
            K[:size, :size] = 2 * Hs
            K[:size, size] = 1.0
            K[size, :size] = 1.0
            rhs = np.concatenate([-2 * c[idx], [1.0]])
            try:
                sol = np.linalg.solve(K, rhs)
            except np.linalg.LinAlgError:
                continue
            lam_s = sol[:size]
            if np.any(lam_s < -1e-12):
                continue
            lam = np.zeros(3)
            lam[idx] = np.maximum(lam_s, 0.0)
            lam /= lam.sum()
            val = lam @ H @ lam + 2 * lam @ c
            if val < best_val:
                best_val, best = val, lam
    return best


@numba.njit(cache=True)
def _metric_kernel(S, U, bfgs, gamma):
    m, n = S.shape
    D = np.zeros((n, n))
    for i in range(n):
        D[i, i] = gamma
    for k in range(m):
        s = S[k]
        u = U[k]
        if bfgs[k]:
            rho = 1.0 / (s @ u)
            Du = D @ u
            uDu = u @ Du
            # (I - rho s u^T) D (I - rho u s^T) + rho s s^T
            for i in range(n):
                for j in range(n):
                    D[i, j] += -rho * (s[i] * Du[j] + Du[i] * s[j]) + (rho * rho * uDu + rho) * s[i] * s[j]
        else:
            r = s - D @ u
            denom = r @ u
            if denom > 1e-8 * np.sqrt(r @ r) * np.sqrt(u @ u):
                cand = D + np.outer(r, r) / denom
                if np.all(np.linalg.eigvalsh(0.5 * (cand + cand.T)) > 0):
                    D = cand
    return D


def _metric(pairs, n: int, g_norm: float) -> np.ndarray:
    """Inverse-Hessian approximation from stored (kind, s, u) pairs.

    Without any curvature pair the identity is scaled so that a full step
    along the gradient has length at most ``_FIRST_STEP``.
    """
    gamma = min(1.0, _FIRST_STEP / g_norm) if g_norm > 0 else 1.0
    for kind, s, u in reversed(pairs):
        if kind == "bfgs":
            gamma = float(s @ u) / float(u @ u)
            break
    if not pairs:
        return gamma * np.eye(n)
    S = np.array([p[1] for p in pairs])
    U = np.array([p[2] for p in pairs])
    bfgs = np.array([p[0] == "bfgs" for p in pairs])
    return _metric_kernel(S, U, bfgs, gamma)


def _backtrack(t: float, f0: float, ft: float, slope: float) -> float:
    """Minimizer of the quadratic through f(0), f'(0) and f(t), kept within [0.1 t, 0.5 t]."""
    curv = ft - f0 - slope * t
    if slope < 0 and curv > 0:
        return min(0.5 * t, max(0.1 * t, -slope * t * t / (2.0 * curv)))
    return 0.5 * t


def minimize(problem: NsoptProblem) -> NsoptResult:
    lower = problem.lower
    n = problem.x0.size
    evals = 0

    def evaluate(x):
        nonlocal evals
        evals += 1
        f, g = problem.evaluate(x)
        return float(f), np.asarray(g, dtype=float)

    x = np.maximum(problem.x0, lower)
    f, g = evaluate(x)
    f0 = f
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        return NsoptResult(x, f, f0, evals, 0, LINE_SEARCH_FAILURE)

    history = [f]
    pairs: list[tuple[str, np.ndarray, np.ndarray]] = []
    g_m = g  # subgradient at the current serious point
    g_agg, beta_agg = g.copy(), 0.0
    reason = BUDGET
    it = 0
    while it < problem.max_iter and evals < problem.max_eval:
        it += 1
        D = _metric(pairs, n, float(np.linalg.norm(g_agg)))
        direction = -D @ g_agg
        # a lower bound that is active and pushed against freezes that coordinate
        frozen = (x <= lower) & (direction < 0)
        direction[frozen] = 0.0
        w = float(-g_agg @ direction) + 2 * beta_agg
        if w <= problem.eps * max(1.0, abs(f)):
            reason = TOLERANCE
            break

        t = 1.0
        slope = float(g_agg @ direction)
        step = None
        for _ in range(_MAX_TRIALS):
            if evals >= problem.max_eval:
                break
            y = np.maximum(x + t * direction, lower)
            fy, gy = evaluate(y)
            if not np.isfinite(fy) or not np.all(np.isfinite(gy)):
                return NsoptResult(x, f, f0, evals, it, LINE_SEARCH_FAILURE, history)
            if fy <= f - _EPS_L * t * w:
                step = ("serious", y, fy, gy)
                break
            sy = y - x
            beta = max(abs(f - fy + sy @ gy), _GAMMA * float(np.linalg.norm(sy)) ** _OMEGA)
            if t <= _T_NULL and -beta + direction @ gy >= -_EPS_R * w:
                step = ("null", y, fy, gy, beta)
                break
            t = _backtrack(t, f, fy, slope)
        if step is None:
            reason = BUDGET if evals >= problem.max_eval else LINE_SEARCH_FAILURE
            break

        if step[0] == "serious":
            _, y, fy, gy = step
            s, u = y - x, gy - g_m
            if s @ u > 1e-12 * np.linalg.norm(s) * np.linalg.norm(u):
                pairs.append(("bfgs", s, u))
            x, f, g_m = y, fy, gy
            g_agg, beta_agg = gy.copy(), 0.0
            history.append(f)
        else:
            _, y, fy, gy, beta = step
            lam = _aggregate(g_m, gy, g_agg, D, beta, beta_agg)
            g_agg = lam[0] * g_m + lam[1] * gy + lam[2] * g_agg
            beta_agg = lam[1] * beta + lam[2] * beta_agg
            s, u = y - x, gy - g_m
            if np.linalg.norm(s) > 0:
                pairs.append(("sr1", s, u))
        if len(pairs) > problem.memory:
            pairs = pairs[-problem.memory :]
    return NsoptResult(x, f, f0, evals, it, reason, history)


def check_gradient(evaluate: Evaluator, point: np.ndarray, h: float = 1e-6) -> float:
    """Largest relative mismatch between the returned gradient and central differences."""
    if not h > 0:
        raise ValueError(f"difference step must be positive, got {h}")
    point = np.asarray(point, dtype=float)
    _, g = evaluate(point)
    worst = 0.0
    for i in range(point.size):
        e = np.zeros_like(point)
        e[i] = h
        fd = (evaluate(point + e)[0] - evaluate(point - e)[0]) / (2 * h)
        err = abs(fd - g[i]) / max(1.0, abs(fd), abs(g[i]))
        worst = max(worst, err)
    return worst
