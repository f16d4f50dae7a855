"""Closed-form two-point LQMT edges for chain integrators.

A tree edge is a per-axis polynomial ``p(t) = c^T beta(t)`` of degree ``2s-1``
on ``[0, T]``.  The coefficient vector ``c`` and the boundary vector
``d = [x(0); x(T)]`` are related by ``d = A_f(T) c`` and ``c = A_b(T) d``.

Every matrix here is a constant rational matrix scaled entrywise by a power
of ``T``: with ``k_j`` the derivative order of boundary entry ``j``,
``A_b(T)[i, j] = A_b(1)[i, j] * T**(k_j - i)``.  The unit-duration matrices are
inverted exactly (rational arithmetic) once per order, so queries never
invert anything numerically.

States are arrays of shape ``(3, s)``: one row per axis holding position and
its first ``s-1`` derivatives.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from functools import lru_cache

import numba
import numpy as np

DEFAULT_ORDER = 3
DEFAULT_RHO = 100.0
T_MIN = 0.01
T_MAX = 50.0

_GRID_POINTS = 24
_BISECT_ITERS = 24


class DomainError(ValueError):
    """Raised for durations or times outside an operation's domain."""


class OrderError(ValueError):
    """Raised for derivative orders outside the supported range."""


@dataclass(frozen=True)
class EdgeTables:
    s: int
    af1: np.ndarray  # A_f(1)
    ab1: np.ndarray  # A_b(1)
    af_exp: np.ndarray
    ab_exp: np.ndarray
    q1: np.ndarray  # Q(1)
    q_exp: np.ndarray
    m1: np.ndarray  # M(1) = A_b(1)^T Q(1) A_b(1)
    m_exp: np.ndarray
    deriv_order: np.ndarray  # k_j per boundary entry
    # cost_terms[e-1] holds the part of M(1) scaling with T**-e
    cost_terms: np.ndarray


def _falling(i: int, k: int) -> int:
    """i * (i-1) * ... * (i-k+1), the coefficient of t**(i-k) in d^k/dt^k t**i."""
    if k > i:
        return 0
    return math.factorial(i) // math.factorial(i - k)


@lru_cache(maxsize=None)
def tables(s: int = DEFAULT_ORDER) -> EdgeTables:
    if s < 1:
        raise OrderError(f"integrator order must be positive, got {s}")
    import sympy

    n = 2 * s
    kj = np.array([k for _ in range(2) for k in range(s)])
    af = sympy.zeros(n, n)
    for k in range(s):
        af[k, k] = math.factorial(k)
        for i in range(k, n):
            af[s + k, i] = _falling(i, k)
    ab = af.inv()

    q = sympy.zeros(n, n)
    for i in range(s, n):
        for j in range(s, n):
            q[i, j] = sympy.Rational(_falling(i, s) * _falling(j, s), i + j - 2 * s + 1)
    m = ab.T * q * ab

    idx = np.arange(n)
    af_exp = idx[None, :] - kj[:, None]
    ab_exp = kj[None, :] - idx[:, None]
    q_exp = np.where(
        (idx[:, None] >= s) & (idx[None, :] >= s), idx[:, None] + idx[None, :] - 2 * s + 1, 0
    )
    m_exp = kj[:, None] + kj[None, :] - 2 * s + 1

    m1 = np.array(m.tolist(), dtype=float)
    cost_terms = np.zeros((n - 1, n, n))
    for e in range(1, n):
        cost_terms[e - 1] = np.where(m_exp == -e, m1, 0.0)

    return EdgeTables(
        s=s,
        af1=np.array(af.tolist(), dtype=float),
        ab1=np.array(ab.tolist(), dtype=float),
        af_exp=af_exp,
        ab_exp=ab_exp,
        q1=np.array(q.tolist(), dtype=float),
        q_exp=q_exp,
        m1=m1,
        m_exp=m_exp,
        deriv_order=kj,
        cost_terms=cost_terms,
    )


def _check_duration(T: float) -> None:
    if not T > 0 or not np.isfinite(T):
        raise DomainError(f"duration must be positive and finite, got {T}")


def basis_eval(t: float, k: int = 0, s: int = DEFAULT_ORDER) -> np.ndarray:
    """k-th derivative of the natural basis (1, t, ..., t**(2s-1)) at ``t``."""
    n = 2 * s
    if not 0 <= k <= n - 1:
        raise OrderError(f"derivative order {k} outside [0, {n - 1}]")
    if t < 0:
        raise DomainError(f"basis evaluated at negative time {t}")
    out = np.zeros(n)
    for i in range(k, n):
        out[i] = _falling(i, k) * t ** (i - k)
    return out


def basis_matrix(ts: np.ndarray, k: int, s: int = DEFAULT_ORDER) -> np.ndarray:
    """Rows are ``basis_eval(t, k)`` for each t in ``ts``; shape (len(ts), 2s)."""
    ts = np.asarray(ts, dtype=float)
    n = 2 * s
    out = np.zeros((ts.size, n))
    for i in range(k, n):
        out[:, i] = _falling(i, k) * ts ** (i - k)
    return out


@dataclass(frozen=True)
class MappingMatrices:
    af: np.ndarray
    ab: np.ndarray

    @property
    def s(self) -> int:
        return self.af.shape[0] // 2

    @property
    def ab00(self) -> np.ndarray:
        return self.ab[: self.s, : self.s]

    @property
    def ab01(self) -> np.ndarray:
        return self.ab[: self.s, self.s :]

    @property
    def ab10(self) -> np.ndarray:
        return self.ab[self.s :, : self.s]

    @property
    def ab11(self) -> np.ndarray:
        return self.ab[self.s :, self.s :]


def mapping_matrices(T: float, s: int = DEFAULT_ORDER) -> MappingMatrices:
    _check_duration(T)
    tb = tables(s)
    return MappingMatrices(af=tb.af1 * T ** tb.af_exp, ab=tb.ab1 * T ** tb.ab_exp)


def q_matrix(T: float, s: int = DEFAULT_ORDER) -> np.ndarray:
    """Q(T) = integral over [0, T] of beta^(s) beta^(s)^T."""
    _check_duration(T)
    tb = tables(s)
    return tb.q1 * T ** tb.q_exp


def m_matrix(T: float, s: int = DEFAULT_ORDER) -> np.ndarray:
    _check_duration(T)
    tb = tables(s)
    return tb.m1 * T ** tb.m_exp


def m_matrix_dT(T: float, s: int = DEFAULT_ORDER) -> np.ndarray:
    _check_duration(T)
    tb = tables(s)
    return tb.m1 * tb.m_exp * T ** (tb.m_exp - 1)


def boundary(head: np.ndarray, tail: np.ndarray) -> np.ndarray:
    """Stack head and tail states into per-axis boundary vectors, shape (..., 2s)."""
    return np.concatenate([np.asarray(head, float), np.asarray(tail, float)], axis=-1)


def coeffs_from_boundary(d: np.ndarray, T: float) -> np.ndarray:
    d = np.asarray(d, dtype=float)
    return d @ mapping_matrices(T, d.shape[-1] // 2).ab.T


def edge_cost_c(c: np.ndarray, T: float, rho: float = DEFAULT_RHO) -> float:
    """Time-energy cost of coefficients ``c`` (one axis or stacked axes)."""
    c = np.atleast_2d(np.asarray(c, dtype=float))
    q = q_matrix(T, c.shape[-1] // 2)
    return rho * T + 0.5 * float(np.einsum("xi,ij,xj->", c, q, c))


def edge_cost_d(d: np.ndarray, T: float, rho: float = DEFAULT_RHO) -> float:
    """Time-energy cost of boundary vectors ``d`` (one axis or stacked axes)."""
    d = np.atleast_2d(np.asarray(d, dtype=float))
    m = m_matrix(T, d.shape[-1] // 2)
    return rho * T + 0.5 * float(np.einsum("xi,ij,xj->", d, m, d))


def edge_cost_dT(d: np.ndarray, T: float, rho: float = DEFAULT_RHO) -> float:
    """Derivative of :func:`edge_cost_d` in T with the boundary held fixed."""
    d = np.atleast_2d(np.asarray(d, dtype=float))
    dm = m_matrix_dT(T, d.shape[-1] // 2)
    return rho + 0.5 * float(np.einsum("xi,ij,xj->", d, dm, d))


@dataclass(frozen=True)
class PolyEdge:
    coeffs: np.ndarray  # (3, 2s)
    duration: float
    cost: float

    @property
    def s(self) -> int:
        return self.coeffs.shape[-1] // 2

    def head(self) -> np.ndarray:
        return self.state_at(0.0)

    def tail(self) -> np.ndarray:
        return self.state_at(self.duration)

    def state_at(self, t: float) -> np.ndarray:
        s = self.s
        return np.stack([self.coeffs @ basis_eval(t, k, s) for k in range(s)], axis=1)

    def sample(self, ts: np.ndarray, k: int = 0) -> np.ndarray:
        """k-th derivative at each time in ``ts``; shape (len(ts), 3)."""
        return basis_matrix(ts, k, self.s) @ self.coeffs.T


def solve_edge(
    head: np.ndarray, tail: np.ndarray, T: float, rho: float = DEFAULT_RHO
) -> PolyEdge:
    _check_duration(T)
    head = np.asarray(head, dtype=float)
    tail = np.asarray(tail, dtype=float)
    if head.shape != tail.shape:
        raise OrderError(f"state shapes differ: {head.shape} vs {tail.shape}")
    d = boundary(head, tail)
    c = coeffs_from_boundary(d, T)
    return PolyEdge(coeffs=c, duration=float(T), cost=edge_cost_c(c, T, rho))


def eval_derivative(edge: PolyEdge, t: float, k: int = 0) -> np.ndarray:
    if not 0 <= k <= edge.s:
        raise OrderError(f"derivative order {k} outside [0, {edge.s}]")
    if t < 0 or t > edge.duration:
        raise DomainError(f"time {t} outside [0, {edge.duration}]")
    return edge.coeffs @ basis_eval(t, k, edge.s)


def cost_terms(heads: np.ndarray, tails: np.ndarray) -> np.ndarray:
    """Coefficients a_e with cost(T) = rho*T + sum_e a_e T**-e, shape (N, 2s-1).

    ``heads`` and ``tails`` broadcast against each other with shape (..., 3, s).
    """
    heads = np.asarray(heads, dtype=float)
    tails = np.asarray(tails, dtype=float)
    heads, tails = np.broadcast_arrays(heads, tails)
    s = heads.shape[-1]
    d = np.concatenate([heads, tails], axis=-1).reshape(-1, 3, 2 * s)
    tb = tables(s)
    return 0.5 * np.einsum("nxa,eab,nxb->ne", d, tb.cost_terms, d, optimize=True)


@numba.njit(cache=True)
def _slope(a, T, rho):
    acc = rho
    inv = 1.0 / T
    p = inv * inv
    for e in range(a.shape[0]):
        acc -= (e + 1) * a[e] * p
        p *= inv
    return acc


@numba.njit(cache=True)
def _cost(a, T, rho):
    acc = rho * T
    inv = 1.0 / T
    p = inv
    for e in range(a.shape[0]):
        acc += a[e] * p
        p *= inv
    return acc


@numba.njit(cache=True)
def _pair_terms(head, tail, m1, mexp, a, d):
    """Fill ``a`` with the cost coefficients of T**-1 .. T**-(2s-1) for one head/tail pair."""
    s = head.shape[1]
    n2 = 2 * s
    a[:] = 0.0
    for x in range(3):
        for q in range(s):
            d[q] = head[x, q]
            d[s + q] = tail[x, q]
        for p in range(n2):
            if d[p] == 0.0:
                continue
            for r in range(n2):
                a[-mexp[p, r] - 1] += 0.5 * m1[p, r] * d[p] * d[r]


@numba.njit(cache=True)
def _minimize_terms(a, rho, grid, n_bisect):
    ng = grid.shape[0]
    best = 0
    best_val = np.inf
    for g in range(ng):
        v = _cost(a, grid[g], rho)
        if v < best_val:
            best_val = v
            best = g
    lo = grid[max(best - 1, 0)]
    hi = grid[min(best + 1, ng - 1)]
    for _ in range(n_bisect):
        mid = np.sqrt(lo * hi)
        if _slope(a, mid, rho) > 0.0:
            hi = mid
        else:
            lo = mid
    T = np.sqrt(lo * hi)
    return T, _cost(a, T, rho), best == 0 or best == ng - 1


@numba.njit(cache=True)
def _optimal_durations(heads, tails, rho, m1, mexp, grid, n_bisect, out_T, out_cost, out_bound):
    s = heads.shape[2]
    a = np.zeros(2 * s - 1)
    d = np.empty(2 * s)
    for i in range(heads.shape[0]):
        _pair_terms(heads[i], tails[i], m1, mexp, a, d)
        out_T[i], out_cost[i], out_bound[i] = _minimize_terms(a, rho, grid, n_bisect)


@lru_cache(maxsize=8)
def _duration_grid(t_lo: float, t_hi: float) -> np.ndarray:
    return np.geomspace(t_lo, t_hi, _GRID_POINTS)


def optimal_duration_batch(
    heads: np.ndarray,
    tails: np.ndarray,
    rho: float = DEFAULT_RHO,
    t_lo: float = T_MIN,
    t_hi: float = T_MAX,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Cost-minimizing durations for many head/tail pairs.

    Returns ``(T, cost, at_bound)``.  The global minimizer over a log grid is
    bracketed and then refined by bisection on the sign of dJ/dT.
    """
    heads, tails = np.broadcast_arrays(np.asarray(heads, float), np.asarray(tails, float))
    s = heads.shape[-1]
    heads = np.ascontiguousarray(heads.reshape(-1, 3, s))
    tails = np.ascontiguousarray(tails.reshape(-1, 3, s))
    n = heads.shape[0]
    tb = tables(s)
    out_T = np.empty(n)
    out_cost = np.empty(n)
    out_bound = np.empty(n, dtype=np.bool_)
    grid = _duration_grid(float(t_lo), float(t_hi))
    _optimal_durations(
        heads, tails, float(rho), tb.m1, tb.m_exp, grid, _BISECT_ITERS, out_T, out_cost, out_bound
    )
    return out_T, out_cost, out_bound


def optimal_duration(
    head: np.ndarray, tail: np.ndarray, rho: float = DEFAULT_RHO
) -> tuple[float, float]:
    """Duration minimizing the summed three-axis edge cost, and that cost.

    Warns when the minimizer sits on the search bracket boundary.
    """
    T, cost, at_bound = optimal_duration_batch(np.asarray(head)[None], np.asarray(tail)[None], rho)
    if at_bound[0]:
        warnings.warn("optimal duration at search bracket boundary", RuntimeWarning, stacklevel=2)
    return float(T[0]), float(cost[0])
