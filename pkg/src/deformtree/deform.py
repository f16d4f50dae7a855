"""Deformation units: local spatio-temporal optimization of one tree node.

A unit is an interior node ``n`` together with the edge from its parent and
the edges to its children.  Its decision vector is laid out as

    z = [x_n.ravel() (3*s values, axis-major), T_n, T_c1, ..., T_cm]

and its objective is the descendant-weighted sum of edge costs plus
trapezoidal soft penalties for obstacle clearance and derivative limits.
Everything outside the unit is frozen while it is optimized.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache

import numba
import numpy as np

from . import nsopt
from .env_field import Environment, check_edge, trilinear_point
from .poly_edge import T_MIN, DomainError, basis_eval, solve_edge, tables


class Variant(str, Enum):
    OFF = "off"
    NODE = "node"
    TRUNK = "trunk"
    BRANCH = "branch"
    TREE = "tree"


class Mode(str, Enum):
    SPATIAL = "s"
    SPATIOTEMPORAL = "st"


@dataclass
class PenaltyConfig:
    weights: tuple[float, ...] = (1e4, 1e3, 1e3, 1e3)  # obstacle, then derivative orders 1..s
    clearance: float = 0.3  # inflation radius plus about one cell of quantization slack
    spacing: float = 0.05  # seconds per penalty sample
    limit_scale: float = 0.9  # soft derivative limits are limit_scale * m_k

    def __post_init__(self) -> None:
        if any(w < 0 for w in self.weights):
            raise ValueError("penalty weights must be non-negative")
        if not 0 < self.limit_scale <= 1:
            raise ValueError("limit scale must lie in (0, 1]")
        if not self.clearance > 0 or not self.spacing > 0:
            raise ValueError("clearance and sample spacing must be positive")


@dataclass
class DeformSettings:
    """Everything a deformation needs besides the tree and environment."""

    rho: float
    limits: tuple[float, ...]
    penalty: PenaltyConfig = field(default_factory=PenaltyConfig)
    check_dt: float = 0.02
    max_iter: int = 50
    max_eval: int = 200
    eps: float = 1e-5
    memory: int = 7
    min_decrease: float = 1e-9


@lru_cache(maxsize=512)
def _sample_basis(s: int, k: int) -> np.ndarray:
    """B[j, q, b] = beta^(q)(j/k)^T A_b(1)[:, b] for j = 0..k, q = 0..s."""
    ab1 = tables(s).ab1
    out = np.empty((k + 1, s + 1, 2 * s))
    for j in range(k + 1):
        tau = j / k
        for q in range(s + 1):
            out[j, q] = basis_eval(tau, q, s) @ ab1
    out.setflags(write=False)
    return out


def sample_count(duration: float, spacing: float) -> int:
    return max(2, math.ceil(duration / spacing))


@dataclass
class DeformationUnit:
    node: int
    x_parent: np.ndarray  # (3, s)
    x_children: np.ndarray  # (m, 3, s)
    child_ids: tuple[int, ...]
    weights: np.ndarray  # (1 + m,) descendant weights d_i, parent edge first
    samples: np.ndarray  # (1 + m,) penalty sample counts k_i, frozen at construction
    z0: np.ndarray  # initial decision vector

    @property
    def s(self) -> int:
        return self.x_parent.shape[1]

    @property
    def n_edges(self) -> int:
        return 1 + len(self.child_ids)

    def split(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        s = self.s
        return z[: 3 * s].reshape(3, s), z[3 * s :]

    def lower_bounds(self) -> np.ndarray:
        lo = np.full(self.z0.size, -np.inf)
        lo[3 * self.s :] = T_MIN
        return lo


def build_unit(tree, node: int, penalty: PenaltyConfig) -> DeformationUnit:
    parent = tree.parent[node]
    kids = tuple(tree.children[node])
    s = tree.s
    durations = [tree.edges[node].duration] + [tree.edges[c].duration for c in kids]
    weights = np.array([tree.descendant_weight(node)] + [tree.descendant_weight(c) for c in kids], float)
    x_children = (
        np.stack([tree.states[c] for c in kids]) if kids else np.zeros((0, 3, s))
    )
    z0 = np.concatenate([tree.states[node].ravel(), durations])
    return DeformationUnit(
        node=node,
        x_parent=tree.states[parent].copy(),
        x_children=x_children.copy(),
        child_ids=kids,
        weights=weights,
        samples=np.array([sample_count(T, penalty.spacing) for T in durations], dtype=np.int64),
        z0=z0,
    )


@numba.njit(cache=True)
def _unit_eval(
    z, s, rho, xp, xc, weights, offsets, basis, pen_w, limits, clearance,
    fvals, forigin, fres, m1, mexp, kj, want_grad,
):
    n_edges = weights.shape[0]
    nx = 3 * s
    total = 0.0
    grad = np.zeros(z.shape[0])
    d = np.empty((3, 2 * s))
    gd = np.empty((3, 2 * s))
    mt = np.empty((2 * s, 2 * s))
    mtd = np.empty((2 * s, 2 * s))
    pw = np.empty((s + 1, 2 * s))
    dpw = np.empty((s + 1, 2 * s))
    v = np.empty(3)
    dv = np.empty(3)
    dpen = np.empty(3)
    for e in range(n_edges):
        T = z[nx + e]
        for x in range(3):
            for q in range(s):
                if e == 0:
                    d[x, q] = xp[x, q]
                    d[x, s + q] = z[x * s + q]
                else:
                    d[x, q] = z[x * s + q]
                    d[x, s + q] = xc[e - 1, x, q]
        gd[:, :] = 0.0
        # smooth time-energy part
        for a in range(2 * s):
            for b in range(2 * s):
                ex = mexp[a, b]
                mt[a, b] = m1[a, b] * T ** ex
                mtd[a, b] = m1[a, b] * ex * T ** (ex - 1)
        js = rho * T
        gT = rho
        for x in range(3):
            for a in range(2 * s):
                acc = 0.0
                accT = 0.0
                for b in range(2 * s):
                    acc += mt[a, b] * d[x, b]
                    accT += mtd[a, b] * d[x, b]
                js += 0.5 * d[x, a] * acc
                gd[x, a] += acc
                gT += 0.5 * d[x, a] * accT
        # trapezoidal penalty part
        k = offsets[e + 1] - offsets[e] - 1
        h = T / k
        psum = 0.0
        pT = 0.0
        for q in range(s + 1):
            for b in range(2 * s):
                ex = kj[b] - q
                pw[q, b] = T ** ex
                dpw[q, b] = ex * T ** (ex - 1)
        for j in range(k + 1):
            row = offsets[e] + j
            omega = 0.5 if (j == 0 or j == k) else 1.0
            for q in range(s + 1):
                wq = pen_w[q]
                if wq == 0.0:
                    continue
                for x in range(3):
                    acc = 0.0
                    accT = 0.0
                    for b in range(2 * s):
                        c = basis[row, q, b] * d[x, b]
                        acc += c * pw[q, b]
                        accT += c * dpw[q, b]
                    v[x] = acc
                    dv[x] = accT
                if q == 0:
                    val, gx, gy, gz, _ = trilinear_point(fvals, forigin, fres, v[0], v[1], v[2])
                    viol = clearance - val
                    if viol <= 0.0:
                        continue
                    psum += omega * wq * viol
                    dpen[0] = -wq * gx
                    dpen[1] = -wq * gy
                    dpen[2] = -wq * gz
                else:
                    m = limits[q - 1]
                    viol = v[0] * v[0] + v[1] * v[1] + v[2] * v[2] - m * m
                    if viol <= 0.0:
                        continue
                    psum += omega * wq * viol
                    for x in range(3):
                        dpen[x] = 2.0 * wq * v[x]
                if want_grad:
                    for x in range(3):
                        pT += omega * dpen[x] * dv[x]
                        for b in range(2 * s):
                            gd[x, b] += h * omega * dpen[x] * basis[row, q, b] * pw[q, b]
        w = weights[e]
        total += w * (js + h * psum)
        if want_grad:
            grad[nx + e] += w * (gT + psum / k + h * pT)
            for x in range(3):
                for q in range(s):
                    if e == 0:
                        grad[x * s + q] += w * gd[x, s + q]
                    else:
                        grad[x * s + q] += w * gd[x, q]
    return total, grad


class UnitProblem:
    """Objective and gradient of one deformation unit over its decision vector."""

    def __init__(self, unit: DeformationUnit, env: Environment, settings: DeformSettings):
        s = unit.s
        tb = tables(s)
        blocks = [_sample_basis(s, int(k)) for k in unit.samples]
        self.unit = unit
        self.basis = np.ascontiguousarray(np.concatenate(blocks))
        self.offsets = np.concatenate([[0], np.cumsum([b.shape[0] for b in blocks])]).astype(np.int64)
        pw = np.zeros(s + 1)
        given = np.asarray(settings.penalty.weights, dtype=float)[: s + 1]
        pw[: given.size] = given
        lim = np.full(s, np.inf)
        given_lim = np.asarray(settings.limits, dtype=float)[:s]
        lim[: given_lim.size] = given_lim * settings.penalty.limit_scale
        self.pen_w = pw
        self.limits = lim
        self.rho = float(settings.rho)
        self.clearance = float(settings.penalty.clearance)
        self.field = env.field
        self.tb = tb
        self.xc = np.ascontiguousarray(unit.x_children.reshape(-1, 3, s))
        self.xp = np.ascontiguousarray(unit.x_parent)

    def __call__(self, z: np.ndarray, want_grad: bool = True) -> tuple[float, np.ndarray]:
        z = np.ascontiguousarray(z, dtype=float)
        if np.any(z[3 * self.unit.s :] < T_MIN):
            raise DomainError(f"unit duration below {T_MIN}")
        return _unit_eval(
            z, self.unit.s, self.rho, self.xp, self.xc, self.unit.weights, self.offsets,
            self.basis, self.pen_w, self.limits, self.clearance, self.field.values,
            self.field.origin, float(self.field.resolution), self.tb.m1, self.tb.m_exp,
            self.tb.deriv_order, want_grad,
        )


def unit_objective(unit: DeformationUnit, env: Environment, settings: DeformSettings, z=None) -> float:
    z = unit.z0 if z is None else z
    return float(UnitProblem(unit, env, settings)(z, want_grad=False)[0])


def unit_gradient(unit: DeformationUnit, env: Environment, settings: DeformSettings, z=None) -> np.ndarray:
    z = unit.z0 if z is None else z
    return UnitProblem(unit, env, settings)(z)[1]


def deformable(tree, node: int) -> bool:
    return node != tree.start and tree.attached(node) and bool(tree.children[node])


def deform_unit(tree, node: int, env: Environment, settings: DeformSettings, mode: Mode) -> bool:
    """Optimize one unit in place; returns True when the deformation was committed."""
    if not deformable(tree, node):
        return False
    unit = build_unit(tree, node, settings.penalty)
    problem = UnitProblem(unit, env, settings)
    s = unit.s
    nx = 3 * s
    if Mode(mode) is Mode.SPATIOTEMPORAL:
        evaluate = problem
        x0 = unit.z0
        lower = unit.lower_bounds()
    else:
        fixed = unit.z0[nx:]

        def evaluate(x):
            f, g = problem(np.concatenate([x, fixed]))
            return f, g[:nx]

        x0 = unit.z0[:nx]
        lower = None
    try:
        result = nsopt.minimize(
            nsopt.NsoptProblem(
                evaluate, x0, lower, max_iter=settings.max_iter, max_eval=settings.max_eval,
                eps=settings.eps, memory=settings.memory,
            )
        )
    except (DomainError, FloatingPointError, np.linalg.LinAlgError):
        return False
    if not np.isfinite(result.f) or not result.f < result.f0 - settings.min_decrease:
        return False
    z = result.x if result.x.size == unit.z0.size else np.concatenate([result.x, unit.z0[nx:]])
    x_new, durations = unit.split(z)
    edges = [solve_edge(unit.x_parent, x_new, durations[0], settings.rho)]
    for i, _ in enumerate(unit.child_ids):
        edges.append(solve_edge(x_new, unit.x_children[i], durations[i + 1], settings.rho))
    # penalty relief alone must not raise the weighted tree cost
    old_cost = unit.weights @ [tree.edges[i].cost for i in (node, *unit.child_ids)]
    if unit.weights @ [e.cost for e in edges] > old_cost:
        return False
    for e in edges:
        if not check_edge(e, env.occupancy, settings.limits, settings.check_dt):
            return False
    tree.commit_unit(node, x_new, edges[0], dict(zip(unit.child_ids, edges[1:])))
    return True


def select_units(tree, node: int, variant: Variant) -> list[int]:
    """Nodes to deform, in execution order, after a sample was attached under ``node``."""
    variant = Variant(variant)
    if variant is Variant.OFF:
        return []
    if variant is Variant.NODE:
        return [node] if deformable(tree, node) else []
    if variant is Variant.TRUNK:
        chain = []
        cur = node
        while cur != tree.start and cur >= 0:
            if deformable(tree, cur):
                chain.append(cur)
            cur = tree.parent[cur]
        return chain[::-1]
    roots = [node] if variant is Variant.BRANCH else list(tree.children[tree.start])
    out = []
    queue = deque(roots)
    while queue:
        cur = queue.popleft()
        if deformable(tree, cur):
            out.append(cur)
        queue.extend(tree.children[cur])
    return out


def deform_in_order(tree, units: list[int], env: Environment, settings: DeformSettings, mode: Mode) -> int:
    accepted = 0
    for node in units:
        if deformable(tree, node) and deform_unit(tree, node, env, settings, mode):
            accepted += 1
    return accepted
