"""Trajectory tree and the sampling loop that grows, rewires and deforms it.

Node 0 is the start.  Node 1 is the goal: it is a regular tree node once some
edge reaches it, always a leaf, and never offered as a parent.  Until then it
is detached (parent -1).
"""

from __future__ import annotations

import heapq
import math
import time
from dataclasses import dataclass, field, replace
from enum import Enum

import numba
import numpy as np

from .deform import DeformSettings, Mode, PenaltyConfig, Variant, deform_in_order, select_units
from .env_field import _NO_FIELD, Environment, OccupancyGrid, _check_kernel, check_edge
from .poly_edge import (
    _BISECT_ITERS,
    T_MAX,
    T_MIN,
    PolyEdge,
    _duration_grid,
    _minimize_terms,
    _pair_terms,
    optimal_duration_batch,
    solve_edge,
    tables,
)

START = 0
GOAL = 1
BOUNDARY_TOL = 1e-6


class Scheme(str, Enum):
    KRRT = "krrt"
    KRRTSTAR = "krrtstar"
    KRRTSHARP = "krrtsharp"


class SamplingError(RuntimeError):
    pass


class ConsistencyError(ValueError):
    pass


@dataclass
class PlannerConfig:
    rho: float = 100.0
    s: int = 3
    limits: tuple[float, ...] = (5.0, 7.0, 15.0)
    near_radius: float | None = None  # cost units; None derives it from the map
    near_factor: float = 0.15
    seed: int = 0
    time_budget: float = 3.0
    node_budget: int | None = None
    scheme: Scheme = Scheme.KRRTSHARP
    variant: Variant = Variant.OFF
    mode: Mode = Mode.SPATIOTEMPORAL
    goal_bias: float = 0.05
    goal_region: float = 1.0
    check_dt: float = 0.02
    penalty: PenaltyConfig = field(default_factory=PenaltyConfig)
    deform_iter: int = 50
    deform_eval: int = 200
    nsopt_eps: float = 1e-5
    nsopt_memory: int = 7
    sample_tries: int = 10_000
    virtual_tick: float | None = None  # seconds charged per iteration instead of wall time

    def __post_init__(self) -> None:
        self.scheme = Scheme(self.scheme)
        self.variant = Variant(self.variant)
        self.mode = Mode(self.mode)
        self.limits = tuple(float(m) for m in self.limits)
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if len(self.limits) < self.s or any(m <= 0 for m in self.limits):
            raise ValueError(f"need {self.s} positive derivative limits, got {self.limits}")

    def deform_settings(self) -> DeformSettings:
        return DeformSettings(
            rho=self.rho,
            limits=self.limits[: self.s],
            penalty=self.penalty,
            check_dt=self.check_dt,
            max_iter=self.deform_iter,
            max_eval=self.deform_eval,
            eps=self.nsopt_eps,
            memory=self.nsopt_memory,
        )

    def radius_for(self, env: Environment) -> float:
        if self.near_radius is not None:
            return float(self.near_radius)
        return self.rho * env.diagonal / self.limits[0] * self.near_factor


@dataclass(frozen=True)
class TreeNode:
    """Read-only snapshot of one node."""

    id: int
    state: np.ndarray
    parent: int
    duration: float
    edge: PolyEdge | None
    children: tuple[int, ...]
    g: float


@dataclass
class Solution:
    cost: float
    states: list[np.ndarray]
    edges: list[PolyEdge]
    wall_time: float
    node_count: int


def reach_bound(radius: float, rho: float, limits, s: int) -> float:
    """Largest displacement of any edge costing at most ``radius`` between two states within limits.

    Splits the edge at T/2 and expands each half from its own endpoint: the
    derivative limits bound the polynomial part and Cauchy-Schwarz bounds the
    jerk remainder by the control energy r - rho*T, with T <= r/rho.
    """
    return float(_reach(float(radius), float(rho), np.asarray(limits, dtype=float), int(s)))


class TrajTree:
    def __init__(self, start: np.ndarray, goal: np.ndarray, rho: float = 100.0):
        start = np.asarray(start, dtype=float)
        goal = np.asarray(goal, dtype=float)
        self.s = start.shape[1]
        self.rho = rho
        self.start = START
        self.goal = GOAL
        self.states = np.zeros((64, 3, self.s))
        self.g = np.full(64, np.inf)
        self.pos = np.zeros((64, 3))  # contiguous copy of node positions for radius scans
        self.parent: list[int] = []
        self.children: list[list[int]] = []
        self.edges: list[PolyEdge | None] = []
        self.n_desc: list[int] = []
        self.best: Solution | None = None
        self._add(start, -1, None, 0.0)
        self._add(goal, -1, None, np.inf)

    # -- storage ---------------------------------------------------------
    def _add(self, state, parent, edge, g) -> int:
        i = len(self.parent)
        if i >= self.states.shape[0]:
            grow = self.states.shape[0]
            self.states = np.concatenate([self.states, np.zeros((grow, 3, self.s))])
            self.g = np.concatenate([self.g, np.full(grow, np.inf)])
            self.pos = np.concatenate([self.pos, np.zeros((grow, 3))])
        self.states[i] = state
        self.pos[i] = state[:, 0]
        self.g[i] = g
        self.parent.append(parent)
        self.children.append([])
        self.edges.append(edge)
        self.n_desc.append(0)
        return i

    def __len__(self) -> int:
        return len(self.parent)

    @property
    def node_count(self) -> int:
        """Attached nodes other than the goal."""
        return len(self.parent) - 1

    def attached(self, i: int) -> bool:
        return i == START or self.parent[i] >= 0

    def node(self, i: int) -> TreeNode:
        e = self.edges[i]
        return TreeNode(
            id=i,
            state=self.states[i].copy(),
            parent=self.parent[i],
            duration=e.duration if e is not None else 0.0,
            edge=e,
            children=tuple(self.children[i]),
            g=float(self.g[i]),
        )

    def within(self, center, reach: float) -> np.ndarray:
        """Ids of all nodes (goal included) whose position lies within ``reach`` of ``center``."""
        n = len(self.parent)
        if math.isinf(reach):
            return np.arange(n, dtype=np.int64)
        d2 = ((self.pos[:n] - np.asarray(center)) ** 2).sum(axis=1)
        return np.flatnonzero(d2 <= reach * reach)

    def ancestors(self, i: int) -> list[int]:
        out = []
        cur = self.parent[i]
        while cur >= 0:
            out.append(cur)
            cur = self.parent[cur]
        return out

    def subtree(self, i: int) -> list[int]:
        out = [i]
        k = 0
        while k < len(out):
            out.extend(self.children[out[k]])
            k += 1
        return out

    def path_to(self, i: int) -> list[int]:
        return [i, *self.ancestors(i)][::-1]

    def descendant_weight(self, i: int) -> int:
        return 1 + self.n_desc[i]

    # -- mutation --------------------------------------------------------
    def _check_boundary(self, edge: PolyEdge, head: np.ndarray, tail: np.ndarray) -> None:
        for want, got in ((head, edge.head()), (tail, edge.tail())):
            if np.max(np.abs(want - got) / (1.0 + np.abs(want))) > BOUNDARY_TOL:
                raise ConsistencyError("edge does not interpolate its endpoint states")

    def insert(self, parent: int, x_new: np.ndarray, edge: PolyEdge) -> int:
        if not (0 <= parent < len(self.parent)) or not self.attached(parent) or parent == GOAL:
            raise ConsistencyError(f"invalid parent {parent}")
        x_new = np.asarray(x_new, dtype=float)
        self._check_boundary(edge, self.states[parent], x_new)
        i = self._add(x_new, parent, edge, self.g[parent] + edge.cost)
        self.children[parent].append(i)
        for a in self.ancestors(i):
            self.n_desc[a] += 1
        return i

    def _shift_subtree(self, i: int, delta: float) -> None:
        if delta == 0.0:
            return
        for j in self.subtree(i):
            self.g[j] += delta

    def reparent(self, i: int, new_parent: int, edge: PolyEdge) -> None:
        """Attach ``i`` (and its subtree) under ``new_parent`` through ``edge``."""
        if i == START or new_parent == GOAL:
            raise ConsistencyError("cannot reparent the start or attach below the goal")
        if new_parent in self.subtree(i):
            raise ConsistencyError("reparenting would create a cycle")
        self._check_boundary(edge, self.states[new_parent], self.states[i])
        size = 1 + self.n_desc[i]
        old = self.parent[i]
        if old >= 0:
            self.children[old].remove(i)
            for a in [old, *self.ancestors(old)]:
                self.n_desc[a] -= size
        self.parent[i] = new_parent
        self.children[new_parent].append(i)
        for a in [new_parent, *self.ancestors(new_parent)]:
            self.n_desc[a] += size
        self.edges[i] = edge
        new_g = self.g[new_parent] + edge.cost
        if old < 0:
            for j in self.subtree(i):
                self.g[j] = np.inf
            self.g[i] = new_g
        else:
            self._shift_subtree(i, new_g - self.g[i])

    def commit_unit(self, node: int, x_new: np.ndarray, parent_edge: PolyEdge, child_edges: dict[int, PolyEdge]) -> None:
        """Write a deformed node state and its rebuilt edges, refreshing subtree costs."""
        self.states[node] = x_new
        self.edges[node] = parent_edge
        self._shift_subtree(node, self.g[self.parent[node]] + parent_edge.cost - self.g[node])
        for c, e in child_edges.items():
            self.edges[c] = e
            self._shift_subtree(c, self.g[node] + e.cost - self.g[c])
        self.pos[node] = x_new[:, 0]

    def update_best(self, wall_time: float = 0.0) -> bool:
        """Snapshot the start-goal path when it beats the best one seen so far."""
        if not self.attached(GOAL):
            return False
        cost = float(self.g[GOAL])
        if self.best is not None and not cost < self.best.cost:
            return False
        path = self.path_to(GOAL)
        self.best = Solution(
            cost=cost,
            states=[self.states[i].copy() for i in path],
            edges=[self.edges[i] for i in path[1:]],
            wall_time=wall_time,
            node_count=self.node_count,
        )
        return True

    # -- diagnostics -----------------------------------------------------
    def weighted_cost(self) -> float:
        """Sum over attached non-start nodes of d_i * cost of the edge into i."""
        return float(
            sum(
                self.descendant_weight(i) * self.edges[i].cost
                for i in range(len(self.parent))
                if i != START and self.attached(i)
            )
        )

    def check_invariants(self, tol: float = 1e-6) -> None:
        """Raise ConsistencyError on any broken structural or cost invariant."""
        n = len(self.parent)
        for i in range(n):
            if not self.attached(i):
                continue
            for c in self.children[i]:
                if self.parent[c] != i:
                    raise ConsistencyError(f"child link {i}->{c} not mirrored")
            if i == START:
                continue
            p = self.parent[i]
            if i not in self.children[p]:
                raise ConsistencyError(f"parent link {p}->{i} not mirrored")
            if i in self.ancestors(i):
                raise ConsistencyError(f"cycle through {i}")
            expect = self.g[p] + self.edges[i].cost
            if abs(self.g[i] - expect) > tol * max(1.0, abs(expect)):
                raise ConsistencyError(f"g of {i} is {self.g[i]}, path sum {expect}")
            self._check_boundary(self.edges[i], self.states[p], self.states[i])
        if self.children[GOAL]:
            raise ConsistencyError("goal has children")
        for i in range(n):
            if self.attached(i) and self.n_desc[i] != len(self.subtree(i)) - 1:
                raise ConsistencyError(f"descendant count of {i} is stale")


# -- growth operations ----------------------------------------------------


def sample_state(env: Environment, rng: np.random.Generator, config: PlannerConfig, goal: np.ndarray | None = None) -> np.ndarray:
    """Free position (uniform, or near the goal with the goal bias), velocity uniform in the speed ball."""
    s = config.s
    lo, hi = env.lower, env.upper
    planar = env.planar
    near_goal = goal is not None and rng.random() < config.goal_bias
    for _ in range(config.sample_tries):
        if near_goal:
            offset = rng.uniform(-1.0, 1.0, 3) * config.goal_region
            if planar:
                offset[2] = 0.0
            if offset @ offset > config.goal_region**2:
                continue
            p = goal[:, 0] + offset
        else:
            p = rng.uniform(lo, hi)
        if env.is_free(p):
            break
    else:
        raise SamplingError(f"no free position after {config.sample_tries} tries")
    v = rng.standard_normal(3)
    if planar:
        v[2] = 0.0
    dim = 2 if planar else 3
    v *= config.limits[0] * rng.random() ** (1.0 / dim) / max(math.sqrt(v @ v), 1e-12)
    x = np.zeros((3, s))
    x[:, 0] = p
    if s > 1:
        x[:, 1] = v
    return x


def _costs(tree: TrajTree, ids: np.ndarray, x: np.ndarray, forward: bool):
    states = tree.states[ids]
    if forward:
        return optimal_duration_batch(x[None], states, tree.rho)[:2]
    return optimal_duration_batch(states, x[None], tree.rho)[:2]


@numba.njit(cache=True)
def _reach(r, rho, limits, s):
    if np.isinf(r):
        return np.inf
    T = r / rho
    h = 0.5 * T
    out = 0.0
    fact = 1.0
    for k in range(1, s):
        fact *= k
        out += 2.0 * limits[k - 1] * h**k / fact
    # energy term peaks where T^(2s-1) (r - rho T) does
    Ts = (2 * s - 1) * r / (2 * s * rho)
    kernel = (0.5 * Ts) ** (2 * s - 1) / ((2 * s - 1) * fact * fact)
    return out + 2.0 * np.sqrt(kernel * (r - rho * Ts))


@numba.njit(cache=True)
def _backward_search(pos, states, n, x, radius, rho, limits, m1, mexp, grid, n_bisect, out_T, out_c):
    """Price nodes nearest-first until the next one is provably too far to matter."""
    s = x.shape[1]
    a = np.zeros(2 * s - 1)
    d = np.empty(2 * s)
    dist = np.empty(n)
    for i in range(n):
        out_T[i] = np.nan
        out_c[i] = np.inf
        d2 = 0.0
        for k in range(3):
            dk = pos[i, k] - x[k, 0]
            d2 += dk * dk
        dist[i] = np.sqrt(d2)
    best = np.inf
    bound = _reach(radius, rho, limits, s)
    for i in np.argsort(dist, kind="mergesort"):
        if i == GOAL:
            continue
        if dist[i] > bound and best < np.inf:
            break
        _pair_terms(states[i], x, m1, mexp, a, d)
        out_T[i], out_c[i], _ = _minimize_terms(a, rho, grid, n_bisect)
        if out_c[i] < best:
            best = out_c[i]
            bound = _reach(max(radius, best), rho, limits, s)


def backward_near(tree: TrajTree, x_new: np.ndarray, radius: float, limits=None):
    """Nodes whose optimal edge into ``x_new`` costs at most ``radius``.

    Returns ``(ids, durations, costs)``.  Falls back to the single cheapest
    node when none qualifies.  Candidates are priced nearest-first: a node
    farther than ``reach_bound(r)`` costs more than ``r``, so pricing stops
    once the next node lies beyond the reach of max(radius, best cost).
    """
    limits = np.asarray(limits if limits is not None else (np.inf,) * tree.s, dtype=float)
    n = len(tree)
    T = np.empty(n)
    c = np.empty(n)
    tb = tables(tree.s)
    radius = float(radius)
    _backward_search(
        tree.pos, tree.states, n, np.ascontiguousarray(x_new, dtype=float), radius, float(tree.rho),
        limits, tb.m1, tb.m_exp, _duration_grid(T_MIN, T_MAX), _BISECT_ITERS, T, c,
    )
    keep = np.flatnonzero((c <= radius) & np.isfinite(c))
    if keep.size:
        return keep, T[keep], c[keep]
    j = int(np.argmin(c))  # first index among ties
    return np.array([j]), T[j : j + 1], c[j : j + 1]


def forward_near(tree: TrajTree, node: int, radius: float, limits=None):
    """Attached non-start nodes (and the goal) reachable from ``node`` within ``radius``."""
    limits = limits if limits is not None else (np.inf,) * tree.s
    x = tree.states[node]
    ids = tree.within(x[:, 0], reach_bound(radius, tree.rho, limits, tree.s))
    ids = ids[(ids != START) & (ids != node)]
    if ids.size == 0:
        return ids, np.zeros(0), np.zeros(0)
    T, c = _costs(tree, ids, x, forward=True)
    keep = c <= radius
    return ids[keep], T[keep], c[keep]


@numba.njit(cache=True)
def _first_feasible(states, ids, order, T, x, ab1, ab_exp, cells, origin, res, limits, dt, no_field, out):
    """Scan candidates in ``order``; return the first whose edge passes the hard check, or -1."""
    s = x.shape[1]
    n2 = 2 * s
    ab = np.empty((n2, n2))
    d = np.empty(n2)
    for j in order:
        i = ids[j]
        for p in range(n2):
            for q in range(n2):
                ab[p, q] = ab1[p, q] * T[j] ** ab_exp[p, q]
        for k in range(3):
            for q in range(s):
                d[q] = states[i, k, q]
                d[s + q] = x[k, q]
            for p in range(n2):
                acc = 0.0
                for q in range(n2):
                    acc += ab[p, q] * d[q]
                out[k, p] = acc
        code, _ = _check_kernel(out, T[j], dt, cells, origin, res, limits, no_field, 0.0)
        if code == 0:
            return j
    return -1


def choose_parent(tree: TrajTree, near, x_new: np.ndarray, env: Environment, config: PlannerConfig, by_cost_from_start: bool = True):
    """Cheapest feasible candidate (by g + edge cost, or edge cost alone); ``None`` if all fail."""
    ids, T, c = near
    keys = tree.g[ids] + c if by_cost_from_start else c
    order = np.lexsort((ids, keys))
    if not by_cost_from_start:
        order = order[:1]
    tb = tables(config.s)
    grid = env.occupancy
    coeffs = np.empty((3, 2 * config.s))
    j = _first_feasible(
        tree.states, ids, order, T, np.ascontiguousarray(x_new, dtype=float), tb.ab1, tb.ab_exp,
        grid.cells, grid.origin, float(grid.resolution), np.asarray(config.limits[: config.s], dtype=float),
        float(config.check_dt), _NO_FIELD, coeffs,
    )
    if j < 0:
        return None
    return int(ids[j]), PolyEdge(coeffs=coeffs, duration=float(T[j]), cost=float(c[j]))


def try_connect_goal(tree: TrajTree, node: int, env: Environment, config: PlannerConfig) -> bool:
    """Route the goal through ``node`` when that is feasible and cheaper."""
    T, c, _ = optimal_duration_batch(tree.states[node][None], tree.states[GOAL][None], config.rho)
    if not tree.g[node] + c[0] < tree.g[GOAL]:
        return False
    edge = solve_edge(tree.states[node], tree.states[GOAL], T[0], config.rho)
    if not check_edge(edge, env.occupancy, config.limits[: config.s], config.check_dt):
        return False
    tree.reparent(GOAL, node, edge)
    return True


def rewire_cascade(tree: TrajTree, node: int, env: Environment, config: PlannerConfig, radius: float, cascade: bool = True) -> int:
    """Re-parent neighbours through cheaper paths, propagating improvements in cost order."""
    limits = config.limits[: config.s]
    heap = [(float(tree.g[node]), node)]
    count = 0
    while heap:
        gu, u = heapq.heappop(heap)
        if gu > tree.g[u]:
            continue
        ids, T, c = forward_near(tree, u, radius, limits)
        gain = tree.g[ids] - (tree.g[u] + c)
        for j in np.lexsort((ids, -gain)):
            if not gain[j] > 1e-9:
                break
            m = int(ids[j])
            edge = solve_edge(tree.states[u], tree.states[m], T[j], config.rho)
            if not check_edge(edge, env.occupancy, limits, config.check_dt):
                continue
            tree.reparent(m, u, edge)
            count += 1
            if cascade and m != GOAL and tree.children[m]:
                heapq.heappush(heap, (float(tree.g[m]), m))
        if not cascade:
            break
    return count


def descendant_weight(tree: TrajTree, node: int) -> int:
    return tree.descendant_weight(node)


# -- the planning loop ------------------------------------------------------


@dataclass
class RunReport:
    best: Solution | None
    log: list[tuple[float, float, int]]  # (wall time s, best cost, node count)
    node_count: int
    iterations: int
    first_solution_time: float | None
    tree: TrajTree | None = None
    deform_accepted: int = 0
    deform_tried: int = 0

    @property
    def final_cost(self) -> float:
        return self.best.cost if self.best is not None else math.inf


_WARM: set[tuple[int, Variant, Mode]] = set()


def warm_up(config: PlannerConfig) -> None:
    """Run a tiny plan once per process so JIT compilation stays out of timed runs."""
    key = (config.s, config.variant, config.mode)
    if key in _WARM:
        return
    _WARM.add(key)
    env = Environment(OccupancyGrid(np.zeros((12, 12, 6), dtype=bool), 1.0), inflation=0.2)
    start = np.zeros((3, config.s))
    goal = np.zeros((3, config.s))
    start[:, 0] = (1.5, 1.5, 3.0)
    goal[:, 0] = (10.5, 10.5, 3.0)
    small = replace(config, time_budget=None, node_budget=40, virtual_tick=1.0, near_radius=None, seed=0)
    plan(small, env, start, goal)


def plan(
    config: PlannerConfig,
    env: Environment,
    start: np.ndarray,
    goal: np.ndarray,
    keep_tree: bool = False,
    max_iterations: int | None = None,
) -> RunReport:
    """Grow a tree from ``start`` until the wall-clock or node budget runs out."""
    start = np.asarray(start, dtype=float)
    goal = np.asarray(goal, dtype=float)
    if not env.is_free(start[:, 0]) or not env.is_free(goal[:, 0]):
        raise ValueError("start and goal must be collision-free")
    tables(config.s)  # build the closed-form matrices before the clock starts
    warm_up(config)
    rng = np.random.default_rng(config.seed)
    radius = config.radius_for(env)
    limits = config.limits[: config.s]
    tree = TrajTree(start, goal, config.rho)
    settings = config.deform_settings()
    log: list[tuple[float, float, int]] = []
    if max_iterations is None and config.node_budget is not None:
        max_iterations = 200 * config.node_budget
    first = None
    iterations = 0
    accepted = tried = 0
    if config.virtual_tick is not None:
        tick = float(config.virtual_tick)

        def clock() -> float:
            return iterations * tick

    else:
        clock = time.perf_counter
    t0 = clock()

    def note(now: float) -> None:
        nonlocal first
        if tree.update_best(now):
            log.append((now, tree.best.cost, tree.node_count))
            if first is None:
                first = now

    while True:
        now = clock() - t0
        if config.time_budget is not None and now >= config.time_budget:
            break
        if config.node_budget is not None and tree.node_count >= config.node_budget:
            break
        if max_iterations is not None and iterations >= max_iterations:
            break
        iterations += 1
        x_new = sample_state(env, rng, config, goal)
        near = backward_near(tree, x_new, radius, limits)
        choice = choose_parent(
            tree, near, x_new, env, config, by_cost_from_start=config.scheme is not Scheme.KRRT
        )
        if choice is None:
            continue
        parent, edge = choice
        new = tree.insert(parent, x_new, edge)
        if try_connect_goal(tree, new, env, config):
            note(clock() - t0)
        if config.variant is not Variant.OFF and tree.best is not None:
            units = select_units(tree, parent, config.variant)
            tried += len(units)
            accepted += deform_in_order(tree, units, env, settings, config.mode)
            note(clock() - t0)
        if config.scheme is not Scheme.KRRT:
            rewire_cascade(tree, new, env, config, radius, cascade=config.scheme is Scheme.KRRTSHARP)
            note(clock() - t0)

    return RunReport(
        best=tree.best,
        log=log,
        node_count=tree.node_count,
        iterations=iterations,
        first_solution_time=first,
        tree=tree if keep_tree else None,
        deform_accepted=accepted,
        deform_tried=tried,
    )
