from __future__ import annotations

import numpy as np
import pytest

from deformtree.env_field import Environment, OccupancyGrid
from deformtree.poly_edge import optimal_duration_batch, solve_edge
from deformtree.traj_tree import GOAL, START, TrajTree

# criterion number -> (passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def acceptance():
    def record(n: int, ok: bool, detail: str) -> None:
        ACCEPTANCE[n] = (bool(ok), detail)

    return record


def rest(p, s: int = 3) -> np.ndarray:
    x = np.zeros((3, s))
    x[:, 0] = p
    return x


def random_state(rng, lo, hi, s: int = 3, vmax: float = 2.0) -> np.ndarray:
    x = np.zeros((3, s))
    x[:, 0] = rng.uniform(lo, hi)
    if s > 1:
        x[:, 1] = rng.uniform(-vmax, vmax, 3)
    return x


def open_env(size=(10, 10, 4), res: float = 0.5, inflation: float = 0.0) -> Environment:
    dims = tuple(int(round(L / res)) for L in size)
    return Environment(OccupancyGrid(np.zeros(dims, dtype=bool), res), inflation)


def random_tree(rng, n: int, s: int = 3, lo=(0.5, 0.5, 0.5), hi=(9.5, 9.5, 3.5), rho: float = 100.0) -> TrajTree:
    """Tree of ``n`` non-goal nodes, each attached to a random earlier node at the optimal duration."""
    tree = TrajTree(rest(lo, s), rest(hi, s), rho)
    for _ in range(n - 1):
        x = random_state(rng, lo, hi, s)
        attached = [i for i in range(len(tree)) if i != GOAL and tree.attached(i)]
        p = int(rng.choice(attached))
        T, _, _ = optimal_duration_batch(tree.states[p][None], x[None], rho)
        tree.insert(p, x, solve_edge(tree.states[p], x, T[0], rho))
    return tree


__all__ = ["ACCEPTANCE", "GOAL", "START", "open_env", "random_state", "random_tree", "rest"]
