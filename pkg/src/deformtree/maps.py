"""Seeded forest and cave map generators."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .env_field import OccupancyGrid, inflate


class MapGenerationError(RuntimeError):
    pass


@dataclass
class MapSpec:
    kind: str = "forest"  # "forest" or "cave"
    size: tuple[float, float, float] = (50.0, 30.0, 5.0)
    resolution: float = 0.1
    density: float = 0.02  # forest: trees per square metre; cave: walls per metre of length
    radius_range: tuple[float, float] = (0.3, 0.8)
    wall_thickness: float = 0.4
    gap_width: tuple[float, float] = (2.0, 5.0)
    keep_free: list[tuple[float, float, float]] = field(default_factory=list)
    keep_free_radius: float = 1.5
    inflation: float = 0.2
    connectivity_cell: float = 0.5


def _cell_centres(dims, resolution):
    return [(np.arange(n) + 0.5) * resolution for n in dims]


def _forest(spec: MapSpec, rng: np.random.Generator, cells: np.ndarray) -> None:
    sx, sy, _ = spec.size
    xs, ys, _ = _cell_centres(cells.shape, spec.resolution)
    n_trees = int(round(spec.density * sx * sy))
    for _ in range(n_trees):
        cx, cy = rng.uniform(0, sx), rng.uniform(0, sy)
        r = rng.uniform(*spec.radius_range)
        ix = np.abs(xs - cx) <= r
        iy = np.abs(ys - cy) <= r
        sub = (xs[ix, None] - cx) ** 2 + (ys[None, iy] - cy) ** 2 <= r * r
        cells[np.ix_(ix, iy)] |= sub[:, :, None]


def _cave(spec: MapSpec, rng: np.random.Generator, cells: np.ndarray) -> None:
    """Walls across the long axis, each with one or two gaps, plus scattered pillars."""
    sx, sy, _ = spec.size
    xs, ys, _ = _cell_centres(cells.shape, spec.resolution)
    n_walls = int(round(spec.density * sx))
    if n_walls == 0:
        return
    positions = np.sort(rng.uniform(0.15 * sx, 0.85 * sx, n_walls))
    half = spec.wall_thickness / 2
    for wx in positions:
        in_wall = np.abs(xs - wx) <= half
        blocked = np.ones(len(ys), dtype=bool)
        for _ in range(int(rng.integers(1, 3))):
            width = rng.uniform(*spec.gap_width)
            gy = rng.uniform(width / 2, sy - width / 2)
            blocked &= np.abs(ys - gy) > width / 2
        cells[np.ix_(in_wall, blocked)] = True
    for _ in range(n_walls * 3):
        cx, cy = rng.uniform(0, sx), rng.uniform(0, sy)
        r = rng.uniform(*spec.radius_range)
        ix = np.abs(xs - cx) <= r
        iy = np.abs(ys - cy) <= r
        sub = (xs[ix, None] - cx) ** 2 + (ys[None, iy] - cy) ** 2 <= r * r
        cells[np.ix_(ix, iy)] |= sub[:, :, None]


def coarse_connected(grid: OccupancyGrid, a, b, cell: float) -> bool:
    """BFS over coarse blocks; a block is passable only if all of its fine cells are free."""
    f = max(1, int(round(cell / grid.resolution)))
    nx, ny, nz = grid.dims
    pad = [(0, (-n) % f) for n in (nx, ny, nz)]
    occ = np.pad(grid.cells, pad, constant_values=True) if any(p[1] for p in pad) else grid.cells
    cx, cy, cz = (occ.shape[0] // f, occ.shape[1] // f, occ.shape[2] // f)
    blocked = occ.reshape(cx, f, cy, f, cz, f).any(axis=(1, 3, 5))
    if nz < f:
        blocked = grid.cells.reshape(nx, ny, nz)  # thin maps: fall back to fine BFS
        f = 1
        cx, cy, cz = nx, ny, nz
    src = tuple(int(v) for v in np.clip(grid.cell_index(a) // f, 0, [cx - 1, cy - 1, cz - 1]))
    dst = tuple(int(v) for v in np.clip(grid.cell_index(b) // f, 0, [cx - 1, cy - 1, cz - 1]))
    if blocked[src] or blocked[dst]:
        return False
    seen = np.zeros_like(blocked)
    seen[src] = True
    queue = deque([src])
    steps = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
    while queue:
        cur = queue.popleft()
        if cur == dst:
            return True
        for d in steps:
            nxt = (cur[0] + d[0], cur[1] + d[1], cur[2] + d[2])
            if 0 <= nxt[0] < cx and 0 <= nxt[1] < cy and 0 <= nxt[2] < cz:
                if not blocked[nxt] and not seen[nxt]:
                    seen[nxt] = True
                    queue.append(nxt)
    return False


def generate_map(spec: MapSpec, seed: int) -> OccupancyGrid:
    """Deterministic map for ``seed``; keep-free spheres stay clear and must be mutually reachable."""
    dims = tuple(max(1, int(round(L / spec.resolution))) for L in spec.size)
    cells = np.zeros(dims, dtype=bool)
    rng = np.random.default_rng(seed)
    if spec.kind == "forest":
        _forest(spec, rng, cells)
    elif spec.kind == "cave":
        _cave(spec, rng, cells)
    else:
        raise ValueError(f"unknown map kind {spec.kind!r}")
    xs, ys, zs = _cell_centres(dims, spec.resolution)
    for p in spec.keep_free:
        d2 = (xs[:, None, None] - p[0]) ** 2 + (ys[None, :, None] - p[1]) ** 2 + (zs[None, None, :] - p[2]) ** 2
        cells[d2 <= spec.keep_free_radius**2] = False
    grid = OccupancyGrid(cells, spec.resolution, np.zeros(3))
    if len(spec.keep_free) >= 2:
        inflated = inflate(grid, spec.inflation)
        for a, b in zip(spec.keep_free, spec.keep_free[1:]):
            if not coarse_connected(inflated, np.array(a), np.array(b), spec.connectivity_cell):
                raise MapGenerationError(f"no free path between {a} and {b} for seed {seed}")
    return grid
