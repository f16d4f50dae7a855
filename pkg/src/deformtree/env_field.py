"""Occupancy grids, batch Euclidean distance fields and edge feasibility checks.

Cell ``(i, j, k)`` covers ``origin + [i, i+1) * resolution`` along x (likewise
y, z); field values live at cell centres.  Grid arrays are indexed
``cells[i, j, k]``; the map file stores them with x varying fastest.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from .poly_edge import PolyEdge

MAP_MAGIC = "KDTMAP1"
DEFAULT_CHECK_DT = 0.02


@dataclass
class OccupancyGrid:
    cells: np.ndarray  # bool, shape (nx, ny, nz)
    resolution: float
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        self.cells = np.asarray(self.cells, dtype=bool)
        self.origin = np.asarray(self.origin, dtype=float)
        if self.cells.ndim != 3:
            raise ValueError(f"occupancy must be 3D, got shape {self.cells.shape}")
        if not self.resolution > 0:
            raise ValueError(f"resolution must be positive, got {self.resolution}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.cells.shape)

    @property
    def upper(self) -> np.ndarray:
        return self.origin + np.array(self.dims) * self.resolution

    def cell_center(self, idx) -> np.ndarray:
        return self.origin + (np.asarray(idx, dtype=float) + 0.5) * self.resolution

    def cell_index(self, p: np.ndarray) -> np.ndarray:
        """Integer cell indices of points (..., 3); may be out of range."""
        return np.floor((np.asarray(p) - self.origin) / self.resolution).astype(np.int64)

    def in_bounds(self, p: np.ndarray) -> np.ndarray:
        p = np.asarray(p)
        return np.all((p >= self.origin) & (p < self.upper), axis=-1)

    def occupied_at(self, p: np.ndarray) -> np.ndarray:
        """Occupancy of the cell containing each point; out of bounds counts as occupied."""
        p = np.atleast_2d(p)
        idx = self.cell_index(p)
        inside = np.all((idx >= 0) & (idx < np.array(self.dims)), axis=-1)
        out = np.ones(len(p), dtype=bool)
        ii = idx[inside]
        out[inside] = self.cells[ii[:, 0], ii[:, 1], ii[:, 2]]
        return out


def save_map(grid: OccupancyGrid, path: str | Path) -> None:
    nx, ny, nz = grid.dims
    ox, oy, oz = (repr(float(v)) for v in grid.origin)
    header = f"{MAP_MAGIC} {nx} {ny} {nz} {float(grid.resolution)!r} {ox} {oy} {oz}\n"
    body = grid.cells.astype(np.uint8).ravel(order="F").tobytes()
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(body)


def load_map(path: str | Path) -> OccupancyGrid:
    raw = Path(path).read_bytes()
    newline = raw.index(b"\n")
    parts = raw[:newline].decode("ascii").split()
    if len(parts) != 8 or parts[0] != MAP_MAGIC:
        raise ValueError(f"{path}: not a {MAP_MAGIC} map")
    nx, ny, nz = (int(v) for v in parts[1:4])
    resolution = float(parts[4])
    origin = np.array([float(v) for v in parts[5:8]])
    body = np.frombuffer(raw[newline + 1 :], dtype=np.uint8)
    if body.size != nx * ny * nz:
        raise ValueError(f"{path}: expected {nx * ny * nz} cells, found {body.size}")
    if np.any(body > 1):
        raise ValueError(f"{path}: cell bytes must be 0 or 1")
    cells = body.reshape((nx, ny, nz), order="F").astype(bool)
    return OccupancyGrid(cells=cells, resolution=resolution, origin=origin)


# -- exact squared EDT (lower envelope of parabolas, one axis at a time) --

_BIG = 1e20


@numba.njit(cache=True)
def _edt_1d(f, out, v, z):
    n = f.shape[0]
    k = 0
    s = 0.0
    v[0] = 0
    z[0] = -np.inf
    z[1] = np.inf
    for q in range(1, n):
        if f[q] >= _BIG:
            continue
        if f[v[0]] >= _BIG:
            v[0] = q
            continue
        while True:
            p = v[k]
            s = ((f[q] + q * q) - (f[p] + p * p)) / (2.0 * q - 2.0 * p)
            if s <= z[k]:
                k -= 1
                if k < 0:
                    break
            else:
                break
        k += 1
        v[k] = q
        z[k] = s if k > 0 else -np.inf
        z[k + 1] = np.inf
    if f[v[0]] >= _BIG:
        for q in range(n):
            out[q] = _BIG
        return
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        d = q - v[k]
        out[q] = d * d + f[v[k]]


@numba.njit(cache=True)
def _edt_axis(a, axis):
    nx, ny, nz = a.shape
    out = np.empty_like(a)
    n = a.shape[axis]
    f = np.empty(n)
    g = np.empty(n)
    v = np.empty(n, dtype=np.int64)
    z = np.empty(n + 1)
    if axis == 0:
        for j in range(ny):
            for k in range(nz):
                for i in range(nx):
                    f[i] = a[i, j, k]
                _edt_1d(f, g, v, z)
                for i in range(nx):
                    out[i, j, k] = g[i]
    elif axis == 1:
        for i in range(nx):
            for k in range(nz):
                for j in range(ny):
                    f[j] = a[i, j, k]
                _edt_1d(f, g, v, z)
                for j in range(ny):
                    out[i, j, k] = g[j]
    else:
        for i in range(nx):
            for j in range(ny):
                for k in range(nz):
                    f[k] = a[i, j, k]
                _edt_1d(f, g, v, z)
                for k in range(nz):
                    out[i, j, k] = g[k]
    return out


def squared_edt(occupied: np.ndarray) -> np.ndarray:
    """Squared Euclidean distance (in cells) from each cell to the nearest occupied one."""
    a = np.where(occupied, 0.0, _BIG)
    for axis in range(3):
        a = _edt_axis(a, axis)
    return a


def inflate(grid: OccupancyGrid, radius: float) -> OccupancyGrid:
    """Occupy every cell whose centre lies within ``radius`` of an occupied centre."""
    if radius < 0:
        raise ValueError(f"inflation radius must be non-negative, got {radius}")
    if radius == 0 or not grid.cells.any():
        return OccupancyGrid(grid.cells.copy(), grid.resolution, grid.origin.copy())
    r_cells = radius / grid.resolution
    sq = squared_edt(grid.cells)
    return OccupancyGrid(sq <= r_cells * r_cells + 1e-9, grid.resolution, grid.origin.copy())


@numba.njit(cache=True)
def trilinear_point(values, origin, resolution, px, py, pz):
    """Trilinear value and gradient at one point; clamps to the grid, returns an out-of-bounds flag."""
    nx, ny, nz = values.shape
    p = (px, py, pz)
    dims = (nx, ny, nz)
    i0 = [0, 0, 0]
    i1 = [0, 0, 0]
    fr = [0.0, 0.0, 0.0]
    flat = [1.0, 1.0, 1.0]  # 0 where the interpolant is held constant along an axis
    clamped = False
    for a in range(3):
        hi = dims[a] - 1
        if p[a] < origin[a] or p[a] > origin[a] + dims[a] * resolution:
            clamped = True
        if hi == 0:
            flat[a] = 0.0
            continue
        u = (p[a] - origin[a]) / resolution - 0.5
        if u < 0.0:
            u = 0.0
            flat[a] = 0.0
        elif u > hi:
            u = float(hi)
            flat[a] = 0.0
        b = int(np.floor(u))
        if b >= hi:
            b = hi - 1
        i0[a] = b
        i1[a] = b + 1
        fr[a] = u - b
    c000 = values[i0[0], i0[1], i0[2]]
    c100 = values[i1[0], i0[1], i0[2]]
    c010 = values[i0[0], i1[1], i0[2]]
    c110 = values[i1[0], i1[1], i0[2]]
    c001 = values[i0[0], i0[1], i1[2]]
    c101 = values[i1[0], i0[1], i1[2]]
    c011 = values[i0[0], i1[1], i1[2]]
    c111 = values[i1[0], i1[1], i1[2]]
    fx, fy, fz = fr[0], fr[1], fr[2]
    c00 = c000 * (1 - fx) + c100 * fx
    c10 = c010 * (1 - fx) + c110 * fx
    c01 = c001 * (1 - fx) + c101 * fx
    c11 = c011 * (1 - fx) + c111 * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    val = c0 * (1 - fz) + c1 * fz
    dx0 = (c100 - c000) * (1 - fy) + (c110 - c010) * fy
    dx1 = (c101 - c001) * (1 - fy) + (c111 - c011) * fy
    gx = flat[0] * (dx0 * (1 - fz) + dx1 * fz) / resolution
    gy = flat[1] * ((c10 - c00) * (1 - fz) + (c11 - c01) * fz) / resolution
    gz = flat[2] * (c1 - c0) / resolution
    return val, gx, gy, gz, clamped


@numba.njit(cache=True)
def _trilinear(values, origin, resolution, points, out_val, out_grad, out_clamped):
    for n in range(points.shape[0]):
        v, gx, gy, gz, cl = trilinear_point(
            values, origin, resolution, points[n, 0], points[n, 1], points[n, 2]
        )
        out_val[n] = v
        out_grad[n, 0] = gx
        out_grad[n, 1] = gy
        out_grad[n, 2] = gz
        out_clamped[n] = cl


@dataclass
class DistanceField:
    values: np.ndarray  # metres, shape (nx, ny, nz)
    resolution: float
    origin: np.ndarray

    def query(self, p: np.ndarray) -> tuple[float, np.ndarray, bool]:
        """Interpolated distance and its gradient at one point, plus an out-of-bounds flag."""
        val, grad, clamped = self.query_batch(np.asarray(p, dtype=float)[None])
        return float(val[0]), grad[0], bool(clamped[0])

    def query_batch(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        points = np.ascontiguousarray(points, dtype=float).reshape(-1, 3)
        n = len(points)
        val = np.empty(n)
        grad = np.empty((n, 3))
        clamped = np.empty(n, dtype=np.bool_)
        _trilinear(self.values, self.origin, float(self.resolution), points, val, grad, clamped)
        return val, grad, clamped


def build_distance_field(grid: OccupancyGrid) -> DistanceField:
    """Exact Euclidean distance from each cell centre to the nearest occupied centre.

    Cells of an obstacle-free grid get the domain diagonal as a finite cap.
    """
    if grid.cells.size == 0:
        raise ValueError("empty grid")
    cap = float(np.linalg.norm(np.array(grid.dims) * grid.resolution))
    if not grid.cells.any():
        values = np.full(grid.dims, cap)
    else:
        values = np.minimum(np.sqrt(squared_edt(grid.cells)) * grid.resolution, cap)
    return DistanceField(values=values, resolution=float(grid.resolution), origin=grid.origin.copy())


@dataclass(frozen=True)
class Verdict:
    feasible: bool
    reason: str = ""  # "", "collision" or "dynamics"
    time: float = float("nan")

    def __bool__(self) -> bool:
        return self.feasible


def sample_times(duration: float, dt: float) -> np.ndarray:
    ts = np.arange(0.0, duration, dt)
    return np.append(ts, duration)


@numba.njit(cache=True)
def _check_kernel(coeffs, duration, dt, cells, origin, resolution, limits, fvals, clearance):
    """0 if feasible, 1 on collision, 2 on a derivative limit; with the failing time."""
    n2 = coeffs.shape[1]
    s = n2 // 2
    nx, ny, nz = cells.shape
    n_steps = int(np.ceil(duration / dt))
    p = np.empty(3)
    for j in range(n_steps + 1):
        t = j * dt
        if t >= duration:
            t = duration
        for x in range(3):
            acc = 0.0
            for i in range(n2 - 1, -1, -1):
                acc = acc * t + coeffs[x, i]
            p[x] = acc
        ix = int(np.floor((p[0] - origin[0]) / resolution))
        iy = int(np.floor((p[1] - origin[1]) / resolution))
        iz = int(np.floor((p[2] - origin[2]) / resolution))
        if ix < 0 or iy < 0 or iz < 0 or ix >= nx or iy >= ny or iz >= nz or cells[ix, iy, iz]:
            return 1, t
        if clearance > 0.0:
            val, _, _, _, _ = trilinear_point(fvals, origin, resolution, p[0], p[1], p[2])
            if val < clearance:
                return 1, t
        for k in range(1, min(s, limits.shape[0]) + 1):
            sq = 0.0
            for x in range(3):
                acc = 0.0
                for i in range(n2 - 1, k - 1, -1):
                    f = 1.0
                    for r in range(k):
                        f *= i - r
                    acc = acc * t + f * coeffs[x, i]
                sq += acc * acc
            if sq > limits[k - 1] * limits[k - 1]:
                return 2, t
        if t >= duration:
            break
    return 0, 0.0


_REASONS = ("", "collision", "dynamics")
_NO_FIELD = np.zeros((1, 1, 1))


def check_edge(
    edge: PolyEdge,
    grid: OccupancyGrid,
    limits,
    dt: float = DEFAULT_CHECK_DT,
    clearance: float = 0.0,
    field: DistanceField | None = None,
) -> Verdict:
    """Hard feasibility of an edge against occupancy and derivative limits.

    Samples t = 0, dt, 2dt, ..., T.  ``limits[k-1]`` bounds the norm of the
    k-th derivative.  When a distance field and positive clearance are given,
    samples closer than ``clearance`` to an obstacle also count as collisions.
    """
    if not dt > 0:
        raise ValueError(f"check interval must be positive, got {dt}")
    use_field = field is not None and clearance > 0
    code, t = _check_kernel(
        np.ascontiguousarray(edge.coeffs),
        float(edge.duration),
        float(dt),
        grid.cells,
        grid.origin,
        float(grid.resolution),
        np.asarray(limits, dtype=float),
        field.values if use_field else _NO_FIELD,
        float(clearance) if use_field else 0.0,
    )
    if code == 0:
        return Verdict(True)
    return Verdict(False, _REASONS[code], float(t))


class Environment:
    """Raw map, its inflated occupancy, the distance field and free-cell index."""

    def __init__(self, grid: OccupancyGrid, inflation: float = 0.2):
        self.raw = grid
        self.inflation = inflation
        self.occupancy = inflate(grid, inflation)
        self.field = build_distance_field(grid)
        self.free_cells = np.argwhere(~self.occupancy.cells)
        self._lo = tuple(float(v) for v in grid.origin)
        self._dims = grid.dims
        self.lower = grid.origin.copy()
        self.upper = grid.upper
        self.planar = grid.dims[2] == 1

    @property
    def resolution(self) -> float:
        return self.raw.resolution

    def is_free(self, p) -> bool:
        """Scalar fast path of ``not occupancy.occupied_at(p)``."""
        res = self.raw.resolution
        idx = []
        for a in range(3):
            i = math.floor((float(p[a]) - self._lo[a]) / res)
            if i < 0 or i >= self._dims[a]:
                return False
            idx.append(i)
        return not self.occupancy.cells[idx[0], idx[1], idx[2]]

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.raw.upper - self.raw.origin))
