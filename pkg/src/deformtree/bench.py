"""Benchmark harness: scenarios, config files, paired trial batches, convergence tables and exports."""

from __future__ import annotations

import csv
import math
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .deform import Mode, PenaltyConfig, Variant
from .env_field import Environment, OccupancyGrid, load_map
from .maps import MapSpec, generate_map
from .traj_tree import PlannerConfig, RunReport, Scheme, Solution, TrajTree, plan

CONFIG_HEADER = "kdtcfg=1"
DEFAULT_BIN_S = 0.05
EXPORT_DT = 0.01


class ConfigError(ValueError):
    pass


# -- config file ------------------------------------------------------------


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in re.split(r"[,\s]+", text.strip()) if v)


def _optional(conv):
    def parse(text: str):
        return None if text.strip().lower() == "none" else conv(text)

    return parse


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


PLANNER_KEYS = {
    "rho": float,
    "s": int,
    "limits": _floats,
    "near_radius": _optional(float),
    "near_factor": float,
    "seed": int,
    "time_budget": _optional(float),
    "node_budget": _optional(int),
    "scheme": Scheme,
    "variant": Variant,
    "mode": Mode,
    "goal_bias": float,
    "goal_region": float,
    "check_dt": float,
    "deform_iter": int,
    "deform_eval": int,
    "nsopt_eps": float,
    "nsopt_memory": int,
    "sample_tries": int,
    "virtual_tick": _optional(float),
}
PENALTY_KEYS = {
    "weights": _floats,
    "clearance": float,
    "spacing": float,
    "limit_scale": float,
}
SCENARIO_KEYS = {
    "map": str,
    "map_kind": str,
    "map_seed": int,
    "map_size": _floats,
    "map_resolution": float,
    "map_density": float,
    "map_radius_range": _floats,
    "inflation": float,
    "start": _floats,
    "goal": _floats,
    "trials": int,
    "seed_base": int,
    "export_tree": _bool,
}


def config_keys() -> list[str]:
    return (
        list(PLANNER_KEYS)
        + [f"penalty.{k}" for k in PENALTY_KEYS]
        + [f"scenario.{k}" for k in SCENARIO_KEYS]
    )


def parse_config(text: str, source: str = "<config>") -> dict[str, object]:
    """Parse a ``kdtcfg=1`` key/value file into typed values keyed by dotted name."""
    lines = text.splitlines()
    body = [(n, ln.split("#", 1)[0].strip()) for n, ln in enumerate(lines, 1)]
    body = [(n, ln) for n, ln in body if ln]
    if not body or body[0][1].replace(" ", "") != CONFIG_HEADER:
        raise ConfigError(f"{source}: first line must be '{CONFIG_HEADER}'")
    out: dict[str, object] = {}
    for n, ln in body[1:]:
        if "=" not in ln:
            raise ConfigError(f"{source}:{n}: expected key = value")
        key, value = (part.strip() for part in ln.split("=", 1))
        out[key] = parse_value(key, value, f"{source}:{n}")
    return out


def parse_value(key: str, value: str, where: str = "") -> object:
    prefix, _, name = key.rpartition(".")
    table = {"": PLANNER_KEYS, "penalty": PENALTY_KEYS, "scenario": SCENARIO_KEYS}.get(prefix)
    if table is None or name not in table:
        raise ConfigError(f"{where}: unknown key {key!r}")
    try:
        return table[name](value)
    except ValueError as exc:
        raise ConfigError(f"{where}: bad value for {key}: {exc}") from None


def format_config(values: dict[str, object]) -> str:
    def fmt(v):
        if v is None:
            return "none"
        if isinstance(v, tuple):
            return ", ".join(repr(x) for x in v)
        if hasattr(v, "value"):
            return str(v.value)
        return str(v)

    return "\n".join([CONFIG_HEADER] + [f"{k} = {fmt(v)}" for k, v in values.items()]) + "\n"


# -- scenario ---------------------------------------------------------------


def forest_spec() -> MapSpec:
    """Forest scenario used for the variant and scheme comparisons."""
    return MapSpec(kind="forest", size=(50.0, 30.0, 5.0), resolution=0.1, density=0.02)


@dataclass
class Scenario:
    map_spec: MapSpec | None = field(default_factory=forest_spec)
    map_path: str | None = None
    map_seed: int = 0
    inflation: float = 0.2
    start: tuple[float, ...] = (2.0, 15.0, 1.5)
    goal: tuple[float, ...] = (48.0, 15.0, 1.5)
    config: PlannerConfig = field(default_factory=PlannerConfig)
    trials: int = 20
    seed_base: int = 0
    export_tree: bool = False
    _env: Environment | None = field(default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.trials < 1:
            raise ConfigError("trial count must be at least 1")
        budget = self.config.time_budget
        if budget is not None and not budget > 0:
            raise ConfigError("time budget must be positive")
        if budget is None and self.config.node_budget is None:
            raise ConfigError("need a time budget or a node budget")
        if self.map_spec is None and self.map_path is None:
            raise ConfigError("scenario needs a map file or a generator spec")

    def states(self) -> tuple[np.ndarray, np.ndarray]:
        s = self.config.s
        out = []
        for vals in (self.start, self.goal):
            vals = np.asarray(vals, dtype=float)
            if vals.size not in (3, 3 * s):
                raise ConfigError(f"state needs 3 or {3 * s} values, got {vals.size}")
            x = np.zeros((3, s))
            if vals.size == 3:
                x[:, 0] = vals
            else:
                x[:] = vals.reshape(s, 3).T  # position triple, then velocity triple, ...
            out.append(x)
        return out[0], out[1]

    def grid(self) -> OccupancyGrid:
        if self.map_path is not None:
            return load_map(self.map_path)
        keep = [*self.map_spec.keep_free, tuple(self.start[:3]), tuple(self.goal[:3])]
        spec = replace(self.map_spec, keep_free=keep)
        return generate_map(spec, self.map_seed)

    def environment(self) -> Environment:
        if self._env is None:
            self._env = Environment(self.grid(), self.inflation)
            start, goal = self.states()
            for name, x in (("start", start), ("goal", goal)):
                if not self._env.is_free(x[:, 0]):
                    raise ConfigError(f"{name} position {x[:, 0]} is not collision-free")
        return self._env


def scenario_from_config(values: dict[str, object], base: Scenario | None = None) -> Scenario:
    """Apply parsed config values (see :func:`parse_config`) on top of ``base``."""
    base = base or Scenario()
    planner = {k: v for k, v in values.items() if "." not in k}
    penalty = {k.split(".", 1)[1]: v for k, v in values.items() if k.startswith("penalty.")}
    scen = {k.split(".", 1)[1]: v for k, v in values.items() if k.startswith("scenario.")}
    pen = replace(base.config.penalty, **penalty)
    config = replace(base.config, penalty=pen, **planner)
    spec = base.map_spec or forest_spec()
    spec_updates = {}
    for key, attr in (
        ("map_kind", "kind"),
        ("map_size", "size"),
        ("map_resolution", "resolution"),
        ("map_density", "density"),
        ("map_radius_range", "radius_range"),
    ):
        if key in scen:
            spec_updates[attr] = scen.pop(key)
    if spec_updates:
        spec = replace(spec, **spec_updates)
    map_path = scen.pop("map", base.map_path)
    return Scenario(
        map_spec=spec,
        map_path=map_path,
        map_seed=scen.pop("map_seed", base.map_seed),
        inflation=scen.pop("inflation", base.inflation),
        start=scen.pop("start", base.start),
        goal=scen.pop("goal", base.goal),
        config=config,
        trials=scen.pop("trials", base.trials),
        seed_base=scen.pop("seed_base", base.seed_base),
        export_tree=scen.pop("export_tree", base.export_tree),
    )


def load_scenario(path: str | Path) -> Scenario:
    return scenario_from_config(parse_config(Path(path).read_text(), str(path)))


# -- methods ----------------------------------------------------------------


@dataclass(frozen=True)
class Method:
    scheme: Scheme
    variant: Variant
    mode: Mode

    @property
    def name(self) -> str:
        if self.variant is Variant.OFF:
            return f"{self.scheme.value}/off"
        return f"{self.scheme.value}/{self.variant.value}-{self.mode.value}"

    def apply(self, config: PlannerConfig) -> PlannerConfig:
        return replace(config, scheme=self.scheme, variant=self.variant, mode=self.mode)


def parse_method(text: str, default_scheme: Scheme = Scheme.KRRTSHARP) -> Method:
    """``[scheme/]off`` or ``[scheme/]variant-mode``, e.g. ``branch-st`` or ``krrt/node-s``."""
    scheme_txt, _, rest = text.strip().lower().rpartition("/")
    scheme = Scheme(scheme_txt) if scheme_txt else Scheme(default_scheme)
    if rest == "off":
        return Method(scheme, Variant.OFF, Mode.SPATIOTEMPORAL)
    variant, sep, mode = rest.partition("-")
    if not sep:
        raise ValueError(f"method {text!r}: expected 'off' or 'variant-mode'")
    v = Variant(variant)
    if v is Variant.OFF:
        raise ValueError(f"method {text!r}: 'off' takes no mode")
    return Method(scheme, v, Mode(mode))


# -- trials -----------------------------------------------------------------


@dataclass
class TrialRecord:
    method: str
    trial: int
    seed: int
    log: list[tuple[float, float, int]]
    final_cost: float
    first_solution_time: float | None
    node_count: int
    iterations: int
    weighted_cost: float
    error: str | None = None

    @property
    def solved(self) -> bool:
        return math.isfinite(self.final_cost)


def run_trial(scenario: Scenario, method: Method, trial: int) -> tuple[TrialRecord, RunReport | None]:
    """One paired trial: seed ``seed_base + trial`` whatever the method."""
    seed = scenario.seed_base + trial
    config = replace(method.apply(scenario.config), seed=seed)
    start, goal = scenario.states()
    try:
        report = plan(config, scenario.environment(), start, goal, keep_tree=True)
    except Exception as exc:  # reported per trial, never fatal for the batch
        return (
            TrialRecord(method.name, trial, seed, [], math.inf, None, 0, 0, math.nan, f"{type(exc).__name__}: {exc}"),
            None,
        )
    record = TrialRecord(
        method=method.name,
        trial=trial,
        seed=seed,
        log=list(report.log),
        final_cost=report.final_cost,
        first_solution_time=report.first_solution_time,
        node_count=report.node_count,
        iterations=report.iterations,
        weighted_cost=report.tree.weighted_cost(),
    )
    return record, report


_WORKER_SCENARIO: Scenario | None = None


def _worker_init(scenario: Scenario) -> None:
    global _WORKER_SCENARIO
    _WORKER_SCENARIO = scenario


def _worker_run(args) -> TrialRecord:
    method, trial = args
    return run_trial(_WORKER_SCENARIO, method, trial)[0]


@dataclass
class ConvergenceTable:
    """Per-method best cost over time bins; statistics only over trials solved by the bin's end."""

    bin_s: float
    rows: list[tuple[float, str, float, float, int]]  # bin start, method, mean, std, n solved
    first_solution: dict[str, dict[str, float]]

    @classmethod
    def from_trials(cls, trials: dict[str, list[TrialRecord]], horizon: float | None, bin_s: float = DEFAULT_BIN_S) -> ConvergenceTable:
        if not bin_s > 0:
            raise ValueError("bin width must be positive")
        if horizon is None:
            horizon = max((e[0] for recs in trials.values() for r in recs for e in r.log), default=bin_s)
        n_bins = max(1, math.ceil(horizon / bin_s - 1e-9))
        rows = []
        first = {}
        for method, recs in trials.items():
            for b in range(n_bins):
                end = (b + 1) * bin_s
                costs = []
                for r in recs:
                    seen = [c for t, c, _ in r.log if t < end]
                    if seen:
                        costs.append(seen[-1])
                if costs:
                    mean, std = float(np.mean(costs)), float(np.std(costs))
                else:
                    mean = std = math.nan
                rows.append((b * bin_s, method, mean, std, len(costs)))
            times = [r.first_solution_time for r in recs if r.first_solution_time is not None]
            first[method] = {
                "n_trials": float(len(recs)),
                "n_solved": float(len(times)),
                "median_s": float(np.median(times)) if times else math.nan,
                "mean_s": float(np.mean(times)) if times else math.nan,
                "std_s": float(np.std(times)) if times else math.nan,
            }
        return cls(bin_s, rows, first)

    def series(self, method: str) -> list[tuple[float, float, float, int]]:
        return [(b, m, s, n) for b, name, m, s, n in self.rows if name == method]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_start_s", "method", "mean_cost", "std_cost", "n_solved"])
            for b, method, mean, std, n in self.rows:
                w.writerow([f"{b:.3f}", method, repr(mean), repr(std), n])


@dataclass
class BatchResult:
    table: ConvergenceTable
    trials: dict[str, list[TrialRecord]]

    def final_costs(self, method: str) -> np.ndarray:
        return np.array([r.final_cost for r in self.trials[method]])

    def median_final(self, method: str) -> float:
        return float(np.median(self.final_costs(method)))


def _safe(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", name)


def write_trials_csv(trials: dict[str, list[TrialRecord]], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "trial", "seed", "final_cost", "first_solution_s", "node_count", "iterations", "weighted_cost", "error"])
        for recs in trials.values():
            for r in recs:
                first = "" if r.first_solution_time is None else repr(r.first_solution_time)
                w.writerow([r.method, r.trial, r.seed, repr(r.final_cost), first, r.node_count, r.iterations, repr(r.weighted_cost), r.error or ""])


def run_batch(
    scenario: Scenario,
    methods: list[Method],
    out_dir: str | Path | None = None,
    bin_s: float = DEFAULT_BIN_S,
    workers: int = 1,
) -> BatchResult:
    """Run every method on trials 0..trials-1 with paired seeds and aggregate the logs."""
    if not methods:
        raise ValueError("no methods given")
    names = [m.name for m in methods]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate methods in {names}")
    scenario.environment()  # fail early on an invalid scenario; also shared with forked workers
    jobs = [(m, t) for m in methods for t in range(scenario.trials)]
    if workers > 1:
        with ProcessPoolExecutor(workers, initializer=_worker_init, initargs=(scenario,)) as pool:
            records = list(pool.map(_worker_run, jobs))
    else:
        records = [run_trial(scenario, m, t)[0] for m, t in jobs]
    trials: dict[str, list[TrialRecord]] = {m.name: [] for m in methods}
    for r in records:
        trials[r.method].append(r)
    table = ConvergenceTable.from_trials(trials, scenario.config.time_budget, bin_s)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        table.to_csv(out / "convergence.csv")
        write_trials_csv(trials, out / "trials.csv")
        for name, recs in trials.items():
            sub = out / _safe(name)
            sub.mkdir(exist_ok=True)
            for r in recs:
                write_run_log(r.log, sub / f"trial_{r.trial:03d}.csv")
    return BatchResult(table, trials)


# -- run reports and geometry ---------------------------------------------------


def write_run_log(log, path: str | Path) -> None:
    """CSV of improvement events; accepts a RunReport or its ``log`` list."""
    entries = log.log if isinstance(log, RunReport) else log
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["wall_time_s", "best_cost", "node_count"])
        for t, c, n in entries:
            w.writerow([repr(float(t)), repr(float(c)), int(n)])


def read_run_log(path: str | Path) -> list[tuple[float, float, int]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["wall_time_s", "best_cost", "node_count"]:
        raise ValueError(f"{path}: not a run log")
    return [(float(t), float(c), int(n)) for t, c, n in rows[1:]]


def _edge_times(duration: float, dt: float) -> np.ndarray:
    n = int(math.floor(duration / dt + 1e-9))
    ts = np.arange(n + 1) * dt
    if duration - ts[-1] > 1e-9:
        ts = np.append(ts, duration)
    return ts


def _edge_rows(edge, ts: np.ndarray) -> np.ndarray:
    """(len(ts), 9): position, velocity and acceleration at local times ``ts``."""
    top = 2 * edge.s - 1
    return np.hstack([edge.sample(ts, k) if k <= top else np.zeros((len(ts), 3)) for k in range(3)])


def trajectory_samples(solution: Solution, dt: float = EXPORT_DT) -> np.ndarray:
    """Rows (t, x, y, z, vx, vy, vz, ax, ay, az) at global times 0, dt, 2dt, ... and the final time."""
    if not solution.edges:
        return np.zeros((0, 10))
    bounds = np.concatenate([[0.0], np.cumsum([e.duration for e in solution.edges])])
    ts = _edge_times(bounds[-1], dt)
    which = np.clip(np.searchsorted(bounds, ts, side="right") - 1, 0, len(solution.edges) - 1)
    out = np.empty((len(ts), 10))
    out[:, 0] = ts
    for k, edge in enumerate(solution.edges):
        sel = which == k
        if sel.any():
            local = np.clip(ts[sel] - bounds[k], 0.0, edge.duration)
            out[sel, 1:] = _edge_rows(edge, local)
    return out


TRAJ_HEADER = ["t", "x", "y", "z", "vx", "vy", "vz", "ax", "ay", "az"]


def write_trajectory_csv(solution: Solution | None, path: str | Path, dt: float = EXPORT_DT) -> None:
    rows = trajectory_samples(solution, dt) if solution is not None else np.zeros((0, 10))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRAJ_HEADER)
        w.writerows([[repr(float(v)) for v in row] for row in rows])


def geometry_rows(report: RunReport, what: str, dt: float = EXPORT_DT) -> np.ndarray:
    """Polyline rows (edge, t, x, y, z, vx, vy, vz, ax, ay, az).

    ``tree``: every attached edge, ``edge`` is the child node id and ``t`` is local.
    ``best``: the best trajectory, ``edge`` is the index along the path and ``t`` is global.
    """
    if what == "best":
        if report.best is None:
            raise ValueError("run has no solution to export")
        rows = trajectory_samples(report.best, dt)
        bounds = np.concatenate([[0.0], np.cumsum([e.duration for e in report.best.edges])])
        idx = np.clip(np.searchsorted(bounds, rows[:, 0], side="right") - 1, 0, len(report.best.edges) - 1)
        return np.column_stack([idx, rows])
    if what != "tree":
        raise ValueError(f"unknown geometry {what!r}; expected 'tree' or 'best'")
    tree: TrajTree | None = report.tree
    parts = []
    if tree is not None:
        for i in range(len(tree)):
            edge = tree.edges[i]
            if i == tree.start or edge is None or not tree.attached(i):
                continue
            ts = _edge_times(edge.duration, dt)
            parts.append(np.column_stack([np.full(len(ts), i), ts, _edge_rows(edge, ts)]))
    return np.vstack(parts) if parts else np.zeros((0, 11))


def export_geometry(
    report: RunReport,
    what: str,
    csv_path: str | Path,
    svg_path: str | Path | None = None,
    grid: OccupancyGrid | None = None,
    dt: float = EXPORT_DT,
) -> np.ndarray:
    rows = geometry_rows(report, what, dt)
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["edge", *TRAJ_HEADER])
        for row in rows:
            w.writerow([int(row[0]), *(repr(float(v)) for v in row[1:])])
    if svg_path is not None:
        Path(svg_path).write_text(render_svg(rows, grid, report))
    return rows


def render_svg(rows: np.ndarray, grid: OccupancyGrid | None, report: RunReport | None = None, scale: float = 10.0) -> str:
    """Top-down (z-projected) picture: occupied columns as filled cells, polylines per edge id."""
    if grid is not None:
        lo, hi = grid.origin[:2], grid.upper[:2]
    elif len(rows):
        lo, hi = rows[:, 2:4].min(axis=0) - 1.0, rows[:, 2:4].max(axis=0) + 1.0
    else:
        lo, hi = np.zeros(2), np.ones(2)
    width, height = (hi - lo) * scale

    def px(x, y):
        return (x - lo[0]) * scale, (hi[1] - y) * scale

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0f}" height="{height:.0f}" '
        f'viewBox="0 0 {width:.2f} {height:.2f}">',
        f'<rect x="0" y="0" width="{width:.2f}" height="{height:.2f}" fill="white"/>',
    ]
    if grid is not None:
        column = grid.cells.any(axis=2)
        r = grid.resolution
        for j in range(column.shape[1]):
            row = column[:, j]
            # merge runs of occupied cells along x into one rectangle
            edges = np.flatnonzero(np.diff(np.concatenate([[0], row.astype(np.int8), [0]])))
            for a, b in zip(edges[::2], edges[1::2]):
                x0, y1 = px(grid.origin[0] + a * r, grid.origin[1] + (j + 1) * r)
                out.append(f'<rect x="{x0:.2f}" y="{y1:.2f}" width="{(b - a) * r * scale:.2f}" height="{r * scale:.2f}" fill="#444"/>')
    if len(rows):
        for eid in np.unique(rows[:, 0]):
            seg = rows[rows[:, 0] == eid]
            pts = " ".join("{:.2f},{:.2f}".format(*px(x, y)) for x, y in seg[:, 2:4])
            out.append(f'<polyline points="{pts}" fill="none" stroke="#1f77b4" stroke-width="1"/>')
    if report is not None and report.best is not None:
        path = trajectory_samples(report.best)
        pts = " ".join("{:.2f},{:.2f}".format(*px(x, y)) for x, y in path[:, 1:3])
        out.append(f'<polyline points="{pts}" fill="none" stroke="#d62728" stroke-width="2.5"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def planner_fields() -> list[str]:
    return [f.name for f in fields(PlannerConfig) if f.name != "penalty"]


def penalty_fields() -> list[str]:
    return [f.name for f in fields(PenaltyConfig)]
