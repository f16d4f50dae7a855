from __future__ import annotations

import csv
import math
from dataclasses import replace

import numpy as np
import pytest
from scipy import ndimage

from deformtree import bench
from deformtree.bench import ConfigError, Method, Scenario, parse_config, parse_method, run_batch
from deformtree.deform import Mode, Variant
from deformtree.env_field import OccupancyGrid, inflate, load_map, save_map
from deformtree.maps import MapGenerationError, MapSpec, coarse_connected, generate_map
from deformtree.traj_tree import PlannerConfig, Scheme, plan


def small_scenario(**kw) -> Scenario:
    spec = MapSpec(size=(12.0, 8.0, 3.0), resolution=0.1, density=0.03, radius_range=(0.3, 0.6))
    config = PlannerConfig(time_budget=None, node_budget=60, virtual_tick=0.01)
    base = dict(map_spec=spec, map_seed=1, start=(1.0, 4.0, 1.5), goal=(11.0, 4.0, 1.5), config=config, trials=3)
    base.update(kw)
    return Scenario(**base)


# -- config -----------------------------------------------------------------------


def test_config_parse_and_round_trip():
    text = """kdtcfg=1
# forest run
rho = 50
limits = 4, 6, 12
near_radius = none
scheme = krrtstar
variant = branch
mode = s
penalty.weights = 1 2 3 4
penalty.clearance = 0.5
scenario.trials = 7
scenario.start = 1.0, 2.0, 1.5
scenario.export_tree = yes
"""
    vals = parse_config(text)
    assert vals["rho"] == 50.0 and vals["limits"] == (4.0, 6.0, 12.0) and vals["near_radius"] is None
    assert vals["scheme"] is Scheme.KRRTSTAR and vals["variant"] is Variant.BRANCH and vals["mode"] is Mode.SPATIAL
    assert vals["penalty.weights"] == (1.0, 2.0, 3.0, 4.0) and vals["scenario.export_tree"] is True
    assert parse_config(bench.format_config(vals)) == vals
    scen = bench.scenario_from_config(vals)
    assert scen.trials == 7 and scen.config.rho == 50.0 and scen.config.penalty.clearance == 0.5
    assert scen.config.variant is Variant.BRANCH and scen.start == (1.0, 2.0, 1.5)


@pytest.mark.parametrize(
    "text",
    [
        "rho = 1\n",  # missing header
        "kdtcfg=2\nrho = 1\n",
        "kdtcfg=1\nbogus = 1\n",
        "kdtcfg=1\npenalty.bogus = 1\n",
        "kdtcfg=1\nrho = fast\n",
        "kdtcfg=1\nrho\n",
        "kdtcfg=1\nscheme = rrt\n",
        "kdtcfg=1\nscenario.export_tree = maybe\n",
    ],
)
def test_config_errors(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_every_config_field_is_settable():
    keys = set(bench.config_keys())
    assert {k for k in keys if "." not in k} == set(bench.planner_fields())
    assert {k.split(".")[1] for k in keys if k.startswith("penalty.")} == set(bench.penalty_fields())


def test_load_scenario_file(tmp_path):
    p = tmp_path / "s.cfg"
    p.write_text("kdtcfg=1\nseed = 4\nscenario.map_density = 0.0\nscenario.trials = 2\n")
    scen = bench.load_scenario(p)
    assert scen.config.seed == 4 and scen.map_spec.density == 0.0 and scen.trials == 2


def test_scenario_validation():
    with pytest.raises(ConfigError):
        small_scenario(trials=0)
    with pytest.raises(ConfigError):
        small_scenario(config=PlannerConfig(time_budget=0.0))
    with pytest.raises(ConfigError):
        small_scenario(config=PlannerConfig(time_budget=None, node_budget=None))
    with pytest.raises(ConfigError):
        small_scenario(map_spec=None)
    with pytest.raises(ConfigError):
        small_scenario(start=(1.0, 2.0)).states()


def test_start_inside_obstacle_is_rejected(tmp_path):
    cells = np.zeros((40, 40, 10), dtype=bool)
    cells[5:15, 5:15, :] = True
    save_map(OccupancyGrid(cells, 0.1), tmp_path / "m")
    scen = small_scenario(map_spec=None, map_path=str(tmp_path / "m"), start=(1.0, 1.0, 0.5), goal=(3.5, 3.5, 0.5))
    with pytest.raises(ConfigError):
        scen.environment()
    ok = small_scenario(map_spec=None, map_path=str(tmp_path / "m"), start=(3.0, 3.0, 0.5), goal=(3.5, 3.5, 0.5))
    assert ok.environment().raw.dims == (40, 40, 10)


def test_full_state_start():
    scen = small_scenario(start=(1, 4, 1.5, 0.5, 0, 0, 0, 0, 0))
    start, _ = scen.states()
    assert np.array_equal(start[:, 0], [1, 4, 1.5]) and np.array_equal(start[:, 1], [0.5, 0, 0])


# -- methods ------------------------------------------------------------------------


def test_parse_method():
    m = parse_method("branch-st")
    assert m == Method(Scheme.KRRTSHARP, Variant.BRANCH, Mode.SPATIOTEMPORAL) and m.name == "krrtsharp/branch-st"
    assert parse_method("krrt/node-s") == Method(Scheme.KRRT, Variant.NODE, Mode.SPATIAL)
    assert parse_method("OFF", Scheme.KRRTSTAR).name == "krrtstar/off"
    for bad in ("branch", "off-st", "sprawl-st", "branch-xy", "rrt/off"):
        with pytest.raises(ValueError):
            parse_method(bad)


# -- batches ------------------------------------------------------------------------


METHODS = [parse_method("off"), parse_method("branch-st")]


def test_batch_is_deterministic_and_paired(tmp_path):
    scen = small_scenario()
    a = run_batch(scen, METHODS, tmp_path / "a")
    b = run_batch(small_scenario(), METHODS, tmp_path / "b")
    assert (tmp_path / "a" / "convergence.csv").read_bytes() == (tmp_path / "b" / "convergence.csv").read_bytes()
    for name in a.trials:
        assert [r.log for r in a.trials[name]] == [r.log for r in b.trials[name]]
        assert [r.seed for r in a.trials[name]] == [0, 1, 2]


def test_one_trial_batch_equals_direct_plan():
    scen = small_scenario(trials=1, seed_base=5)
    res = run_batch(scen, [parse_method("branch-st")])
    config = replace(scen.config, seed=5, variant=Variant.BRANCH, mode=Mode.SPATIOTEMPORAL)
    start, goal = scen.states()
    report = plan(config, scen.environment(), start, goal)
    assert res.trials["krrtsharp/branch-st"][0].log == report.log


def test_parallel_batch_matches_serial():
    scen = small_scenario(trials=2)
    a = run_batch(scen, METHODS)
    b = run_batch(small_scenario(trials=2), METHODS, workers=2)
    for name in a.trials:
        assert [r.log for r in a.trials[name]] == [r.log for r in b.trials[name]]


def test_batch_rejects_bad_method_lists():
    with pytest.raises(ValueError):
        run_batch(small_scenario(), [])
    with pytest.raises(ValueError):
        run_batch(small_scenario(), [parse_method("off"), parse_method("off")])


def test_unsolvable_trial_is_reported_not_fatal():
    # a wall that closes the map splits start from goal
    scen = small_scenario(trials=2, map_spec=MapSpec(size=(12.0, 8.0, 3.0), density=0.0))
    grid = scen.grid()
    grid.cells[55:60, :, :] = True
    scen.grid = lambda: grid
    res = run_batch(scen, [parse_method("off")])
    recs = res.trials["krrtsharp/off"]
    assert all(not r.solved and r.error is None for r in recs)
    assert all(n == 0 for _, _, _, n in res.table.series("krrtsharp/off"))


def test_trial_errors_are_recorded():
    scen = small_scenario(trials=1)
    scen.environment()
    bad = Method(Scheme.KRRTSHARP, Variant.OFF, Mode.SPATIOTEMPORAL)
    scen.config = replace(scen.config, sample_tries=0)
    rec, report = bench.run_trial(scen, bad, 0)
    assert report is None and rec.error and not rec.solved


def test_aggregation_matches_recomputation_from_logs(tmp_path):
    scen = small_scenario(trials=4)
    res = run_batch(scen, METHODS, tmp_path, bin_s=0.1)
    horizon = max(t for recs in res.trials.values() for r in recs for t, _, _ in r.log)
    with open(tmp_path / "convergence.csv") as fh:
        rows = list(csv.DictReader(fh))
    for name in res.trials:
        logs = [bench.read_run_log(tmp_path / bench._safe(name) / f"trial_{t:03d}.csv") for t in range(4)]
        assert logs == [r.log for r in res.trials[name]]
        mine = [r for r in rows if r["method"] == name]
        assert len(mine) == math.ceil(horizon / 0.1 - 1e-9)
        for row in mine:
            end = float(row["bin_start_s"]) + 0.1
            best = [min(c for t, c, _ in log if t < end) for log in logs if any(t < end for t, _, _ in log)]
            assert int(row["n_solved"]) == len(best)
            if best:
                assert float(row["mean_cost"]) == pytest.approx(np.mean(best), rel=1e-12)
                assert float(row["std_cost"]) == pytest.approx(np.std(best), rel=1e-9, abs=1e-9)
            else:
                assert math.isnan(float(row["mean_cost"]))
        first = [r.first_solution_time for r in res.trials[name] if r.first_solution_time is not None]
        if first:
            assert res.table.first_solution[name]["median_s"] == pytest.approx(np.median(first))


def test_bins_are_monotone():
    res = run_batch(small_scenario(trials=2), METHODS, bin_s=0.05)
    for name in res.trials:
        starts = [b for b, *_ in res.table.series(name)]
        assert starts == sorted(starts) and np.allclose(np.diff(starts), 0.05)


# -- maps ---------------------------------------------------------------------------


def test_genmap_is_byte_identical(tmp_path):
    spec = MapSpec(size=(20.0, 10.0, 3.0), density=0.05, keep_free=[(1, 5, 1.5), (19, 5, 1.5)])
    save_map(generate_map(spec, 7), tmp_path / "a")
    save_map(generate_map(spec, 7), tmp_path / "b")
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
    save_map(generate_map(spec, 8), tmp_path / "c")
    assert (tmp_path / "a").read_bytes() != (tmp_path / "c").read_bytes()
    assert np.array_equal(load_map(tmp_path / "a").cells, generate_map(spec, 7).cells)


@pytest.mark.parametrize("kind", ["forest", "cave"])
def test_zero_density_is_empty(kind):
    assert not generate_map(MapSpec(kind=kind, size=(8.0, 6.0, 2.0), density=0.0), 3).cells.any()


@pytest.mark.parametrize("kind", ["forest", "cave"])
def test_accepted_maps_are_connected(kind):
    ends = [(1.0, 7.5, 1.5), (29.0, 7.5, 1.5)]
    spec = MapSpec(kind=kind, size=(30.0, 15.0, 3.0), density=0.08 if kind == "forest" else 0.2, keep_free=ends)
    accepted = 0
    for seed in range(12):
        try:
            grid = generate_map(spec, seed)
        except MapGenerationError:
            continue
        accepted += 1
        free = ~inflate(grid, spec.inflation).cells
        labels, _ = ndimage.label(free)  # 6-connected components of free cells
        a, b = (labels[tuple(grid.cell_index(np.array(p)))] for p in ends)
        assert a != 0 and a == b
        # keep-free spheres are clear
        for p in ends:
            assert not grid.occupied_at(np.array([p]))[0]
    assert accepted > 0


def test_blocked_map_is_rejected():
    grid = generate_map(MapSpec(size=(10.0, 6.0, 2.0), density=0.0), 0)
    grid.cells[50:53, :, :] = True
    assert not coarse_connected(grid, np.array([1.0, 3.0, 1.0]), np.array([9.0, 3.0, 1.0]), 0.5)
    grid.cells[50:53, 20:40, :] = False
    assert coarse_connected(grid, np.array([1.0, 3.0, 1.0]), np.array([9.0, 3.0, 1.0]), 0.5)
    spec = MapSpec(kind="cave", size=(20.0, 6.0, 2.0), density=0.5, gap_width=(0.1, 0.2), keep_free=[(1, 3, 1), (19, 3, 1)])
    with pytest.raises(MapGenerationError):
        for seed in range(10):
            generate_map(spec, seed)
    with pytest.raises(ValueError):
        generate_map(MapSpec(kind="moon"), 0)


# -- exports ------------------------------------------------------------------------


@pytest.fixture(scope="module")
def solved_run():
    scen = small_scenario(config=PlannerConfig(time_budget=None, node_budget=150, virtual_tick=0.01, variant=Variant.BRANCH))
    start, goal = scen.states()
    report = plan(scen.config, scen.environment(), start, goal, keep_tree=True)
    assert report.best is not None
    return scen, report


def test_best_export_endpoints_and_velocity(solved_run, tmp_path):
    scen, report = solved_run
    rows = bench.export_geometry(report, "best", tmp_path / "best.csv", tmp_path / "best.svg", scen.environment().raw)
    start, goal = scen.states()
    assert np.allclose(rows[0, 2:5], start[:, 0], atol=1e-9)
    assert np.allclose(rows[-1, 2:5], goal[:, 0], atol=1e-9)
    assert np.all(np.diff(rows[:, 1]) > 0) and np.allclose(np.diff(rows[:-1, 1]), 0.01)
    assert rows[-1, 1] == pytest.approx(sum(e.duration for e in report.best.edges))
    assert np.linalg.norm(rows[:, 5:8], axis=1).max() <= scen.config.limits[0] + 1e-9
    assert np.linalg.norm(rows[:, 8:11], axis=1).max() <= scen.config.limits[1] + 1e-9
    with open(tmp_path / "best.csv") as fh:
        assert next(csv.reader(fh)) == ["edge", *bench.TRAJ_HEADER]
    svg = (tmp_path / "best.svg").read_text()
    assert svg.startswith("<svg") and "<polyline" in svg and "#444" in svg


def test_tree_export_covers_attached_edges(solved_run, tmp_path):
    _, report = solved_run
    rows = bench.export_geometry(report, "tree", tmp_path / "tree.csv")
    tree = report.tree
    attached = {i for i in range(len(tree)) if i != tree.start and tree.edges[i] is not None and tree.attached(i)}
    assert set(rows[:, 0].astype(int)) == attached
    for i in list(attached)[:20]:
        seg = rows[rows[:, 0] == i]
        assert np.allclose(seg[0, 2:5], tree.states[tree.parent[i]][:, 0], atol=1e-8)
        assert np.allclose(seg[-1, 2:5], tree.states[i][:, 0], atol=1e-8)


def test_empty_tree_export_is_header_only(tmp_path):
    from deformtree.traj_tree import RunReport

    report = RunReport(best=None, log=[], node_count=0, iterations=0, first_solution_time=None, tree=None)
    rows = bench.export_geometry(report, "tree", tmp_path / "t.csv")
    assert rows.shape == (0, 11)
    assert (tmp_path / "t.csv").read_text().strip() == ",".join(["edge", *bench.TRAJ_HEADER])
    with pytest.raises(ValueError):
        bench.export_geometry(report, "best", tmp_path / "b.csv")
    with pytest.raises(ValueError):
        bench.export_geometry(report, "forest", tmp_path / "b.csv")
    bench.write_trajectory_csv(None, tmp_path / "traj.csv")
    assert (tmp_path / "traj.csv").read_text().strip() == ",".join(bench.TRAJ_HEADER)


def test_run_log_round_trip(solved_run, tmp_path):
    _, report = solved_run
    bench.write_run_log(report, tmp_path / "log.csv")
    assert bench.read_run_log(tmp_path / "log.csv") == report.log
    (tmp_path / "x.csv").write_text("a,b\n")
    with pytest.raises(ValueError):
        bench.read_run_log(tmp_path / "x.csv")
