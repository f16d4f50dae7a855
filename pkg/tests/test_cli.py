from __future__ import annotations

import csv

import numpy as np
import pytest

from deformtree import bench
from deformtree.cli import build_parser, main
from deformtree.deform import Mode, Variant
from deformtree.env_field import load_map

SMALL = [
    "--map-size", "12,8,3",
    "--map-density", "0.03",
    "--map-radius-range", "0.3,0.6",
    "--map-seed", "1",
    "--start", "1,4,1.5",
    "--goal", "11,4,1.5",
    "--node-budget", "60",
    "--virtual-tick", "0.01",
    "--set", "time_budget=none",
]


def collect(argv):
    from deformtree.cli import _collect

    return _collect(build_parser().parse_args(argv))


def test_flags_mirror_config_keys():
    vals = collect(["plan", "--rho", "50", "--penalty-clearance", "0.4", "--map-seed", "3", "--trials", "4"])
    assert vals == {"rho": 50.0, "penalty.clearance": 0.4, "scenario.map_seed": 3, "scenario.trials": 4}


def test_dedicated_flags():
    vals = collect(["plan", "--seed", "9", "--budget-s", "1.5", "--scheme", "krrt", "--deform", "s"])
    assert vals["seed"] == 9 and vals["time_budget"] == 1.5
    assert vals["mode"] is Mode.SPATIAL and vals["variant"] is Variant.BRANCH
    assert collect(["plan", "--deform", "off", "--variant", "tree"])["variant"] is Variant.OFF
    assert collect(["plan", "--variant", "node", "--deform", "st"])["variant"] is Variant.NODE
    # bench: --seed is the base seed of trial 0
    assert collect(["bench", "--seed", "9"]) == {"scenario.seed_base": 9}


def test_config_file_then_flags_override(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("kdtcfg=1\nrho = 20\nseed = 2\n")
    vals = collect(["plan", "--config", str(cfg), "--rho", "30"])
    assert vals == {"rho": 30.0, "seed": 2}


def test_bad_input_returns_error_code(tmp_path, capsys):
    assert main(["plan", "--set", "bogus=1"]) == 1
    assert main(["plan", "--set", "rho"]) == 1
    assert main(["plan", "--rho", "fast"]) == 1
    bad = tmp_path / "bad.cfg"
    bad.write_text("rho = 1\n")
    assert main(["plan", "--config", str(bad)]) == 1
    assert "kdt: error" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["plan", "--deform", "sideways"])


def test_genmap(tmp_path, capsys):
    out = tmp_path / "m.kdtmap"
    assert main(["genmap", *SMALL, "--out", str(out)]) == 0
    grid = load_map(out)
    assert grid.dims == (120, 80, 30) and grid.cells.any()
    again = tmp_path / "n.kdtmap"
    main(["genmap", *SMALL, "--out", str(again)])
    assert out.read_bytes() == again.read_bytes()
    # a saved map can drive a plan
    assert main(["plan", *SMALL, "--map", str(out)]) == 0


def test_plan_writes_log_and_trajectory(tmp_path, capsys):
    log, traj = tmp_path / "log.csv", tmp_path / "traj.csv"
    assert main(["plan", *SMALL, "--deform", "st", "--log", str(log), "--traj", str(traj)]) == 0
    out = capsys.readouterr().out
    assert out.startswith("best_cost=") and "deform_accepted=" in out
    entries = bench.read_run_log(log)
    costs = [c for _, c, _ in entries]
    assert costs == sorted(costs, reverse=True)
    with open(traj) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == bench.TRAJ_HEADER
    pts = np.array(rows[1:], dtype=float)
    assert np.allclose(pts[0, 1:4], [1, 4, 1.5]) and np.allclose(pts[-1, 1:4], [11, 4, 1.5])


def test_plan_without_solution_returns_2(capsys):
    assert main(["plan", *SMALL, "--node-budget", "1"]) == 2
    assert "best_cost=inf" in capsys.readouterr().out


def test_bench_prints_table_and_writes_files(tmp_path, capsys):
    out = tmp_path / "run"
    code = main(["bench", *SMALL, "--trials", "2", "--methods", "off,branch-st", "--out", str(out)])
    assert code == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "method,median_final_cost,n_solved,median_first_solution_s"
    assert lines[1].startswith("krrtsharp/off,") and lines[2].startswith("krrtsharp/branch-st,")
    assert (out / "convergence.csv").exists() and (out / "trials.csv").exists()
    assert (out / "krrtsharp_branch-st" / "trial_001.csv").exists()


def test_export(tmp_path, capsys):
    csv_path, svg = tmp_path / "best.csv", tmp_path / "best.svg"
    assert main(["export", *SMALL, "--what", "best", "--out", str(csv_path), "--svg", str(svg)]) == 0
    assert svg.read_text().startswith("<svg")
    assert main(["export", *SMALL, "--what", "tree", "--out", str(tmp_path / "tree.csv")]) == 0
    assert main(["export", *SMALL, "--node-budget", "1", "--out", str(tmp_path / "x.csv")]) == 2
