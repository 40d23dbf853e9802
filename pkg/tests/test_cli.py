import json
from pathlib import Path

import numpy as np
import pytest

from patchsim.cli import build_parser, main
from patchsim.raster import load_ascii_grid, save_ascii_grid, class_areas
from worlds import make_categorical, planted_world


@pytest.fixture
def world(tmp_path):
    """Planted world on disk plus a simulate config; returns a path map."""
    lu_t0, lu_t1, factors, _ = planted_world(size=50, n_factors=3, seed=0)
    paths = {
        "lu_t0": tmp_path / "lu2003.asc",
        "lu_t1": tmp_path / "lu2013.asc",
        "out": tmp_path,
    }
    save_ascii_grid(lu_t0, paths["lu_t0"])
    save_ascii_grid(lu_t1, paths["lu_t1"])
    for name, layer in factors.layers:
        p = tmp_path / f"factor_{name}.asc"
        save_ascii_grid(layer, p)
        paths[name] = p
    config = {
        "version": 1,
        "classes": [1, 2],
        "window": 3,
        "mu": 0.1,
        "delta": 0.9,
        "step": 50,
        "max_iters": 150,
        "seed": 5,
    }
    paths["config"] = tmp_path / "sim_config.json"
    paths["config"].write_text(json.dumps(config))
    return paths


def _factor_args(paths):
    return [
        "--factor", f"dist={paths['dist']}",
        "--factor", f"noise0={paths['noise0']}",
        "--factor", f"noise1={paths['noise1']}",
    ]


def _run_mine(paths, out, seed=3, extra=()):
    return main([
        "mine", "--lu-t0", str(paths["lu_t0"]), "--lu-t1", str(paths["lu_t1"]),
        *_factor_args(paths), "--rate", "0.2", "--trees", "30",
        "--seed", str(seed), "--out", str(out), *extra,
    ])


def test_mine_defaults_match_calibration():
    parser = build_parser()
    args = parser.parse_args(["mine", "--lu-t0", "a", "--lu-t1", "b", "--out", "o"])
    assert args.rate == 0.05
    assert args.trees == 50
    assert args.mtry == "auto"
    args = parser.parse_args(["simulate", "--initial", "a", "--surfaces", "s",
                              "--config", "c", "--out", "o"])
    assert args.threads == 1 and args.seed is None


def test_simulate_config_defaults(tmp_path):
    from patchsim.cli import load_simulation_config, _build_sim_config
    import argparse

    path = tmp_path / "c.json"
    path.write_text(json.dumps({"version": 1, "classes": [1, 2]}))
    payload = load_simulation_config(path)
    ns = argparse.Namespace(no_patch_seeding=False, seed=None)
    config = _build_sim_config(payload, ns, {1: 50, 2: 50})
    assert config.window == 3
    assert config.seed_thresholds == {1: 0.1, 2: 0.1}
    assert config.decay == 0.9
    assert config.step == 500
    assert config.tolerance == 250
    assert config.patch_seeding is True
    assert config.weights == {1: 1.0, 2: 1.0}


def test_simulate_config_rejects_unknown_keys(tmp_path):
    from patchsim.cli import load_simulation_config

    path = tmp_path / "c.json"
    path.write_text(json.dumps({"version": 1, "classes": [1], "stepp": 2}))
    from patchsim.errors import DataError
    with pytest.raises(DataError, match="unknown keys"):
        load_simulation_config(path)


def test_mine_writes_surfaces_and_importance(world, capsys):
    out = world["out"] / "mined"
    assert _run_mine(world, out) == 0
    assert (out / "growth_k1.asc").is_file()
    assert (out / "growth_k2.asc").is_file()
    assert (out / "manifest.json").is_file()
    lines = (out / "importance.csv").read_text().splitlines()
    assert lines[0] == "class,factor,raw_importance,normalized_share"
    assert len(lines) == 1 + 2 * 3  # two classes x three factors
    err = capsys.readouterr().err
    assert "class 1" in err  # class 1 never expands: warned, zero surface


def test_mine_missing_factor_names_layer(world):
    code = main([
        "mine", "--lu-t0", str(world["lu_t0"]), "--lu-t1", str(world["lu_t1"]),
        "--factor", "slope=/nonexistent/slope.asc",
        "--out", str(world["out"] / "x"),
    ])
    assert code == 2


def test_unknown_scenario_is_usage_error(tmp_path):
    assert main(["demand", "--scenario", "QQ", "--out", str(tmp_path)]) == 1


def test_demand_ed_scenario(tmp_path):
    out = tmp_path / "ed"
    assert main(["demand", "--scenario", "ED", "--out", str(out)]) == 0
    payload = json.loads((out / "demand.json").read_text())
    assert payload["scenario"] == "ED"
    assert abs(payload["hectares"]["3"] - 187522.29) <= 1.0
    assert payload["cells"] is None
    assert "economic" in payload["objective_values"]


def test_demand_bs_requires_rasters(tmp_path):
    assert main(["demand", "--scenario", "BS", "--out", str(tmp_path)]) == 1


def test_demand_bs_toy_interpolation(world):
    out = world["out"] / "bs"
    code = main([
        "demand", "--scenario", "BS",
        "--lu-t0", str(world["lu_t0"]), "--lu-t1", str(world["lu_t1"]),
        "--year-t0", "2003", "--year-t1", "2013", "--target-year", "2035",
        "--out", str(out),
    ])
    assert code == 0
    payload = json.loads((out / "demand.json").read_text())
    lu_t1 = load_ascii_grid(world["lu_t1"])
    total_cells = sum(class_areas(lu_t1).values())
    assert sum(payload["cells"].values()) == total_cells
    total_ha = total_cells * 0.09
    assert sum(payload["hectares"].values()) == pytest.approx(total_ha, rel=1e-9)


def _full_pipeline(world, tag, threads=1, extra_sim=()):
    out = world["out"] / tag
    mined = out / "mine"
    assert _run_mine(world, mined, extra=("--threads", str(threads))) == 0
    demand_dir = out / "demand"
    # calibration replay: demand at the later date, allocated from the earlier
    assert main([
        "demand", "--scenario", "BS",
        "--lu-t0", str(world["lu_t0"]), "--lu-t1", str(world["lu_t1"]),
        "--year-t0", "2003", "--year-t1", "2013", "--target-year", "2013",
        "--threads", str(threads), "--out", str(demand_dir),
    ]) == 0
    sim_dir = out / "sim"
    assert main([
        "simulate", "--initial", str(world["lu_t0"]),
        "--surfaces", str(mined), "--config", str(world["config"]),
        "--demand", str(demand_dir / "demand.json"),
        "--threads", str(threads), "--out", str(sim_dir), *extra_sim,
    ]) == 0
    val_dir = out / "val"
    assert main([
        "validate", "--obs-t0", str(world["lu_t0"]),
        "--obs-t1", str(world["lu_t1"]),
        "--sim", f"run={sim_dir / 'final.asc'}",
        "--threads", str(threads), "--out", str(val_dir),
    ]) == 0
    return out


def test_full_pipeline_end_to_end(world):
    out = _full_pipeline(world, "e2e")
    assert (out / "sim" / "final.asc").is_file()
    assert (out / "sim" / "trace.csv").is_file()
    assert (out / "sim" / "changes.csv").is_file()
    assert (out / "val" / "fom.csv").is_file()
    assert (out / "val" / "comparison.csv").is_file()
    fom = (out / "val" / "fom.csv").read_text().splitlines()
    assert fom[0] == "simulation,A,B,C,D,FOM"


def test_ablation_flag_changes_outputs(world):
    base = _full_pipeline(world, "seeded")
    ablated_dir = world["out"] / "ablated-sim"
    assert main([
        "simulate", "--initial", str(world["lu_t0"]),
        "--surfaces", str(base / "mine"), "--config", str(world["config"]),
        "--demand", str(base / "demand" / "demand.json"),
        "--no-patch-seeding", "--out", str(ablated_dir),
    ]) == 0
    seeded = (base / "sim" / "final.asc").read_bytes()
    ablated = (ablated_dir / "final.asc").read_bytes()
    assert seeded != ablated


def test_simulate_demand_legend_mismatch(world, tmp_path):
    bad = {"version": 1, "scenario": "BS", "hectares": {"1": 100.0},
           "cells": {"1": 2500}}
    demand_path = tmp_path / "bad_demand.json"
    demand_path.write_text(json.dumps(bad))
    mined = world["out"] / "m2"
    assert _run_mine(world, mined) == 0
    config = json.loads(world["config"].read_text())
    config["classes"] = [1]
    cfg = tmp_path / "bad_config.json"
    cfg.write_text(json.dumps(config))
    code = main([
        "simulate", "--initial", str(world["lu_t1"]), "--surfaces", str(mined),
        "--config", str(cfg), "--demand", str(demand_path),
        "--out", str(tmp_path / "bad_out"),
    ])
    assert code == 2


def test_simulate_with_demands_embedded_in_config(world, tmp_path):
    mined = world["out"] / "m-embed"
    assert _run_mine(world, mined) == 0
    lu_t0 = load_ascii_grid(world["lu_t0"])
    lu_t1 = load_ascii_grid(world["lu_t1"])
    targets = class_areas(lu_t1)
    targets.setdefault(1, 0)
    config = json.loads(world["config"].read_text())
    config["demands"] = {str(k): int(v) for k, v in targets.items()}
    cfg = tmp_path / "with_demands.json"
    cfg.write_text(json.dumps(config))
    out = tmp_path / "embed_out"
    assert main([
        "simulate", "--initial", str(world["lu_t0"]), "--surfaces", str(mined),
        "--config", str(cfg), "--out", str(out),
    ]) == 0
    assert (out / "final.asc").is_file()


def test_validate_perfect_simulation_prints_fom_one(world, capsys):
    out = world["out"] / "perfect"
    assert main([
        "validate", "--obs-t0", str(world["lu_t0"]),
        "--obs-t1", str(world["lu_t1"]),
        "--sim", f"perfect={world['lu_t1']}",
        "--out", str(out),
    ]) == 0
    assert "FOM perfect: 1.0" in capsys.readouterr().out


def test_validate_metrics_only(world):
    out = world["out"] / "monly"
    assert main([
        "validate", "--obs-t1", str(world["lu_t1"]),
        "--sim", f"x={world['lu_t1']}", "--metrics-only", "--out", str(out),
    ]) == 0
    assert not (out / "fom.csv").exists()
    assert (out / "metrics_x.csv").is_file()


def test_validate_two_sims_tally(world):
    mined = world["out"] / "m3"
    assert _run_mine(world, mined) == 0
    out = world["out"] / "two"
    assert main([
        "validate", "--obs-t0", str(world["lu_t0"]),
        "--obs-t1", str(world["lu_t1"]),
        "--sim", f"a={world['lu_t1']}",
        "--sim", f"b={world['lu_t0']}",
        "--out", str(out),
    ]) == 0
    counts = dict(
        line.split(",") for line in
        (out / "closest_counts.csv").read_text().splitlines()[1:]
    )
    assert int(counts["a"]) >= int(counts["b"])


def test_metrics_command(world):
    out = world["out"] / "mx"
    assert main([
        "metrics", "--raster", f"obs={world['lu_t1']}",
        "--raster", f"alt={world['lu_t0']}", "--reference", "obs",
        "--out", str(out),
    ]) == 0
    assert (out / "metrics_obs.csv").is_file()
    assert (out / "comparison.csv").is_file()


def test_rerun_reproduces_outputs(world):
    mined = world["out"] / "m4"
    assert _run_mine(world, mined) == 0
    redo = world["out"] / "m4-redo"
    assert main(["rerun", str(mined / "manifest.json"), "--out", str(redo)]) == 0
    for name in ("growth_k1.asc", "growth_k2.asc", "importance.csv"):
        assert (mined / name).read_bytes() == (redo / name).read_bytes()


def test_exit_code_for_solver_failure(tmp_path, world):
    # demand that cannot be allocated: conversions into class 2 forbidden
    config = json.loads(world["config"].read_text())
    config["tm"] = [[1, 0], [0, 1]]
    cfg = tmp_path / "blocked.json"
    cfg.write_text(json.dumps(config))
    mined = world["out"] / "m5"
    assert _run_mine(world, mined) == 0
    demand_dir = world["out"] / "d5"
    assert main([
        "demand", "--scenario", "BS",
        "--lu-t0", str(world["lu_t0"]), "--lu-t1", str(world["lu_t1"]),
        "--year-t0", "2003", "--year-t1", "2013", "--target-year", "2023",
        "--out", str(demand_dir),
    ]) == 0
    code = main([
        "simulate", "--initial", str(world["lu_t0"]), "--surfaces", str(mined),
        "--config", str(cfg), "--demand", str(demand_dir / "demand.json"),
        "--out", str(tmp_path / "blocked_out"),
    ])
    assert code == 3
