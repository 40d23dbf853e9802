"""Command-line pipeline: mine, demand, simulate, validate, metrics, rerun.

Every command writes a run manifest (resolved arguments, input digests,
master seed, tool version, stage timings) next to its outputs; `rerun`
replays a manifest bit-exactly.  Exit codes: 0 ok, 1 usage, 2 data error,
3 infeasible or solver failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .ca import SimulationConfig, TransitionMatrix, simulate
from .demand import (
    DemandSchedule,
    ALL_SCENARIOS,
    MOP_SCENARIOS,
    hectares_to_cells,
    load_scenario_config,
    project_baseline,
    solve_scenario,
)
from .errors import DataError, DemandInfeasibleError, PatchSimError, SolverError
from .expansion import GROWTH_FILE_PATTERN, GrowthSurfaceSet, mine_growth_surfaces
from .forest import save_forest
from .metrics import compare_reports, figure_of_merit, landscape_metrics
from .raster import FactorStack, class_areas, load_grid, save_ascii_grid


class UsageError(PatchSimError):
    """Bad command line; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_manifest(out_dir, command, args_dict, inputs, outputs, seed, timings):
    canonical = json.dumps(args_dict, sort_keys=True).encode("utf-8")
    manifest = {
        "format": "patchsim-manifest",
        "version": 1,
        "tool_version": __version__,
        "command": command,
        "master_seed": seed,
        "config_hash": hashlib.sha256(canonical).hexdigest(),
        "args": args_dict,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": sorted(outputs),
        "timings": {k: round(v, 6) for k, v in timings.items()},
    }
    path = Path(out_dir) / "manifest.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _require_file(path, label):
    if not Path(path).is_file():
        raise DataError(f"{label}: file not found: {path}")
    return path


def _parse_named(pairs, label):
    out = []
    for item in pairs:
        if "=" not in item:
            raise UsageError(f"{label} must be NAME=PATH, got {item!r}")
        name, _, path = item.partition("=")
        out.append((name, path))
    names = [n for n, _ in out]
    if len(set(names)) != len(names):
        raise UsageError(f"duplicate {label} names")
    return out


def _load_categorical(path, label):
    _require_file(path, label)
    raster = load_grid(path)
    if not hasattr(raster, "classes"):
        raise DataError(f"{label}: {path} is not a categorical raster")
    return raster


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _resolved_args(args, skip=("func", "command")):
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


# --- mine -------------------------------------------------------------------

def cmd_mine(args):
    t0 = time.perf_counter()
    lu_t0 = _load_categorical(args.lu_t0, "lu-t0")
    lu_t1 = _load_categorical(args.lu_t1, "lu-t1")
    factor_paths = _parse_named(args.factor, "--factor")
    layers = []
    for name, path in factor_paths:
        _require_file(path, f"factor {name!r}")
        raster = load_grid(path)
        if hasattr(raster, "classes"):
            raise DataError(f"factor {name!r}: expected a continuous raster")
        layers.append((name, raster))
    factors = FactorStack(layers)
    if args.classes == "all":
        classes = sorted(set(lu_t0.classes) | set(lu_t1.classes))
    else:
        classes = [int(tok) for tok in args.classes.split(",") if tok]
    mtry = None if args.mtry == "auto" else (
        len(factors) if args.mtry == "all" else int(args.mtry)
    )
    t_load = time.perf_counter()
    result = mine_growth_surfaces(
        lu_t0, lu_t1, factors, classes,
        m_trees=args.trees, mtry=mtry, rate=args.rate, seed=args.seed,
        balanced=args.balanced, max_depth=args.max_depth, threads=args.threads,
    )
    t_mine = time.perf_counter()
    out = _out_dir(args)
    outputs = []
    for class_id in classes:
        name = GROWTH_FILE_PATTERN.format(class_id=class_id)
        save_ascii_grid(result.surfaces.surfaces[class_id], out / name)
        outputs.append(name)
    with open(out / "importance.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "factor", "raw_importance", "normalized_share"])
        for class_id in classes:
            imp = result.surfaces.importances[class_id]
            for j, factor in enumerate(imp.feature_names):
                writer.writerow([
                    class_id, factor, _fmt(float(imp.raw[j])),
                    _fmt(float(imp.normalized[j])),
                ])
    outputs.append("importance.csv")
    if args.save_forests:
        for class_id, forest in result.forests.items():
            if forest is not None:
                name = f"forest_k{class_id}.json"
                save_forest(forest, out / name)
                outputs.append(name)
    for warning in result.warnings:
        print(f"warning: {warning}", file=sys.stderr)
    inputs = [args.lu_t0, args.lu_t1] + [p for _, p in factor_paths]
    _write_manifest(out, "mine", _resolved_args(args), inputs, outputs,
                    args.seed, {"load": t_load - t0, "mine": t_mine - t_load})
    print(f"mined {result.n_models} models for {len(classes)} classes -> {out}")
    return 0


# --- demand ------------------------------------------------------------------

def cmd_demand(args):
    t0 = time.perf_counter()
    out = _out_dir(args)
    payload = {"version": 1, "scenario": args.scenario}
    inputs = []
    if args.scenario in MOP_SCENARIOS:
        if args.scenario_config:
            _require_file(args.scenario_config, "--scenario-config")
            inputs.append(args.scenario_config)
        config = load_scenario_config(args.scenario_config)
        solution = solve_scenario(args.scenario, config)
        hectares = solution.hectares
        payload["objective_values"] = solution.objective_values
        if solution.ideals:
            payload["ideals"] = solution.ideals
        reference = None
        if args.raster:
            reference = _load_categorical(args.raster, "--raster")
            inputs.append(args.raster)
    else:
        for flag in ("lu_t0", "lu_t1", "year_t0", "year_t1", "target_year"):
            if getattr(args, flag) is None:
                raise UsageError(f"--{flag.replace('_', '-')} is required for BS")
        lu_t0 = _load_categorical(args.lu_t0, "lu-t0")
        lu_t1 = _load_categorical(args.lu_t1, "lu-t1")
        inputs += [args.lu_t0, args.lu_t1]
        hectares = project_baseline(
            lu_t0, lu_t1, args.year_t0, args.year_t1, args.target_year,
            interval_years=args.interval_years,
        )
        reference = lu_t1
    payload["hectares"] = {str(k): v for k, v in sorted(hectares.items())}
    if reference is not None:
        total_cells = sum(class_areas(reference).values())
        schedule = hectares_to_cells(hectares, reference.cell_size, total_cells)
        payload["cells"] = {str(k): v for k, v in sorted(schedule.targets.items())}
    else:
        payload["cells"] = None
    with open(out / "demand.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_manifest(out, "demand", _resolved_args(args), inputs,
                    ["demand.json"], args.seed,
                    {"demand": time.perf_counter() - t0})
    print(f"demand scenario {args.scenario} -> {out / 'demand.json'}")
    return 0


# --- simulate ----------------------------------------------------------------

_SIM_CONFIG_KEYS = {
    "version", "classes", "window", "mu", "delta", "step", "weights", "tm",
    "demands", "seed", "max_iters", "tolerance", "patch_seeding",
}


def _per_class(value, class_ids, label):
    if isinstance(value, dict):
        out = {}
        for key, v in value.items():
            out[int(key)] = float(v)
        missing = [c for c in class_ids if c not in out]
        if missing:
            raise DataError(f"{label}: missing classes {missing}")
        return out
    return {c: float(value) for c in class_ids}


def load_simulation_config(path):
    """Parse the versioned simulation config; unknown keys are errors."""
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    unknown = set(payload) - _SIM_CONFIG_KEYS
    if unknown:
        raise DataError(f"unknown keys in simulation config: {sorted(unknown)}")
    if payload.get("version") != 1:
        raise DataError("simulation config must declare version 1")
    if "classes" not in payload:
        raise DataError("simulation config needs a 'classes' list")
    return payload


def _build_sim_config(payload, args, demand_targets):
    class_ids = [int(c) for c in payload["classes"]]
    if "tm" in payload:
        tm = TransitionMatrix(class_ids, np.asarray(payload["tm"]))
    else:
        tm = TransitionMatrix.allow_all(class_ids)
    seeding = bool(payload.get("patch_seeding", True))
    if args.no_patch_seeding:
        seeding = False
    seed = payload.get("seed", 0)
    if args.seed is not None:
        seed = args.seed
    return SimulationConfig(
        class_ids=class_ids,
        transition=tm,
        demand=DemandSchedule(demand_targets),
        window=int(payload.get("window", 3)),
        weights=_per_class(payload.get("weights", 1.0), class_ids, "weights"),
        seed_thresholds=_per_class(payload.get("mu", 0.1), class_ids, "mu"),
        decay=float(payload.get("delta", 0.9)),
        step=int(payload.get("step", 500)),
        max_iters=int(payload.get("max_iters", 500)),
        tolerance=payload.get("tolerance"),
        rng_seed=int(seed),
        patch_seeding=seeding,
    )


def _load_surfaces(directory, class_ids):
    surfaces = {}
    for class_id in class_ids:
        path = Path(directory) / GROWTH_FILE_PATTERN.format(class_id=class_id)
        if not path.is_file():
            raise DataError(f"missing growth surface file: {path}")
        raster = load_grid(path)
        surfaces[class_id] = raster
    return GrowthSurfaceSet(surfaces, {}, [])


def _demand_from_file(path, initial):
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("version") != 1:
        raise DataError("demand file must declare version 1")
    cells = payload.get("cells")
    if cells is not None:
        return {int(k): int(v) for k, v in cells.items()}
    hectares = {int(k): float(v) for k, v in payload["hectares"].items()}
    total_cells = sum(class_areas(initial).values())
    return hectares_to_cells(hectares, initial.cell_size, total_cells).targets


def cmd_simulate(args):
    t0 = time.perf_counter()
    initial = _load_categorical(args.initial, "--initial")
    _require_file(args.config, "--config")
    payload = load_simulation_config(args.config)
    inputs = [args.initial, args.config]
    if args.demand:
        _require_file(args.demand, "--demand")
        demand_targets = _demand_from_file(args.demand, initial)
        inputs.append(args.demand)
    elif "demands" in payload:
        demand_targets = {int(k): int(v) for k, v in payload["demands"].items()}
    else:
        raise UsageError("no demand given: pass --demand or put 'demands' in the config")
    config = _build_sim_config(payload, args, demand_targets)
    surfaces = _load_surfaces(args.surfaces, config.class_ids)
    for class_id in config.class_ids:
        inputs.append(
            str(Path(args.surfaces) / GROWTH_FILE_PATTERN.format(class_id=class_id))
        )
    t_load = time.perf_counter()
    result = simulate(initial, surfaces, config, threads=args.threads)
    t_sim = time.perf_counter()

    out = _out_dir(args)
    save_ascii_grid(result.final, out / "final.asc")
    with open(out / "trace.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        header = ["iteration", "level", "changes"]
        header += [f"g_{c}" for c in config.class_ids]
        header += [f"d_{c}" for c in config.class_ids]
        writer.writerow(header)
        for row in result.trace:
            record = [row.iteration, row.level, row.changes]
            record += [row.residuals[c] for c in config.class_ids]
            record += [_fmt(row.coefficients[c]) for c in config.class_ids]
            writer.writerow(record)
    with open(out / "changes.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "row", "col", "from", "to"])
        for it, cell, from_c, to_c in result.changes:
            writer.writerow([it, cell // initial.width, cell % initial.width,
                             from_c, to_c])
    _write_manifest(out, "simulate", _resolved_args(args), inputs,
                    ["final.asc", "trace.csv", "changes.csv"],
                    config.rng_seed,
                    {"load": t_load - t0, "simulate": t_sim - t_load})
    status = "converged" if result.converged else "max iterations reached"
    print(f"simulate: {status} after {result.iterations} iterations, "
          f"{result.changes.shape[0]} changes -> {out}")
    return 0


# --- validate / metrics ------------------------------------------------------

def _write_metrics_csv(path, report):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        for metric, value in report.as_dict().items():
            writer.writerow([metric, _fmt(value)])


def _write_comparison(out, table):
    names = sorted(table.closest_counts)
    with open(out / "comparison.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "reference"]
                        + [f"dist_{n}" for n in names] + ["closest"])
        for row in table.rows:
            writer.writerow(
                [row.metric, _fmt(row.reference)]
                + [_fmt(row.distances[n]) for n in names]
                + [";".join(row.winners)]
            )
    with open(out / "closest_counts.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["candidate", "closest_metrics"])
        for name in names:
            writer.writerow([name, table.closest_counts[name]])


def cmd_validate(args):
    t0 = time.perf_counter()
    sims = [(name, path) for name, path in _parse_named(args.sim, "--sim")]
    if not sims:
        raise UsageError("need at least one --sim NAME=PATH")
    out = _out_dir(args)
    outputs = []
    inputs = []
    obs_t1 = _load_categorical(args.obs_t1, "--obs-t1")
    inputs.append(args.obs_t1)
    sim_rasters = {}
    for name, path in sims:
        sim_rasters[name] = _load_categorical(path, f"sim {name!r}")
        inputs.append(path)

    if not args.metrics_only:
        if args.obs_t0 is None:
            raise UsageError("--obs-t0 is required unless --metrics-only")
        obs_t0 = _load_categorical(args.obs_t0, "--obs-t0")
        inputs.append(args.obs_t0)
        with open(out / "fom.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["simulation", "A", "B", "C", "D", "FOM"])
            for name, raster in sim_rasters.items():
                fom = figure_of_merit(obs_t0, obs_t1, raster)
                writer.writerow([
                    name, fom.misses, fom.hits, fom.wrong_class,
                    fom.false_alarms, _fmt(fom.value),
                ])
                print(f"FOM {name}: {fom.value}")
        outputs.append("fom.csv")

    reference = landscape_metrics(obs_t1, args.connectivity)
    _write_metrics_csv(out / "metrics_observed.csv", reference)
    outputs.append("metrics_observed.csv")
    candidates = {}
    for name, raster in sim_rasters.items():
        report = landscape_metrics(raster, args.connectivity)
        candidates[name] = report
        _write_metrics_csv(out / f"metrics_{name}.csv", report)
        outputs.append(f"metrics_{name}.csv")
    table = compare_reports(reference, candidates)
    _write_comparison(out, table)
    outputs += ["comparison.csv", "closest_counts.csv"]
    _write_manifest(out, "validate", _resolved_args(args), inputs, outputs,
                    args.seed, {"validate": time.perf_counter() - t0})
    return 0


def cmd_metrics(args):
    t0 = time.perf_counter()
    rasters = _parse_named(args.raster, "--raster")
    out = _out_dir(args)
    outputs = []
    reports = {}
    for name, path in rasters:
        raster = _load_categorical(path, f"raster {name!r}")
        reports[name] = landscape_metrics(raster, args.connectivity)
        _write_metrics_csv(out / f"metrics_{name}.csv", reports[name])
        outputs.append(f"metrics_{name}.csv")
    if args.reference:
        if args.reference not in reports:
            raise UsageError(f"--reference {args.reference!r} is not among the rasters")
        reference = reports.pop(args.reference)
        if not reports:
            raise UsageError("comparison needs at least one non-reference raster")
        table = compare_reports(reference, reports)
        _write_comparison(out, table)
        outputs += ["comparison.csv", "closest_counts.csv"]
    _write_manifest(out, "metrics", _resolved_args(args),
                    [p for _, p in rasters], outputs, args.seed,
                    {"metrics": time.perf_counter() - t0})
    return 0


# --- rerun -------------------------------------------------------------------

def cmd_rerun(args):
    _require_file(args.manifest, "manifest")
    with open(args.manifest, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != "patchsim-manifest":
        raise DataError(f"{args.manifest} is not a run manifest")
    command = manifest["command"]
    if command not in _HANDLERS:
        raise DataError(f"manifest names unknown command {command!r}")
    stored = dict(manifest["args"])
    if args.out is not None:
        stored["out"] = args.out
    namespace = build_parser().parse_args([command] + _args_to_argv(stored))
    return namespace.func(namespace)


def _args_to_argv(stored):
    """Rebuild an argv list from a manifest's resolved argument dict."""
    argv = []
    for key, value in sorted(stored.items()):
        flag = "--" + key.replace("_", "-")
        if value is None or value is False:
            continue
        if value is True:
            argv.append(flag)
        elif isinstance(value, list):
            for item in value:
                argv += [flag, str(item)]
        else:
            argv += [flag, str(value)]
    return argv


# --- parser -------------------------------------------------------------------

def build_parser():
    parser = _Parser(prog="patchsim", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mine", help="mine growth surfaces from two land-use dates")
    p.add_argument("--lu-t0", required=True, help="earlier land-use raster")
    p.add_argument("--lu-t1", required=True, help="later land-use raster")
    p.add_argument("--factor", action="append", default=[], metavar="NAME=PATH",
                   help="driving factor layer (repeatable, ordered)")
    p.add_argument("--classes", default="all",
                   help="comma-separated class ids to model (default: all)")
    p.add_argument("--rate", type=float, default=0.05,
                   help="sampling rate over eligible cells (default 0.05)")
    p.add_argument("--trees", type=int, default=50,
                   help="trees per class model (default 50)")
    p.add_argument("--mtry", default="auto",
                   help="features per split: auto (=ceil sqrt F), all, or a count")
    p.add_argument("--max-depth", type=int, default=None)
    p.add_argument("--balanced", action="store_true",
                   help="downsample the majority label to the minority count")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--save-forests", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mine)

    p = sub.add_parser("demand", help="build a demand schedule for a scenario")
    p.add_argument("--scenario", required=True, choices=ALL_SCENARIOS)
    p.add_argument("--scenario-config", default=None,
                   help="optimization scenario config JSON (default: packaged)")
    p.add_argument("--raster", default=None,
                   help="reference grid for hectares -> cells conversion")
    p.add_argument("--lu-t0", default=None, help="BS: earlier land-use raster")
    p.add_argument("--lu-t1", default=None, help="BS: later land-use raster")
    p.add_argument("--year-t0", type=float, default=None)
    p.add_argument("--year-t1", type=float, default=None)
    p.add_argument("--target-year", type=float, default=None)
    p.add_argument("--interval-years", type=float, default=None,
                   help="BS projection step (default: year-t1 - year-t0)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_demand)

    p = sub.add_parser("simulate", help="run the patch-growth automaton")
    p.add_argument("--initial", required=True, help="starting land-use raster")
    p.add_argument("--surfaces", required=True,
                   help="directory with growth_k<id>.asc files")
    p.add_argument("--config", required=True, help="simulation config JSON")
    p.add_argument("--demand", default=None, help="demand JSON from `demand`")
    p.add_argument("--seed", type=int, default=None,
                   help="override the config seed")
    p.add_argument("--no-patch-seeding", action="store_true",
                   help="disable spontaneous patch seeds (ablation)")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("validate", help="figure of merit and landscape metrics")
    p.add_argument("--obs-t0", default=None, help="observed earlier raster")
    p.add_argument("--obs-t1", required=True, help="observed later raster")
    p.add_argument("--sim", action="append", default=[], metavar="NAME=PATH",
                   help="simulated raster (repeatable)")
    p.add_argument("--connectivity", type=int, choices=(4, 8), default=8)
    p.add_argument("--metrics-only", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("metrics", help="landscape metrics for rasters")
    p.add_argument("--raster", action="append", default=[], metavar="NAME=PATH",
                   required=True)
    p.add_argument("--reference", default=None,
                   help="raster name to compare the others against")
    p.add_argument("--connectivity", type=int, choices=(4, 8), default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("rerun", help="replay a run manifest bit-exactly")
    p.add_argument("manifest")
    p.add_argument("--out", default=None, help="override the output directory")
    p.set_defaults(func=cmd_rerun)
    return parser


_HANDLERS = {
    "mine": cmd_mine,
    "demand": cmd_demand,
    "simulate": cmd_simulate,
    "validate": cmd_validate,
    "metrics": cmd_metrics,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (SolverError, DemandInfeasibleError) as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return 3


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
