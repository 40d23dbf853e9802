"""Demand schedules: Markov projection and multi-objective linear programs.

The baseline scenario extrapolates the calibration-interval transfer
probabilities; the optimization scenarios maximize one or more linear
objectives over land-use areas subject to policy constraints, using an
in-repo two-phase simplex.  Areas are carried in hectares here and turned
into exact cell counts (largest-remainder rounding) at the boundary to the
simulation engine.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .errors import DataError, SolverError
from .raster import assert_aligned, cells_to_hectares, class_areas

RELATIONS = ("<=", ">=", "=")


# --- Markov projection -----------------------------------------------------

@dataclass
class MarkovMatrix:
    """Row-stochastic transfer probabilities over one calibration interval."""

    class_ids: list[int]
    probs: np.ndarray  # (K, K)
    interval_years: float | None = None

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        k = len(self.class_ids)
        if self.probs.shape != (k, k):
            raise DataError("transfer matrix shape must match class count")
        if ((self.probs < 0) | (self.probs > 1)).any():
            raise DataError("transfer probabilities must lie in [0, 1]")
        if not np.allclose(self.probs.sum(axis=1), 1.0, atol=1e-9):
            raise DataError("transfer matrix rows must sum to 1")


def estimate_markov(lu_t0, lu_t1, interval_years=None):
    """Transfer probabilities (k -> c) counted over cells valid at both dates.

    The class set is the union of both legends; classes with no cells at t0
    get an identity row (they persist).
    """
    assert_aligned([lu_t0, lu_t1], names=["lu_t0", "lu_t1"])
    ids = sorted(set(lu_t0.classes) | set(lu_t1.classes))
    k = len(ids)
    lookup = {cid: i for i, cid in enumerate(ids)}
    valid = lu_t0.valid_mask & lu_t1.valid_mask
    a = np.vectorize(lookup.get, otypes=[np.int64])(lu_t0.cells[valid])
    b = np.vectorize(lookup.get, otypes=[np.int64])(lu_t1.cells[valid])
    counts = np.bincount(a * k + b, minlength=k * k).reshape(k, k).astype(np.float64)
    rows = counts.sum(axis=1)
    probs = np.eye(k)
    nonzero = rows > 0
    probs[nonzero] = counts[nonzero] / rows[nonzero, None]
    return MarkovMatrix(ids, probs, interval_years)


def project_markov(areas, markov, steps):
    """Apply the transfer matrix `steps` times to a per-class area vector."""
    if steps < 0:
        raise DataError("steps must be >= 0")
    if set(areas) != set(markov.class_ids):
        raise DataError("area classes do not match the transfer matrix")
    vec = np.array([areas[c] for c in markov.class_ids], dtype=np.float64)
    power = np.linalg.matrix_power(markov.probs, steps)
    out = vec @ power
    return {c: float(v) for c, v in zip(markov.class_ids, out)}


def interpolate_demand(areas_a, year_a, areas_b, year_b, target_year):
    """Componentwise linear blend between two projected area vectors."""
    if year_a >= year_b:
        raise DataError("year_a must precede year_b")
    if not year_a <= target_year <= year_b:
        raise DataError(
            f"target year {target_year} outside [{year_a}, {year_b}]"
        )
    if set(areas_a) != set(areas_b):
        raise DataError("area vectors do not share classes")
    w = (target_year - year_a) / (year_b - year_a)
    return {c: float((1 - w) * areas_a[c] + w * areas_b[c]) for c in areas_a}


def project_baseline(lu_t0, lu_t1, year_t0, year_t1, target_year,
                     interval_years=None):
    """Markov-projected hectares at the target year.

    The matrix is estimated from the two calibration rasters; projections
    step forward by `interval_years` (default: the calibration span) and the
    target is linearly interpolated between the two bracketing steps.
    """
    interval = interval_years if interval_years is not None else (year_t1 - year_t0)
    if interval <= 0:
        raise DataError("projection interval must be positive")
    if target_year < year_t1:
        raise DataError("target year precedes the later land-use date")
    markov = estimate_markov(lu_t0, lu_t1, interval)
    areas_t1 = class_areas(lu_t1)
    base = {
        c: cells_to_hectares(areas_t1.get(c, 0), lu_t1.cell_size)
        for c in markov.class_ids
    }
    span = (target_year - year_t1) / interval
    lo = math.floor(span)
    if span == lo:
        return project_markov(base, markov, lo)
    areas_lo = project_markov(base, markov, lo)
    areas_hi = project_markov(base, markov, lo + 1)
    return interpolate_demand(
        areas_lo, year_t1 + lo * interval,
        areas_hi, year_t1 + (lo + 1) * interval,
        target_year,
    )


# --- demand schedule -------------------------------------------------------

@dataclass
class DemandSchedule:
    """Target cell counts per class; totals must match the grid exactly."""

    targets: dict[int, int]

    def __post_init__(self):
        self.targets = {int(k): int(v) for k, v in self.targets.items()}
        if any(v < 0 for v in self.targets.values()):
            raise DataError("demand targets must be non-negative")

    def total(self):
        return sum(self.targets.values())


def hectares_to_cells(hectares, cell_size, total_cells):
    """Largest-remainder rounding of per-class hectares to cell counts.

    Quotas are rescaled so counts always sum to total_cells exactly; ties on
    the fractional part break toward the lower class id.
    """
    if any(v < 0 for v in hectares.values()):
        raise DataError("hectares must be non-negative")
    ha_per_cell = cell_size * cell_size / 1e4
    quotas = {k: v / ha_per_cell for k, v in hectares.items()}
    qsum = sum(quotas.values())
    if qsum <= 0:
        raise DataError("total demand area must be positive")
    scale = total_cells / qsum
    scaled = {k: q * scale for k, q in quotas.items()}
    base = {k: int(math.floor(v)) for k, v in scaled.items()}
    leftover = total_cells - sum(base.values())
    order = sorted(scaled, key=lambda k: (-(scaled[k] - base[k]), k))
    for k in order[:leftover]:
        base[k] += 1
    return DemandSchedule(base)


# --- linear programming ----------------------------------------------------

@dataclass
class Constraint:
    coeffs: np.ndarray
    relation: str
    rhs: float
    name: str = ""

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=np.float64)
        if self.relation not in RELATIONS:
            raise DataError(f"relation must be one of {RELATIONS}")
        if not np.isfinite(self.coeffs).all() or not np.isfinite(self.rhs):
            raise DataError("constraint coefficients must be finite")


@dataclass
class LinearProgram:
    """max/min c'x subject to rows of (coeffs relation rhs), x >= 0."""

    objective: np.ndarray
    constraints: list[Constraint]

    def __post_init__(self):
        self.objective = np.asarray(self.objective, dtype=np.float64)
        if not np.isfinite(self.objective).all():
            raise DataError("objective coefficients must be finite")
        if not self.constraints:
            raise DataError("need at least one constraint")
        for c in self.constraints:
            if c.coeffs.shape != self.objective.shape:
                raise DataError(
                    f"constraint {c.name!r} has {c.coeffs.shape[0]} coefficients, "
                    f"objective has {self.objective.shape[0]}"
                )


@dataclass
class LpSolution:
    x: np.ndarray
    objective: float


_PIVOT_TOL = 1e-9
_MAX_PIVOTS = 20000


def _bland_min(T, rhs, z, basis, tol=_PIVOT_TOL):
    """Minimize with Bland's rule; mutates tableau in place.

    Returns "optimal" or "unbounded".  Entering variable: lowest column
    index with negative reduced cost; leaving: minimum ratio, ties to the
    lowest basis variable index.  Bland's rule cannot cycle.
    """
    for _ in range(_MAX_PIVOTS):
        enter = -1
        for j in range(z.shape[0]):
            if z[j] < -tol:
                enter = j
                break
        if enter < 0:
            return "optimal"
        col = T[:, enter]
        best_ratio, leave = None, -1
        for i in range(T.shape[0]):
            if col[i] > tol:
                ratio = rhs[i] / col[i]
                if (best_ratio is None or ratio < best_ratio - tol
                        or (abs(ratio - best_ratio) <= tol
                            and basis[i] < basis[leave])):
                    best_ratio, leave = ratio, i
        if leave < 0:
            return "unbounded"
        pivot = T[leave, enter]
        T[leave] /= pivot
        rhs[leave] /= pivot
        for i in range(T.shape[0]):
            if i != leave and T[i, enter] != 0.0:
                f = T[i, enter]
                T[i] -= f * T[leave]
                rhs[i] -= f * rhs[leave]
        zf = z[enter]
        z -= zf * T[leave]
        basis[leave] = enter
    raise SolverError("simplex iteration limit exceeded")


def _reduced_costs(T, cost, basis):
    z = cost.copy()
    for i, bv in enumerate(basis):
        if cost[bv] != 0.0:
            z -= cost[bv] * T[i]
    return z


def solve_lp(lp, sense="max"):
    """Two-phase dense simplex.  Raises SolverError with kind "infeasible"
    or "unbounded" when the program has no optimum."""
    if sense not in ("max", "min"):
        raise DataError("sense must be 'max' or 'min'")
    n = lp.objective.shape[0]
    m = len(lp.constraints)
    A = np.array([c.coeffs for c in lp.constraints], dtype=np.float64)
    b = np.array([c.rhs for c in lp.constraints], dtype=np.float64)
    rel = [c.relation for c in lp.constraints]

    # equilibrate rows so pivot tolerances are scale-free
    for i in range(m):
        s = np.abs(A[i]).max()
        if s == 0.0:
            ok = (rel[i] == "<=" and b[i] >= -_PIVOT_TOL) or \
                 (rel[i] == ">=" and b[i] <= _PIVOT_TOL) or \
                 (rel[i] == "=" and abs(b[i]) <= _PIVOT_TOL)
            if not ok:
                raise SolverError(
                    f"constraint {lp.constraints[i].name!r} is unsatisfiable",
                    kind="infeasible",
                )
            continue
        A[i] /= s
        b[i] /= s
    keep = [i for i in range(m) if np.abs(A[i]).max() > 0.0]
    A, b = A[keep], b[keep]
    rel = [rel[i] for i in keep]
    m = len(rel)
    if m == 0:
        raise DataError("no binding constraints after normalization")
    for i in range(m):
        if b[i] < 0:
            A[i] = -A[i]
            b[i] = -b[i]
            rel[i] = {"<=": ">=", ">=": "<=", "=": "="}[rel[i]]

    n_slack = sum(1 for r in rel if r == "<=")
    n_surplus = sum(1 for r in rel if r == ">=")
    n_art = sum(1 for r in rel if r in (">=", "="))
    total = n + n_slack + n_surplus + n_art
    T = np.zeros((m, total), dtype=np.float64)
    rhs = b.copy()
    T[:, :n] = A
    basis = [0] * m
    s_at, p_at, a_at = n, n + n_slack, n + n_slack + n_surplus
    si = pi = ai = 0
    art_cols = []
    for i in range(m):
        if rel[i] == "<=":
            T[i, s_at + si] = 1.0
            basis[i] = s_at + si
            si += 1
        elif rel[i] == ">=":
            T[i, p_at + pi] = -1.0
            pi += 1
            T[i, a_at + ai] = 1.0
            basis[i] = a_at + ai
            art_cols.append(a_at + ai)
            ai += 1
        else:
            T[i, a_at + ai] = 1.0
            basis[i] = a_at + ai
            art_cols.append(a_at + ai)
            ai += 1

    if art_cols:
        cost1 = np.zeros(total)
        cost1[art_cols] = 1.0
        z = _reduced_costs(T, cost1, basis)
        status = _bland_min(T, rhs, z, basis)
        if status != "optimal":
            raise SolverError("phase 1 did not terminate")
        infeas = sum(rhs[i] for i in range(m) if basis[i] in art_cols)
        if infeas > 1e-7 * max(1.0, float(np.abs(b).max())):
            raise SolverError("program is infeasible", kind="infeasible")
        # drive remaining artificials out of the basis or drop their rows
        art_set = set(art_cols)
        drop = []
        for i in range(m):
            if basis[i] in art_set:
                piv = -1
                for j in range(total):
                    if j not in art_set and abs(T[i, j]) > _PIVOT_TOL:
                        piv = j
                        break
                if piv < 0:
                    drop.append(i)
                    continue
                p = T[i, piv]
                T[i] /= p
                rhs[i] /= p
                for r in range(m):
                    if r != i and T[r, piv] != 0.0:
                        f = T[r, piv]
                        T[r] -= f * T[i]
                        rhs[r] -= f * rhs[i]
                basis[i] = piv
        if drop:
            keep_rows = [i for i in range(m) if i not in drop]
            T = T[keep_rows]
            rhs = rhs[keep_rows]
            basis = [basis[i] for i in keep_rows]
            m = len(basis)
        keep_cols = [j for j in range(total) if j not in art_set]
        remap = {old: new for new, old in enumerate(keep_cols)}
        T = T[:, keep_cols]
        basis = [remap[bv] for bv in basis]
        total = len(keep_cols)

    cost2 = np.zeros(total)
    cost2[:n] = -lp.objective if sense == "max" else lp.objective
    z = _reduced_costs(T, cost2, basis)
    status = _bland_min(T, rhs, z, basis)
    if status == "unbounded":
        raise SolverError("program is unbounded", kind="unbounded")
    x_full = np.zeros(total)
    for i, bv in enumerate(basis):
        x_full[bv] = rhs[i]
    x = np.where(np.abs(x_full[:n]) < 1e-11, 0.0, x_full[:n])
    return LpSolution(x, float(lp.objective @ x))


# --- scenario programs -----------------------------------------------------

_CONFIG_KEYS = {"version", "total_area_ha", "classes", "objectives",
                "constraints", "scenarios"}
_CONSTRAINT_KEYS = {"name", "coeffs", "relation", "rhs", "rhs_share", "enabled"}
_SCENARIO_KEYS = {"objectives", "weights"}

MOP_SCENARIOS = ("ED", "EP", "SD")
ALL_SCENARIOS = ("BS",) + MOP_SCENARIOS


@dataclass
class ScenarioConfig:
    total_area_ha: float
    class_ids: list[int]
    class_names: dict[int, str]
    objectives: dict[str, np.ndarray]
    constraints: list[Constraint]
    scenarios: dict[str, list[str]]
    weights: dict[str, list[float]] = field(default_factory=dict)


def _reject_unknown(mapping, allowed, where):
    unknown = set(mapping) - allowed
    if unknown:
        raise DataError(f"unknown keys in {where}: {sorted(unknown)}")


def parse_scenario_config(payload):
    _reject_unknown(payload, _CONFIG_KEYS, "scenario config")
    if payload.get("version") != 1:
        raise DataError("scenario config must declare version 1")
    total = float(payload["total_area_ha"])
    classes = payload["classes"]
    class_ids = [int(c["id"]) for c in classes]
    names = {int(c["id"]): str(c["name"]) for c in classes}
    if len(set(class_ids)) != len(class_ids):
        raise DataError("duplicate class ids in scenario config")
    k = len(class_ids)
    objectives = {}
    for name, coeffs in payload["objectives"].items():
        arr = np.asarray(coeffs, dtype=np.float64)
        if arr.shape != (k,):
            raise DataError(f"objective {name!r} needs {k} coefficients")
        objectives[name] = arr
    rows = []
    for row in payload["constraints"]:
        _reject_unknown(row, _CONSTRAINT_KEYS, f"constraint {row.get('name')!r}")
        if not row.get("enabled", True):
            continue
        if ("rhs" in row) == ("rhs_share" in row):
            raise DataError(
                f"constraint {row.get('name')!r} needs exactly one of rhs/rhs_share"
            )
        rhs = float(row["rhs"]) if "rhs" in row else float(row["rhs_share"]) * total
        rows.append(Constraint(row["coeffs"], row["relation"], rhs,
                               row.get("name", "")))
    scenarios = {}
    weights = {}
    for name, entry in payload["scenarios"].items():
        _reject_unknown(entry, _SCENARIO_KEYS, f"scenario {name!r}")
        objs = list(entry["objectives"])
        for o in objs:
            if o not in objectives:
                raise DataError(f"scenario {name!r} references unknown objective {o!r}")
        scenarios[name] = objs
        if "weights" in entry:
            w = [float(v) for v in entry["weights"]]
            if len(w) != len(objs):
                raise DataError(f"scenario {name!r}: one weight per objective")
            weights[name] = w
    return ScenarioConfig(total, class_ids, names, objectives, rows,
                          scenarios, weights)


def load_scenario_config(path=None):
    """Load a scenario config; the packaged default when no path given."""
    if path is None:
        text = resources.files("patchsim.data").joinpath(
            "default_scenarios.json").read_text("utf-8")
    else:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    return parse_scenario_config(json.loads(text))


@dataclass
class ScenarioSolution:
    scenario: str
    hectares: dict[int, float]
    objective_values: dict[str, float]
    ideals: dict[str, float] = field(default_factory=dict)


def solve_scenario(name, config):
    """Optimal per-class hectares for one optimization scenario.

    Single-objective scenarios maximize that objective directly.  Multi-
    objective ones maximize an equal-weight sum of the objectives, each
    normalized by its own single-objective optimum over the same feasible
    set (weights overridable in the config).
    """
    if name not in config.scenarios:
        raise DataError(f"unknown scenario {name!r}")
    selected = config.scenarios[name]
    ideals = {}
    if len(selected) == 1:
        lp = LinearProgram(config.objectives[selected[0]], config.constraints)
        sol = solve_lp(lp, sense="max")
        x = sol.x
    else:
        for obj in selected:
            lp = LinearProgram(config.objectives[obj], config.constraints)
            ideals[obj] = solve_lp(lp, sense="max").objective
        w = config.weights.get(name, [1.0] * len(selected))
        scalar = np.zeros(len(config.class_ids))
        for weight, obj in zip(w, selected):
            denom = ideals[obj] if ideals[obj] > 0 else 1.0
            scalar += weight * config.objectives[obj] / denom
        sol = solve_lp(LinearProgram(scalar, config.constraints), sense="max")
        x = sol.x
    hectares = {cid: float(v) for cid, v in zip(config.class_ids, x)}
    values = {obj: float(coeffs @ x) for obj, coeffs in config.objectives.items()}
    return ScenarioSolution(name, hectares, values, ideals)
