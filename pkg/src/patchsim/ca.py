"""Cellular-automaton engine with multi-type random patch seeding.

Each iteration snapshots the raster, recomputes the per-class demand
coefficients from the residual history, then visits every valid cell in a
seeded random permutation.  A cell computes an overall probability per
candidate class (growth probability x neighborhood share x demand
coefficient, with a Monte-Carlo seeding branch where the neighborhood is
empty), roulette-selects a candidate, and commits the change if the
candidate's growth probability beats the decaying acceptance threshold and
the transition matrix allows the conversion.  Neighborhood shares read the
iteration snapshot; commits and demand counters update immediately, so a
class stops competing the moment its target is reached.

Determinism: all random draws for an iteration (visit order, seeding
uniforms, roulette spins, gate thresholds) are pre-generated from a stream
derived from (seed, iteration), and the sweep itself is a single serial
kernel, so results are independent of thread count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .demand import DemandSchedule
from .errors import DataError, DemandInfeasibleError
from .raster import CategoricalRaster, assert_aligned, class_areas
from .util import derive_rng


@dataclass
class TransitionMatrix:
    """Binary admissibility of class-to-class conversions."""

    class_ids: list[int]
    allowed: np.ndarray  # (K, K) uint8, allowed[k][c]: k may convert to c

    def __post_init__(self):
        self.allowed = np.asarray(self.allowed, dtype=np.uint8)
        k = len(self.class_ids)
        if self.allowed.shape != (k, k):
            raise DataError("transition matrix shape must match class count")
        if not np.isin(self.allowed, (0, 1)).all():
            raise DataError("transition matrix entries must be 0 or 1")
        if not (np.diag(self.allowed) == 1).all():
            raise DataError("transition matrix diagonal must be 1 (persistence)")

    @classmethod
    def allow_all(cls, class_ids):
        k = len(class_ids)
        return cls(list(class_ids), np.ones((k, k), dtype=np.uint8))


@dataclass
class SimulationConfig:
    """All engine parameters; defaults follow the standard calibration."""

    class_ids: list[int]
    transition: TransitionMatrix
    demand: DemandSchedule
    window: int = 3
    weights: dict[int, float] = None
    seed_thresholds: dict[int, float] = None  # patch-seeding mu per class
    decay: float = 0.9                        # acceptance threshold decay delta
    step: int = 500                           # demand approximation step size
    max_iters: int = 500
    tolerance: int | None = None              # default: step // 2
    rng_seed: int = 0
    patch_seeding: bool = True

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise DataError("window must be odd and >= 3")
        if not 0 < self.decay < 1:
            raise DataError("decay must lie in (0, 1)")
        if self.step < 1:
            raise DataError("step must be >= 1")
        if self.max_iters < 1:
            raise DataError("max_iters must be >= 1")
        if self.weights is None:
            self.weights = {c: 1.0 for c in self.class_ids}
        if self.seed_thresholds is None:
            self.seed_thresholds = {c: 0.1 for c in self.class_ids}
        for c in self.class_ids:
            if c not in self.weights:
                raise DataError(f"missing neighborhood weight for class {c}")
            if c not in self.seed_thresholds:
                raise DataError(f"missing seed threshold for class {c}")
            mu = self.seed_thresholds[c]
            if not 0 <= mu <= 1:
                raise DataError(f"seed threshold for class {c} outside [0, 1]")
        if self.tolerance is None:
            self.tolerance = max(self.step // 2, 0)
        if self.tolerance < 0:
            raise DataError("tolerance must be >= 0")
        if list(self.transition.class_ids) != list(self.class_ids):
            raise DataError("transition matrix class order must match class_ids")
        missing = [c for c in self.class_ids if c not in self.demand.targets]
        extra = [c for c in self.demand.targets if c not in self.class_ids]
        if missing or extra:
            raise DataError(
                f"demand classes do not match simulation classes "
                f"(missing {missing}, extra {extra})"
            )


# --- single-cell rules (pure, used directly by tests; the sweep kernel
#     inlines the same arithmetic) ------------------------------------------

def neighborhood_effect(snapshot, cell, class_id, window=3, weight=1.0):
    """Share of class_id cells in the window around `cell`, times weight.

    The center cell is excluded and the denominator stays window*window - 1
    even where the grid edge truncates the window.
    """
    if window < 3 or window % 2 == 0:
        raise DataError("window must be odd and >= 3")
    row, col = cell
    r = window // 2
    r0, r1 = max(row - r, 0), min(row + r + 1, snapshot.cells.shape[0])
    c0, c1 = max(col - r, 0), min(col + r + 1, snapshot.cells.shape[1])
    block = snapshot.cells[r0:r1, c0:c1]
    count = int((block == class_id).sum())
    if snapshot.cells[row, col] == class_id:
        count -= 1
    return count / (window * window - 1) * weight


def update_demand_coeff(d_prev, g_t1, g_t2):
    """Self-adaptive demand coefficient from the last two residuals.

    Residuals are current count minus target.  Shrinking (or stable)
    magnitude keeps the coefficient; the two published divergence branches
    rescale it; any remaining sign pattern keeps it (conservative closure).
    """
    if d_prev <= 0:
        raise DataError("demand coefficient must stay positive")
    if abs(g_t1) <= abs(g_t2):
        return d_prev
    if 0 > g_t2 > g_t1:
        return d_prev * (g_t2 / g_t1)
    if g_t1 > g_t2 > 0:
        return d_prev * (g_t1 / g_t2)
    return d_prev


def overall_probability(p, omega, d, seed_threshold, r, seeding):
    """Combined change potential for one cell and class.

    With an empty neighborhood and seeding enabled, a Monte-Carlo draw below
    the growth probability plants a seed with potential p * (r * mu) * d;
    otherwise the potential is p * omega * d.
    """
    if seeding and omega == 0.0 and r < p:
        return p * (r * seed_threshold) * d
    return p * omega * d


def roulette_select(op_values, rng):
    """Index drawn proportionally to the weights; None when all are zero."""
    values = np.asarray(op_values, dtype=np.float64)
    if (values < 0).any():
        raise DataError("overall probabilities must be non-negative")
    total = values.sum()
    if total <= 0:
        return None
    spin = rng.random() * total
    acc = 0.0
    for i, v in enumerate(values):
        acc += v
        if spin < acc:
            return i
    return int(np.flatnonzero(values)[-1])


def descend_threshold(residual_sum_prev, residual_sum_now, step, level):
    """One more decay level whenever aggregate progress fell below step."""
    if residual_sum_prev - residual_sum_now < step:
        return level + 1
    return level


def gate_change(candidate, current, p_candidate, decay, level, r_gate, tm):
    """Accept the candidate iff its growth probability beats the decayed
    threshold and the transition matrix allows the conversion."""
    tau = (decay ** level) * r_gate
    return bool(p_candidate > tau and tm.allowed[current, candidate] == 1)


# --- iteration internals ----------------------------------------------------

def _box_counts(onehot, window):
    """Window sums via an integer summed-area table; edges truncate."""
    h, w = onehot.shape
    r = window // 2
    sat = np.zeros((h + 1, w + 1), dtype=np.int64)
    np.cumsum(np.cumsum(onehot, axis=0), axis=1, out=sat[1:, 1:])
    rows = np.arange(h)
    cols = np.arange(w)
    r0 = np.clip(rows - r, 0, None)[:, None]
    r1 = np.clip(rows + r + 1, None, h)[:, None]
    c0 = np.clip(cols - r, 0, None)[None, :]
    c1 = np.clip(cols + r + 1, None, w)[None, :]
    return sat[r1, c1] - sat[r0, c1] - sat[r1, c0] + sat[r0, c0]


@njit(cache=True, nogil=True)
def _sweep_kernel(perm, state, surf, omega, seed_r, gate_r, wheel_u,
                  d_coeff, mu, tm, cand, g, tau_scale, seeding,
                  ch_cell, ch_from, ch_to):
    """Serial sweep in permutation order; commits update state and residuals
    immediately.  A candidate class freezes the moment it reaches its target
    (live residual check), so growth never overshoots."""
    n_changes = 0
    n_cand = cand.shape[0]
    op = np.empty(n_cand, dtype=np.float64)
    for p in range(perm.shape[0]):
        idx = perm[p]
        k = state[idx]
        total = 0.0
        for ci in range(n_cand):
            c = cand[ci]
            v = 0.0
            if g[c] < 0:
                pr = surf[ci, idx]
                if pr > 0.0:
                    om = omega[ci, idx]
                    if om > 0.0:
                        v = pr * om * d_coeff[c]
                    elif seeding:
                        r = seed_r[ci, idx]
                        if r < pr:
                            v = pr * (r * mu[c]) * d_coeff[c]
            op[ci] = v
            total += v
        if total <= 0.0:
            continue
        spin = wheel_u[idx] * total
        acc = 0.0
        sel = -1
        for ci in range(n_cand):
            acc += op[ci]
            if spin < acc:
                sel = ci
                break
        if sel < 0:  # roulette rounding guard: take the last nonzero slot
            for ci in range(n_cand - 1, -1, -1):
                if op[ci] > 0.0:
                    sel = ci
                    break
        c = cand[sel]
        if c == k:
            continue
        if tm[k, c] == 0:
            continue
        if surf[sel, idx] > tau_scale * gate_r[idx]:
            state[idx] = c
            g[c] += 1
            g[k] -= 1
            ch_cell[n_changes] = idx
            ch_from[n_changes] = k
            ch_to[n_changes] = c
            n_changes += 1
    return n_changes


@dataclass
class IterationTrace:
    iteration: int
    level: int
    changes: int
    residuals: dict[int, int]
    coefficients: dict[int, float]


@dataclass
class SimulationResult:
    final: CategoricalRaster
    trace: list[IterationTrace]
    changes: np.ndarray  # (n, 4): iteration, flat cell index, from, to
    converged: bool
    iterations: int


def _check_feasible(state_idx, valid_flat, surf_full, tm, g, tol, class_ids):
    """Raise when a class whose deficit exceeds the tolerance has no
    admissible source cell left (conversion blocked or probability zero)."""
    src = state_idx[valid_flat]
    for ci, class_id in enumerate(class_ids):
        if g[ci] >= -tol:
            continue
        admissible = (
            (src != ci)
            & (tm[src, ci] == 1)
            & (surf_full[ci, valid_flat] > 0.0)
        )
        if not admissible.any():
            raise DemandInfeasibleError(class_id)


def simulate(initial, surfaces, config, threads=1):
    """Run the demand-driven patch growth automaton to convergence.

    Stops when every residual |current - target| falls within the tolerance,
    or after max_iters sweeps.  Returns the final raster, the per-iteration
    trace, and the change log.  `threads` is accepted for interface symmetry
    with the other stages: the sweep is a single serial kernel, so results
    never depend on it.
    """
    class_ids = list(config.class_ids)
    k = len(class_ids)
    id_to_idx = {c: i for i, c in enumerate(class_ids)}
    unsimulated = set(initial.classes) - set(class_ids)
    if unsimulated:
        raise DataError(
            f"raster legend classes {sorted(unsimulated)} are not in the "
            f"simulation class set {sorted(class_ids)}"
        )
    missing_surfaces = [c for c in class_ids if c not in surfaces.surfaces]
    if missing_surfaces:
        raise DataError(f"missing growth surfaces for classes {missing_surfaces}")
    assert_aligned(
        [initial] + [surfaces.surfaces[c] for c in class_ids],
        names=["initial"] + [f"surface k{c}" for c in class_ids],
    )

    areas = class_areas(initial)
    total_valid = sum(areas.values())
    if config.demand.total() != total_valid:
        raise DataError(
            f"demand total {config.demand.total()} != valid cell count {total_valid}"
        )

    h, w = initial.height, initial.width
    n = h * w
    valid_mask = initial.valid_mask
    valid_flat = np.flatnonzero(valid_mask.ravel())

    # work in dense class-index space; -1 marks nodata
    state_idx = np.full(n, -1, dtype=np.int32)
    for c in class_ids:
        state_idx[(initial.cells == c).ravel()] = id_to_idx[c]

    surf_full = np.ascontiguousarray(np.stack(
        [surfaces.surfaces[c].values.ravel() for c in class_ids]
    ))
    targets = np.array([config.demand.targets[c] for c in class_ids], dtype=np.int64)
    counts = np.array([areas.get(c, 0) for c in class_ids], dtype=np.int64)
    g = counts - targets
    tol = int(config.tolerance)
    mu = np.array([config.seed_thresholds[c] for c in class_ids])
    wgt = np.array([config.weights[c] for c in class_ids])
    tm = config.transition.allowed
    denom = config.window * config.window - 1

    d_coeff = np.ones(k, dtype=np.float64)
    g_history = [g.copy()]
    level = 0
    trace = []
    change_blocks = []
    converged = bool((np.abs(g) <= tol).all())
    iteration = 0

    while not converged and iteration < config.max_iters:
        iteration += 1
        if len(g_history) >= 2:
            for i in range(k):
                d_coeff[i] = update_demand_coeff(
                    d_coeff[i], g_history[-1][i], g_history[-2][i]
                )
        # growth candidacy: classes in strict deficit only; classes at or
        # above target may still lose cells but never gain them
        candidates = np.array(
            [i for i in range(k) if g[i] < 0], dtype=np.int64
        )
        snapshot = state_idx.reshape(h, w)
        omega = np.empty((candidates.size, n), dtype=np.float64)
        for row, ci in enumerate(candidates):
            onehot = (snapshot == ci).astype(np.int64)
            counts_win = _box_counts(onehot, config.window) - onehot
            omega[row] = counts_win.ravel() * (wgt[ci] / denom)

        rng = derive_rng(config.rng_seed, "iteration", iteration)
        perm = rng.permutation(valid_flat)
        seed_r = rng.random((candidates.size, n))
        wheel_u = rng.random(n)
        gate_r = np.clip(rng.normal(1.0, 1.0 / 3.0, n), 0.0, 2.0)

        surf_cand = np.ascontiguousarray(surf_full[candidates])
        ch_cell = np.empty(perm.size, dtype=np.int64)
        ch_from = np.empty(perm.size, dtype=np.int32)
        ch_to = np.empty(perm.size, dtype=np.int32)
        sum_prev = int(np.abs(g).sum())
        n_changes = _sweep_kernel(
            perm, state_idx, surf_cand, omega, seed_r, gate_r, wheel_u,
            d_coeff, mu, tm, candidates, g,
            config.decay ** level, config.patch_seeding,
            ch_cell, ch_from, ch_to,
        )
        sum_now = int(np.abs(g).sum())
        level = descend_threshold(sum_prev, sum_now, config.step, level)

        if n_changes:
            block = np.empty((n_changes, 4), dtype=np.int64)
            block[:, 0] = iteration
            block[:, 1] = ch_cell[:n_changes]
            block[:, 2] = ch_from[:n_changes]
            block[:, 3] = ch_to[:n_changes]
            change_blocks.append(block)
        else:
            _check_feasible(state_idx, valid_flat, surf_full, tm, g, tol,
                            class_ids)

        g_history.append(g.copy())
        trace.append(IterationTrace(
            iteration=iteration,
            level=level,
            changes=int(n_changes),
            residuals={c: int(g[id_to_idx[c]]) for c in class_ids},
            coefficients={c: float(d_coeff[id_to_idx[c]]) for c in class_ids},
        ))
        converged = bool((np.abs(g) <= tol).all())

    final_cells = np.full(n, initial.nodata, dtype=np.int32)
    for c in class_ids:
        final_cells[state_idx == id_to_idx[c]] = c
    legend = {c: initial.classes.get(c, str(c)) for c in class_ids}
    final = CategoricalRaster(
        w, h, initial.cell_size, legend, final_cells,
        initial.nodata, initial.xllcorner, initial.yllcorner,
    )
    if change_blocks:
        changes = np.concatenate(change_blocks)
        changes[:, 2] = np.array(class_ids)[changes[:, 2]]
        changes[:, 3] = np.array(class_ids)[changes[:, 3]]
    else:
        changes = np.empty((0, 4), dtype=np.int64)
    return SimulationResult(final, trace, changes, converged, iteration)
