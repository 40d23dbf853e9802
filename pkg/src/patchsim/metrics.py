"""Simulation quality metrics: figure of merit and landscape pattern metrics.

Patches are maximal connected components of equal class (8-connectivity by
default).  Conventions: perimeter-area ratio is meters of edge per hectare;
nearest-neighbor distances are between cell centers, in meters; CV metrics
are percentages (100 * SD / mean) with population standard deviations; the
grid edge and nodata both count as patch boundary, and boundary sides are
excluded from the like-adjacency totals.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import DataError
from .raster import assert_aligned

_STRUCTURES = {
    4: ndimage.generate_binary_structure(2, 1),
    8: ndimage.generate_binary_structure(2, 2),
}

METRIC_ORDER = [
    "NP", "LPI",
    "PARA_MN", "PARA_AM", "PARA_MD", "PARA_RA", "PARA_SD", "PARA_CV",
    "ENN_MN", "ENN_AM", "ENN_MD", "ENN_RA", "ENN_SD", "ENN_CV",
    "PLADJ",
]


@dataclass
class Patch:
    """Connected same-class region with its geometry."""

    class_id: int
    cells: np.ndarray  # flat indices into the grid
    area_ha: float
    perimeter_m: float


@dataclass
class MetricsReport:
    NP: int
    LPI: float
    PARA_MN: float
    PARA_AM: float
    PARA_MD: float
    PARA_RA: float
    PARA_SD: float
    PARA_CV: float
    ENN_MN: float | None
    ENN_AM: float | None
    ENN_MD: float | None
    ENN_RA: float | None
    ENN_SD: float | None
    ENN_CV: float | None
    PLADJ: float

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class FomResult:
    """Figure of merit with its four auditable components (cell counts)."""

    misses: int          # observed change simulated as persistence
    hits: int            # observed change simulated as the correct new class
    wrong_class: int     # observed change simulated as change to a wrong class
    false_alarms: int    # observed persistence simulated as change
    value: float


def _perimeter_edges(labels):
    """Per-label edge counts against the four rook directions.

    An edge is a cell side facing a different label, label 0 (other class or
    nodata), or the grid boundary.
    """
    n_labels = int(labels.max())
    edges = np.zeros(n_labels + 1, dtype=np.int64)
    padded = np.pad(labels, 1, mode="constant", constant_values=0)
    core = padded[1:-1, 1:-1]
    for shifted in (
        padded[:-2, 1:-1], padded[2:, 1:-1],
        padded[1:-1, :-2], padded[1:-1, 2:],
    ):
        mism = (core > 0) & (shifted != core)
        edges += np.bincount(core[mism], minlength=n_labels + 1)
    return edges


def _cells_by_label(labels, n_labels):
    """Flat cell indices per label, via one stable sort of the grid."""
    flat = labels.ravel()
    nz = np.flatnonzero(flat)
    order = nz[np.argsort(flat[nz], kind="stable")]
    counts = np.bincount(flat[nz], minlength=n_labels + 1)
    bounds = np.cumsum(counts)
    return [order[bounds[i - 1]:bounds[i]] for i in range(1, n_labels + 1)]


def patchify(raster, connectivity=8):
    """Connected components of equal class; every valid cell in one patch."""
    if connectivity not in _STRUCTURES:
        raise DataError("connectivity must be 4 or 8")
    structure = _STRUCTURES[connectivity]
    cell_area_ha = raster.cell_size * raster.cell_size / 1e4
    patches = []
    for class_id in sorted(raster.classes):
        mask = raster.cells == class_id
        if not mask.any():
            continue
        labels, n_labels = ndimage.label(mask, structure=structure)
        edges = _perimeter_edges(labels)
        for label_id, cells in enumerate(_cells_by_label(labels, n_labels), start=1):
            patches.append(Patch(
                class_id=class_id,
                cells=cells,
                area_ha=cells.size * cell_area_ha,
                perimeter_m=float(edges[label_id]) * raster.cell_size,
            ))
    return patches


def nearest_neighbor_distances(raster, patches):
    """Per-patch minimum cell-center distance (m) to a same-class patch.

    Patches whose class has a single patch get None.  Only patch boundary
    cells enter the distance search; the minimizing pair always lies on the
    boundaries.
    """
    width = raster.width
    result = [None] * len(patches)
    by_class = {}
    for i, p in enumerate(patches):
        by_class.setdefault(p.class_id, []).append(i)
    label_grid = np.zeros((raster.height, raster.width), dtype=np.int64)
    for members in by_class.values():
        if len(members) < 2:
            continue
        label_grid[:] = 0
        flat = label_grid.ravel()
        for slot, i in enumerate(members, start=1):
            flat[patches[i].cells] = slot
        padded = np.pad(label_grid, 1, mode="constant", constant_values=0)
        core = padded[1:-1, 1:-1]
        boundary = np.zeros_like(core, dtype=bool)
        for shifted in (
            padded[:-2, 1:-1], padded[2:, 1:-1],
            padded[1:-1, :-2], padded[1:-1, 2:],
        ):
            boundary |= (core > 0) & (shifted != core)
        edge_idx = np.flatnonzero(boundary.ravel())
        owner = core.ravel()[edge_idx]
        coords = np.column_stack((edge_idx // width, edge_idx % width)).astype(np.float64)
        for slot, i in enumerate(members, start=1):
            mine = owner == slot
            tree = cKDTree(coords[~mine])
            dist, _ = tree.query(coords[mine], k=1)
            result[i] = float(dist.min()) * raster.cell_size
    return result


def _stats(values, weights):
    """(MN, AM, MD, RA, SD, CV): mean, area-weighted mean, median, range,
    population standard deviation, 100*SD/mean."""
    v = np.asarray(values, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    mn = float(v.mean())
    am = float((v * w).sum() / w.sum())
    md = float(np.median(v))
    ra = float(v.max() - v.min())
    sd = float(v.std())
    cv = 100.0 * sd / mn if mn != 0 else 0.0
    return mn, am, md, ra, sd, cv


def like_adjacency_percentage(raster):
    """100 * like / total over rook cell-side pairs between valid cells."""
    cells = raster.cells
    valid = raster.valid_mask
    likes = total = 0
    for a, b, va, vb in (
        (cells[:, :-1], cells[:, 1:], valid[:, :-1], valid[:, 1:]),
        (cells[:-1, :], cells[1:, :], valid[:-1, :], valid[1:, :]),
    ):
        pair = va & vb
        total += int(pair.sum())
        likes += int((pair & (a == b)).sum())
    if total == 0:
        return 100.0
    return 100.0 * likes / total


def landscape_metrics(raster, connectivity=8):
    """The landscape-level metrics report for one categorical raster."""
    patches = patchify(raster, connectivity)
    if not patches:
        raise DataError("raster has no valid cells")
    areas = np.array([p.area_ha for p in patches])
    cell_counts = np.array([p.cells.size for p in patches], dtype=np.int64)
    para = np.array([p.perimeter_m / p.area_ha for p in patches])
    para_stats = _stats(para, areas)
    enn_all = nearest_neighbor_distances(raster, patches)
    enn_idx = [i for i, d in enumerate(enn_all) if d is not None]
    if enn_idx:
        enn_stats = _stats([enn_all[i] for i in enn_idx], areas[enn_idx])
    else:
        enn_stats = (None,) * 6
    return MetricsReport(
        NP=len(patches),
        # cell counts keep the ratio exact (a uniform raster is exactly 100)
        LPI=100.0 * int(cell_counts.max()) / int(cell_counts.sum()),
        PARA_MN=para_stats[0], PARA_AM=para_stats[1], PARA_MD=para_stats[2],
        PARA_RA=para_stats[3], PARA_SD=para_stats[4], PARA_CV=para_stats[5],
        ENN_MN=enn_stats[0], ENN_AM=enn_stats[1], ENN_MD=enn_stats[2],
        ENN_RA=enn_stats[3], ENN_SD=enn_stats[4], ENN_CV=enn_stats[5],
        PLADJ=like_adjacency_percentage(raster),
    )


def figure_of_merit(obs_t0, obs_t1, sim_t1):
    """FOM = hits / (misses + hits + wrong + false alarms) over valid cells."""
    assert_aligned([obs_t0, obs_t1, sim_t1],
                   names=["obs_t0", "obs_t1", "sim_t1"])
    valid = obs_t0.valid_mask & obs_t1.valid_mask & sim_t1.valid_mask
    t0 = obs_t0.cells[valid]
    t1 = obs_t1.cells[valid]
    sim = sim_t1.cells[valid]
    changed = t0 != t1
    misses = int((changed & (sim == t0)).sum())
    hits = int((changed & (sim == t1)).sum())
    wrong = int((changed & (sim != t0) & (sim != t1)).sum())
    false_alarms = int((~changed & (sim != t0)).sum())
    denom = misses + hits + wrong + false_alarms
    value = hits / denom if denom else 0.0
    return FomResult(misses, hits, wrong, false_alarms, value)


@dataclass
class ComparisonRow:
    metric: str
    reference: float
    distances: dict[str, float | None]
    winners: list[str]  # all candidates tied for closest


@dataclass
class ComparisonTable:
    rows: list[ComparisonRow]
    closest_counts: dict[str, int]


def compare_reports(reference, candidates):
    """Rank candidate reports by per-metric distance to the reference.

    Ties are explicit: every candidate at the minimum distance is listed as
    a winner, and each winner's closest-count is incremented.  Metrics the
    reference does not define (e.g. ENN on a single-patch landscape) are
    skipped.
    """
    if not candidates:
        raise DataError("need at least one candidate report")
    rows = []
    counts = {name: 0 for name in candidates}
    ref = reference.as_dict()
    for metric in METRIC_ORDER:
        ref_value = ref[metric]
        if ref_value is None:
            continue
        distances = {}
        for name, report in candidates.items():
            value = report.as_dict()[metric]
            distances[name] = None if value is None else abs(value - ref_value)
        defined = {n: d for n, d in distances.items() if d is not None}
        winners = []
        if defined:
            best = min(defined.values())
            winners = sorted(n for n, d in defined.items() if d == best)
            for name in winners:
                counts[name] += 1
        rows.append(ComparisonRow(metric, float(ref_value), distances, winners))
    return ComparisonTable(rows, counts)
