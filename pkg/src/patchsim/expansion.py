"""Expansion-based transition rule mining.

Between two land-use dates, the cells a class gained (its expansion,
merging all source classes) define a binary classification problem against
the driving factors.  One forest per class turns that into a growth
probability surface plus per-factor importances, so K classes cost K
models rather than one per ordered class pair.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .forest import (
    TrainingSet,
    VariableImportance,
    fit_forest,
    predict_proba_batch,
    variable_importance,
)
from .raster import CategoricalRaster, ContinuousRaster, assert_aligned
from .util import derive_seed

GROWTH_FILE_PATTERN = "growth_k{class_id}.asc"


@dataclass
class ExpansionMap:
    """Binary mask of cells class_id gained between the two dates."""

    class_id: int
    mask: np.ndarray  # (H, W) uint8
    valid: np.ndarray  # cells valid at both dates


@dataclass
class GrowthSurfaceSet:
    """Per-class growth probability rasters plus factor importances."""

    surfaces: dict[int, ContinuousRaster]
    importances: dict[int, VariableImportance]
    factor_names: list[str]

    def __post_init__(self):
        for cid, surface in self.surfaces.items():
            values = surface.values
            if ((values < 0) | (values > 1)).any():
                raise DataError(f"growth surface for class {cid} leaves [0, 1]")
        for cid, imp in self.importances.items():
            if list(imp.feature_names) != list(self.factor_names):
                raise DataError(
                    f"importance for class {cid} has mismatched factor ordering"
                )

    @property
    def class_ids(self):
        return sorted(self.surfaces)


@dataclass
class MiningResult:
    surfaces: GrowthSurfaceSet
    forests: dict  # class id -> Forest | None (untrainable)
    warnings: list[str] = field(default_factory=list)

    @property
    def n_models(self):
        return sum(1 for f in self.forests.values() if f is not None)


def extract_expansion(lu_t0, lu_t1, class_id):
    """Cells that are class_id at t1 but were anything else at t0."""
    assert_aligned([lu_t0, lu_t1], names=["lu_t0", "lu_t1"])
    if class_id not in lu_t0.classes and class_id not in lu_t1.classes:
        raise DataError(f"unknown class {class_id}")
    valid = lu_t0.valid_mask & lu_t1.valid_mask
    mask = (lu_t1.cells == class_id) & (lu_t0.cells != class_id) & valid
    return ExpansionMap(class_id, mask.astype(np.uint8), valid)


def build_training(expansion, factors, rate, seed, balanced=False):
    """Uniform sample of round(rate * eligible) cells, labeled by expansion.

    Eligible cells are valid at both land-use dates and defined in every
    factor layer.  With balanced=True the majority label is downsampled to
    the minority count after the uniform draw.  Deterministic for a fixed
    seed.
    """
    if not 0 < rate <= 1:
        raise DataError(f"sampling rate must be in (0, 1], got {rate}")
    eligible = expansion.valid & factors.valid_mask()
    eligible_idx = np.flatnonzero(eligible.ravel())
    if eligible_idx.size == 0:
        raise DataError("no eligible cells to sample")
    n = int(round(rate * eligible_idx.size))
    if n == 0:
        raise DataError(
            f"sampling rate {rate} selects zero of {eligible_idx.size} cells"
        )
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(eligible_idx, size=n, replace=False))
    labels = expansion.mask.ravel()[chosen].astype(np.int64)
    if labels.min() == labels.max():
        raise DataError(
            f"class {expansion.class_id}: sample contains a single label"
        )
    if balanced:
        ones = np.flatnonzero(labels == 1)
        zeros = np.flatnonzero(labels == 0)
        minority, majority = (ones, zeros) if ones.size < zeros.size else (zeros, ones)
        kept_majority = rng.choice(majority, size=minority.size, replace=False)
        keep = np.sort(np.concatenate([minority, kept_majority]))
        chosen = chosen[keep]
        labels = labels[keep]
    features = factors.values_at(chosen)
    return TrainingSet(features, labels, list(factors.names))


def evaluate_surface(forest, factors, eligible_mask, threads=1):
    """Forest probability at every eligible cell; zero elsewhere."""
    grid_shape = eligible_mask.shape
    probs = np.zeros(grid_shape[0] * grid_shape[1], dtype=np.float64)
    idx = np.flatnonzero(eligible_mask.ravel())
    if idx.size:
        X = factors.values_at(idx)
        probs[idx] = predict_proba_batch(forest, X, threads=threads)
    return probs.reshape(grid_shape)


def mine_growth_surfaces(lu_t0, lu_t1, factors, classes, *, m_trees=50,
                         mtry=None, rate=0.05, seed=0, balanced=False,
                         max_depth=None, threads=1):
    """Mine a growth surface and importances for each class.

    Classes whose expansion cannot train a model (no expansion cells, or a
    single-label sample) get an all-zero surface and a warning instead of
    failing the run.  One forest is trained per class.
    """
    assert_aligned([lu_t0, lu_t1] + [r for _, r in factors.layers],
                   names=["lu_t0", "lu_t1"] + list(factors.names))
    legend = set(lu_t0.classes) | set(lu_t1.classes)
    missing = [k for k in classes if k not in legend]
    if missing:
        raise DataError(f"classes not in legend: {missing}")

    eligible = lu_t0.valid_mask & lu_t1.valid_mask & factors.valid_mask()
    template = factors.layers[0][1]
    surfaces, importances, forests, warnings = {}, {}, {}, []
    zero_importance = VariableImportance(
        list(factors.names),
        np.zeros(len(factors)), np.zeros(len(factors)),
    )
    for class_id in classes:
        expansion = extract_expansion(lu_t0, lu_t1, class_id)
        values = np.zeros((lu_t0.height, lu_t0.width), dtype=np.float64)
        if expansion.mask.sum() == 0:
            warnings.append(
                f"class {class_id}: no expansion cells; emitting zero surface"
            )
            forests[class_id] = None
            importances[class_id] = zero_importance
        else:
            try:
                training = build_training(
                    expansion, factors, rate,
                    derive_seed(seed, "sample", class_id), balanced=balanced,
                )
            except DataError as exc:
                warnings.append(f"class {class_id}: untrainable ({exc})")
                forests[class_id] = None
                importances[class_id] = zero_importance
            else:
                model = fit_forest(
                    training, m_trees=m_trees, mtry=mtry,
                    seed=derive_seed(seed, "forest", class_id),
                    max_depth=max_depth,
                )
                forests[class_id] = model
                importances[class_id] = variable_importance(model, training)
                values = evaluate_surface(model, factors, eligible, threads=threads)
        surfaces[class_id] = ContinuousRaster(
            template.width, template.height, template.cell_size, values,
            nodata=-9999.0, xllcorner=template.xllcorner,
            yllcorner=template.yllcorner,
        )
    result = GrowthSurfaceSet(surfaces, importances, list(factors.names))
    return MiningResult(result, forests, warnings)
