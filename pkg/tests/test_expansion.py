import numpy as np
import pytest

from patchsim.errors import DataError
from patchsim.expansion import (
    build_training,
    extract_expansion,
    mine_growth_surfaces,
)
from patchsim.raster import FactorStack
from worlds import make_categorical, make_continuous, planted_world, random_world


def test_no_change_gives_zero_mask():
    raster = random_world(20, 3, seed=1)
    expansion = extract_expansion(raster, raster, 2)
    assert expansion.mask.sum() == 0


def test_hand_overlay():
    t0 = make_categorical([[1, 1], [1, 1]], legend={1: "a", 2: "b"})
    t1 = make_categorical([[1, 2], [1, 2]], legend={1: "a", 2: "b"})
    expansion = extract_expansion(t0, t1, 2)
    assert expansion.mask.tolist() == [[0, 1], [0, 1]]


def test_absent_class_gives_zero_mask():
    t0 = make_categorical([[1, 1], [2, 2]], legend={1: "a", 2: "b", 3: "c"})
    t1 = make_categorical([[2, 1], [2, 2]], legend={1: "a", 2: "b", 3: "c"})
    assert extract_expansion(t0, t1, 3).mask.sum() == 0


def test_unknown_class_rejected():
    t0 = make_categorical([[1]])
    with pytest.raises(DataError, match="unknown class"):
        extract_expansion(t0, t0, 9)


def test_expansion_never_overlaps_source_class(rng):
    t0 = random_world(40, 4, seed=5)
    t1 = random_world(40, 4, seed=6)
    for k in (1, 2, 3, 4):
        expansion = extract_expansion(t0, t1, k)
        assert not (expansion.mask.astype(bool) & (t0.cells == k)).any()


def test_masks_partition_the_change_map(rng):
    t0 = random_world(40, 4, seed=7, nodata_fraction=0.05)
    t1 = random_world(40, 4, seed=8, nodata_fraction=0.05)
    valid = t0.valid_mask & t1.valid_mask
    change = (t0.cells != t1.cells) & valid
    union = np.zeros_like(change)
    total = 0
    for k in (1, 2, 3, 4):
        mask = extract_expansion(t0, t1, k).mask.astype(bool)
        assert not (union & mask).any()  # pairwise disjoint
        union |= mask
        total += mask.sum()
    assert np.array_equal(union, change)
    assert total == change.sum()


def _simple_setup(size=20, seed=0):
    rng = np.random.default_rng(seed)
    t0 = make_categorical(np.ones((size, size)), legend={1: "a", 2: "b"})
    cells = np.ones((size, size), dtype=np.int32)
    cells[: size // 2] = 2
    t1 = make_categorical(cells, legend={1: "a", 2: "b"})
    factors = FactorStack([
        ("f0", make_continuous(rng.random((size, size)))),
        ("f1", make_continuous(rng.random((size, size)))),
    ])
    return t0, t1, factors


def test_rate_one_samples_every_cell():
    t0, t1, factors = _simple_setup()
    expansion = extract_expansion(t0, t1, 2)
    training = build_training(expansion, factors, 1.0, seed=1)
    assert training.n_samples == 400
    assert training.labels.sum() == expansion.mask.sum()


def test_rounding_rule_exact():
    t0, t1, factors = _simple_setup(size=100)  # 10,000 eligible cells
    expansion = extract_expansion(t0, t1, 2)
    training = build_training(expansion, factors, 0.05, seed=1)
    assert training.n_samples == 500


def test_same_seed_same_sample():
    t0, t1, factors = _simple_setup()
    expansion = extract_expansion(t0, t1, 2)
    a = build_training(expansion, factors, 0.3, seed=9)
    b = build_training(expansion, factors, 0.3, seed=9)
    assert np.array_equal(a.features, b.features)
    assert np.array_equal(a.labels, b.labels)


def test_factor_nodata_cells_excluded():
    t0, t1, factors = _simple_setup()
    values = factors.layers[0][1].values.copy()
    values[0, :] = -9999.0
    holey = FactorStack([
        ("f0", make_continuous(values)),
        factors.layers[1],
    ])
    expansion = extract_expansion(t0, t1, 2)
    training = build_training(expansion, holey, 1.0, seed=2)
    assert training.n_samples == 400 - 20


def test_balanced_sampling_equalizes_labels():
    gen = np.random.default_rng(0)
    size = 40
    t0 = make_categorical(np.ones((size, size)), legend={1: "a", 2: "b"})
    cells = np.ones((size, size), dtype=np.int32)
    cells[: size // 8] = 2  # minority expansion: 200 of 1600 cells
    t1 = make_categorical(cells, legend={1: "a", 2: "b"})
    factors = FactorStack([("f0", make_continuous(gen.random((size, size))))])
    expansion = extract_expansion(t0, t1, 2)
    training = build_training(expansion, factors, 1.0, seed=3, balanced=True)
    assert (training.labels == 1).sum() == (training.labels == 0).sum()
    assert training.n_samples == 2 * expansion.mask.sum()
    # balanced draws are a subset of the uniform draw's cells
    full = build_training(expansion, factors, 1.0, seed=3)
    assert training.n_samples < full.n_samples


def test_bad_rate_rejected():
    t0, t1, factors = _simple_setup()
    expansion = extract_expansion(t0, t1, 2)
    for rate in (0.0, -0.5, 1.5):
        with pytest.raises(DataError):
            build_training(expansion, factors, rate, seed=0)


def test_single_label_sample_names_class():
    t0, t1, factors = _simple_setup()
    expansion = extract_expansion(t0, t1, 1)  # class 1 never expands
    with pytest.raises(DataError, match="class 1"):
        build_training(expansion, factors, 0.5, seed=0)


def test_planted_rule_recovery():
    lu_t0, lu_t1, factors, inside = planted_world(size=60, seed=0)
    result = mine_growth_surfaces(
        lu_t0, lu_t1, factors, [2], m_trees=50, rate=0.2, seed=0
    )
    surface = result.surfaces.surfaces[2].values
    assert (surface[inside] >= 0.8).all()
    assert (surface[~inside] <= 0.2).all()
    imp = result.surfaces.importances[2]
    assert imp.ranking()[0] == "dist"


def test_untrainable_class_zero_surface_with_warning():
    lu_t0, lu_t1, factors, _ = planted_world(size=30, seed=1)
    result = mine_growth_surfaces(
        lu_t0, lu_t1, factors, [1, 2], m_trees=10, rate=0.3, seed=0
    )
    # class 1 only loses cells: no expansion anywhere
    assert result.forests[1] is None
    assert result.surfaces.surfaces[1].values.sum() == 0.0
    assert any("class 1" in w for w in result.warnings)
    assert result.forests[2] is not None


def test_seven_classes_train_seven_models():
    size = 40
    gen = np.random.default_rng(0)
    t0 = random_world(size, 7, seed=10)
    # every class gains somewhere: rotate class ids on a scattered subset
    cells = t0.cells.copy()
    move = gen.random((size, size)) < 0.3
    cells[move] = cells[move] % 7 + 1
    t1 = make_categorical(cells, legend=dict(t0.classes))
    factors = FactorStack([
        (f"f{i}", make_continuous(gen.random((size, size)))) for i in range(3)
    ])
    result = mine_growth_surfaces(
        t0, t1, factors, list(range(1, 8)), m_trees=5, rate=0.5, seed=0
    )
    assert result.n_models == 7
    assert len(result.surfaces.surfaces) == 7


def test_surface_region_invariant_under_factor_permutation():
    lu_t0, lu_t1, factors, _ = planted_world(size=40, n_factors=3, seed=2)
    permuted = FactorStack([factors.layers[2], factors.layers[0], factors.layers[1]])
    a = mine_growth_surfaces(lu_t0, lu_t1, factors, [2], m_trees=30,
                             mtry=3, rate=0.3, seed=4)
    b = mine_growth_surfaces(lu_t0, lu_t1, permuted, [2], m_trees=30,
                             mtry=3, rate=0.3, seed=4)
    mask_a = a.surfaces.surfaces[2].values > 0.5
    mask_b = b.surfaces.surfaces[2].values > 0.5
    assert np.array_equal(mask_a, mask_b)


def test_mine_rejects_unknown_classes():
    lu_t0, lu_t1, factors, _ = planted_world(size=20, seed=3)
    with pytest.raises(DataError, match="not in legend"):
        mine_growth_surfaces(lu_t0, lu_t1, factors, [5], m_trees=5, rate=0.5, seed=0)
