"""Random-forest binary classifier built from scratch.

CART trees with Gini impurity, bootstrap sampling, per-split random feature
subsets, and out-of-bag permutation importance.  The classifier votes 0/1
per tree; the predicted probability is the exact vote fraction, so outputs
are always multiples of 1/M.

Determinism: every tree draws from its own stream derived from the master
seed and the tree index, so training can be distributed across workers
without changing any result.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .errors import DataError
from .util import derive_rng


@dataclass
class TrainingSet:
    """Sampled cells: features (N, F), binary labels (N,), factor names."""

    features: np.ndarray
    labels: np.ndarray
    feature_names: list[str]

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise DataError("features must be a 2-d matrix")
        n, f = self.features.shape
        if n != self.labels.shape[0]:
            raise DataError("features and labels disagree on sample count")
        if n < 2:
            raise DataError("need at least two samples")
        if f != len(self.feature_names):
            raise DataError("feature_names length must match feature columns")
        if not np.isfinite(self.features).all():
            raise DataError("features contain non-finite values")
        if not np.isin(self.labels, (0, 1)).all():
            raise DataError("labels must be 0 or 1")

    @property
    def n_samples(self):
        return self.features.shape[0]

    @property
    def n_features(self):
        return self.features.shape[1]


@dataclass
class DecisionTree:
    """One CART tree stored as flat arrays in preorder.

    vote[i] >= 0 marks a leaf holding its 0/1 vote; internal nodes have
    vote[i] == -1 and route on feature/threshold (x <= threshold goes left).
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    vote: np.ndarray
    oob_indices: np.ndarray

    @property
    def n_nodes(self):
        return self.feature.shape[0]


@dataclass
class Forest:
    """Trained ensemble; immutable and safe to share across threads."""

    trees: list[DecisionTree]
    mtry: int
    rng_seed: int
    feature_names: list[str]
    _packed: tuple | None = field(default=None, repr=False, compare=False)

    @property
    def n_trees(self):
        return len(self.trees)

    @property
    def n_features(self):
        return len(self.feature_names)

    def packed(self):
        """Concatenated node arrays (feature, threshold, left, right, vote,
        roots) with child links rebased, for the batch traversal kernel."""
        if self._packed is None:
            roots = np.zeros(len(self.trees), dtype=np.int64)
            offset = 0
            feats, thrs, lefts, rights, votes = [], [], [], [], []
            for i, tree in enumerate(self.trees):
                roots[i] = offset
                feats.append(tree.feature)
                thrs.append(tree.threshold)
                shift = np.where(tree.left >= 0, tree.left + offset, -1)
                lefts.append(shift)
                rights.append(np.where(tree.right >= 0, tree.right + offset, -1))
                votes.append(tree.vote)
                offset += tree.n_nodes
            self._packed = (
                np.concatenate(feats).astype(np.int64),
                np.concatenate(thrs).astype(np.float64),
                np.concatenate(lefts).astype(np.int64),
                np.concatenate(rights).astype(np.int64),
                np.concatenate(votes).astype(np.int64),
                roots,
            )
        return self._packed


@dataclass
class VariableImportance:
    """Raw OOB permutation importances and their normalized shares."""

    feature_names: list[str]
    raw: np.ndarray
    normalized: np.ndarray

    def ranking(self):
        """Feature names ordered by descending raw importance."""
        order = np.argsort(-self.raw, kind="stable")
        return [self.feature_names[i] for i in order]


@njit(cache=True, nogil=True)
def _votes_kernel(feature, threshold, left, right, vote, roots, X, out):
    for i in range(X.shape[0]):
        total = 0
        for t in range(roots.shape[0]):
            node = roots[t]
            while vote[node] < 0:
                if X[i, feature[node]] <= threshold[node]:
                    node = left[node]
                else:
                    node = right[node]
            total += vote[node]
        out[i] = total


def _tree_votes(tree, X):
    out = np.empty(X.shape[0], dtype=np.int64)
    roots = np.zeros(1, dtype=np.int64)
    _votes_kernel(
        tree.feature.astype(np.int64), tree.threshold,
        tree.left.astype(np.int64), tree.right.astype(np.int64),
        tree.vote.astype(np.int64), roots,
        np.ascontiguousarray(X, dtype=np.float64), out,
    )
    return out


def _best_split(Xb, yb, idx, features):
    """Scan candidate features for the split minimizing weighted Gini.

    Thresholds are midpoints between consecutive distinct sorted values.
    Ties on the split score go to the lowest feature index (features are
    scanned in ascending order) and then the lowest threshold (argmin takes
    the first minimum while scanning ascending values).
    """
    n = idx.shape[0]
    y = yb[idx]
    best = None  # (score, feature, threshold)
    for j in features:
        x = Xb[idx, j]
        order = np.argsort(x, kind="stable")
        xs = x[order]
        valid = xs[:-1] < xs[1:]
        if not valid.any():
            continue
        c1 = np.cumsum(y[order])[:-1].astype(np.float64)
        n_left = np.arange(1, n, dtype=np.float64)
        c0 = n_left - c1
        total1 = float(y.sum())
        r1 = total1 - c1
        n_right = n - n_left
        r0 = n_right - r1
        # n_side * gini_side summed over sides; constant offsets dropped
        score = (n_left - (c0 * c0 + c1 * c1) / n_left) + (
            n_right - (r0 * r0 + r1 * r1) / n_right
        )
        score = np.where(valid, score, np.inf)
        pos = int(np.argmin(score))
        s = float(score[pos])
        if not np.isfinite(s):
            continue
        if best is None or s < best[0]:
            thr = (float(xs[pos]) + float(xs[pos + 1])) / 2.0
            best = (s, int(j), thr)
    return best


def _grow_tree(Xb, yb, rng, mtry, max_depth):
    """Grow one tree on the bootstrap sample; nodes appended in preorder."""
    n_features = Xb.shape[1]
    feat, thr, left, right, vote = [], [], [], [], []
    # stack of (sample indices, depth, parent position, is-left-child);
    # pushing the right child first yields preorder node numbering
    stack = [(np.arange(yb.shape[0]), 0, -1, False)]
    while stack:
        idx, depth, parent, is_left = stack.pop()
        pos = len(feat)
        if parent >= 0:
            if is_left:
                left[parent] = pos
            else:
                right[parent] = pos
        n = idx.shape[0]
        n1 = int(yb[idx].sum())
        pure = n1 == 0 or n1 == n
        at_depth = max_depth is not None and depth >= max_depth
        split = None
        if not pure and not at_depth and n >= 2:
            chosen = np.sort(rng.choice(n_features, size=mtry, replace=False))
            split = _best_split(Xb, yb, idx, chosen)
        if split is None:
            feat.append(-1)
            thr.append(0.0)
            left.append(-1)
            right.append(-1)
            vote.append(1 if 2 * n1 > n else 0)  # exact tie votes 0
            continue
        _, j, threshold = split
        feat.append(j)
        thr.append(threshold)
        left.append(-1)
        right.append(-1)
        vote.append(-1)
        go_left = Xb[idx, j] <= threshold
        stack.append((idx[~go_left], depth + 1, pos, False))
        stack.append((idx[go_left], depth + 1, pos, True))
    return (
        np.asarray(feat, dtype=np.int64),
        np.asarray(thr, dtype=np.float64),
        np.asarray(left, dtype=np.int64),
        np.asarray(right, dtype=np.int64),
        np.asarray(vote, dtype=np.int64),
    )


def fit_forest(data, m_trees=50, mtry=None, seed=0, max_depth=None):
    """Train a forest of CART trees on bootstrap samples.

    mtry defaults to ceil(sqrt(F)).  Each tree consumes its own RNG stream
    derived from (seed, tree index), so a fixed seed gives a bit-identical
    forest regardless of how training is scheduled.
    """
    if not isinstance(data, TrainingSet):
        raise DataError("fit_forest expects a TrainingSet")
    labels = data.labels
    if labels.min() == labels.max():
        raise DataError("single-label training set: need both 0 and 1 samples")
    n, f = data.features.shape
    if mtry is None:
        mtry = math.ceil(math.sqrt(f))
    if not 1 <= mtry <= f:
        raise DataError(f"mtry must be in [1, {f}], got {mtry}")
    if m_trees < 1:
        raise DataError("m_trees must be >= 1")
    X = data.features
    trees = []
    all_idx = np.arange(n)
    for t in range(m_trees):
        rng = derive_rng(seed, "tree", t)
        boot = rng.integers(0, n, size=n)
        oob = np.setdiff1d(all_idx, boot)
        arrays = _grow_tree(X[boot], labels[boot], rng, mtry, max_depth)
        trees.append(DecisionTree(*arrays, oob_indices=oob))
    return Forest(trees, mtry, seed, list(data.feature_names))


def predict_votes(forest, X, threads=1, block_size=262144):
    """Vote counts (0..M) for each row of X; parallel over row blocks."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != forest.n_features:
        raise DataError(
            f"feature matrix must have {forest.n_features} columns, got {X.shape}"
        )
    feature, threshold, left, right, vote, roots = forest.packed()
    out = np.empty(X.shape[0], dtype=np.int64)
    blocks = [
        (s, min(s + block_size, X.shape[0]))
        for s in range(0, X.shape[0], block_size)
    ]
    if threads > 1 and len(blocks) > 1:
        from concurrent.futures import ThreadPoolExecutor

        def run(span):
            s, e = span
            _votes_kernel(feature, threshold, left, right, vote, roots,
                          X[s:e], out[s:e])

        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run, blocks))
    else:
        for s, e in blocks:
            _votes_kernel(feature, threshold, left, right, vote, roots,
                          X[s:e], out[s:e])
    return out


def predict_proba(forest, x):
    """Growth probability for one feature vector: votes-for-1 / M exactly."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != forest.n_features:
        raise DataError(
            f"feature vector must have {forest.n_features} components, got {x.shape}"
        )
    if not np.isfinite(x).all():
        raise DataError("feature vector contains non-finite values")
    votes = predict_votes(forest, x[None, :])
    return float(votes[0]) / forest.n_trees


def predict_proba_batch(forest, X, threads=1, block_size=262144):
    votes = predict_votes(forest, X, threads=threads, block_size=block_size)
    return votes.astype(np.float64) / forest.n_trees


def variable_importance(forest, data):
    """Out-of-bag permutation importance per feature.

    raw[j] = mean over trees of (OOB error with feature j permuted minus the
    tree's baseline OOB error).  normalized[j] is raw[j] / sum of positive
    raws for positive entries, else 0.
    """
    X = data.features
    y = data.labels
    f = forest.n_features
    raw = np.zeros(f, dtype=np.float64)
    used = 0
    for t, tree in enumerate(forest.trees):
        oob = tree.oob_indices
        if oob.size == 0:
            continue
        used += 1
        rng = derive_rng(forest.rng_seed, "oob-permutation", t)
        Xo = np.ascontiguousarray(X[oob])
        yo = y[oob]
        base_err = float(np.mean(_tree_votes(tree, Xo) != yo))
        for j in range(f):
            perm = rng.permutation(oob.size)
            saved = Xo[:, j].copy()
            Xo[:, j] = saved[perm]
            err = float(np.mean(_tree_votes(tree, Xo) != yo))
            Xo[:, j] = saved
            raw[j] += err - base_err
    if used == 0:
        raise DataError("no tree has out-of-bag samples; training set too small")
    raw /= used
    positive = raw > 0
    normalized = np.zeros(f, dtype=np.float64)
    if positive.any():
        normalized[positive] = raw[positive] / raw[positive].sum()
    return VariableImportance(list(forest.feature_names), raw, normalized)


# --- serialization ---------------------------------------------------------

_FOREST_FORMAT = "patchsim-forest"
_FOREST_VERSION = 1


def forest_to_dict(forest):
    """Self-describing dict: version, tree count, mtry, preorder node lists."""
    return {
        "format": _FOREST_FORMAT,
        "version": _FOREST_VERSION,
        "m_trees": forest.n_trees,
        "mtry": forest.mtry,
        "rng_seed": forest.rng_seed,
        "feature_names": list(forest.feature_names),
        "trees": [
            {
                "nodes": [
                    [int(tree.feature[i]), float(tree.threshold[i]),
                     int(tree.left[i]), int(tree.right[i]), int(tree.vote[i])]
                    for i in range(tree.n_nodes)
                ],
                "oob_indices": tree.oob_indices.tolist(),
            }
            for tree in forest.trees
        ],
    }


def forest_from_dict(payload):
    if payload.get("format") != _FOREST_FORMAT:
        raise DataError("not a serialized forest")
    if payload.get("version") != _FOREST_VERSION:
        raise DataError(f"unsupported forest version {payload.get('version')}")
    trees = []
    for entry in payload["trees"]:
        nodes = np.asarray(entry["nodes"], dtype=np.float64)
        if nodes.ndim != 2 or nodes.shape[1] != 5:
            raise DataError("malformed tree node list")
        trees.append(DecisionTree(
            feature=nodes[:, 0].astype(np.int64),
            threshold=nodes[:, 1].astype(np.float64),
            left=nodes[:, 2].astype(np.int64),
            right=nodes[:, 3].astype(np.int64),
            vote=nodes[:, 4].astype(np.int64),
            oob_indices=np.asarray(entry["oob_indices"], dtype=np.int64),
        ))
    return Forest(trees, int(payload["mtry"]), int(payload["rng_seed"]),
                  list(payload["feature_names"]))


def save_forest(forest, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(forest_to_dict(forest), fh)


def load_forest(path):
    with open(path, "r", encoding="utf-8") as fh:
        return forest_from_dict(json.load(fh))
