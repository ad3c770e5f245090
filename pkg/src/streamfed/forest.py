"""Random-forest meta-learner over raw features and subset-model predictions.

A calibration row joins a client's raw stream values with the argmax
prediction of every subset model it holds. Trees are CART classifiers with
Gini splits of the form ``x <= threshold`` where the threshold is a value
observed in the node's training samples. Prediction columns are treated as
ordinal. With ``n_trees=1``, ``bootstrap=False`` and
``feature_bag_fraction=1`` the forest is a single deterministic decision tree.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import nn
from .dataset import N_CLASSES, DegenerateDataWarning, Normalizer, PatientDataset
from .nn import ModelParams
from .streams import StreamSubset, power_set

PRED_PREFIX = "pred:"


@dataclass(frozen=True)
class CalibrationRow:
    features: Mapping[str, float]
    model_preds: Mapping[StreamSubset, int]
    label: int | None = None


def schema_for(streams: StreamSubset) -> list[str]:
    """Column names for a client owning `streams`: raw features, then predictions."""
    return list(streams.members) + [PRED_PREFIX + s.key for s in power_set(streams)]


def row_vector(row: CalibrationRow, columns: Sequence[str]) -> np.ndarray:
    feats = set(row.features)
    preds = {PRED_PREFIX + s.key for s in row.model_preds}
    if feats | preds != set(columns) or len(feats) + len(preds) != len(columns):
        raise ValueError(
            f"row columns {sorted(feats | preds)} do not match schema {list(columns)}"
        )
    by_key = {PRED_PREFIX + s.key: v for s, v in row.model_preds.items()}
    return np.array(
        [by_key[c] if c.startswith(PRED_PREFIX) else row.features[c] for c in columns],
        dtype=np.float64,
    )


def calibration_matrix(
    client_models: Mapping[StreamSubset, ModelParams],
    window: PatientDataset,
    normalizer: Normalizer | None = None,
) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Column-wise form of :func:`build_calibration`: (X, y, columns)."""
    if len(window) == 0:
        raise ValueError("calibration window is empty")
    subsets = power_set(window.streams)
    missing = [s.key for s in subsets if s not in client_models]
    if missing:
        raise ValueError(f"no model for subsets: {', '.join(missing)}")
    norm_vals = (
        normalizer.transform_values(window.streams, window.values)
        if normalizer is not None
        else window.values
    )
    cols = [window.values]
    for s in subsets:
        idx = [window.streams.members.index(m) for m in s]
        cols.append(nn.predict(client_models[s], norm_vals[:, idx])[:, None].astype(np.float64))
    return np.hstack(cols), window.labels.copy(), schema_for(window.streams)


def build_calibration(
    client_models: Mapping[StreamSubset, ModelParams],
    window: PatientDataset,
    normalizer: Normalizer | None = None,
) -> list[CalibrationRow]:
    """One row per window record: raw values, each subset model's class, label.

    Models see the record projected onto their subset (and normalized with
    `normalizer` when one is given); raw features are kept in stream units.
    """
    X, y, columns = calibration_matrix(client_models, window, normalizer)
    subsets = power_set(window.streams)
    k = len(window.streams)
    rows = []
    for xi, yi in zip(X, y):
        rows.append(
            CalibrationRow(
                dict(zip(columns[:k], xi[:k].tolist())),
                {s: int(v) for s, v in zip(subsets, xi[k:])},
                int(yi),
            )
        )
    return rows


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 32
    max_depth: int = 12
    min_samples_leaf: int = 1
    feature_bag_fraction: float = 0.3
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1 or self.max_depth < 1 or self.min_samples_leaf < 1:
            raise ValueError("n_trees, max_depth and min_samples_leaf must be >= 1")
        if not 0 < self.feature_bag_fraction <= 1:
            raise ValueError("feature_bag_fraction must lie in (0, 1]")


@dataclass
class Tree:
    """Flat node arrays; ``feature[i] == -1`` marks a leaf."""

    feature: list[int] = field(default_factory=list)
    threshold: list[float] = field(default_factory=list)
    left: list[int] = field(default_factory=list)
    right: list[int] = field(default_factory=list)
    value: list[list[float]] = field(default_factory=list)
    n_samples: list[int] = field(default_factory=list)

    def add(self, feature, threshold, dist, n) -> int:
        self.feature.append(feature)
        self.threshold.append(threshold)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(dist)
        self.n_samples.append(n)
        return len(self.feature) - 1

    def leaf_for(self, x: np.ndarray) -> int:
        i = 0
        while self.feature[i] >= 0:
            i = self.left[i] if x[self.feature[i]] <= self.threshold[i] else self.right[i]
        return i

    def predict_one(self, x: np.ndarray) -> int:
        return int(np.argmax(self.value[self.leaf_for(x)]))


@dataclass
class ForestModel:
    trees: list[Tree]
    columns: list[str]
    config: ForestConfig = field(default_factory=ForestConfig)
    n_classes: int = N_CLASSES
    warnings: list[str] = field(default_factory=list)

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def votes(self, x: np.ndarray) -> np.ndarray:
        return np.bincount(
            [t.predict_one(x) for t in self.trees], minlength=self.n_classes
        )

    def predict_matrix(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != len(self.columns):
            raise ValueError(f"expected {len(self.columns)} columns, got shape {X.shape}")
        # argmax picks the lowest class index among tied vote counts
        return np.array([int(np.argmax(self.votes(x))) for x in X], dtype=np.int64)

    def split_counts(self) -> dict[str, int]:
        counts = dict.fromkeys(self.columns, 0)
        for t in self.trees:
            for f in t.feature:
                if f >= 0:
                    counts[self.columns[f]] += 1
        return counts

    def root_features(self) -> list[str | None]:
        return [self.columns[t.feature[0]] if t.feature[0] >= 0 else None for t in self.trees]


def predict(forest: ForestModel, row: CalibrationRow) -> int:
    """Majority vote over trees; ties go to the lowest class index."""
    return int(forest.predict_matrix(row_vector(row, forest.columns)[None, :])[0])


# ---------------------------------------------------------------------------
# training


def _gini_best_split(x: np.ndarray, onehot: np.ndarray, min_leaf: int):
    """Best ``x <= t`` split of one feature: (weighted impurity, threshold) or None."""
    order = np.argsort(x, kind="stable")
    xs = x[order]
    n = len(xs)
    # candidate cut after position i keeps xs[:i+1] on the left
    cut = np.flatnonzero(xs[:-1] < xs[1:])
    if cut.size == 0:
        return None
    n_left = cut + 1
    ok = (n_left >= min_leaf) & (n - n_left >= min_leaf)
    cut, n_left = cut[ok], n_left[ok]
    if cut.size == 0:
        return None
    cum = np.cumsum(onehot[order], axis=0)
    left = cum[cut]
    right = cum[-1] - left
    n_right = n - n_left
    g_left = 1.0 - np.sum((left / n_left[:, None]) ** 2, axis=1)
    g_right = 1.0 - np.sum((right / n_right[:, None]) ** 2, axis=1)
    score = (n_left * g_left + n_right * g_right) / n
    j = int(np.argmin(score))
    return float(score[j]), float(xs[cut[j]])


def _grow(X, y, cfg: ForestConfig, n_classes: int, rng: np.random.Generator) -> Tree:
    tree = Tree()
    n_features = X.shape[1]
    m = max(1, int(round(cfg.feature_bag_fraction * n_features)))
    onehot_all = np.eye(n_classes)[y]

    stack = [(np.arange(len(y)), 0, None, None)]
    while stack:
        idx, depth, parent, side = stack.pop()
        counts = onehot_all[idx].sum(axis=0)
        dist = (counts / counts.sum()).tolist()
        node = tree.add(-1, 0.0, dist, len(idx))
        if parent is not None:
            (tree.left if side == 0 else tree.right)[parent] = node

        parent_gini = 1.0 - float(np.sum((counts / counts.sum()) ** 2))
        if depth >= cfg.max_depth or parent_gini <= 1e-12 or len(idx) < 2 * cfg.min_samples_leaf:
            continue
        if m < n_features:
            feats = np.sort(rng.choice(n_features, m, replace=False))
        else:
            feats = np.arange(n_features)
        best = None
        for f in feats:
            hit = _gini_best_split(X[idx, f], onehot_all[idx], cfg.min_samples_leaf)
            if hit is not None and (best is None or hit[0] < best[0]):
                best = (hit[0], int(f), hit[1])
        if best is None or best[0] >= parent_gini - 1e-12:
            continue
        _, f, thr = best
        tree.feature[node] = f
        tree.threshold[node] = thr
        go_left = X[idx, f] <= thr
        # right pushed first so the left subtree is numbered first
        stack.append((idx[~go_left], depth + 1, node, 1))
        stack.append((idx[go_left], depth + 1, node, 0))
    return tree


def train_forest_matrix(
    X: np.ndarray,
    y: np.ndarray,
    columns: Sequence[str],
    cfg: ForestConfig = ForestConfig(),
    n_classes: int = N_CLASSES,
) -> ForestModel:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(y) == 0:
        raise ValueError("no calibration rows")
    if X.shape != (len(y), len(columns)):
        raise ValueError("matrix shape does not match labels and columns")
    notes = []
    if len(np.unique(y)) < 2:
        msg = f"single-label calibration data (class {int(y[0])}); forest is a constant predictor"
        warnings.warn(msg, DegenerateDataWarning, stacklevel=2)
        notes.append(msg)

    rng = np.random.default_rng(cfg.seed)
    trees = []
    n = len(y)
    for _ in range(cfg.n_trees):
        tree_rng = np.random.default_rng(rng.integers(2**63))
        if cfg.bootstrap:
            sample = tree_rng.integers(0, n, n)
            trees.append(_grow(X[sample], y[sample], cfg, n_classes, tree_rng))
        else:
            trees.append(_grow(X, y, cfg, n_classes, tree_rng))
    return ForestModel(trees, list(columns), cfg, n_classes, notes)


def train_forest(rows: Sequence[CalibrationRow], cfg: ForestConfig = ForestConfig()) -> ForestModel:
    if not rows:
        raise ValueError("no calibration rows")
    first = rows[0]
    columns = sorted(first.features) + [
        PRED_PREFIX + s.key for s in sorted(first.model_preds, key=StreamSubset.sort_key)
    ]
    X = np.stack([row_vector(r, columns) for r in rows])
    y = np.array([r.label for r in rows], dtype=np.int64)
    return train_forest_matrix(X, y, columns, cfg)


# ---------------------------------------------------------------------------
# serialization and rendering


def forest_to_dict(forest: ForestModel) -> dict:
    trees = []
    for t in forest.trees:
        nodes = []
        for i in range(len(t.feature)):
            if t.feature[i] < 0:
                nodes.append({"leaf": t.value[i], "n": t.n_samples[i]})
            else:
                nodes.append(
                    {
                        "feature": forest.columns[t.feature[i]],
                        "threshold": t.threshold[i],
                        "left": t.left[i],
                        "right": t.right[i],
                        "n": t.n_samples[i],
                        "dist": t.value[i],
                    }
                )
        trees.append(nodes)
    return {
        "columns": forest.columns,
        "n_classes": forest.n_classes,
        "config": asdict(forest.config),
        "warnings": forest.warnings,
        "trees": trees,
    }


def forest_from_dict(d: dict) -> ForestModel:
    columns = list(d["columns"])
    trees = []
    for nodes in d["trees"]:
        t = Tree()
        for nd in nodes:
            if "leaf" in nd:
                t.add(-1, 0.0, list(nd["leaf"]), nd["n"])
            else:
                i = t.add(columns.index(nd["feature"]), float(nd["threshold"]), list(nd["dist"]), nd["n"])
                t.left[i], t.right[i] = nd["left"], nd["right"]
        trees.append(t)
    return ForestModel(
        trees, columns, ForestConfig(**d["config"]), d["n_classes"], list(d.get("warnings", []))
    )


def dumps_forest(forest: ForestModel) -> str:
    return json.dumps(forest_to_dict(forest), indent=1, sort_keys=True)


def loads_forest(text: str) -> ForestModel:
    return forest_from_dict(json.loads(text))


def _label(column: str, accuracies: Mapping[str, float] | None) -> str:
    if column.startswith(PRED_PREFIX):
        key = column[len(PRED_PREFIX) :]
        name = "{" + ", ".join(key.split("+")) + "} model"
        if accuracies and key in accuracies:
            name += f" (acc {accuracies[key]:.2f})"
        return name
    return column


def render_tree(
    forest: ForestModel, index: int = 0, accuracies: Mapping[str, float] | None = None
) -> str:
    """Indented text rendering of one tree.

    Split nodes show the column, the optional local accuracy of a model
    column, the split criterion and the sample count; leaves show the
    majority class and the label distribution.
    """
    t = forest.trees[index]
    lines = [f"tree {index}"]

    def walk(i: int, depth: int, prefix: str):
        pad = "  " * depth
        if t.feature[i] < 0:
            dist = t.value[i]
            top = int(np.argmax(dist))
            shares = " ".join(f"{c}:{p:.2f}" for c, p in enumerate(dist) if p > 0)
            lines.append(f"{pad}{prefix}class {top} ({t.n_samples[i]})  [{shares}]")
            return
        col = _label(forest.columns[t.feature[i]], accuracies)
        lines.append(f"{pad}{prefix}{col} <= {t.threshold[i]:g} ({t.n_samples[i]})")
        walk(t.left[i], depth + 1, "yes: ")
        walk(t.right[i], depth + 1, "no:  ")

    walk(0, 1, "")
    return "\n".join(lines)
