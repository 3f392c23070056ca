"""Gini decision trees and a bagged random forest, written against numpy only.

Trees are stored as flat node arrays so that batch prediction can walk all
samples level by level. Numeric features split on ``x <= threshold`` (midpoints
between consecutive distinct values); categorical features split one-vs-rest
on ``x == category``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from homewatch.features import CATEGORICAL, NUMERIC, FeatureSchema

MODEL_FORMAT = "homewatch-forest"
MODEL_VERSION = 1
_TIE_TOL = 1e-12


class InvalidConfig(ValueError):
    pass


class SchemaMismatch(ValueError):
    pass


class ModelFileError(ValueError):
    pass


class VersionMismatch(ModelFileError):
    pass


class CorruptModel(ModelFileError):
    pass


def gini(counts) -> float:
    """Gini impurity ``1 - sum(p_k^2)`` of a vector of class counts (or proportions)."""
    counts = np.asarray(counts, dtype=float)
    total = counts.sum()
    if total <= 0:
        return 0.0
    p = counts / total
    return float(1.0 - np.dot(p, p))


@dataclass(frozen=True)
class Split:
    feature: int
    threshold: float
    categorical: bool
    decrease: float
    parent_impurity: float
    child_impurity: float


def _sum_sq_over_n(counts: np.ndarray, n: np.ndarray) -> np.ndarray:
    # sum_k c_k^2 / n, row-wise; n > 0 guaranteed by callers
    return (counts * counts).sum(axis=-1) / n


def best_split(
    X: np.ndarray,
    y: np.ndarray,
    n_classes: int,
    features: Sequence[int],
    categorical: np.ndarray | None = None,
) -> Optional[Split]:
    """Best Gini split of ``(X, y)`` among ``features``, or None.

    ``y`` holds integer class codes. Ties are broken towards the lower feature
    index, then the lower threshold or category code.
    """
    n = len(y)
    if n < 2:
        return None
    if categorical is None:
        categorical = np.zeros(X.shape[1], dtype=bool)
    total = np.bincount(y, minlength=n_classes).astype(float)
    parent = 1.0 - float(np.dot(total, total)) / (n * n)

    best: Optional[tuple[float, int, float, bool]] = None
    onehot = None
    for f in sorted(features):
        col = X[:, f]
        if categorical[f]:
            cats, inv = np.unique(col, return_inverse=True)
            if len(cats) < 2:
                continue
            left = np.zeros((len(cats), n_classes))
            np.add.at(left, (inv, y), 1.0)
            n_left = left.sum(axis=1)
            right = total - left
            n_right = n - n_left
            cost = (n - _sum_sq_over_n(left, n_left) - _sum_sq_over_n(right, n_right)) / n
            thresholds = cats
        else:
            order = np.argsort(col, kind="stable")
            xs = col[order]
            valid = np.nonzero(xs[:-1] < xs[1:])[0]
            if len(valid) == 0:
                continue
            if onehot is None:
                onehot = np.zeros((n, n_classes))
                onehot[np.arange(n), y] = 1.0
            cum = np.cumsum(onehot[order], axis=0)
            left = cum[valid]
            n_left = (valid + 1).astype(float)
            right = total - left
            n_right = n - n_left
            cost = (n - _sum_sq_over_n(left, n_left) - _sum_sq_over_n(right, n_right)) / n
            lo, hi = xs[valid], xs[valid + 1]
            thresholds = lo + (hi - lo) / 2.0
            # midpoint can round up onto hi for adjacent floats
            thresholds = np.where(thresholds >= hi, lo, thresholds)
        k = int(np.argmin(cost))
        k = int(np.nonzero(cost <= cost[k] + _TIE_TOL)[0][0])
        if best is None or cost[k] < best[0] - _TIE_TOL:
            best = (float(cost[k]), f, float(thresholds[k]), bool(categorical[f]))

    if best is None:
        return None
    child, f, thr, is_cat = best
    decrease = parent - child
    if decrease <= _TIE_TOL:
        return None
    return Split(f, thr, is_cat, decrease, parent, child)


@dataclass
class ForestConfig:
    n_trees: int = 100
    max_depth: Optional[int] = None
    min_samples_split: int = 2
    max_features: Optional[int] = None  # None -> ceil(sqrt(d))
    bootstrap: bool = True
    seed: int = 0

    def resolved_max_features(self, n_features: int) -> int:
        m = self.max_features if self.max_features is not None else math.ceil(math.sqrt(n_features))
        if m < 1 or m > n_features:
            raise InvalidConfig(f"max_features={m} outside [1, {n_features}]")
        return m

    def validate(self, n_features: int | None = None) -> None:
        if self.n_trees < 1:
            raise InvalidConfig("n_trees must be >= 1")
        if self.max_depth is not None and self.max_depth < 0:
            raise InvalidConfig("max_depth must be >= 0")
        if self.min_samples_split < 2:
            raise InvalidConfig("min_samples_split must be >= 2")
        if self.max_features is not None and self.max_features < 1:
            raise InvalidConfig("max_features must be >= 1")
        if n_features is not None:
            self.resolved_max_features(n_features)


@dataclass
class Tree:
    """Flat binary tree. ``feature[i] == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    categorical: np.ndarray
    left: np.ndarray
    right: np.ndarray
    counts: np.ndarray  # (n_nodes, n_classes) training class counts
    impurity: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def leaf_class(self) -> np.ndarray:
        # argmax returns the first maximum, i.e. the lexicographically smallest label
        return np.argmax(self.counts, axis=1)

    def apply(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        while len(rows):
            f = self.feature[node[rows]]
            internal = f >= 0
            rows, f = rows[internal], f[internal]
            if not len(rows):
                break
            cur = node[rows]
            x = X[rows, f]
            thr = self.threshold[cur]
            go_left = np.where(self.categorical[cur], x == thr, x <= thr)
            node[rows] = np.where(go_left, self.left[cur], self.right[cur])
        return node

    def leaf_of(self, x: Sequence[float]) -> int:
        """Leaf index for one sample; a plain-Python walk, cheaper than ``apply`` for a single row."""
        lists = self.__dict__.get("_lists")
        if lists is None:
            lists = (self.feature.tolist(), self.threshold.tolist(), self.categorical.tolist(),
                     self.left.tolist(), self.right.tolist())
            self.__dict__["_lists"] = lists
        feature, threshold, categorical, left, right = lists
        i = 0
        while feature[i] >= 0:
            v = x[feature[i]]
            go_left = v == threshold[i] if categorical[i] else v <= threshold[i]
            i = left[i] if go_left else right[i]
        return i

    def to_nested(self, classes: Sequence[str], i: int = 0) -> dict:
        counts = self.counts[i]
        n = float(counts.sum())
        node = {"n": int(round(n)), "impurity": float(self.impurity[i])}
        if self.feature[i] < 0:
            node["leaf"] = classes[int(np.argmax(counts))]
            node["counts"] = [int(round(c)) for c in counts]
            return node
        node["feature"] = int(self.feature[i])
        node["test"] = "eq" if self.categorical[i] else "le"
        node["value"] = float(self.threshold[i])
        node["counts"] = [int(round(c)) for c in counts]
        node["left"] = self.to_nested(classes, int(self.left[i]))
        node["right"] = self.to_nested(classes, int(self.right[i]))
        return node

    @classmethod
    def from_nested(cls, root: dict, n_classes: int) -> "Tree":
        feature, threshold, categorical, left, right, counts, impurity = [], [], [], [], [], [], []

        def visit(node: dict) -> int:
            i = len(feature)
            c = node["counts"]
            if len(c) != n_classes:
                raise CorruptModel("node class counts do not match class list")
            feature.append(-1)
            threshold.append(0.0)
            categorical.append(False)
            left.append(-1)
            right.append(-1)
            counts.append([float(v) for v in c])
            impurity.append(float(node["impurity"]))
            if "leaf" in node:
                return i
            if node["test"] not in ("le", "eq"):
                raise CorruptModel(f"unknown split test {node['test']!r}")
            feature[i] = int(node["feature"])
            threshold[i] = float(node["value"])
            categorical[i] = node["test"] == "eq"
            left[i] = visit(node["left"])
            right[i] = visit(node["right"])
            return i

        visit(root)
        return cls(
            np.array(feature, dtype=np.int64),
            np.array(threshold, dtype=float),
            np.array(categorical, dtype=bool),
            np.array(left, dtype=np.int64),
            np.array(right, dtype=np.int64),
            np.array(counts, dtype=float).reshape(-1, n_classes),
            np.array(impurity, dtype=float),
        )


def fit_tree(
    X: np.ndarray,
    y: np.ndarray,
    n_classes: int,
    config: ForestConfig,
    rng: np.random.Generator,
    categorical: np.ndarray | None = None,
) -> Tree:
    """Grow one tree on integer-coded labels ``y``.

    At each node ``max_features`` candidates are drawn without replacement from
    the features that are not constant within the node.
    """
    n, d = X.shape
    if n == 0:
        raise ValueError("cannot fit a tree on zero rows")
    if categorical is None:
        categorical = np.zeros(d, dtype=bool)
    mtry = config.resolved_max_features(d)
    max_depth = config.max_depth if config.max_depth is not None else np.inf

    feature: list[int] = []
    threshold: list[float] = []
    is_cat: list[bool] = []
    left: list[int] = []
    right: list[int] = []
    counts: list[np.ndarray] = []
    impurity: list[float] = []

    def new_node(idx: np.ndarray) -> int:
        c = np.bincount(y[idx], minlength=n_classes).astype(float)
        feature.append(-1)
        threshold.append(0.0)
        is_cat.append(False)
        left.append(-1)
        right.append(-1)
        counts.append(c)
        impurity.append(gini(c))
        return len(feature) - 1

    stack = [(new_node(np.arange(n)), np.arange(n), 0)]
    while stack:
        node, idx, depth = stack.pop()
        if depth >= max_depth or len(idx) < config.min_samples_split or impurity[node] <= 0.0:
            continue
        Xn = X[idx]
        varying = np.nonzero(Xn.min(axis=0) < Xn.max(axis=0))[0]
        if len(varying) == 0:
            continue
        if len(varying) > mtry:
            candidates = np.sort(rng.choice(varying, size=mtry, replace=False))
        else:
            candidates = varying
        split = best_split(Xn, y[idx], n_classes, candidates, categorical)
        if split is None:
            continue
        col = Xn[:, split.feature]
        mask = col == split.threshold if split.categorical else col <= split.threshold
        feature[node] = split.feature
        threshold[node] = split.threshold
        is_cat[node] = split.categorical
        li, ri = idx[mask], idx[~mask]
        left[node] = new_node(li)
        right[node] = new_node(ri)
        # right pushed first so the left subtree is expanded first (stable node order)
        stack.append((right[node], ri, depth + 1))
        stack.append((left[node], li, depth + 1))

    return Tree(
        np.array(feature, dtype=np.int64),
        np.array(threshold, dtype=float),
        np.array(is_cat, dtype=bool),
        np.array(left, dtype=np.int64),
        np.array(right, dtype=np.int64),
        np.array(counts, dtype=float).reshape(-1, n_classes),
        np.array(impurity, dtype=float),
    )


@dataclass
class RandomForestModel:
    trees: list[Tree]
    config: ForestConfig
    schema: FeatureSchema
    classes: tuple[str, ...]
    seeds: list[int] = field(default_factory=list)

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def _check(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        if X.ndim != 2 or X.shape[1] != len(self.schema):
            raise SchemaMismatch(f"expected {len(self.schema)} features, got shape {X.shape}")
        return X

    def vote_shares(self, X: np.ndarray) -> np.ndarray:
        X = self._check(X)
        votes = np.zeros((len(X), len(self.classes)))
        if len(X) == 1:
            row = X[0].tolist()
            for tree in self.trees:
                votes[0, tree.leaf_class[tree.leaf_of(row)]] += 1.0
            return votes / len(self.trees)
        rows = np.arange(len(X))
        for tree in self.trees:
            votes[rows, tree.leaf_class[tree.apply(X)]] += 1.0
        return votes / len(self.trees)

    def predict(self, X: np.ndarray) -> list[str]:
        shares = self.vote_shares(X)
        return [self.classes[k] for k in np.argmax(shares, axis=1)]


def _encode_labels(y: Sequence[str]) -> tuple[tuple[str, ...], np.ndarray]:
    classes = tuple(sorted(set(y)))
    lookup = {c: i for i, c in enumerate(classes)}
    return classes, np.array([lookup[v] for v in y], dtype=np.int64)


def fit_forest(
    X: np.ndarray, y: Sequence[str], config: ForestConfig | None = None, schema: FeatureSchema | None = None
) -> RandomForestModel:
    """Bagged forest; tree t is grown from a bootstrap drawn with seed ``config.seed + t``."""
    config = config or ForestConfig()
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or len(X) == 0:
        raise ValueError("X must be a non-empty 2-D array")
    if len(y) != len(X):
        raise ValueError("X and y differ in length")
    if schema is None:
        schema = FeatureSchema(tuple(f"x{i}" for i in range(X.shape[1])), (NUMERIC,) * X.shape[1])
    if len(schema) != X.shape[1]:
        raise SchemaMismatch("schema does not match X")
    config.validate(X.shape[1])
    classes, codes = _encode_labels(y)
    categorical = schema.categorical_mask
    n = len(X)
    trees, seeds = [], []
    for t in range(config.n_trees):
        seed = config.seed + t
        rng = np.random.default_rng(seed)
        idx = rng.integers(0, n, size=n) if config.bootstrap else np.arange(n)
        trees.append(fit_tree(X[idx], codes[idx], len(classes), config, rng, categorical))
        seeds.append(seed)
    return RandomForestModel(trees, config, schema, classes, seeds)


def predict(model: RandomForestModel, x) -> tuple[str, dict[str, float]]:
    """Majority vote for a single feature vector, with per-class vote shares."""
    shares = model.vote_shares(x)[0]
    label = model.classes[int(np.argmax(shares))]
    return label, {c: float(s) for c, s in zip(model.classes, shares)}


def _tree_importance(tree: Tree, n_features: int, class_index: int | None = None) -> np.ndarray:
    imp = np.zeros(n_features)
    n_root = tree.counts[0].sum()
    for i in np.nonzero(tree.feature >= 0)[0]:
        cnt, lc, rc = tree.counts[i], tree.counts[tree.left[i]], tree.counts[tree.right[i]]
        if class_index is not None:
            cnt, lc, rc = (_one_vs_rest(c, class_index) for c in (cnt, lc, rc))
        n_node, n_l, n_r = cnt.sum(), lc.sum(), rc.sum()
        decrease = gini(cnt) - (n_l * gini(lc) + n_r * gini(rc)) / n_node
        imp[tree.feature[i]] += decrease * n_node / n_root
    return imp


def _one_vs_rest(counts: np.ndarray, k: int) -> np.ndarray:
    return np.array([counts[k], counts.sum() - counts[k]])


def feature_importances(model: RandomForestModel, per_class: bool = False):
    """Mean decrease in impurity, averaged over trees and normalized to sum 1.

    With ``per_class`` a dict ``class -> scores`` is returned where each split's
    decrease is measured on that class versus the rest.
    """
    d = len(model.schema)

    def reduce(class_index):
        total = np.zeros(d)
        for tree in model.trees:
            total += _tree_importance(tree, d, class_index)
        total /= len(model.trees)
        s = total.sum()
        return total / s if s > 0 else total

    if per_class:
        return {c: reduce(k) for k, c in enumerate(model.classes)}
    return reduce(None)


def importance_table(model: RandomForestModel, scores: np.ndarray | None = None, delimiter: str = ",") -> str:
    scores = feature_importances(model) if scores is None else scores
    order = sorted(range(len(scores)), key=lambda j: (-scores[j], j))
    lines = [f"feature{delimiter}score"]
    lines += [f"{model.schema.names[j]}{delimiter}{scores[j]:.6f}" for j in order]
    return "\n".join(lines) + "\n"


def model_to_dict(model: RandomForestModel) -> dict:
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "config": asdict(model.config),
        "schema": model.schema.to_dict(),
        "classes": list(model.classes),
        "seeds": list(model.seeds),
        "trees": [t.to_nested(model.classes) for t in model.trees],
    }


def model_from_dict(doc: dict) -> RandomForestModel:
    if not isinstance(doc, dict) or doc.get("format") != MODEL_FORMAT:
        raise CorruptModel("not a forest model document")
    version = doc.get("version")
    if version != MODEL_VERSION:
        raise VersionMismatch(f"model version {version!r}, this build reads {MODEL_VERSION}")
    try:
        config = ForestConfig(**doc["config"])
        schema = FeatureSchema.from_dict(doc["schema"])
        classes = tuple(doc["classes"])
        trees = [Tree.from_nested(t, len(classes)) for t in doc["trees"]]
        seeds = [int(s) for s in doc["seeds"]]
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ModelFileError):
            raise
        raise CorruptModel(f"malformed model document: {exc}") from exc
    if len(trees) != config.n_trees:
        raise CorruptModel("tree count does not match config")
    return RandomForestModel(trees, config, schema, classes, seeds)


def dumps_model(model: RandomForestModel) -> str:
    return json.dumps(model_to_dict(model), separators=(",", ":"), sort_keys=True)


def loads_model(text: str) -> RandomForestModel:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CorruptModel(f"model file is not valid JSON: {exc}") from exc
    return model_from_dict(doc)


def save_model(model: RandomForestModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_model(model))


def load_model(path) -> RandomForestModel:
    with open(path, encoding="utf-8") as fh:
        return loads_model(fh.read())
