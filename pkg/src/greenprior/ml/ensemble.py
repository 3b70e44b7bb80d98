"""Tree ensembles: random forest, extra trees, and second-order boosting.

Model kinds:

``RF``              bootstrap rows, exact Gini splits
``ET``              rows subsampled without replacement, random thresholds
``GBDT-depthwise``  logistic boosting, trees grown level by level
``GBDT-leafwise``   logistic boosting, best-first leaf growth

Every tree draws its randomness from a stream keyed on ``(seed, tree_index)``
so trees can be built in any order, or in parallel, with identical results.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from typing import Any

import numpy as np

from ..dataset import FeatureTable
from ..errors import ConfigError, DataError, EmptyTable, SingleClassTraining, WrongModelKind
from ._kernels import expand_sorted
from .trees import Tree, grow_boosting_tree, grow_classification_tree, n_candidates, presort

FORMAT_VERSION = 1
FOREST_KINDS = ("RF", "ET")
BOOST_KINDS = ("GBDT-depthwise", "GBDT-leafwise")
MODEL_KINDS = FOREST_KINDS + BOOST_KINDS


@dataclass
class ForestParams:
    n_trees: int = 400
    max_depth: int = 5
    max_features: float = 0.6283
    max_samples: float = 0.9471
    min_samples_leaf: int = 1
    kind: str = "RF"

    def __post_init__(self):
        self.n_trees = int(self.n_trees)
        self.max_depth = int(self.max_depth)
        self.min_samples_leaf = int(self.min_samples_leaf)
        self.max_features = float(self.max_features)
        self.max_samples = float(self.max_samples)
        if self.kind not in FOREST_KINDS:
            raise ConfigError(f"forest kind must be RF or ET, got {self.kind!r}")
        if self.n_trees < 1 or self.max_depth < 1 or self.min_samples_leaf < 1:
            raise ConfigError("n_trees, max_depth and min_samples_leaf must be >= 1")
        if not (0 < self.max_features <= 1 and 0 < self.max_samples <= 1):
            raise ConfigError("max_features and max_samples must lie in (0, 1]")


@dataclass
class BoostParams:
    n_trees: int = 200
    eta: float = 0.1
    max_depth: int | None = 6
    n_leaves: int | None = None
    min_child_weight: float = 1.0
    reg_lambda: float = 1.0
    gamma: float = 0.0
    subsample: float = 1.0
    colsample_bytree: float = 1.0
    growth: str = "depthwise"

    def __post_init__(self):
        self.n_trees = int(self.n_trees)
        self.eta = float(self.eta)
        self.max_depth = None if self.max_depth is None else int(self.max_depth)
        self.n_leaves = None if self.n_leaves is None else int(self.n_leaves)
        for name in ("min_child_weight", "reg_lambda", "gamma", "subsample", "colsample_bytree"):
            setattr(self, name, float(getattr(self, name)))
        if self.growth not in ("depthwise", "leafwise"):
            raise ConfigError(f"growth must be depthwise or leafwise, got {self.growth!r}")
        if self.n_trees < 0 or not (0 < self.eta <= 1):
            raise ConfigError("n_trees must be >= 0 and eta in (0, 1]")
        if self.growth == "depthwise" and (self.max_depth is None or self.max_depth < 1):
            raise ConfigError("depthwise growth needs max_depth >= 1")
        if self.growth == "leafwise" and (self.n_leaves is None or self.n_leaves < 2):
            raise ConfigError("leafwise growth needs n_leaves >= 2")
        if min(self.min_child_weight, self.reg_lambda, self.gamma) < 0:
            raise ConfigError("min_child_weight, reg_lambda and gamma must be >= 0")
        if not (0 < self.subsample <= 1 and 0 < self.colsample_bytree <= 1):
            raise ConfigError("subsample and colsample_bytree must lie in (0, 1]")

    @property
    def kind(self) -> str:
        return "GBDT-" + self.growth


@dataclass
class Model:
    kind: str
    trees: list[Tree]
    params: ForestParams | BoostParams
    feature_names: list[str]
    base_score: float = 0.0

    @property
    def is_forest(self) -> bool:
        return self.kind in FOREST_KINDS


def tree_rng(seed: int, tree_index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, int(tree_index)])


def n_threads() -> int:
    raw = os.environ.get("GREENPRIOR_THREADS", "").strip()
    try:
        n = int(raw) if raw else 0
    except ValueError:
        n = 0
    return n if n > 0 else (os.cpu_count() or 1)


def _labeled(table: FeatureTable) -> tuple[np.ndarray, np.ndarray]:
    if table.labels is None:
        raise DataError("training needs a labelled table")
    if table.n_rows == 0:
        raise EmptyTable("training table has no rows")
    return table.X, table.labels.astype(float)


def train_cart(table: FeatureTable, params: ForestParams, rng: np.random.Generator) -> Tree:
    X, y = _labeled(table)
    return grow_classification_tree(
        X,
        y,
        max_depth=params.max_depth,
        min_samples_leaf=params.min_samples_leaf,
        max_features=params.max_features,
        splitter="best" if params.kind == "RF" else "random",
        rng=rng,
    )


def _forest_tree(X, y, params: ForestParams, seed: int, index: int, bootstrap: bool, order) -> Tree:
    rng = tree_rng(seed, index)
    n = X.shape[0]
    if bootstrap:
        m = n_candidates(params.max_samples, n)
        if params.kind == "RF":
            counts = np.bincount(rng.integers(0, n, size=m), minlength=n)
            sample = np.repeat(np.arange(n), counts)
            order = expand_sorted(order, counts)
        else:
            sample = np.sort(rng.choice(n, size=m, replace=False))
            order = None
        X, y = X[sample], y[sample]
    return grow_classification_tree(
        X,
        y,
        max_depth=params.max_depth,
        min_samples_leaf=params.min_samples_leaf,
        max_features=params.max_features,
        splitter="best" if params.kind == "RF" else "random",
        rng=rng,
        order=order if params.kind == "RF" else None,
    )


def train_forest(table: FeatureTable, params: ForestParams, seed: int, *, bootstrap: bool = True) -> Model:
    """Fit ``params.n_trees`` trees on independent row samples.

    ``bootstrap=False`` trains every tree on the full table, which with one
    tree reproduces :func:`train_cart` under ``tree_rng(seed, 0)``.
    """
    X, y = _labeled(table)
    X = np.ascontiguousarray(X)
    order = presort(X) if params.kind == "RF" else None

    def one(i: int) -> Tree:
        return _forest_tree(X, y, params, seed, i, bootstrap, order)

    jobs = min(n_threads(), params.n_trees)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            trees = list(pool.map(one, range(params.n_trees)))
    else:
        trees = [one(i) for i in range(params.n_trees)]
    return Model(params.kind, trees, params, list(table.feature_names))


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=float)))


def train_gbdt(table: FeatureTable, params: BoostParams, seed: int) -> Model:
    """Logistic-loss boosting with Newton leaf weights ``-G / (H + lambda)``."""
    X, y = _labeled(table)
    p1 = float(y.mean())
    if p1 in (0.0, 1.0):
        raise SingleClassTraining("boosting needs both classes in the training labels")
    X = np.ascontiguousarray(X)
    n, p = X.shape
    order = presort(X)
    base = math.log(p1 / (1.0 - p1))
    raw = np.full(n, base)
    trees: list[Tree] = []
    m_rows = n_candidates(params.subsample, n)
    m_cols = n_candidates(params.colsample_bytree, p)
    for t in range(params.n_trees):
        rng = tree_rng(seed, t)
        rows = np.sort(rng.choice(n, size=m_rows, replace=False)) if m_rows < n else np.arange(n)
        cols = np.sort(rng.choice(p, size=m_cols, replace=False)) if m_cols < p else np.arange(p)
        prob = _sigmoid(raw)
        g = prob - y
        h = prob * (1.0 - prob)
        tree = grow_boosting_tree(
            X,
            g,
            h,
            rows,
            cols,
            growth=params.growth,
            max_depth=params.max_depth,
            n_leaves=params.n_leaves,
            reg_lambda=params.reg_lambda,
            gamma=params.gamma,
            min_child_weight=params.min_child_weight,
            order=order,
        )
        trees.append(tree)
        raw += params.eta * tree.value[tree.apply(X), 0]
    return Model(params.kind, trees, params, list(table.feature_names), base_score=base)


def train_model(table: FeatureTable, kind: str, params: dict[str, Any] | None, seed: int) -> Model:
    """Dispatch on ``kind`` with a plain parameter mapping (defaults fill the gaps)."""
    return train_with(table, make_params(kind, params or {}), seed)


def train_with(table: FeatureTable, params: ForestParams | BoostParams, seed: int) -> Model:
    if isinstance(params, ForestParams):
        return train_forest(table, params, seed)
    return train_gbdt(table, params, seed)


DEFAULT_PARAMS: dict[str, dict[str, Any]] = {
    "RF": dict(n_trees=400, max_depth=5, max_features=0.6283, max_samples=0.9471),
    "ET": dict(n_trees=400, max_depth=5, max_features=0.6283, max_samples=0.9471),
    "GBDT-depthwise": dict(
        n_trees=300,
        eta=0.05,
        max_depth=6,
        min_child_weight=5.0,
        reg_lambda=0.3346,
        gamma=0.0,
        subsample=0.8734,
        colsample_bytree=0.7473,
    ),
    "GBDT-leafwise": dict(
        n_trees=800,
        n_leaves=2,
        eta=0.0805,
        max_depth=17,
        reg_lambda=0.3659,
        subsample=0.8789,
        colsample_bytree=0.7394,
    ),
}


def make_params(kind: str, overrides: dict[str, Any]) -> ForestParams | BoostParams:
    if kind not in MODEL_KINDS:
        raise ConfigError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")
    merged = dict(DEFAULT_PARAMS[kind])
    merged.update(overrides)
    try:
        if kind in FOREST_KINDS:
            merged["kind"] = kind
            return ForestParams(**merged)
        merged["growth"] = kind.split("-", 1)[1]
        return BoostParams(**merged)
    except TypeError as exc:
        raise ConfigError(f"bad parameters for {kind}: {exc}") from None


def tree_leaf_fraction(tree: Tree) -> np.ndarray:
    counts = tree.value
    return counts[:, 1] / counts.sum(axis=1)


def predict_proba(model: Model, rows) -> np.ndarray:
    X = np.asarray(rows, dtype=float).reshape(-1, len(model.feature_names))
    if model.is_forest:
        acc = np.zeros(X.shape[0])
        for tree in model.trees:
            acc += tree_leaf_fraction(tree)[tree.apply(X)]
        return acc / len(model.trees)
    raw = np.full(X.shape[0], model.base_score)
    for tree in model.trees:
        raw += model.params.eta * tree.value[tree.apply(X), 0]
    return np.clip(_sigmoid(raw), 0.0, 1.0)


def predict_class(model: Model, rows, threshold: float = 0.5) -> np.ndarray:
    return (predict_proba(model, rows) >= threshold).astype(np.int64)


def _normalized(raw: np.ndarray) -> tuple[np.ndarray, bool]:
    total = float(raw.sum())
    if total <= 0:
        return np.full(len(raw), 1.0 / len(raw)), True
    return raw / total, False


def feature_importance_mdi(model: Model) -> np.ndarray:
    """Mean decrease in Gini impurity, averaged over trees and normalised to 1.

    Each split contributes its node's sample fraction times its impurity
    decrease.  An ensemble with no splits gets uniform importances (see
    :func:`importance_with_flag`).
    """
    return importance_with_flag(model)[0]


def importance_with_flag(model: Model) -> tuple[np.ndarray, bool]:
    if not model.is_forest:
        raise WrongModelKind(f"MDI applies to forests; use feature_importance_gain for {model.kind}")
    p = len(model.feature_names)
    raw = np.zeros(p)
    for tree in model.trees:
        per_tree = np.zeros(p)
        internal = tree.feature >= 0
        np.add.at(per_tree, tree.feature[internal], tree.gain[internal])
        raw += per_tree
    raw /= len(model.trees)
    return _normalized(raw)


def feature_importance_gain(model: Model) -> np.ndarray:
    """Total split gain per feature for boosted models, normalised to 1."""
    if model.is_forest:
        raise WrongModelKind("gain importance applies to boosted models; use feature_importance_mdi")
    raw = np.zeros(len(model.feature_names))
    for tree in model.trees:
        internal = tree.feature >= 0
        np.add.at(raw, tree.feature[internal], tree.gain[internal])
    return _normalized(raw)[0]


def feature_importance(model: Model) -> np.ndarray:
    return feature_importance_mdi(model) if model.is_forest else feature_importance_gain(model)


# -- serialization ------------------------------------------------------------


def _tree_to_dict(tree: Tree) -> dict:
    nodes = []
    for i in range(tree.n_nodes):
        node: dict[str, Any] = {"id": i, "weight": float(tree.weight[i])}
        if tree.feature[i] >= 0:
            node.update(
                feature=int(tree.feature[i]),
                threshold=float(tree.threshold[i]),
                left=int(tree.left[i]),
                right=int(tree.right[i]),
                gain=float(tree.gain[i]),
            )
        else:
            node["leaf"] = [float(v) for v in tree.value[i]]
        nodes.append(node)
    return {"nodes": nodes}


def _tree_from_dict(d: dict, width: int) -> Tree:
    nodes = d["nodes"]
    n = len(nodes)
    feature = np.full(n, -1, dtype=np.int64)
    threshold = np.zeros(n)
    left = np.full(n, -1, dtype=np.int64)
    right = np.full(n, -1, dtype=np.int64)
    value = np.zeros((n, width))
    weight = np.zeros(n)
    gain = np.zeros(n)
    for node in nodes:
        i = node["id"]
        weight[i] = node["weight"]
        if "leaf" in node:
            value[i] = node["leaf"]
        else:
            feature[i] = node["feature"]
            threshold[i] = node["threshold"]
            left[i] = node["left"]
            right[i] = node["right"]
            gain[i] = node["gain"]
    # internal nodes of forest trees carry their class counts too
    for node in nodes:
        if "counts" in node:
            value[node["id"]] = node["counts"]
    return Tree(feature, threshold, left, right, value, weight, gain)


def model_to_dict(model: Model) -> dict:
    trees = []
    for tree in model.trees:
        td = _tree_to_dict(tree)
        if model.is_forest:
            for node in td["nodes"]:
                if "leaf" not in node:
                    node["counts"] = [float(v) for v in tree.value[node["id"]]]
        trees.append(td)
    return {
        "format_version": FORMAT_VERSION,
        "kind": model.kind,
        "params": asdict(model.params),
        "feature_names": list(model.feature_names),
        "base_score": float(model.base_score),
        "trees": trees,
    }


def model_from_dict(d: dict) -> Model:
    if d.get("format_version") != FORMAT_VERSION:
        raise DataError(f"unsupported model format version {d.get('format_version')!r}")
    kind = d["kind"]
    if kind not in MODEL_KINDS:
        raise DataError(f"unknown model kind {kind!r}")
    if kind in FOREST_KINDS:
        names = {f.name for f in fields(ForestParams)}
        params: ForestParams | BoostParams = ForestParams(**{k: v for k, v in d["params"].items() if k in names})
    else:
        names = {f.name for f in fields(BoostParams)}
        params = BoostParams(**{k: v for k, v in d["params"].items() if k in names})
    width = 2 if kind in FOREST_KINDS else 1
    trees = [_tree_from_dict(t, width) for t in d["trees"]]
    return Model(kind, trees, params, list(d["feature_names"]), float(d["base_score"]))


def dumps_model(model: Model) -> str:
    return json.dumps(model_to_dict(model), sort_keys=True, separators=(",", ":"))


def loads_model(text: str) -> Model:
    return model_from_dict(json.loads(text))
