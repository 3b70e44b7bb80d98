"""Flat binary trees and the growers behind every ensemble.

Each grower presorts its training sample once per feature and then
partitions the sorted index lists as nodes split, so no node is ever
re-sorted.  A row goes left iff ``row[feature] <= threshold``.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass

import numpy as np

from ._kernels import best_gini, best_newton, partition, restrict_sorted
from ._kernels import _pick as pick_best


@dataclass
class Tree:
    feature: np.ndarray  # -1 at leaves
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray  # (n_nodes, 2) class counts, or (n_nodes, 1) leaf score
    weight: np.ndarray  # training samples (or hessian mass) reaching the node
    gain: np.ndarray  # impurity decrease credited to the split (0 at leaves)

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def is_leaf(self) -> np.ndarray:
        return self.feature < 0

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by each row of ``X``."""
        X = np.asarray(X, dtype=float)
        node = np.zeros(X.shape[0], dtype=np.int64)
        active = np.nonzero(self.feature[node] >= 0)[0]
        while active.size:
            nd = node[active]
            go_left = X[active, self.feature[nd]] <= self.threshold[nd]
            node[active] = np.where(go_left, self.left[nd], self.right[nd])
            active = active[self.feature[node[active]] >= 0]
        return node

    def depth(self) -> int:
        d = np.zeros(self.n_nodes, dtype=np.int64)
        for i in range(self.n_nodes):
            if self.feature[i] >= 0:
                d[self.left[i]] = d[i] + 1
                d[self.right[i]] = d[i] + 1
        return int(d.max())


class _NodeList:
    def __init__(self, value_width: int):
        self.feature: list[int] = []
        self.threshold: list[float] = []
        self.left: list[int] = []
        self.right: list[int] = []
        self.value: list[list[float]] = []
        self.weight: list[float] = []
        self.gain: list[float] = []
        self.width = value_width

    def add(self, value, weight: float) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append([float(v) for v in value])
        self.weight.append(float(weight))
        self.gain.append(0.0)
        return len(self.feature) - 1

    def set_split(self, nid: int, feature: int, threshold: float, gain: float, left: int, right: int):
        self.feature[nid] = int(feature)
        self.threshold[nid] = float(threshold)
        self.gain[nid] = float(gain)
        self.left[nid] = left
        self.right[nid] = right

    def freeze(self) -> Tree:
        return Tree(
            feature=np.array(self.feature, dtype=np.int64),
            threshold=np.array(self.threshold, dtype=np.float64),
            left=np.array(self.left, dtype=np.int64),
            right=np.array(self.right, dtype=np.int64),
            value=np.array(self.value, dtype=np.float64).reshape(-1, self.width),
            weight=np.array(self.weight, dtype=np.float64),
            gain=np.array(self.gain, dtype=np.float64),
        )


def _midpoint(lo: float, hi: float) -> float:
    mid = lo + (hi - lo) / 2.0
    return lo if mid >= hi else mid


def _split_sorted(order: np.ndarray, go_left_rows: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    flag = np.zeros(n, dtype=np.bool_)
    flag[go_left_rows] = True
    return partition(order, flag)


def best_gini_split(
    X: np.ndarray,
    y: np.ndarray,
    order: np.ndarray,
    feats: np.ndarray,
    min_samples_leaf: int,
) -> tuple[int, float, float] | None:
    """Exact Gini scan over midpoints of consecutive distinct values.

    ``order[f]`` lists the node's rows sorted by feature ``f``.  Returns
    ``(feature, threshold, gain)`` for the best split (lowest feature index,
    then lowest threshold, on ties) or ``None`` when no split has positive
    gain.
    """
    S = np.ascontiguousarray(order[feats])
    if S.shape[1] < 2:
        return None
    a, i, gain = best_gini(X, y, S, feats, float(min_samples_leaf))
    if a < 0:
        return None
    f = int(feats[a])
    return f, _midpoint(X[S[a, i], f], X[S[a, i + 1], f]), float(gain)


def random_gini_split(
    X: np.ndarray,
    y: np.ndarray,
    rows: np.ndarray,
    feats: np.ndarray,
    min_samples_leaf: int,
    rng: np.random.Generator,
) -> tuple[int, float, float] | None:
    """Extra-trees split: one uniform threshold per candidate feature."""
    Xn = X[np.ix_(rows, feats)]
    yn = y[rows]
    m = len(rows)
    lo = Xn.min(axis=0)
    hi = Xn.max(axis=0)
    thr = lo + rng.random(len(feats)) * (hi - lo)
    left = Xn <= thr
    n_left = left.sum(axis=0).astype(float)
    n_right = m - n_left
    c1 = (left * yn[:, None]).sum(axis=0)
    tot1 = float(yn.sum())
    c1r = tot1 - c1
    p1 = tot1 / m
    parent = 2.0 * p1 * (1.0 - p1)
    with np.errstate(divide="ignore", invalid="ignore"):
        child = (2.0 * c1 * (n_left - c1) / n_left + 2.0 * c1r * (n_right - c1r) / n_right) / m
    gain = parent - child
    valid = (hi > lo) & (n_left >= min_samples_leaf) & (n_right >= min_samples_leaf) & (n_left > 0) & (n_right > 0)
    gain = np.where(valid, gain, -np.inf)[None, :]
    _, fi, g = pick_best(gain)
    if fi < 0:
        return None
    return int(feats[fi]), float(thr[fi]), float(g)


def n_candidates(fraction: float, p: int) -> int:
    return min(p, max(1, math.ceil(fraction * p - 1e-12)))


def presort(X: np.ndarray) -> np.ndarray:
    """Row indices sorted by each column, shape ``(n_features, n_rows)``."""
    return np.ascontiguousarray(np.argsort(X, axis=0, kind="stable").T)


def grow_classification_tree(
    X: np.ndarray,
    y: np.ndarray,
    *,
    max_depth: int,
    min_samples_leaf: int,
    max_features: float,
    splitter: str,
    rng: np.random.Generator,
    order: np.ndarray | None = None,
) -> Tree:
    """Gini CART on the given sample (rows may repeat, as in a bootstrap).

    ``splitter`` is ``"best"`` (exact midpoint scan) or ``"random"``
    (extra-trees thresholds).  ``order`` may supply :func:`presort` of ``X``.
    Nodes are numbered in depth-first preorder and the random stream is
    consumed in that order.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    n, p = X.shape
    k = n_candidates(max_features, p)
    nodes = _NodeList(2)
    if splitter == "best" and order is None:
        order = presort(X)
    elif splitter != "best":
        order = None

    def grow(rows: np.ndarray, srt: np.ndarray | None, depth: int) -> int:
        m = len(rows)
        n1 = float(y[rows].sum())
        nid = nodes.add((m - n1, n1), m)
        if depth >= max_depth or n1 == 0 or n1 == m or m < 2 * min_samples_leaf:
            return nid
        feats = np.sort(rng.choice(p, size=k, replace=False))
        if srt is not None:
            split = best_gini_split(X, y, srt, feats, min_samples_leaf)
        else:
            split = random_gini_split(X, y, rows, feats, min_samples_leaf, rng)
        if split is None:
            return nid
        f, thr, g = split
        go_left = X[rows, f] <= thr
        lrows, rrows = rows[go_left], rows[~go_left]
        lsrt, rsrt = _split_sorted(srt, lrows, n) if srt is not None else (None, None)
        left = grow(lrows, lsrt, depth + 1)
        right = grow(rrows, rsrt, depth + 1)
        nodes.set_split(nid, f, thr, (m / n) * g, left, right)
        return nid

    grow(np.arange(n), order, 0)
    return nodes.freeze()


# -- second-order boosting trees ----------------------------------------------


def best_newton_split(
    X: np.ndarray,
    g: np.ndarray,
    h: np.ndarray,
    order: np.ndarray,
    feats: np.ndarray,
    reg_lambda: float,
    gamma: float,
    min_child_weight: float,
) -> tuple[int, float, float] | None:
    """Best cut by ``0.5 * [GL^2/(HL+l) + GR^2/(HR+l) - G^2/(H+l)] - gamma``.

    ``order[a]`` lists the node's rows sorted by feature ``feats[a]``.
    """
    if order.shape[1] < 2:
        return None
    a, i, gain = best_newton(X, g, h, order, feats, float(reg_lambda), float(gamma), float(min_child_weight))
    if a < 0:
        return None
    f = int(feats[a])
    return f, _midpoint(X[order[a, i], f], X[order[a, i + 1], f]), float(gain)


def leaf_weight(G: float, H: float, reg_lambda: float) -> float:
    denom = H + reg_lambda
    return -G / denom if denom > 0 else 0.0


def grow_boosting_tree(
    X: np.ndarray,
    g: np.ndarray,
    h: np.ndarray,
    rows: np.ndarray,
    feats: np.ndarray,
    *,
    growth: str,
    max_depth: int | None,
    n_leaves: int | None,
    reg_lambda: float,
    gamma: float,
    min_child_weight: float,
    order: np.ndarray | None = None,
) -> Tree:
    """Newton-step regression tree on gradients ``g`` and hessians ``h``.

    ``growth="depthwise"`` splits every splittable node level by level up to
    ``max_depth``; ``growth="leafwise"`` repeatedly splits the leaf with the
    largest positive gain until ``n_leaves`` leaves exist (``max_depth``, if
    given, still caps depth).  Leaf values are unscaled Newton weights.
    ``order`` may supply :func:`presort` of the full ``X``.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    n = X.shape[0]
    feats = np.sort(np.asarray(feats, dtype=np.int64))
    if order is None:
        order = presort(X)
    member = np.zeros(n, dtype=np.bool_)
    member[rows] = True
    root_sorted = restrict_sorted(order, member, feats)  # (k, m), global row ids
    nodes = _NodeList(1)

    def new_leaf(srt: np.ndarray) -> int:
        r = srt[0]
        G, H = float(g[r].sum()), float(h[r].sum())
        return nodes.add((leaf_weight(G, H, reg_lambda),), H)

    def find(srt: np.ndarray, depth: int):
        if max_depth is not None and depth >= max_depth:
            return None
        return best_newton_split(X, g, h, srt, feats, reg_lambda, gamma, min_child_weight)

    def split(nid: int, srt: np.ndarray, found):
        f, thr, gn = found
        r = srt[0]
        lsrt, rsrt = _split_sorted(srt, r[X[r, f] <= thr], n)
        left = new_leaf(lsrt)
        right = new_leaf(rsrt)
        nodes.set_split(nid, f, thr, gn, left, right)
        return (left, lsrt), (right, rsrt)

    root = new_leaf(root_sorted)
    if growth == "depthwise":
        level = [(root, root_sorted)]
        depth = 0
        while level:
            nxt = []
            for nid, srt in level:
                found = find(srt, depth)
                if found is not None:
                    nxt.extend(split(nid, srt, found))
            level = nxt
            depth += 1
    elif growth == "leafwise":
        target = 2 if n_leaves is None else int(n_leaves)
        depth_of = {root: 0}
        heap = []
        found = find(root_sorted, 0)
        if found is not None:
            heapq.heappush(heap, (-found[2], root, found, root_sorted))
        leaves = 1
        while heap and leaves < target:
            _, nid, found, srt = heapq.heappop(heap)
            for child, csrt in split(nid, srt, found):
                depth_of[child] = depth_of[nid] + 1
                cf = find(csrt, depth_of[child])
                if cf is not None:
                    heapq.heappush(heap, (-cf[2], child, cf, csrt))
            leaves += 1
    else:
        raise ValueError(f"unknown growth policy {growth!r}")
    return nodes.freeze()
