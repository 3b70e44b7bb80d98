"""Compiled inner loops for split search and presorted-index partitioning."""

from __future__ import annotations

import numpy as np
from numba import njit

GAIN_TIE_TOL = 1e-12


@njit(cache=True)
def _pick(gains):
    # lowest (feature slot, position) whose gain is within tolerance of the max
    k, w = gains.shape
    best = -np.inf
    for a in range(k):
        for i in range(w):
            if gains[a, i] > best:
                best = gains[a, i]
    if not best > 0.0:
        return -1, -1, best
    for a in range(k):
        for i in range(w):
            if gains[a, i] >= best - GAIN_TIE_TOL:
                return a, i, gains[a, i]
    return -1, -1, best


@njit(cache=True)
def gini_scan(X, y, S, feats, min_samples_leaf):
    """Gini gain for every cut between consecutive distinct sorted values.

    ``S[a]`` lists the node's rows sorted by feature ``feats[a]``.  Invalid
    cuts score ``-inf``.
    """
    k, m = S.shape
    gains = np.full((k, max(m - 1, 0)), -np.inf)
    tot1 = 0.0
    for i in range(m):
        tot1 += y[S[0, i]]
    p1 = tot1 / m
    parent = 2.0 * p1 * (1.0 - p1)
    for a in range(k):
        f = feats[a]
        c1 = 0.0
        for i in range(m - 1):
            c1 += y[S[a, i]]
            nl = i + 1.0
            nr = m - nl
            if nl < min_samples_leaf or nr < min_samples_leaf:
                continue
            if X[S[a, i], f] < X[S[a, i + 1], f]:
                c1r = tot1 - c1
                child = (2.0 * c1 * (nl - c1) / nl + 2.0 * c1r * (nr - c1r) / nr) / m
                gains[a, i] = parent - child
    return gains


@njit(cache=True)
def best_gini(X, y, S, feats, min_samples_leaf):
    return _pick(gini_scan(X, y, S, feats, min_samples_leaf))


@njit(cache=True)
def newton_scan(X, g, h, S, feats, reg_lambda, gamma, min_child_weight):
    k, m = S.shape
    gains = np.full((k, max(m - 1, 0)), -np.inf)
    G = 0.0
    H = 0.0
    for i in range(m):
        G += g[S[0, i]]
        H += h[S[0, i]]
    parent = G * G / (H + reg_lambda) if H + reg_lambda > 0 else 0.0
    for a in range(k):
        f = feats[a]
        GL = 0.0
        HL = 0.0
        for i in range(m - 1):
            r = S[a, i]
            GL += g[r]
            HL += h[r]
            GR = G - GL
            HR = H - HL
            if HL < min_child_weight or HR < min_child_weight:
                continue
            if not X[r, f] < X[S[a, i + 1], f]:
                continue
            dl = HL + reg_lambda
            dr = HR + reg_lambda
            if dl <= 0.0 or dr <= 0.0:
                continue
            gains[a, i] = 0.5 * (GL * GL / dl + GR * GR / dr - parent) - gamma
    return gains


@njit(cache=True)
def best_newton(X, g, h, S, feats, reg_lambda, gamma, min_child_weight):
    return _pick(newton_scan(X, g, h, S, feats, reg_lambda, gamma, min_child_weight))


@njit(cache=True)
def partition(order, flag):
    """Stable split of every presorted row list by a per-row left flag."""
    p, m = order.shape
    m_left = 0
    for i in range(m):
        if flag[order[0, i]]:
            m_left += 1
    left = np.empty((p, m_left), dtype=order.dtype)
    right = np.empty((p, m - m_left), dtype=order.dtype)
    for a in range(p):
        li = 0
        ri = 0
        for i in range(m):
            r = order[a, i]
            if flag[r]:
                left[a, li] = r
                li += 1
            else:
                right[a, ri] = r
                ri += 1
    return left, right


@njit(cache=True)
def expand_sorted(order, counts):
    """Presorted positions of a multiset sample ``repeat(arange(n), counts)``.

    ``order[a]`` sorts the original rows by feature ``a``; the result sorts the
    expanded sample's positions the same way (copies stay adjacent).
    """
    p, n = order.shape
    start = np.empty(n, dtype=np.int64)
    acc = 0
    for r in range(n):
        start[r] = acc
        acc += counts[r]
    out = np.empty((p, acc), dtype=np.int64)
    for a in range(p):
        j = 0
        for i in range(n):
            r = order[a, i]
            for c in range(counts[r]):
                out[a, j] = start[r] + c
                j += 1
    return out


@njit(cache=True)
def restrict_sorted(order, member, cols):
    """Rows of ``order[cols]`` keeping only rows flagged in ``member``."""
    p, n = order.shape
    m = 0
    for i in range(n):
        if member[order[0, i]]:
            m += 1
    out = np.empty((len(cols), m), dtype=np.int64)
    for a in range(len(cols)):
        j = 0
        row = order[cols[a]]
        for i in range(n):
            if member[row[i]]:
                out[a, j] = row[i]
                j += 1
    return out
