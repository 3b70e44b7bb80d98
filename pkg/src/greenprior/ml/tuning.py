"""Sequential model-based hyperparameter search with a Parzen-ratio surrogate.

After ``n_init`` uniform draws, observed trials are split at the 25th
percentile of their losses into a "good" and a "bad" group.  Each group is
modelled per parameter by a kernel density (truncated Gaussians for numeric
parameters, smoothed frequencies for categorical ones).  Expected
improvement under this surrogate is monotone in ``l(x) / g(x)``, so each new
trial is the candidate, among 256 draws from ``l``, with the largest ratio.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Callable, Mapping, Sequence

import numpy as np
from scipy.special import ndtr, ndtri

from ..dataset import FeatureTable
from ..errors import ConfigError
from .ensemble import MODEL_KINDS, predict_proba, train_model

N_CANDIDATES = 256
GOOD_QUANTILE = 0.25


@dataclass(frozen=True)
class Real:
    low: float
    high: float
    log: bool = False

    def __post_init__(self):
        if not self.low < self.high or (self.log and self.low <= 0):
            raise ConfigError(f"bad real range [{self.low}, {self.high}] (log={self.log})")

    def bounds(self) -> tuple[float, float]:
        return (math.log(self.low), math.log(self.high)) if self.log else (self.low, self.high)

    def decode(self, u: float):
        v = math.exp(u) if self.log else u
        return float(min(max(v, self.low), self.high))

    def encode(self, v) -> float:
        return math.log(v) if self.log else float(v)


@dataclass(frozen=True)
class Integer:
    low: int
    high: int
    log: bool = False

    def __post_init__(self):
        if not self.low < self.high or (self.log and self.low <= 0):
            raise ConfigError(f"bad integer range [{self.low}, {self.high}] (log={self.log})")

    def bounds(self) -> tuple[float, float]:
        lo, hi = self.low - 0.5, self.high + 0.5
        if self.log:
            return math.log(max(lo, 1e-9)), math.log(hi)
        return lo, hi

    def decode(self, u: float):
        v = math.exp(u) if self.log else u
        return int(min(max(round(v), self.low), self.high))

    def encode(self, v) -> float:
        return math.log(v) if self.log else float(v)


@dataclass(frozen=True)
class Categorical:
    choices: tuple

    def __post_init__(self):
        if len(self.choices) < 1:
            raise ConfigError("categorical dimension needs at least one choice")


Dimension = Real | Integer | Categorical
HyperparameterSpace = Mapping[str, Dimension]


@dataclass
class TrialRecord:
    params: dict[str, Any]
    score: float
    iteration: int

    def to_dict(self) -> dict:
        return {"iteration": self.iteration, "params": self.params, "score": self.score}


def _sample_uniform(space: HyperparameterSpace, rng: np.random.Generator) -> dict[str, Any]:
    out = {}
    for name, dim in space.items():
        if isinstance(dim, Categorical):
            out[name] = dim.choices[int(rng.integers(len(dim.choices)))]
        else:
            lo, hi = dim.bounds()
            out[name] = dim.decode(rng.uniform(lo, hi))
    return out


class _Parzen1D:
    """Mixture of truncated Gaussians on ``[a, b]`` plus a broad prior kernel."""

    def __init__(self, points: np.ndarray, a: float, b: float):
        w = b - a
        mus = np.sort(np.asarray(points, dtype=float))
        n = len(mus)
        if n:
            padded = np.concatenate([[a], mus, [b]])
            sig = np.maximum(padded[1:-1] - padded[:-2], padded[2:] - padded[1:-1])
            sig = np.clip(sig, w / min(100.0, 1.0 + n), w)
        else:
            sig = np.zeros(0)
        self.mu = np.append(mus, (a + b) / 2.0)
        self.sigma = np.append(sig, w)
        self.a, self.b = a, b
        self.lo_cdf = ndtr((a - self.mu) / self.sigma)
        self.mass = ndtr((b - self.mu) / self.sigma) - self.lo_cdf

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        comp = rng.integers(len(self.mu), size=size)
        u = self.lo_cdf[comp] + rng.random(size) * self.mass[comp]
        x = self.mu[comp] + self.sigma[comp] * ndtri(np.clip(u, 1e-300, 1 - 1e-16))
        return np.clip(x, self.a, self.b)

    def log_pdf(self, x: np.ndarray) -> np.ndarray:
        z = (x[:, None] - self.mu[None, :]) / self.sigma[None, :]
        dens = np.exp(-0.5 * z * z) / (self.sigma * math.sqrt(2 * math.pi) * self.mass)
        return np.log(dens.mean(axis=1) + 1e-300)


class _Categorical1D:
    def __init__(self, indices: Sequence[int], k: int):
        counts = np.bincount(np.asarray(indices, dtype=np.int64), minlength=k).astype(float) + 1.0
        self.p = counts / counts.sum()

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return rng.choice(len(self.p), size=size, p=self.p).astype(float)

    def log_pdf(self, x: np.ndarray) -> np.ndarray:
        return np.log(self.p[x.astype(np.int64)])


def _estimator(dim: Dimension, values: list):
    if isinstance(dim, Categorical):
        return _Categorical1D([dim.choices.index(v) for v in values], len(dim.choices))
    lo, hi = dim.bounds()
    return _Parzen1D(np.array([dim.encode(v) for v in values]), lo, hi)


def _decode(dim: Dimension, u: float):
    if isinstance(dim, Categorical):
        return dim.choices[int(u)]
    return dim.decode(float(u))


def _propose(space: HyperparameterSpace, history: list[TrialRecord], rng: np.random.Generator) -> dict[str, Any]:
    ranked = sorted(history, key=lambda t: (t.score, t.iteration))
    n_good = max(1, math.ceil(GOOD_QUANTILE * len(ranked)))
    good, bad = ranked[:n_good], ranked[n_good:]
    cand = {}
    score = np.zeros(N_CANDIDATES)
    for name, dim in space.items():
        l_est = _estimator(dim, [t.params[name] for t in good])
        g_est = _estimator(dim, [t.params[name] for t in bad])
        x = l_est.sample(rng, N_CANDIDATES)
        score += l_est.log_pdf(x) - g_est.log_pdf(x)
        cand[name] = x
    best = int(np.argmax(score))
    return {name: _decode(dim, cand[name][best]) for name, dim in space.items()}


def smbo_tune(
    space: HyperparameterSpace,
    objective: Callable[[dict[str, Any]], float],
    budget: int = 20,
    n_init: int = 5,
    seed: int = 0,
) -> tuple[dict[str, Any], list[TrialRecord]]:
    """Minimise ``objective`` over ``space`` in ``budget`` evaluations.

    A trial whose objective raises or returns NaN is recorded with loss
    ``inf`` and the search continues.
    """
    if not (budget >= n_init >= 1):
        raise ConfigError(f"need budget >= n_init >= 1, got budget={budget}, n_init={n_init}")
    if not space:
        raise ConfigError("empty search space")
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, 0x7BE])
    history: list[TrialRecord] = []
    for it in range(1, budget + 1):
        params = _sample_uniform(space, rng) if it <= n_init else _propose(space, history, rng)
        try:
            loss = float(objective(dict(params)))
        except Exception:  # any failing trial is scored as the worst possible
            loss = math.inf
        if math.isnan(loss):
            loss = math.inf
        history.append(TrialRecord(params, loss, it))
    best = min(history, key=lambda t: (t.score, t.iteration))
    return dict(best.params), history


def random_search(
    space: HyperparameterSpace, objective: Callable[[dict[str, Any]], float], budget: int, seed: int
) -> tuple[dict[str, Any], list[TrialRecord]]:
    return smbo_tune(space, objective, budget=budget, n_init=budget, seed=seed)


DEFAULT_SPACES: dict[str, dict[str, Dimension]] = {
    "RF": {
        "n_trees": Integer(100, 2000, log=True),
        "max_depth": Integer(2, 20),
        "max_features": Real(0.1, 1.0),
        "max_samples": Real(0.5, 1.0),
    },
    "ET": {
        "n_trees": Integer(100, 2000, log=True),
        "max_depth": Integer(2, 20),
        "max_features": Real(0.1, 1.0),
        "max_samples": Real(0.5, 1.0),
    },
    "GBDT-depthwise": {
        "n_trees": Integer(100, 2000, log=True),
        "eta": Real(0.005, 0.3, log=True),
        "max_depth": Integer(2, 20),
        "min_child_weight": Real(0.0, 10.0),
        "reg_lambda": Real(0.0, 5.0),
        "gamma": Real(0.0, 10.0),
        "subsample": Real(0.5, 1.0),
        "colsample_bytree": Real(0.5, 1.0),
    },
    "GBDT-leafwise": {
        "n_trees": Integer(100, 2000, log=True),
        "n_leaves": Integer(2, 64, log=True),
        "eta": Real(0.005, 0.3, log=True),
        "max_depth": Integer(2, 20),
        "reg_lambda": Real(0.0, 5.0),
        "subsample": Real(0.5, 1.0),
        "colsample_bytree": Real(0.5, 1.0),
    },
}


def space_from_config(raw: Mapping[str, Any]) -> dict[str, Dimension]:
    """Build a space from ``{"name": {"type": "real"|"int"|"cat", ...}}``."""
    out: dict[str, Dimension] = {}
    for name, spec in raw.items():
        kind = spec.get("type")
        if kind == "real":
            out[name] = Real(float(spec["low"]), float(spec["high"]), bool(spec.get("log", False)))
        elif kind == "int":
            out[name] = Integer(int(spec["low"]), int(spec["high"]), bool(spec.get("log", False)))
        elif kind == "cat":
            out[name] = Categorical(tuple(spec["choices"]))
        else:
            raise ConfigError(f"search dimension {name!r}: unknown type {kind!r}")
    return out


def space_to_config(space: Mapping[str, Dimension]) -> dict[str, Any]:
    out = {}
    for name, dim in space.items():
        if isinstance(dim, Real):
            out[name] = {"type": "real", "low": dim.low, "high": dim.high, "log": dim.log}
        elif isinstance(dim, Integer):
            out[name] = {"type": "int", "low": dim.low, "high": dim.high, "log": dim.log}
        else:
            out[name] = {"type": "cat", "choices": list(dim.choices)}
    return out


def log_loss(y: np.ndarray, p: np.ndarray) -> float:
    p = np.clip(p, 1e-15, 1 - 1e-15)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


def cv_objective(
    table: FeatureTable,
    kind: str,
    seed: int,
    folds: int = 3,
    fixed: Mapping[str, Any] | None = None,
) -> Callable[[dict[str, Any]], float]:
    """Stratified k-fold mean log-loss of ``kind`` trained with the trial params."""
    if kind not in MODEL_KINDS:
        raise ConfigError(f"unknown model kind {kind!r}")
    if table.labels is None:
        raise ConfigError("tuning needs a labelled table")
    y = table.labels
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, 0xF01D])
    fold_of = np.empty(len(y), dtype=np.int64)
    for c in (0, 1):
        idx = np.nonzero(y == c)[0]
        idx = idx[rng.permutation(len(idx))]
        fold_of[idx] = np.arange(len(idx)) % folds

    def objective(params: dict[str, Any]) -> float:
        merged = dict(fixed or {})
        merged.update(params)
        losses = []
        for k in range(folds):
            tr, te = np.nonzero(fold_of != k)[0], np.nonzero(fold_of == k)[0]
            model = train_model(table.subset(tr), kind, merged, seed)
            losses.append(log_loss(y[te], predict_proba(model, table.X[te])))
        return float(np.mean(losses))

    return objective


def tune_model(
    table: FeatureTable,
    kind: str,
    budget: int,
    seed: int,
    space: Mapping[str, Dimension] | None = None,
    n_init: int = 5,
    fixed: Mapping[str, Any] | None = None,
) -> tuple[dict[str, Any], list[TrialRecord]]:
    space = dict(space or DEFAULT_SPACES[kind])
    return smbo_tune(space, cv_objective(table, kind, seed, fixed=fixed), budget=budget, n_init=min(n_init, budget), seed=seed)

