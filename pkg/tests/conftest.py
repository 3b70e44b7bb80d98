"""Shared fixtures: one default synthetic bundle and its pipeline run per session."""

from __future__ import annotations

import datetime as dt

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from greenprior.geostat import Observation
from greenprior.pipeline import build_layers, load_config, run_all, sample_table
from greenprior.raster import Grid, GridGeoref
from greenprior.synth import ScenarioSpec, generate_scenario

settings.register_profile(
    "default",
    deadline=None,
    max_examples=60,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("default")

# acceptance lines collected by tests/test_acceptance.py
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


# -- small builders ---------------------------------------------------------------------


def make_grid(values, cell=1.0, x0=0.0, y0=0.0, name="g", nodata=-9999.0) -> Grid:
    v = np.asarray(values, dtype=float)
    if v.ndim == 1:
        v = v.reshape(1, -1)
    geo = GridGeoref(v.shape[1], v.shape[0], x0, y0, cell, nodata)
    return Grid(geo, name, v)


def make_obs(xy, z, date=dt.date(2022, 6, 1), prefix="S") -> list[Observation]:
    return [Observation(f"{prefix}{i:02d}", float(x), float(y), date, float(v)) for i, ((x, y), v) in enumerate(zip(xy, z))]


def spread_points(rng: np.random.Generator, n: int, extent: float = 10000.0, min_gap: float = 50.0) -> np.ndarray:
    """``n`` random points with a minimum pairwise gap (keeps kriging systems well posed)."""
    pts: list[np.ndarray] = []
    while len(pts) < n:
        p = rng.uniform(0, extent, 2)
        if all(np.hypot(*(p - q)) >= min_gap for q in pts):
            pts.append(p)
    return np.array(pts)


# -- session fixtures ------------------------------------------------------------------


@pytest.fixture(scope="session")
def bundle(tmp_path_factory):
    """Default scenario (seed 42) written to disk: ``(path, ground_truth)``."""
    out = tmp_path_factory.mktemp("bundle")
    return generate_scenario(ScenarioSpec(), out)


@pytest.fixture(scope="session")
def config(bundle):
    return load_config(bundle[0] / "config.json")


@pytest.fixture(scope="session")
def layers(config):
    return build_layers(config)


@pytest.fixture(scope="session")
def table(config, layers):
    return sample_table(config, layers.stack)


@pytest.fixture(scope="session")
def default_run(config, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    return run_all(config, out), out


# -- ml oracles ------------------------------------------------------------------------


def gini(y) -> float:
    n = len(y)
    if n == 0:
        return 0.0
    p = sum(y) / n
    return 2.0 * p * (1.0 - p)


def exhaustive_gini_split(X, y, min_leaf: int = 1):
    """Every feature, every midpoint; best gain with lowest (feature, threshold) on ties."""
    n, p = X.shape
    parent = gini(y)
    cands = []
    for f in range(p):
        vals = sorted(set(X[:, f].tolist()))
        for a, b in zip(vals, vals[1:]):
            thr = (a + b) / 2.0
            left = X[:, f] <= thr
            nl = int(left.sum())
            if nl < min_leaf or n - nl < min_leaf:
                continue
            gain = parent - (nl / n) * gini(y[left]) - ((n - nl) / n) * gini(y[~left])
            cands.append((gain, f, thr))
    if not cands:
        return None
    best = max(c[0] for c in cands)
    if best <= 0:
        return None
    gain, f, thr = next(c for c in cands if c[0] >= best - 1e-12)
    return f, thr, gain


def walk(tree, row) -> int:
    node = 0
    while tree.feature[node] >= 0:
        node = tree.left[node] if row[tree.feature[node]] <= tree.threshold[node] else tree.right[node]
    return node
