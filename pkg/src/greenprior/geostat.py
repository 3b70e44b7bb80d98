"""Station interpolation by simple kriging with a spherical semivariogram.

Typical daily workflow::

    days = filter_days(obs, min_stations=10)
    for day in days:
        day_obs = [o for o in obs if o.date == day]
        emp = empirical_semivariogram(day_obs, n_bins=10, max_lag=...)
        fit = fit_variogram(emp, initial)
        best, _ = cross_validate_variogram(day_obs, candidate_variograms(fit.model))
        grids.append(krige_grid(day_obs, best, target))
    mean_layer = temporal_mean(grids)

:func:`krige_daily_mean` bundles that loop.
"""

from __future__ import annotations

import datetime as _dt
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from numba import njit
from scipy.optimize import minimize_scalar

from .errors import (
    DataError,
    NoComparablePoints,
    SingularSystem,
    TooFewStations,
)
from .raster import Grid, GridGeoref, temporal_mean

PIVOT_RTOL = 1e-12
NEGATIVE_VARIANCE_TOL = 1e-9
DEGENERATE_SILL = 1e-12


@dataclass(frozen=True)
class Observation:
    station_id: str
    x: float
    y: float
    date: _dt.date
    value: float

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise DataError(f"station {self.station_id} on {self.date}: non-finite value")


def check_unique(obs: Sequence[Observation]) -> None:
    seen = set()
    for o in obs:
        key = (o.station_id, o.date)
        if key in seen:
            raise DataError(f"duplicate observation for station {o.station_id!r} on {o.date}")
        seen.add(key)


@dataclass(frozen=True)
class SphericalVariogram:
    nugget: float
    sill: float
    range: float

    def __post_init__(self):
        if not (0 <= self.nugget <= self.sill):
            raise DataError(f"variogram needs 0 <= nugget <= sill, got nugget={self.nugget}, sill={self.sill}")
        if not self.range > 0:
            raise DataError(f"variogram range must be positive, got {self.range}")

    def to_dict(self) -> dict:
        return {"nugget": self.nugget, "sill": self.sill, "range": self.range}

    @classmethod
    def from_dict(cls, d) -> "SphericalVariogram":
        return cls(float(d["nugget"]), float(d["sill"]), float(d["range"]))


class LagBin(NamedTuple):
    lag: float
    gamma: float
    count: int


@dataclass
class VariogramFit:
    model: SphericalVariogram
    degenerate: bool = False
    loss: float = 0.0


@dataclass
class ValidationReport:
    rmse: float
    mae: float
    bias: float
    n: int

    def __post_init__(self):
        if self.n < 1:
            raise NoComparablePoints("validation report needs at least one point")
        slack = 1e-12 * max(1.0, self.rmse)
        if self.mae < 0 or self.rmse + slack < self.mae or self.rmse + slack < abs(self.bias):
            raise AssertionError(f"validation identities violated: {self}")

    def to_dict(self) -> dict:
        return {"rmse": self.rmse, "mae": self.mae, "bias": self.bias, "n": self.n}


def _spherical_shape(h: np.ndarray, rng: float) -> np.ndarray:
    r = np.minimum(h / rng, 1.0)
    return 1.5 * r - 0.5 * r**3


def spherical_gamma(v: SphericalVariogram, h):
    """Semivariance at lag ``h`` (scalar or array); zero at exactly ``h == 0``."""
    h_arr = np.asarray(h, dtype=float)
    if np.any(h_arr < 0):
        raise DataError("lag must be non-negative")
    g = v.nugget + (v.sill - v.nugget) * _spherical_shape(h_arr, v.range)
    g = np.where(h_arr == 0, 0.0, g)
    return float(g) if np.ndim(h) == 0 else g


def covariance(v: SphericalVariogram, h):
    return v.sill - spherical_gamma(v, h)


def _coords(obs: Sequence[Observation]) -> tuple[np.ndarray, np.ndarray]:
    xy = np.array([(o.x, o.y) for o in obs], dtype=float).reshape(-1, 2)
    z = np.array([o.value for o in obs], dtype=float)
    return xy, z


def _pairwise(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.hypot(a[:, None, 0] - b[None, :, 0], a[:, None, 1] - b[None, :, 1])


def empirical_semivariogram(obs: Sequence[Observation], n_bins: int, max_lag: float) -> list[LagBin]:
    """Matheron estimator on equal-width lag bins over ``[0, max_lag]``.

    Bin centres are bin midpoints; empty bins are omitted.
    """
    if len(obs) < 2:
        raise TooFewStations(f"need at least 2 stations, got {len(obs)}")
    if n_bins < 1 or not max_lag > 0:
        raise DataError("n_bins must be >= 1 and max_lag > 0")
    xy, z = _coords(obs)
    i, j = np.triu_indices(len(z), k=1)
    d = np.hypot(xy[i, 0] - xy[j, 0], xy[i, 1] - xy[j, 1])
    sq = (z[i] - z[j]) ** 2
    keep = d <= max_lag
    width = max_lag / n_bins
    b = np.minimum((d[keep] / width).astype(np.int64), n_bins - 1)
    counts = np.bincount(b, minlength=n_bins)
    sums = np.bincount(b, weights=sq[keep], minlength=n_bins)
    out = []
    for k in range(n_bins):
        if counts[k]:
            out.append(LagBin((k + 0.5) * width, sums[k] / (2.0 * counts[k]), int(counts[k])))
    return out


def _fit_nugget_sill(f: np.ndarray, g: np.ndarray, w: np.ndarray) -> tuple[float, float, float]:
    """Weighted LS for gamma = nugget*(1-f) + sill*f subject to 0 <= nugget <= sill."""

    def loss(n, s):
        return float(np.sum(w * (n * (1 - f) + s * f - g) ** 2))

    candidates = []
    a = np.stack([1 - f, f], axis=1)
    ata = a.T @ (a * w[:, None])
    atb = a.T @ (w * g)
    if abs(np.linalg.det(ata)) > 1e-12 * max(1.0, float(np.abs(ata).max()) ** 2):
        n, s = np.linalg.solve(ata, atb)
        if 0 <= n <= s:
            candidates.append((n, s))
    # boundary: nugget = 0
    ff = float(np.sum(w * f * f))
    if ff > 0:
        s = max(float(np.sum(w * f * g)) / ff, DEGENERATE_SILL)
        candidates.append((0.0, s))
    # boundary: nugget = sill (pure nugget)
    c = max(float(np.sum(w * g) / np.sum(w)), DEGENERATE_SILL)
    candidates.append((c, c))
    best = min(candidates, key=lambda ns: loss(*ns))
    return float(best[0]), float(best[1]), loss(*best)


def fit_variogram(
    empirical: Sequence[LagBin],
    initial: SphericalVariogram,
    *,
    max_lag: float | None = None,
) -> VariogramFit:
    """Pair-count-weighted least-squares fit of a spherical model.

    Block coordinate descent: for any fixed range the (nugget, sill) block
    has a closed-form constrained solution, so the range is searched on the
    resulting profile (log grid, then bounded Brent refinement).  With fewer
    than three bins only the sill is fitted; nugget and range stay at
    ``initial``.
    """
    if not empirical:
        raise DataError("empty semivariogram")
    h = np.array([b.lag for b in empirical], dtype=float)
    g = np.array([b.gamma for b in empirical], dtype=float)
    w = np.array([b.count for b in empirical], dtype=float)
    if max_lag is None:
        max_lag = float(h.max())
    if np.all(g == 0):
        return VariogramFit(SphericalVariogram(0.0, DEGENERATE_SILL, float(max_lag)), degenerate=True)

    if len(empirical) < 3:
        f = _spherical_shape(h, initial.range)
        n = initial.nugget
        denom = float(np.sum(w * f * f))
        s = float(np.sum(w * f * (g - n * (1 - f)))) / denom if denom > 0 else float(np.mean(g))
        s = max(s, n, DEGENERATE_SILL)
        model = SphericalVariogram(n, s, initial.range)
        return VariogramFit(model, loss=float(np.sum(w * (spherical_gamma(model, h) - g) ** 2)))

    def profile(log_r):
        return _fit_nugget_sill(_spherical_shape(h, math.exp(log_r)), g, w)[2]

    lo = math.log(max(h.min() * 0.05, 1e-9))
    hi = math.log(max(h.max() * 4.0, initial.range))
    grid = np.linspace(lo, hi, 241)
    grid = np.sort(np.append(grid, math.log(initial.range)))
    losses = np.array([profile(x) for x in grid])
    k = int(np.argmin(losses))
    a, b = grid[max(k - 1, 0)], grid[min(k + 1, len(grid) - 1)]
    best_log_r, best_loss = grid[k], losses[k]
    if b > a:
        res = minimize_scalar(profile, bounds=(a, b), method="bounded", options={"xatol": 1e-10})
        if res.fun <= best_loss:
            best_log_r, best_loss = float(res.x), float(res.fun)
    r = math.exp(best_log_r)
    n, s, loss = _fit_nugget_sill(_spherical_shape(h, r), g, w)
    return VariogramFit(SphericalVariogram(n, s, r), loss=loss)


# -- linear algebra -----------------------------------------------------------


@njit(cache=True)
def _lu_kernel(lu, perm, rtol):
    n = lu.shape[0]
    max_pivot = 0.0
    for k in range(n):
        p = k
        for i in range(k + 1, n):
            if abs(lu[i, k]) > abs(lu[p, k]):
                p = i
        pivot = abs(lu[p, k])
        max_pivot = max(max_pivot, pivot)
        if pivot == 0.0 or pivot <= rtol * max_pivot:
            return False
        if p != k:
            for j in range(n):
                lu[k, j], lu[p, j] = lu[p, j], lu[k, j]
            perm[k], perm[p] = perm[p], perm[k]
        for i in range(k + 1, n):
            lu[i, k] /= lu[k, k]
            f = lu[i, k]
            for j in range(k + 1, n):
                lu[i, j] -= f * lu[k, j]
    return True


@njit(cache=True)
def _solve_kernel(lu, x):
    # row-oriented sweeps keep the many-right-hand-side case cache friendly
    n, m = x.shape
    for i in range(1, n):
        for j in range(i):
            f = lu[i, j]
            for c in range(m):
                x[i, c] -= f * x[j, c]
    for i in range(n - 1, -1, -1):
        for j in range(i + 1, n):
            f = lu[i, j]
            for c in range(m):
                x[i, c] -= f * x[j, c]
        d = lu[i, i]
        for c in range(m):
            x[i, c] /= d


def lu_factor(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian elimination with partial pivoting.

    Returns the packed LU matrix and the row permutation.  Raises
    :class:`SingularSystem` when a pivot falls below ``1e-12`` times the
    largest pivot magnitude encountered.
    """
    lu = np.array(a, dtype=np.float64, copy=True)
    perm = np.arange(lu.shape[0])
    if not _lu_kernel(lu, perm, PIVOT_RTOL):
        raise SingularSystem("kriging covariance matrix is singular (duplicate station coordinates?)")
    return lu, perm


def lu_solve(lu: np.ndarray, perm: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve for one right-hand side (vector) or many (columns of a matrix)."""
    b = np.asarray(b, dtype=np.float64)
    x = np.ascontiguousarray(b[perm].reshape(len(perm), -1))
    _solve_kernel(lu, x)
    return x.reshape(b.shape)


class SimpleKriging:
    """Simple-kriging predictor for one station set, factored once.

    ``negative_variance_count`` counts predictions whose variance came out
    below ``-1e-9`` before clamping; it should stay zero.
    """

    def __init__(self, obs: Sequence[Observation], v: SphericalVariogram, known_mean: float):
        if len(obs) < 1:
            raise TooFewStations("simple kriging needs at least one observation")
        self.variogram = v
        self.known_mean = float(known_mean)
        self.xy, z = _coords(obs)
        self.residual = z - self.known_mean
        self.lu, self.perm = lu_factor(covariance(v, _pairwise(self.xy, self.xy)))
        self.negative_variance_count = 0

    def predict(self, x, y) -> tuple[np.ndarray, np.ndarray]:
        pts = np.column_stack([np.ravel(x), np.ravel(y)]).astype(float)
        c = covariance(self.variogram, _pairwise(self.xy, pts))  # (n_obs, n_pts)
        lam = lu_solve(self.lu, self.perm, c)
        est = self.known_mean + self.residual @ lam
        var = self.variogram.sill - np.sum(lam * c, axis=0)
        self.negative_variance_count += int(np.sum(var < -NEGATIVE_VARIANCE_TOL))
        return est, np.maximum(var, 0.0)


def simple_kriging_predict(
    obs: Sequence[Observation],
    v: SphericalVariogram,
    known_mean: float,
    target: tuple[float, float],
) -> tuple[float, float]:
    est, var = SimpleKriging(obs, v, known_mean).predict([target[0]], [target[1]])
    return float(est[0]), float(var[0])


def candidate_variograms(fitted: SphericalVariogram) -> list[SphericalVariogram]:
    """Small search grid around a least-squares fit: 3 nuggets x 4 ranges."""
    s = fitted.sill
    return [
        SphericalVariogram(nug, s, fitted.range * mult)
        for nug in (0.0, 0.1 * s, 0.25 * s)
        for mult in (0.5, 1.0, 1.5, 2.0)
    ]


def loocv_rmse(obs: Sequence[Observation], v: SphericalVariogram) -> tuple[float, int]:
    """Leave-one-out RMSE and the number of folds skipped as singular.

    Each fold predicts the held-out station from the others with the mean of
    the others as the known mean.
    """
    xy, z = _coords(obs)
    C = covariance(v, _pairwise(xy, xy))
    n = len(z)
    errs = []
    skipped = 0
    for k in range(n):
        rest = np.arange(n) != k
        try:
            lu, perm = lu_factor(C[np.ix_(rest, rest)])
        except SingularSystem:
            skipped += 1
            continue
        lam = lu_solve(lu, perm, C[rest, k])
        mean = float(np.mean(z[rest]))
        errs.append(mean + float((z[rest] - mean) @ lam) - z[k])
    rmse = math.sqrt(float(np.mean(np.square(errs)))) if errs else math.inf
    return rmse, skipped


def cross_validate_variogram(
    obs: Sequence[Observation], candidates: Sequence[SphericalVariogram]
) -> tuple[SphericalVariogram, list[float]]:
    """Pick the candidate with the lowest leave-one-out RMSE (first wins ties).

    Candidates with more than half of their folds singular score ``inf``
    and cannot be selected.
    """
    if len(obs) < 3:
        raise TooFewStations(f"cross-validation needs at least 3 stations, got {len(obs)}")
    if not candidates:
        raise DataError("no candidate variograms")
    scores = []
    for cand in candidates:
        rmse, skipped = loocv_rmse(obs, cand)
        scores.append(math.inf if skipped > len(obs) / 2 else rmse)
    finite = [i for i, s in enumerate(scores) if math.isfinite(s)]
    if not finite:
        raise SingularSystem("every candidate variogram was disqualified by singular folds")
    best = min(finite, key=lambda i: scores[i])
    return candidates[best], scores


def group_by_date(obs: Sequence[Observation]) -> dict[_dt.date, list[Observation]]:
    out: dict[_dt.date, list[Observation]] = defaultdict(list)
    for o in obs:
        out[o.date].append(o)
    return dict(sorted(out.items()))


def filter_days(all_obs: Sequence[Observation], min_stations: int = 10) -> list[_dt.date]:
    stations: dict[_dt.date, set] = defaultdict(set)
    for o in all_obs:
        stations[o.date].add(o.station_id)
    return sorted(d for d, s in stations.items() if len(s) >= min_stations)


def krige_grid(obs: Sequence[Observation], v: SphericalVariogram, target: GridGeoref, name: str | None = None) -> Grid:
    if len(obs) < 2:
        raise TooFewStations(f"krige_grid needs at least 2 stations, got {len(obs)}")
    mean = float(np.mean([o.value for o in obs]))
    model = SimpleKriging(obs, v, mean)
    xc, yc = target.cell_centers()
    est, _ = model.predict(xc, yc)
    if name is None:
        name = f"PM25_{obs[0].date.isoformat()}" if isinstance(obs[0].date, _dt.date) else "PM25"
    return Grid(target, name, est.reshape(target.shape))


def validate_points(grid: Grid, obs: Sequence[Observation]) -> ValidationReport:
    """Compare grid cells against point observations (bias = predicted - observed)."""
    if not obs:
        raise NoComparablePoints("no observations given")
    x = np.array([o.x for o in obs])
    y = np.array([o.y for o in obs])
    o_val = np.array([o.value for o in obs])
    row, col, inside = grid.georef.cell_of(x, y)
    pred = grid.values[row, col]
    ok = inside & (pred != grid.nodata)
    if not ok.any():
        raise NoComparablePoints(f"no observation falls on a valid cell of {grid.name!r}")
    d = pred[ok] - o_val[ok]
    return ValidationReport(
        rmse=math.sqrt(float(np.mean(d * d))),
        mae=float(np.mean(np.abs(d))),
        bias=float(np.mean(d)),
        n=int(ok.sum()),
    )


@dataclass
class DayFit:
    date: _dt.date
    n_stations: int
    variogram: SphericalVariogram
    cv_rmse: float
    degenerate: bool = False


@dataclass
class KrigingRun:
    grid: Grid
    days: list[DayFit] = field(default_factory=list)
    excluded_days: list[_dt.date] = field(default_factory=list)


def default_max_lag(obs: Sequence[Observation]) -> float:
    xy, _ = _coords(obs)
    d = _pairwise(xy, xy)
    return float(d.max()) / 2.0 if d.max() > 0 else 1.0


def krige_daily_mean(
    all_obs: Sequence[Observation],
    target: GridGeoref,
    *,
    name: str = "PM25",
    min_stations: int = 10,
    n_bins: int = 10,
    max_lag: float | None = None,
    variogram: SphericalVariogram | None = None,
) -> KrigingRun:
    """Krige every retained day and average the daily grids.

    Each day's variogram is fitted to its empirical semivariogram and then
    refined by leave-one-out selection among :func:`candidate_variograms`,
    unless a fixed ``variogram`` is supplied.
    """
    by_day = group_by_date(all_obs)
    kept = filter_days(all_obs, min_stations)
    excluded = [d for d in by_day if d not in set(kept)]
    if not kept:
        raise TooFewStations(f"no day has at least {min_stations} stations")
    grids, fits = [], []
    for day in kept:
        day_obs = by_day[day]
        if variogram is not None:
            best, rmse, degenerate = variogram, math.nan, False
        else:
            lag = max_lag or default_max_lag(day_obs)
            emp = empirical_semivariogram(day_obs, n_bins, lag)
            var0 = float(np.var([o.value for o in day_obs]))
            initial = SphericalVariogram(0.0, max(var0, DEGENERATE_SILL), lag)
            fit = fit_variogram(emp, initial, max_lag=lag)
            degenerate = fit.degenerate
            if degenerate:
                best, rmse = fit.model, math.nan
            else:
                best, scores = cross_validate_variogram(day_obs, candidate_variograms(fit.model))
                rmse = min(scores)
        grids.append(krige_grid(day_obs, best, target, name=f"{name}_{day.isoformat()}"))
        fits.append(DayFit(day, len(day_obs), best, rmse, degenerate))
    return KrigingRun(temporal_mean(grids, name=name), fits, excluded)
