"""Per-cell spectral and thermal indices.

Band roles (blue, red, nir, swir1) are bound by configuration, never by
sensor band numbers.  Nodata is absorbing, and any cell whose denominator
is within ``1e-12`` of zero becomes nodata.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import MisalignedGrids
from .raster import Grid

DENOM_EPS = 1e-12

EVI_GAIN = 2.5
EVI_C1 = 6.0
EVI_C2 = 7.5
EVI_L = 1.0


def _apply(name: str, fn: Callable[..., tuple[np.ndarray, np.ndarray]], *grids: Grid) -> Grid:
    ref = grids[0].georef
    for g in grids[1:]:
        if not g.georef.aligned_with(ref):
            raise MisalignedGrids(f"{name}: {g.name!r} is not aligned with {grids[0].name!r}")
    valid = np.logical_and.reduce([g.valid for g in grids])
    num, den = fn(*(g.values for g in grids))
    ok = valid & (np.abs(den) >= DENOM_EPS)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(ok, num / np.where(ok, den, 1.0), ref.nodata)
    return Grid(ref, name, out)


def normalized_difference(a: Grid, b: Grid, name: str = "ND") -> Grid:
    return _apply(name, lambda x, y: (x - y, x + y), a, b)


def ndvi(nir: Grid, red: Grid) -> Grid:
    return normalized_difference(nir, red, "NDVI")


def ndbi(swir1: Grid, nir: Grid) -> Grid:
    return normalized_difference(swir1, nir, "NDBI")


def ndmi(nir: Grid, swir1: Grid) -> Grid:
    return normalized_difference(nir, swir1, "NDMI")


def savi(nir: Grid, red: Grid, L: float = 0.5) -> Grid:
    """Soil-adjusted vegetation index; ``L = 0`` reduces to NDVI bit for bit."""
    return _apply("SAVI", lambda n, r: ((1.0 + L) * (n - r), n + r + L), nir, red)


def evi(nir: Grid, red: Grid, blue: Grid) -> Grid:
    return _apply(
        "EVI",
        lambda n, r, b: (EVI_GAIN * (n - r), n + EVI_C1 * r - EVI_C2 * b + EVI_L),
        nir,
        red,
        blue,
    )


def lst_difference(day: Grid, night: Grid, name: str = "DIFFLST") -> Grid:
    ref = day.georef
    if not night.georef.aligned_with(ref):
        raise MisalignedGrids(f"{night.name!r} is not aligned with {day.name!r}")
    ok = day.valid & night.valid
    return Grid.from_masked(ref, name, np.abs(day.values - night.values), ok)


SPECTRAL_INDICES = ("NDVI", "EVI", "SAVI", "NDMI", "NDBI")

_REQUIRED_BANDS = {
    "NDVI": ("nir", "red"),
    "EVI": ("nir", "red", "blue"),
    "SAVI": ("nir", "red"),
    "NDMI": ("nir", "swir1"),
    "NDBI": ("swir1", "nir"),
}


def required_bands(names) -> set[str]:
    out: set[str] = set()
    for n in names:
        out.update(_REQUIRED_BANDS[n])
    return out


def compute_index(name: str, bands: dict[str, Grid]) -> Grid:
    if name == "NDVI":
        return ndvi(bands["nir"], bands["red"])
    if name == "EVI":
        return evi(bands["nir"], bands["red"], bands["blue"])
    if name == "SAVI":
        return savi(bands["nir"], bands["red"])
    if name == "NDMI":
        return ndmi(bands["nir"], bands["swir1"])
    if name == "NDBI":
        return ndbi(bands["swir1"], bands["nir"])
    raise KeyError(f"unknown spectral index {name!r}")
