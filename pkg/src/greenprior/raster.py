"""Georeferenced grids and the operations that put layers on a common grid.

Grids are stored south-up: ``values[0]`` is the southernmost row and
``values[r, c]`` covers the cell whose lower-left corner is
``(x_origin + c * cell_size, y_origin + r * cell_size)``.  Absence is
encoded with the ``nodata`` sentinel; NaN never appears in stored values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import (
    DataError,
    DuplicateLayerName,
    EmptyInput,
    MisalignedGrids,
    UnknownAttribute,
)

DEFAULT_NODATA = -9999.0
CELL_SIZE_TOL = 1e-9


@dataclass(frozen=True)
class GridGeoref:
    ncols: int
    nrows: int
    x_origin: float
    y_origin: float
    cell_size: float
    nodata: float = DEFAULT_NODATA

    def __post_init__(self):
        if int(self.ncols) < 1 or int(self.nrows) < 1:
            raise DataError(f"grid must have at least one row and column, got {self.nrows}x{self.ncols}")
        if not self.cell_size > 0:
            raise DataError(f"cell_size must be positive, got {self.cell_size}")
        object.__setattr__(self, "ncols", int(self.ncols))
        object.__setattr__(self, "nrows", int(self.nrows))
        object.__setattr__(self, "x_origin", float(self.x_origin))
        object.__setattr__(self, "y_origin", float(self.y_origin))
        object.__setattr__(self, "cell_size", float(self.cell_size))
        object.__setattr__(self, "nodata", float(self.nodata))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nrows, self.ncols)

    @property
    def x_max(self) -> float:
        return self.x_origin + self.ncols * self.cell_size

    @property
    def y_max(self) -> float:
        return self.y_origin + self.nrows * self.cell_size

    def aligned_with(self, other: "GridGeoref") -> bool:
        return (
            self.ncols == other.ncols
            and self.nrows == other.nrows
            and self.x_origin == other.x_origin
            and self.y_origin == other.y_origin
            and abs(self.cell_size - other.cell_size) <= CELL_SIZE_TOL
            and self.nodata == other.nodata
        )

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(x, y)`` arrays of shape ``(nrows, ncols)`` with cell-center coordinates."""
        xs = self.x_origin + (np.arange(self.ncols) + 0.5) * self.cell_size
        ys = self.y_origin + (np.arange(self.nrows) + 0.5) * self.cell_size
        return np.meshgrid(xs, ys)

    def cell_of(self, x, y) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Row/col of the cell containing each point, plus an inside-extent mask.

        Points on the upper/right outer edge are attributed to the last cell.
        """
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        u = (x - self.x_origin) / self.cell_size
        v = (y - self.y_origin) / self.cell_size
        inside = (u >= 0) & (u <= self.ncols) & (v >= 0) & (v <= self.nrows)
        col = np.clip(np.floor(u), 0, self.ncols - 1).astype(np.int64)
        row = np.clip(np.floor(v), 0, self.nrows - 1).astype(np.int64)
        return row, col, inside

    def to_dict(self) -> dict:
        return {
            "ncols": self.ncols,
            "nrows": self.nrows,
            "x_origin": self.x_origin,
            "y_origin": self.y_origin,
            "cell_size": self.cell_size,
            "nodata": self.nodata,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "GridGeoref":
        return cls(
            ncols=d["ncols"],
            nrows=d["nrows"],
            x_origin=d["x_origin"],
            y_origin=d["y_origin"],
            cell_size=d["cell_size"],
            nodata=d.get("nodata", DEFAULT_NODATA),
        )


@dataclass
class Grid:
    georef: GridGeoref
    name: str
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim == 1:
            if values.size != self.georef.ncols * self.georef.nrows:
                raise DataError(
                    f"grid {self.name!r}: {values.size} values for "
                    f"{self.georef.nrows}x{self.georef.ncols} cells"
                )
            values = values.reshape(self.georef.shape)
        if values.shape != self.georef.shape:
            raise DataError(f"grid {self.name!r}: values shape {values.shape} != {self.georef.shape}")
        if np.isnan(values).any():
            raise DataError(f"grid {self.name!r}: NaN in stored values; use the nodata sentinel")
        self.values = values

    @classmethod
    def from_masked(cls, georef: GridGeoref, name: str, values: np.ndarray, valid: np.ndarray) -> "Grid":
        out = np.where(valid, values, georef.nodata)
        return cls(georef, name, out)

    @property
    def nodata(self) -> float:
        return self.georef.nodata

    @property
    def valid(self) -> np.ndarray:
        return self.values != self.georef.nodata

    def renamed(self, name: str) -> "Grid":
        return Grid(self.georef, name, self.values.copy())

    def equals(self, other: "Grid") -> bool:
        return (
            self.name == other.name
            and self.georef.aligned_with(other.georef)
            and np.array_equal(self.values, other.values)
        )


@dataclass
class Zone:
    rings: list[np.ndarray]
    attributes: dict[str, float]

    def __post_init__(self):
        rings = []
        for ring in self.rings:
            arr = np.asarray(ring, dtype=float)
            if arr.ndim != 2 or arr.shape[1] != 2 or len(arr) < 4:
                raise DataError("polygon rings need at least 3 distinct vertices plus the closing vertex")
            if not np.array_equal(arr[0], arr[-1]):
                raise DataError("polygon ring is not closed (first vertex != last vertex)")
            rings.append(arr)
        self.rings = rings


@dataclass
class ZoneSet:
    zones: list[Zone]

    def __post_init__(self):
        if self.zones:
            keys = set(self.zones[0].attributes)
            for z in self.zones[1:]:
                if set(z.attributes) != keys:
                    raise DataError("zone attributes must share an identical key set")

    @property
    def attribute_names(self) -> list[str]:
        return list(self.zones[0].attributes) if self.zones else []


@dataclass
class Stack:
    georef: GridGeoref
    layers: list[Grid] = field(default_factory=list)

    def __post_init__(self):
        names = [g.name for g in self.layers]
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise DuplicateLayerName(f"duplicate layer names in stack: {dupes}")
        for g in self.layers:
            if not g.georef.aligned_with(self.georef):
                raise MisalignedGrids(f"layer {g.name!r} is not aligned with the stack georef")

    @property
    def names(self) -> list[str]:
        return [g.name for g in self.layers]

    def __getitem__(self, name: str) -> Grid:
        for g in self.layers:
            if g.name == name:
                return g
        raise KeyError(name)

    def valid_mask(self) -> np.ndarray:
        mask = np.ones(self.georef.shape, dtype=bool)
        for g in self.layers:
            mask &= g.valid
        return mask


def _nearest_index(coord: np.ndarray, origin: float, cell: float, n: int):
    c = (coord - origin) / cell - 0.5
    # nearest integer to c, ties resolved to the lower index
    idx = np.ceil(c - 0.5).astype(np.int64)
    u = c + 0.5
    inside = (u >= 0) & (u <= n)
    return np.clip(idx, 0, n - 1), inside


def resample_nearest(src: Grid, target: GridGeoref) -> Grid:
    """Nearest-neighbour resampling of ``src`` onto ``target``.

    Target cells whose centre lies outside the source extent become nodata.
    Source nodata is translated to the target sentinel.
    """
    if src.georef.aligned_with(target):
        return Grid(target, src.name, src.values.copy())
    s = src.georef
    xs = target.x_origin + (np.arange(target.ncols) + 0.5) * target.cell_size
    ys = target.y_origin + (np.arange(target.nrows) + 0.5) * target.cell_size
    col, col_in = _nearest_index(xs, s.x_origin, s.cell_size, s.ncols)
    row, row_in = _nearest_index(ys, s.y_origin, s.cell_size, s.nrows)
    picked = src.values[np.ix_(row, col)]
    valid = (picked != s.nodata) & np.outer(row_in, col_in)
    return Grid.from_masked(target, src.name, picked, valid)


def _edge_arrays(rings: Sequence[np.ndarray]):
    x1 = np.concatenate([r[:-1, 0] for r in rings])
    y1 = np.concatenate([r[:-1, 1] for r in rings])
    x2 = np.concatenate([r[1:, 0] for r in rings])
    y2 = np.concatenate([r[1:, 1] for r in rings])
    return x1, y1, x2, y2


def points_in_zone(zone: Zone, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """Even-odd ray casting over all rings; points on an edge count as inside."""
    inside = np.zeros(px.shape, dtype=bool)
    on_edge = np.zeros(px.shape, dtype=bool)
    for x1, y1, x2, y2 in zip(*_edge_arrays(zone.rings)):
        crosses = (y1 > py) != (y2 > py)
        if crosses.any():
            with np.errstate(divide="ignore", invalid="ignore"):
                xint = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
            inside ^= crosses & (px < xint)
        length = math.hypot(x2 - x1, y2 - y1)
        cross = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)
        tol = 1e-9 * max(length, 1.0)
        on_edge |= (
            (np.abs(cross) <= tol)
            & (px >= min(x1, x2) - tol)
            & (px <= max(x1, x2) + tol)
            & (py >= min(y1, y2) - tol)
            & (py <= max(y1, y2) + tol)
        )
    return inside | on_edge


def zone_index_grid(zones: ZoneSet, target: GridGeoref, subsamples_per_axis: int = 4) -> np.ndarray:
    """Index of the zone covering the largest share of each cell (-1 where none).

    Coverage is estimated on a regular ``k x k`` subgrid of points per cell.
    A point is attributed to the first zone (list order) that contains it;
    coverage ties resolve to the earlier zone.
    """
    k = int(subsamples_per_axis)
    if k < 1:
        raise DataError(f"subsamples_per_axis must be >= 1, got {subsamples_per_axis}")
    offs = (np.arange(k) + 0.5) / k
    sub_x = target.x_origin + (np.arange(target.ncols)[:, None] + offs[None, :]).ravel() * target.cell_size
    sub_y = target.y_origin + (np.arange(target.nrows)[:, None] + offs[None, :]).ravel() * target.cell_size
    px, py = np.meshgrid(sub_x, sub_y)  # (nrows*k, ncols*k)

    owner = np.full(px.shape, -1, dtype=np.int64)
    for zi, zone in enumerate(zones.zones):
        allv = np.concatenate(zone.rings)
        xmin, ymin = allv.min(axis=0)
        xmax, ymax = allv.max(axis=0)
        cols = np.nonzero((sub_x >= xmin - 1e-9) & (sub_x <= xmax + 1e-9))[0]
        rows = np.nonzero((sub_y >= ymin - 1e-9) & (sub_y <= ymax + 1e-9))[0]
        if cols.size == 0 or rows.size == 0:
            continue
        r0, r1, c0, c1 = rows[0], rows[-1] + 1, cols[0], cols[-1] + 1
        win_owner = owner[r0:r1, c0:c1]
        free = win_owner < 0
        if not free.any():
            continue
        hit = points_in_zone(zone, px[r0:r1, c0:c1], py[r0:r1, c0:c1])
        win_owner[free & hit] = zi

    nz = len(zones.zones)
    if nz == 0:
        return np.full(target.shape, -1, dtype=np.int64)
    flat = owner.reshape(target.nrows, k, target.ncols, k).transpose(0, 2, 1, 3).reshape(-1, k * k)
    ncell = flat.shape[0]
    # column 0 of the count table is "no zone"
    keys = np.repeat(np.arange(ncell), k * k) * (nz + 1) + (flat.ravel() + 1)
    counts = np.bincount(keys, minlength=ncell * (nz + 1)).reshape(ncell, nz + 1)[:, 1:]
    best = np.argmax(counts, axis=1)
    covered = counts.sum(axis=1) > 0
    return np.where(covered, best, -1).reshape(target.shape)


def rasterize_zones(
    zones: ZoneSet,
    attribute: str,
    target: GridGeoref,
    subsamples_per_axis: int = 4,
    *,
    index: np.ndarray | None = None,
) -> Grid:
    """Burn one zone attribute into a grid by the maximum-area rule.

    ``index`` may carry a precomputed :func:`zone_index_grid` result so
    several attributes can share one point-in-polygon pass.
    """
    if not zones.zones or attribute not in zones.zones[0].attributes:
        raise UnknownAttribute(f"zone attribute {attribute!r} not present")
    if index is None:
        index = zone_index_grid(zones, target, subsamples_per_axis)
    lut = np.array([float(z.attributes[attribute]) for z in zones.zones])
    values = np.where(index >= 0, lut[np.clip(index, 0, None)], target.nodata)
    return Grid(target, attribute, values)


def align_stack(grids: Sequence[Grid], target: GridGeoref) -> Stack:
    if not grids:
        raise EmptyInput("align_stack needs at least one grid")
    names = [g.name for g in grids]
    if len(set(names)) != len(names):
        dupes = sorted({n for n in names if names.count(n) > 1})
        raise DuplicateLayerName(f"duplicate layer names: {dupes}")
    layers = [g if g.georef.aligned_with(target) else resample_nearest(g, target) for g in grids]
    return Stack(target, layers)


def temporal_mean(grids: Sequence[Grid], name: str | None = None) -> Grid:
    """Per-cell mean over the grids where the cell is not nodata.

    Uses a running mean so that averaging identical grids reproduces them
    exactly.
    """
    if not grids:
        raise EmptyInput("temporal_mean needs at least one grid")
    ref = grids[0].georef
    for g in grids[1:]:
        if not g.georef.aligned_with(ref):
            raise MisalignedGrids(f"grid {g.name!r} is not aligned with {grids[0].name!r}")
    mean = np.zeros(ref.shape)
    count = np.zeros(ref.shape, dtype=np.int64)
    for g in grids:
        ok = g.valid
        count[ok] += 1
        mean[ok] += (g.values[ok] - mean[ok]) / count[ok]
    return Grid.from_masked(ref, name or grids[0].name, mean, count > 0)
