"""Deterministic synthetic-city scenario generator.

A scenario is a convex city outline split into Voronoi districts, a set of
smooth latent fields (vegetation potential, urban intensity, weather), and
everything derived from them: band rasters, day/night LST composites,
district attributes, station time series, labelled sample points and the
ground truth those were drawn from.

Layout of an emitted bundle::

    config.json            pipeline configuration (paths relative to bundle)
    manifest.json          layer sources and their roles
    districts.geojson      zones with 25 numeric attributes
    samples.csv            labelled points (x, y, label)
    bands/*.asc            blue/red/nir/swir1 reflectance per scene
    lst/*.asc              day and night LST composites
    rasters/*.asc          T2 and WS on a coarse grid
    stations/*.csv         PM25 time series and T2 check stations
    ground_truth/          vegetation mask, criticality, variogram, ...

Class 0 marks vegetated cells and class 1 non-vegetated cells.
"""

from __future__ import annotations

import datetime as _dt
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import io
from .dataset import LabeledPoint
from .errors import ConfigError
from .geostat import Observation, SphericalVariogram, covariance
from .raster import Grid, GridGeoref, Zone, ZoneSet, zone_index_grid

ZONE_ATTRIBUTES = (
    "ECP", "FEP", "MP", "GA", "GBA", "GC", "ER", "PN", "SR", "SP", "TER", "MER", "FER",
    "NDR", "GDR", "LKC", "LKM", "L5KC", "L5KM", "L10KC", "L10KM", "L100KC", "L100KM",
    "M100KC", "M100KM",
)  # fmt: skip
SPECTRAL_LAYERS = ("NDVI", "EVI", "SAVI", "NDMI", "NDBI")
LST_LAYERS = ("DLST", "NLST", "DIFFLST")
BANDS = ("blue", "red", "nir", "swir1")

# (copy, source) pairs; the first two follow from the band algebra and are
# always present, the rest are planted in this order up to ``n_redundant``.
STRUCTURAL_PAIRS = (("SAVI", "NDVI"), ("NDBI", "NDMI"))
OPTIONAL_PAIRS = (
    ("NDMI", "NDVI"),
    ("EVI", "NDVI"),
    ("MP", "PN"),
    ("FEP", "PN"),
    ("NDR", "GDR"),
    ("TER", "MER"),
    ("LKC", "LKM"),
    ("M100KM", "M100KC"),
    ("L10KC", "L10KM"),
    ("L5KC", "L5KM"),
)

# location and scale of each attribute's district-level distribution
_ATTR_SCALE = {
    "ECP": (40.0, 12.0), "FEP": (55.0, 15.0), "MP": (60.0, 14.0), "GA": (12.0, 4.0),
    "GBA": (35.0, 9.0), "GC": (18.0, 5.0), "ER": (70.0, 10.0), "PN": (250.0, 80.0),
    "SR": (8.0, 2.5), "SP": (22.0, 6.0), "TER": (14.0, 3.0), "MER": (30.0, 8.0),
    "FER": (25.0, 7.0), "NDR": (5.0, 1.5), "GDR": (9.0, 2.5), "LKC": (6.0, 2.0),
    "LKM": (40.0, 12.0), "L5KC": (3.0, 1.0), "L5KM": (20.0, 6.0), "L10KC": (2.0, 0.8),
    "L10KM": (15.0, 5.0), "L100KC": (1.0, 0.4), "L100KM": (8.0, 3.0), "M100KC": (0.6, 0.25),
    "M100KM": (5.0, 2.0),
}  # fmt: skip


@dataclass(frozen=True)
class ScenarioSpec:
    """Knobs of a synthetic scenario.

    ``n_redundant`` counts the layers that are near-copies of another layer
    (``|r| > 0.9``); it ranges from 2 (the band-algebra pairs that always
    exist) to 12.
    """

    seed: int = 42
    ncols: int = 200
    nrows: int = 200
    cell_size: float = 100.0
    x_origin: float = 530000.0
    y_origin: float = 3940000.0
    n_districts: int = 22
    n_stations: int = 24
    n_days: int = 30
    n_samples: int = 4832
    class_ratio: tuple[int, int] = (2788, 2044)
    vegetation_fraction: float = 0.35
    vegetation_scale: float = 2500.0
    n_redundant: int = 12
    label_noise: float = 0.01
    band_cell_size: float = 50.0
    n_band_scenes: int = 2
    coarse_cell_size: float = 1000.0
    n_lst_scenes: int = 4
    n_met_stations: int = 12
    n_checkpoints: int = 40
    start_date: str = "2022-06-01"

    def __post_init__(self):
        object.__setattr__(self, "class_ratio", tuple(int(c) for c in self.class_ratio))
        counts = dict(
            ncols=self.ncols, nrows=self.nrows, n_districts=self.n_districts,
            n_stations=self.n_stations, n_days=self.n_days, n_samples=self.n_samples,
            n_band_scenes=self.n_band_scenes, n_lst_scenes=self.n_lst_scenes,
            n_met_stations=self.n_met_stations, n_checkpoints=self.n_checkpoints,
        )  # fmt: skip
        for key, v in counts.items():
            if int(v) != v or v < 1:
                raise ConfigError(f"{key} must be a positive integer, got {v!r}")
        if len(self.class_ratio) != 2 or min(self.class_ratio) < 1:
            raise ConfigError(f"class_ratio needs two positive counts, got {self.class_ratio}")
        if sum(self.class_ratio) != self.n_samples:
            raise ConfigError(f"class_ratio {self.class_ratio} does not sum to n_samples={self.n_samples}")
        if not 2 <= self.n_redundant <= 2 + len(OPTIONAL_PAIRS):
            raise ConfigError(f"n_redundant must lie in [2, {2 + len(OPTIONAL_PAIRS)}], got {self.n_redundant}")
        if not 0 <= self.label_noise <= 0.5:
            raise ConfigError(f"label_noise must lie in [0, 0.5], got {self.label_noise}")
        if not 0.05 <= self.vegetation_fraction <= 0.95:
            raise ConfigError("vegetation_fraction must lie in [0.05, 0.95]")
        for key in ("cell_size", "band_cell_size", "coarse_cell_size", "vegetation_scale"):
            if not getattr(self, key) > 0:
                raise ConfigError(f"{key} must be positive")
        try:
            _dt.date.fromisoformat(self.start_date)
        except ValueError:
            raise ConfigError(f"start_date must be an ISO date, got {self.start_date!r}") from None

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown scenario fields: {unknown}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad scenario: {exc}") from None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["class_ratio"] = list(self.class_ratio)
        return d

    @property
    def georef(self) -> GridGeoref:
        return GridGeoref(self.ncols, self.nrows, self.x_origin, self.y_origin, self.cell_size)

    def planted_pairs(self) -> list[tuple[str, str]]:
        return list(STRUCTURAL_PAIRS) + list(OPTIONAL_PAIRS[: self.n_redundant - 2])


@dataclass
class GroundTruth:
    vegetation: Grid
    criticality: Grid
    variogram: SphericalVariogram


@dataclass
class Scenario:
    spec: ScenarioSpec
    zones: ZoneSet
    city: np.ndarray
    band_scenes: list[dict[str, Grid]]
    day_lst: list[Grid]
    night_lst: list[Grid]
    rasters: dict[str, Grid]
    pm25: list[Observation]
    pm25_checkpoints: list[Observation]
    t2_stations: list[Observation]
    samples: list[LabeledPoint]
    truth: GroundTruth


# -- smooth fields --------------------------------------------------------------


class ValueNoise:
    """Sum of bilinear-interpolated lattice noise octaves over a bounded extent."""

    def __init__(self, rng: np.random.Generator, extent, scale: float, octaves: int = 2):
        x0, y0, x1, y1 = extent
        self.levels = []
        for k in range(octaves):
            step = scale / 2**k
            nx = int(np.ceil((x1 - x0) / step)) + 3
            ny = int(np.ceil((y1 - y0) / step)) + 3
            origin = (x0 - step, y0 - step)
            self.levels.append((origin, step, 0.5**k, rng.standard_normal((ny, nx))))
        self.mean, self.sd = 0.0, 1.0

    def raw(self, x, y) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        out = np.zeros(np.broadcast(x, y).shape)
        for (ox, oy), step, amp, lat in self.levels:
            u = (x - ox) / step
            v = (y - oy) / step
            i = np.clip(np.floor(u).astype(np.int64), 0, lat.shape[1] - 2)
            j = np.clip(np.floor(v).astype(np.int64), 0, lat.shape[0] - 2)
            fu = u - i
            fv = v - j
            # smoothstep weights hide the lattice
            fu = fu * fu * (3 - 2 * fu)
            fv = fv * fv * (3 - 2 * fv)
            top = lat[j + 1, i] * (1 - fu) + lat[j + 1, i + 1] * fu
            bot = lat[j, i] * (1 - fu) + lat[j, i + 1] * fu
            out += amp * (bot * (1 - fv) + top * fv)
        return out

    def standardize(self, x, y) -> "ValueNoise":
        ref = self.raw(x, y)
        self.mean, self.sd = float(ref.mean()), float(ref.std()) or 1.0
        return self

    def __call__(self, x, y) -> np.ndarray:
        return (self.raw(x, y) - self.mean) / self.sd


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


# -- geometry ---------------------------------------------------------------------


def city_outline(georef: GridGeoref) -> np.ndarray:
    """Closed, slightly flattened octagon centred in the grid."""
    cx = (georef.x_origin + georef.x_max) / 2
    cy = (georef.y_origin + georef.y_max) / 2
    rx = 0.47 * (georef.x_max - georef.x_origin)
    ry = 0.43 * (georef.y_max - georef.y_origin)
    ang = np.deg2rad(22.5 + 45.0 * np.arange(8))
    ring = np.column_stack([cx + rx * np.cos(ang), cy + ry * np.sin(ang)])
    return np.vstack([ring, ring[:1]])


def _inside_convex(ring: np.ndarray, x, y) -> np.ndarray:
    ok = np.ones(np.broadcast(x, y).shape, dtype=bool)
    for (ax, ay), (bx, by) in zip(ring[:-1], ring[1:]):
        ok &= (bx - ax) * (y - ay) - (by - ay) * (x - ax) >= 0
    return ok


def _clip_halfplane(poly: np.ndarray, normal: np.ndarray, offset: float) -> np.ndarray:
    """Keep the part of an open convex polygon with ``normal . p <= offset``."""
    out = []
    n = len(poly)
    for k in range(n):
        p, q = poly[k], poly[(k + 1) % n]
        dp, dq = normal @ p - offset, normal @ q - offset
        if dp <= 0:
            out.append(p)
        if (dp < 0 < dq) or (dq < 0 < dp):
            t = dp / (dp - dq)
            out.append(p + t * (q - p))
    return np.array(out)


def voronoi_cells(outline: np.ndarray, seeds: np.ndarray) -> list[np.ndarray]:
    """Voronoi partition of a convex outline, one closed ring per seed."""
    cells = []
    base = outline[:-1]
    for i, s in enumerate(seeds):
        poly = base
        for j, t in enumerate(seeds):
            if i == j:
                continue
            normal = t - s
            poly = _clip_halfplane(poly, normal, float(normal @ ((s + t) / 2)))
            if len(poly) < 3:
                break
        cells.append(np.vstack([poly, poly[:1]]))
    return cells


def _district_seeds(rng, outline, n: int, georef: GridGeoref) -> np.ndarray:
    span = min(georef.x_max - georef.x_origin, georef.y_max - georef.y_origin)
    min_gap = 0.6 * span / np.sqrt(n)
    seeds: list[np.ndarray] = []
    tries = 0
    while len(seeds) < n:
        tries += 1
        if tries % 2000 == 0:
            min_gap *= 0.8
        p = np.array(
            [rng.uniform(georef.x_origin, georef.x_max), rng.uniform(georef.y_origin, georef.y_max)]
        )
        if not _inside_convex(outline, p[0], p[1]):
            continue
        if all(np.hypot(*(p - s)) >= min_gap for s in seeds):
            seeds.append(p)
    return np.array(seeds)


def _points_in_city(rng, outline, georef, n: int, min_gap: float) -> np.ndarray:
    pts: list[np.ndarray] = []
    tries = 0
    while len(pts) < n:
        tries += 1
        if tries % 2000 == 0:
            min_gap *= 0.8
        p = np.array(
            [rng.uniform(georef.x_origin, georef.x_max), rng.uniform(georef.y_origin, georef.y_max)]
        )
        if _inside_convex(outline, p[0], p[1]) and all(np.hypot(*(p - q)) >= min_gap for q in pts):
            pts.append(p)
    return np.array(pts)


# -- generation -------------------------------------------------------------------------


def _sub_rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, 0x5E7, stream])


def _coarse_georef(spec: ScenarioSpec) -> GridGeoref:
    g = spec.georef
    return GridGeoref(
        int(np.ceil((g.x_max - g.x_origin) / spec.coarse_cell_size)),
        int(np.ceil((g.y_max - g.y_origin) / spec.coarse_cell_size)),
        g.x_origin,
        g.y_origin,
        spec.coarse_cell_size,
    )


def _band_georef(spec: ScenarioSpec) -> GridGeoref:
    g = spec.georef
    return GridGeoref(
        int(np.ceil((g.x_max - g.x_origin) / spec.band_cell_size)),
        int(np.ceil((g.y_max - g.y_origin) / spec.band_cell_size)),
        g.x_origin,
        g.y_origin,
        spec.band_cell_size,
    )


def _coarse_mean(fine: np.ndarray, fine_geo: GridGeoref, coarse_geo: GridGeoref) -> np.ndarray:
    """Average fine cells into coarse cells by center membership."""
    xc, yc = fine_geo.cell_centers()
    row, col, _ = coarse_geo.cell_of(xc, yc)
    flat = (row * coarse_geo.ncols + col).ravel()
    n = coarse_geo.ncols * coarse_geo.nrows
    s = np.bincount(flat, weights=fine.ravel(), minlength=n)
    c = np.bincount(flat, minlength=n)
    out = np.where(c > 0, s / np.maximum(c, 1), 0.0)
    return out.reshape(coarse_geo.shape)


def _attributes(spec: ScenarioSpec, rng, veg_frac: np.ndarray, urban: np.ndarray) -> list[dict[str, float]]:
    n = spec.n_districts
    z = {name: rng.standard_normal(n) for name in ZONE_ATTRIBUTES}

    def standard(a):
        sd = a.std()
        return (a - a.mean()) / sd if sd > 0 else a * 0.0

    # a few attributes carry real signal
    z["GA"] = 0.8 * standard(veg_frac) + 0.6 * z["GA"]
    z["PN"] = 0.7 * standard(urban) + 0.7 * z["PN"]
    for copy, src in spec.planted_pairs():
        if copy in z:
            z[copy] = z[src] + 0.12 * rng.standard_normal(n)
    out = []
    for d in range(n):
        attrs = {}
        for name in ZONE_ATTRIBUTES:
            loc, scale = _ATTR_SCALE[name]
            attrs[name] = round(float(max(loc + scale * z[name][d], 0.01 * loc)), 4)
        out.append(attrs)
    return out


def _station_values(rng, xy: np.ndarray, variogram: SphericalVariogram, n_fields: int) -> np.ndarray:
    d = np.hypot(xy[:, None, 0] - xy[None, :, 0], xy[:, None, 1] - xy[None, :, 1])
    C = covariance(variogram, d)
    L = np.linalg.cholesky(C + 1e-9 * np.eye(len(xy)))
    return (L @ rng.standard_normal((len(xy), n_fields))).T


def _on_grid(geo: GridGeoref, mask: np.ndarray, x, y) -> np.ndarray:
    row, col, inside = geo.cell_of(x, y)
    return inside & mask[row, col]


def _outside_drift(v, x, y, geo, index, attrs, cgeo, coarse_fields) -> np.ndarray:
    """Standardized sum of the non-spectral layers, each signed to agree with ``v``.

    Adding a little of this to the spectral companions of NDVI lifts their
    correlation with every other layer, so correlation pruning keeps NDVI
    and drops the companions.
    """
    row, col, _ = geo.cell_of(x, y)
    zone = index[row, col]
    city = zone >= 0
    cols = []
    lut = np.array([[a[name] for name in ZONE_ATTRIBUTES] for a in attrs])
    for k in range(lut.shape[1]):
        cols.append(np.where(city, lut[np.clip(zone, 0, None), k], 0.0))
    crow, ccol, _ = cgeo.cell_of(x, y)
    for f in coarse_fields:
        cols.append(f[crow, ccol])
    out = np.zeros(v.shape)
    for col_vals in cols:
        vals = col_vals[city]
        sd = vals.std()
        if sd == 0:
            continue
        z = (col_vals - vals.mean()) / sd
        r = np.corrcoef(v[city], vals)[0, 1]
        out += np.sign(r) * z if r != 0 else z
    vals = out[city]
    return np.where(city, (out - vals.mean()) / (vals.std() or 1.0), 0.0)


def build_scenario(spec: ScenarioSpec) -> Scenario:
    """Generate a scenario in memory (see :func:`generate_scenario` to write it)."""
    geo = spec.georef
    extent = (geo.x_origin, geo.y_origin, geo.x_max, geo.y_max)
    xc, yc = geo.cell_centers()
    outline = city_outline(geo)

    # districts
    seeds = _district_seeds(_sub_rng(spec.seed, 1), outline, spec.n_districts, geo)
    rings = voronoi_cells(outline, seeds)

    # latent fields, standardized on the target grid
    frng = _sub_rng(spec.seed, 2)
    veg = ValueNoise(frng, extent, spec.vegetation_scale, octaves=3).standardize(xc, yc)
    urban = ValueNoise(frng, extent, 5000.0).standardize(xc, yc)
    urban2 = ValueNoise(frng, extent, 3000.0).standardize(xc, yc)
    temp = ValueNoise(frng, extent, 6000.0).standardize(xc, yc)
    wind = ValueNoise(frng, extent, 7000.0).standardize(xc, yc)
    fine = ValueNoise(frng, extent, 400.0, octaves=1).standardize(xc, yc)

    placeholder = ZoneSet([Zone([r], {"id": float(i)}) for i, r in enumerate(rings)])
    index = zone_index_grid(placeholder, geo)
    city = index >= 0

    s = veg(xc, yc)
    q = float(np.quantile(s[city], 1.0 - spec.vegetation_fraction))
    vegetated = s > q

    def veg_signal(x, y):
        return _sigmoid(2.5 * (veg(x, y) - q))

    u = urban(xc, yc)
    district_veg = np.array([vegetated[index == d].mean() if (index == d).any() else 0.0 for d in range(len(rings))])
    district_urban = np.array([u[index == d].mean() if (index == d).any() else 0.0 for d in range(len(rings))])
    attrs = _attributes(spec, _sub_rng(spec.seed, 3), district_veg, district_urban)
    zones = ZoneSet([Zone([r], a) for r, a in zip(rings, attrs)])

    # coarse layers: LST composites, T2, WS
    cgeo = _coarse_georef(spec)
    cx, cy = cgeo.cell_centers()
    nonveg = _coarse_mean(1.0 - veg_signal(xc, yc), geo, cgeo)
    u_c = _coarse_mean(u, geo, cgeo)
    u2_c = _coarse_mean(urban2(xc, yc), geo, cgeo)
    lrng = _sub_rng(spec.seed, 5)
    night_base = 20.0 + 3.5 * nonveg + 0.9 * u_c
    day_base = 36.0 + 3.0 * nonveg + 2.0 * u2_c
    night_lst, day_lst = [], []
    for k in range(spec.n_lst_scenes):
        night_lst.append(Grid(cgeo, f"NLST_{k + 1}", np.round(night_base + 0.35 * lrng.standard_normal(cgeo.shape), 3)))
        day_lst.append(Grid(cgeo, f"DLST_{k + 1}", np.round(day_base + 0.8 * lrng.standard_normal(cgeo.shape), 3)))
    t2_c = 30.0 + 0.8 * nonveg + 1.2 * temp(cx, cy)
    ws_c = 3.5 + 0.8 * wind(cx, cy)
    rasters = {
        "T2": Grid(cgeo, "T2", np.round(t2_c, 3)),
        "WS": Grid(cgeo, "WS", np.round(np.maximum(ws_c, 0.1), 3)),
    }

    # band scenes at the band resolution
    bgeo = _band_georef(spec)
    bx, by = bgeo.cell_centers()
    sig_b = veg_signal(bx, by)
    brng = _sub_rng(spec.seed, 4)
    m_free = ValueNoise(brng, extent, 3500.0).standardize(xc, yc)
    e_free = ValueNoise(brng, extent, 4500.0).standardize(xc, yc)
    v_base = 0.15 + 0.55 * sig_b
    drift = 0.4 * float(v_base[_on_grid(geo, city, bx, by)].std()) * _outside_drift(
        v_base, bx, by, geo, index, attrs, cgeo, [night_base, day_base, t2_c, ws_c]
    )
    planted = {c for c, _ in spec.planted_pairs()}
    band_scenes = []
    for _ in range(spec.n_band_scenes):
        v = np.clip(v_base + 0.035 * brng.standard_normal(bgeo.shape), 0.05, 0.95)
        # SAVI = 1.5 v B / (B + 0.5) for brightness B = nir + red; choosing
        # B pins SAVI to 0.7 (v + drift)
        psi = np.clip(0.7 * (v + drift) / v, 0.3, 1.2)
        bright = 0.5 * psi / (1.5 - psi) * (1 + 0.005 * brng.standard_normal(bgeo.shape))
        nir = bright * (1 + v) / 2
        red = bright * (1 - v) / 2
        if "NDMI" in planted:
            m = 0.9 * (v + drift) - 0.25 + 0.01 * brng.standard_normal(bgeo.shape)
        else:
            m = 0.1 * m_free(bx, by) + 0.01 * brng.standard_normal(bgeo.shape)
        m = np.clip(m, -0.9, 0.9)
        swir1 = nir * (1 - m) / (1 + m)
        if "EVI" in planted:
            t = 1.4 * (v + drift) + 0.01 * brng.standard_normal(bgeo.shape)
        else:
            t = 0.35 + 0.08 * e_free(bx, by) + 0.01 * brng.standard_normal(bgeo.shape)
        t = np.maximum(t, 0.05)
        blue = np.clip((nir + 6 * red + 1 - 2.5 * (nir - red) / t) / 7.5, 0.005, None)
        band_scenes.append(
            {name: Grid(bgeo, name, np.round(arr, 5)) for name, arr in zip(BANDS, (blue, red, nir, swir1))}
        )

    # T2 check stations sample the fine-scale field the coarse raster smooths
    srng = _sub_rng(spec.seed, 6)
    met_xy = _points_in_city(srng, outline, geo, spec.n_met_stations, 1500.0)
    mx, my = met_xy[:, 0], met_xy[:, 1]
    fine_nonveg = 1.0 - veg_signal(mx, my)
    t2_true = 30.0 + 0.8 * fine_nonveg + 1.2 * temp(mx, my) + 0.3 * fine(mx, my)
    obs_date = _dt.date.fromisoformat(spec.start_date)
    t2_stations = [
        Observation(f"M{i + 1:02d}", float(x), float(y), obs_date, round(float(v), 3))
        for i, (x, y, v) in enumerate(zip(mx, my, t2_true))
    ]

    # PM25 stations and hidden checkpoints share one Gaussian field per day
    prng = _sub_rng(spec.seed, 7)
    variogram = SphericalVariogram(nugget=1.0, sill=30.0, range=6000.0)
    st_xy = _points_in_city(prng, outline, geo, spec.n_stations, 1000.0)
    cp_xy = _points_in_city(prng, outline, geo, spec.n_checkpoints, 500.0)
    all_xy = np.vstack([st_xy, cp_xy])
    persistent = _station_values(prng, all_xy, variogram, 1)[0]
    daily = _station_values(prng, all_xy, variogram, spec.n_days)
    pm25, checkpoints = [], []
    n_low = min(3, spec.n_days)
    low_days = set(prng.choice(spec.n_days, size=n_low, replace=False).tolist())
    boundary_day = next((d for d in range(spec.n_days) if d not in low_days), None)
    for d in range(spec.n_days):
        date = obs_date + _dt.timedelta(days=d)
        level = 35.0 + 8.0 * prng.standard_normal()
        field = level + 0.6 * persistent + 0.8 * daily[d]
        if d in low_days:
            k = int(prng.integers(5, 10))
        elif d == boundary_day:
            k = 10
        else:
            k = int(prng.integers(14, spec.n_stations + 1)) if spec.n_stations >= 14 else spec.n_stations
        k = min(k, spec.n_stations)
        present = np.sort(prng.choice(spec.n_stations, size=k, replace=False))
        for i in present:
            pm25.append(
                Observation(
                    f"S{i + 1:02d}", float(st_xy[i, 0]), float(st_xy[i, 1]), date, round(float(field[i]), 3)
                )
            )
        for j in range(spec.n_checkpoints):
            i = spec.n_stations + j
            checkpoints.append(
                Observation(
                    f"C{j + 1:02d}", float(all_xy[i, 0]), float(all_xy[i, 1]), date, round(float(field[i]), 3)
                )
            )

    # labelled samples, stratified by the true mask with swapped-in label noise
    nrng = _sub_rng(spec.seed, 8)
    n0, n1 = spec.class_ratio
    flips = int(np.floor(spec.label_noise * spec.n_samples / 2))
    flips = min(flips, n0, n1)
    veg_cells = np.flatnonzero((vegetated & city).ravel())
    bare_cells = np.flatnonzero((~vegetated & city).ravel())
    if len(veg_cells) < n0 or len(bare_cells) < n1:
        raise ConfigError("scenario grid too small for the requested sample counts")
    pick_veg = nrng.choice(veg_cells, size=n0, replace=False)
    pick_bare = nrng.choice(bare_cells, size=n1, replace=False)
    # swap ``flips`` cells between the classes to plant label noise
    cells = np.concatenate([pick_veg[: n0 - flips], pick_bare[:flips], pick_bare[flips:], pick_veg[n0 - flips :]])
    labels = np.repeat([0, 1], [n0, n1])
    order = nrng.permutation(len(cells))
    cells, labels = cells[order], labels[order]
    rows, cols = np.divmod(cells, geo.ncols)
    off = nrng.uniform(0.05, 0.95, size=(len(cells), 2))
    px = geo.x_origin + (cols + off[:, 0]) * geo.cell_size
    py = geo.y_origin + (rows + off[:, 1]) * geo.cell_size
    samples = [LabeledPoint(round(float(x), 2), round(float(y), 2), int(c)) for x, y, c in zip(px, py, labels)]

    # ground truth
    veg_grid = Grid.from_masked(geo, "vegetation", np.where(vegetated, 0.0, 1.0), city)
    night_fine = 3.5 * (1.0 - veg_signal(xc, yc)) + 0.9 * u
    sp = np.array([a["SP"] for a in attrs])[np.clip(index, 0, None)]

    def z(a):
        vals = a[city]
        return (a - vals.mean()) / (vals.std() or 1.0)

    score = 0.7 * z(night_fine) + 0.3 * z(sp)
    crit = np.where(vegetated, 0.0, _sigmoid(1.5 * score))
    crit_grid = Grid.from_masked(geo, "criticality", np.round(crit, 6), city)

    return Scenario(
        spec=spec,
        zones=zones,
        city=city,
        band_scenes=band_scenes,
        day_lst=day_lst,
        night_lst=night_lst,
        rasters=rasters,
        pm25=pm25,
        pm25_checkpoints=checkpoints,
        t2_stations=t2_stations,
        samples=samples,
        truth=GroundTruth(veg_grid, crit_grid, variogram),
    )


# -- bundle ------------------------------------------------------------------------------


def scenario_manifest(scn: Scenario) -> dict:
    spec = scn.spec
    sources: list[dict] = [
        {
            "role": "zones",
            "path": "districts.geojson",
            "attributes": list(ZONE_ATTRIBUTES),
            "resampling": "maximum_area",
        },
        {
            "role": "stations",
            "name": "PM25",
            "path": "stations/pm25.csv",
            "resampling": "simple_kriging",
            "min_stations": 10,
        },
        {"role": "raster", "name": "T2", "path": "rasters/t2.asc", "resampling": "nearest"},
        {"role": "raster", "name": "WS", "path": "rasters/ws.asc", "resampling": "nearest"},
        {
            "role": "lst",
            "day": [f"lst/dlst_{k + 1}.asc" for k in range(spec.n_lst_scenes)],
            "night": [f"lst/nlst_{k + 1}.asc" for k in range(spec.n_lst_scenes)],
            "outputs": {"day": "DLST", "night": "NLST", "difference": "DIFFLST"},
            "resampling": "nearest",
        },
        {
            "role": "spectral",
            "scenes": [
                {b: f"bands/scene_{k + 1}_{b}.asc" for b in BANDS} for k in range(spec.n_band_scenes)
            ],
            "indices": list(SPECTRAL_LAYERS),
            "resampling": "nearest",
        },
    ]
    layers = list(ZONE_ATTRIBUTES) + ["PM25", "T2", "WS"] + list(LST_LAYERS) + list(SPECTRAL_LAYERS)
    return {"sources": sources, "layers": layers}


def scenario_config(scn: Scenario) -> dict:
    spec = scn.spec
    return {
        "manifest": "manifest.json",
        "target": spec.georef.to_dict(),
        "samples": "samples.csv",
        "seed": spec.seed,
        "correlation_threshold": 0.9,
        "drop_for_priority": ["NDVI"],
        "model": {"kind": "RF", "params": {}, "tune_budget": 0, "reuse_params": False},
        "split": {"test_fraction": 0.3},
        "kriging": {"n_bins": 10},
        "validation": [{"layer": "T2", "stations": "stations/t2_stations.csv"}],
    }


def write_scenario(scn: Scenario, out_dir) -> Path:
    out = Path(out_dir)
    spec = scn.spec
    io.write_zones(scn.zones, out / "districts.geojson")
    for k, scene in enumerate(scn.band_scenes):
        for b in BANDS:
            io.write_grid(scene[b], out / "bands" / f"scene_{k + 1}_{b}.asc")
    for k, (d, n) in enumerate(zip(scn.day_lst, scn.night_lst)):
        io.write_grid(d, out / "lst" / f"dlst_{k + 1}.asc")
        io.write_grid(n, out / "lst" / f"nlst_{k + 1}.asc")
    io.write_grid(scn.rasters["T2"], out / "rasters" / "t2.asc")
    io.write_grid(scn.rasters["WS"], out / "rasters" / "ws.asc")
    io.write_observations(scn.pm25, out / "stations" / "pm25.csv")
    io.write_observations(scn.t2_stations, out / "stations" / "t2_stations.csv")
    io.write_points(scn.samples, out / "samples.csv")

    gt = out / "ground_truth"
    io.write_grid(scn.truth.vegetation, gt / "vegetation.asc")
    io.write_grid(scn.truth.criticality, gt / "criticality.asc")
    io.write_json(scn.truth.variogram.to_dict(), gt / "variogram.json")
    io.write_observations(scn.pm25_checkpoints, gt / "pm25_checkpoints.csv")
    io.write_json(
        {"planted_pairs": [list(p) for p in spec.planted_pairs()], "n_redundant": spec.n_redundant},
        gt / "planted.json",
    )
    io.write_json(spec.to_dict(), gt / "scenario.json")
    io.write_json(scenario_manifest(scn), out / "manifest.json")
    io.write_json(scenario_config(scn), out / "config.json")
    return out


def generate_scenario(spec: ScenarioSpec, out_dir) -> tuple[Path, GroundTruth]:
    """Build the scenario for ``spec`` and write its bundle under ``out_dir``."""
    scn = build_scenario(spec)
    return write_scenario(scn, out_dir), scn.truth


def load_spec(path) -> ScenarioSpec:
    raw = io.read_json(path)
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: scenario config must be a JSON object")
    return ScenarioSpec.from_dict(raw.get("scenario", raw))

