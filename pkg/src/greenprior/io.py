"""File codecs: ESRI ASCII grids, station/sample CSVs, GeoJSON zones, JSON.

All writers are atomic (temporary file in the target directory, then rename).
Floats are written in shortest round-trip form so every write/read cycle
is lossless.
"""

from __future__ import annotations

import csv
import datetime as _dt
import io as _io
import json
import math
import os
import tempfile
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .dataset import FeatureTable, LabeledPoint
from .errors import DataError, DimensionMismatch, ParseError
from .geostat import Observation, check_unique
from .raster import Grid, GridGeoref, Zone, ZoneSet

_HEADER_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value")


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def fmt_number(v: float) -> str:
    v = float(v)
    if v == int(v) and abs(v) < 1e16:
        return str(int(v))
    return repr(v)


# -- ESRI ASCII grid ----------------------------------------------------------


def grid_to_text(grid: Grid) -> str:
    g = grid.georef
    lines = [
        f"ncols {g.ncols}",
        f"nrows {g.nrows}",
        f"xllcorner {fmt_number(g.x_origin)}",
        f"yllcorner {fmt_number(g.y_origin)}",
        f"cellsize {fmt_number(g.cell_size)}",
        f"NODATA_value {fmt_number(g.nodata)}",
    ]
    # file rows run north to south
    for row in grid.values[::-1]:
        lines.append(" ".join(fmt_number(v) for v in row.tolist()))
    return "\n".join(lines) + "\n"


def write_grid(grid: Grid, path) -> None:
    atomic_write_text(path, grid_to_text(grid))


def parse_grid(text: str, name: str = "grid", path: str | None = None) -> Grid:
    lines = text.splitlines()
    header: dict[str, str] = {}
    i = 0
    while i < len(lines) and len(header) < len(_HEADER_KEYS):
        raw = lines[i].strip()
        i += 1
        if not raw:
            continue
        parts = raw.split()
        key = parts[0].lower()
        if key not in _HEADER_KEYS:
            raise ParseError(f"expected one of {_HEADER_KEYS}, found {parts[0]!r}", line=i, path=path)
        if len(parts) != 2:
            raise ParseError(f"header line needs exactly one value: {raw!r}", line=i, path=path)
        header[key] = parts[1]
    missing = [k for k in _HEADER_KEYS if k not in header]
    if missing:
        raise ParseError(f"truncated header, missing {missing}", line=len(lines) + 1, path=path)
    try:
        georef = GridGeoref(
            ncols=int(header["ncols"]),
            nrows=int(header["nrows"]),
            x_origin=float(header["xllcorner"]),
            y_origin=float(header["yllcorner"]),
            cell_size=float(header["cellsize"]),
            nodata=float(header["nodata_value"]),
        )
    except (ValueError, DataError) as exc:
        raise ParseError(f"bad header value: {exc}", line=i, path=path) from None
    values: list[float] = []
    for lineno in range(i, len(lines)):
        raw = lines[lineno]
        if not raw.strip():
            continue
        try:
            row = [float(tok) for tok in raw.split()]
        except ValueError as exc:
            raise ParseError(f"bad number: {exc}", line=lineno + 1, path=path) from None
        if len(row) != georef.ncols:
            raise ParseError(
                f"expected {georef.ncols} values, found {len(row)}", line=lineno + 1, path=path
            )
        values.extend(row)
    expected = georef.ncols * georef.nrows
    if len(values) != expected:
        if len(values) < expected:
            raise ParseError(
                f"truncated data: {len(values)} of {expected} values", line=len(lines) + 1, path=path
            )
        raise DimensionMismatch(f"{path or name}: {len(values)} values for {expected} cells")
    arr = np.array(values, dtype=np.float64).reshape(georef.nrows, georef.ncols)[::-1]
    if np.isnan(arr).any():
        raise ParseError("NaN values are not allowed; use NODATA_value", path=path)
    return Grid(georef, name, np.ascontiguousarray(arr))


def read_grid(path, name: str | None = None) -> Grid:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise DataError(f"grid file not found: {path}") from None
    return parse_grid(text, name or path.stem, str(path))


# -- CSV ----------------------------------------------------------------------


def _read_csv(path, required: Sequence[str]) -> list[dict[str, str]]:
    path = Path(path)
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            cols = reader.fieldnames or []
            missing = [c for c in required if c not in cols]
            if missing:
                raise ParseError(f"missing columns {missing}", line=1, path=str(path))
            return list(reader)
    except FileNotFoundError:
        raise DataError(f"file not found: {path}") from None


def read_observations(path) -> list[Observation]:
    rows = _read_csv(path, ("station_id", "x", "y", "date", "value"))
    out = []
    for i, r in enumerate(rows, start=2):
        try:
            out.append(
                Observation(
                    station_id=r["station_id"],
                    x=float(r["x"]),
                    y=float(r["y"]),
                    date=_dt.date.fromisoformat(r["date"]),
                    value=float(r["value"]),
                )
            )
        except (ValueError, TypeError, DataError) as exc:
            raise ParseError(str(exc), line=i, path=str(path)) from None
    check_unique(out)
    return out


def observations_to_text(obs: Iterable[Observation]) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["station_id", "x", "y", "date", "value"])
    for o in obs:
        w.writerow([o.station_id, fmt_number(o.x), fmt_number(o.y), o.date.isoformat(), fmt_number(o.value)])
    return buf.getvalue()


def write_observations(obs: Iterable[Observation], path) -> None:
    atomic_write_text(path, observations_to_text(obs))


def read_points(path) -> list[LabeledPoint]:
    rows = _read_csv(path, ("x", "y", "label"))
    out = []
    for i, r in enumerate(rows, start=2):
        try:
            out.append(LabeledPoint(float(r["x"]), float(r["y"]), int(r["label"])))
        except (ValueError, DataError) as exc:
            raise ParseError(str(exc), line=i, path=str(path)) from None
    return out


def write_points(points: Iterable[LabeledPoint], path) -> None:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["x", "y", "label"])
    for p in points:
        w.writerow([fmt_number(p.x), fmt_number(p.y), p.label])
    atomic_write_text(path, buf.getvalue())


def write_table(table: FeatureTable, path) -> None:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = list(table.feature_names) + (["label"] if table.labels is not None else [])
    w.writerow(header)
    for i in range(table.n_rows):
        row = [fmt_number(v) for v in table.X[i]]
        if table.labels is not None:
            row.append(int(table.labels[i]))
        w.writerow(row)
    atomic_write_text(path, buf.getvalue())


def read_table(path) -> FeatureTable:
    path = Path(path)
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except FileNotFoundError:
        raise DataError(f"table file not found: {path}") from None
    if not rows:
        raise ParseError("empty table file", line=1, path=str(path))
    header = rows[0]
    has_label = bool(header) and header[-1] == "label"
    names = header[:-1] if has_label else header
    X, y = [], []
    for i, r in enumerate(rows[1:], start=2):
        if len(r) != len(header):
            raise ParseError(f"expected {len(header)} fields, found {len(r)}", line=i, path=str(path))
        try:
            X.append([float(v) for v in r[: len(names)]])
            if has_label:
                y.append(int(r[-1]))
        except ValueError as exc:
            raise ParseError(str(exc), line=i, path=str(path)) from None
    return FeatureTable(names, np.array(X, dtype=float).reshape(-1, len(names)), np.array(y) if has_label else None)


# -- GeoJSON zones --------------------------------------------------------------


def zones_to_geojson(zones: ZoneSet) -> dict:
    feats = []
    for z in zones.zones:
        feats.append(
            {
                "type": "Feature",
                "properties": {k: float(v) for k, v in z.attributes.items()},
                "geometry": {"type": "Polygon", "coordinates": [r.tolist() for r in z.rings]},
            }
        )
    return {"type": "FeatureCollection", "features": feats}


def write_zones(zones: ZoneSet, path) -> None:
    atomic_write_text(path, dumps_json(zones_to_geojson(zones)))


def read_zones(path) -> ZoneSet:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"zone file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, line=exc.lineno, path=str(path)) from None
    if doc.get("type") != "FeatureCollection":
        raise ParseError("expected a GeoJSON FeatureCollection", path=str(path))
    zones = []
    for k, feat in enumerate(doc.get("features", [])):
        geom = feat.get("geometry") or {}
        if geom.get("type") != "Polygon":
            raise ParseError(f"feature {k}: only Polygon geometries are supported", path=str(path))
        props = feat.get("properties") or {}
        try:
            attrs = {key: float(v) for key, v in props.items()}
        except (TypeError, ValueError):
            raise ParseError(f"feature {k}: properties must be numeric", path=str(path)) from None
        zones.append(Zone([np.asarray(r, dtype=float) for r in geom["coordinates"]], attrs))
    return ZoneSet(zones)


# -- JSON -----------------------------------------------------------------------


def _jsonable(obj: Any):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (_dt.date,)):
        return obj.isoformat()
    return obj


def dumps_json(obj: Any) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_json(obj: Any, path) -> None:
    atomic_write_text(path, dumps_json(obj))


def read_json(path) -> Any:
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, line=exc.lineno, path=str(path)) from None
