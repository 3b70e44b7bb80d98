"""Two-stage prioritization flow.

1. Binary stage: every surviving feature, vegetation (0) vs non-vegetation (1).
2. Probability stage: the same samples without the vegetation-detection
   feature(s), producing P(non-vegetated) per pixel.
3. Fusion: vegetated pixels stay 0, non-vegetated pixels take the stage-2
   probability.

Configuration is a JSON document; see ``docs/config.md``.  Relative paths
resolve against the directory holding the config file.
"""

from __future__ import annotations

import json
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Sequence

import numpy as np

from . import io
from .dataset import (
    FeatureTable,
    drop_features,
    extract_samples,
    prune_correlated,
    select_features,
    stack_to_table,
    stratified_split,
)
from .errors import ConfigError, GreenPriorError, MisalignedGrids
from .geostat import KrigingRun, ValidationReport, krige_daily_mean, validate_points
from .indices import SPECTRAL_INDICES, compute_index, lst_difference, required_bands
from .ml import (
    MODEL_KINDS,
    MetricsReport,
    Model,
    TrialRecord,
    classification_metrics,
    dumps_model,
    feature_importance,
    make_params,
    predict_class,
    predict_proba,
    train_model,
    tune_model,
)
from .ml.tuning import space_from_config
from .raster import Grid, GridGeoref, Stack, align_stack, rasterize_zones, temporal_mean, zone_index_grid
from .render import ColorRamp, render_map

ROLES = ("zones", "stations", "raster", "lst", "spectral")
LOW_STAGE2_OA = 0.55


# -- configuration -------------------------------------------------------------


@dataclass
class ModelConfig:
    kind: str = "RF"
    params: dict[str, Any] = field(default_factory=dict)
    tune_budget: int = 0
    reuse_params: bool = False
    search_space: dict[str, Any] | None = None


@dataclass
class PipelineConfig:
    base_dir: Path
    sources: list[dict[str, Any]]
    target: GridGeoref
    samples: Path | None
    seed: int = 42
    correlation_threshold: float = 0.90
    drop_for_priority: list[str] = field(default_factory=lambda: ["NDVI"])
    model: ModelConfig = field(default_factory=ModelConfig)
    test_fraction: float = 0.3
    kriging: dict[str, Any] = field(default_factory=dict)
    validation: list[dict[str, Any]] = field(default_factory=list)
    ramp: ColorRamp | None = None

    def path(self, rel) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.base_dir / p


def _no_duplicate_keys(pairs):
    keys = [k for k, _ in pairs]
    dupes = sorted({k for k in keys if keys.count(k) > 1})
    if dupes:
        raise ConfigError(f"duplicate keys {dupes}")
    return dict(pairs)


def _read_json_strict(path: Path) -> Any:
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        return json.loads(text, object_pairs_hook=_no_duplicate_keys)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}") from None
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _check_source(src: dict[str, Any], k: int) -> None:
    role = src.get("role")
    if role not in ROLES:
        raise ConfigError(f"source {k}: role must be one of {ROLES}, got {role!r}")
    need = {
        "zones": ("path", "attributes"),
        "stations": ("path", "name"),
        "raster": ("path", "name"),
        "lst": ("day", "night"),
        "spectral": ("scenes", "indices"),
    }[role]
    missing = [key for key in need if key not in src]
    if missing:
        raise ConfigError(f"source {k} ({role}): missing {missing}")
    if role == "spectral":
        unknown = [n for n in src["indices"] if n not in SPECTRAL_INDICES]
        if unknown:
            raise ConfigError(f"source {k}: unknown spectral indices {unknown}")
        bands = required_bands(src["indices"])
        if not src["scenes"]:
            raise ConfigError(f"source {k}: spectral source needs at least one scene")
        for j, scene in enumerate(src["scenes"]):
            absent = sorted(bands - set(scene))
            if absent:
                raise ConfigError(f"source {k} scene {j}: no layer plays band role(s) {absent}")
            if not all(isinstance(scene[b], str) for b in bands):
                raise ConfigError(f"source {k} scene {j}: each band role takes exactly one path")
    if role == "lst":
        if not src["day"] or not src["night"]:
            raise ConfigError(f"source {k}: lst source needs day and night composites")


def config_from_dict(raw: dict[str, Any], base_dir: Path, seed: int | None = None) -> PipelineConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    if "manifest" in raw:
        manifest = _read_json_strict(base_dir / raw["manifest"])
        sources = manifest.get("sources") if isinstance(manifest, dict) else None
    else:
        sources = raw.get("sources")
    if not isinstance(sources, list) or not sources:
        raise ConfigError("config needs a non-empty 'sources' list (inline or via 'manifest')")
    for k, src in enumerate(sources):
        if not isinstance(src, dict):
            raise ConfigError(f"source {k} must be an object")
        _check_source(src, k)
    if "target" not in raw:
        raise ConfigError("config needs a 'target' georef")
    try:
        target = GridGeoref.from_dict(raw["target"])
    except (KeyError, TypeError, ValueError, GreenPriorError) as exc:
        raise ConfigError(f"bad target georef: {exc}") from None

    m = raw.get("model", {})
    if not isinstance(m, dict):
        raise ConfigError("'model' must be an object")
    unknown = sorted(set(m) - {"kind", "params", "tune_budget", "reuse_params", "search_space"})
    if unknown:
        raise ConfigError(f"unknown model keys {unknown}")
    model = ModelConfig(
        kind=m.get("kind", "RF"),
        params=dict(m.get("params", {})),
        tune_budget=int(m.get("tune_budget", 0)),
        reuse_params=bool(m.get("reuse_params", False)),
        search_space=m.get("search_space"),
    )
    if model.kind not in MODEL_KINDS:
        raise ConfigError(f"unknown model kind {model.kind!r}; expected one of {MODEL_KINDS}")
    if model.tune_budget < 0:
        raise ConfigError("tune_budget must be >= 0")
    make_params(model.kind, model.params)  # validates early

    split = raw.get("split", {})
    test_fraction = float(split.get("test_fraction", 0.3))
    if not 0 < test_fraction < 1:
        raise ConfigError(f"split.test_fraction must lie in (0, 1), got {test_fraction}")
    threshold = float(raw.get("correlation_threshold", 0.90))
    if not 0 < threshold <= 1:
        raise ConfigError(f"correlation_threshold must lie in (0, 1], got {threshold}")
    drop = raw.get("drop_for_priority", ["NDVI"])
    if not isinstance(drop, list) or not all(isinstance(n, str) for n in drop):
        raise ConfigError("drop_for_priority must be a list of feature names")
    ramp = ColorRamp.from_config(raw["ramp"]) if "ramp" in raw else None
    return PipelineConfig(
        base_dir=base_dir,
        sources=sources,
        target=target,
        samples=Path(raw["samples"]) if raw.get("samples") else None,
        seed=int(raw.get("seed", 42) if seed is None else seed),
        correlation_threshold=threshold,
        drop_for_priority=list(drop),
        model=model,
        test_fraction=test_fraction,
        kriging=dict(raw.get("kriging", {})),
        validation=list(raw.get("validation", [])),
        ramp=ramp,
    )


def load_config(path, seed: int | None = None) -> PipelineConfig:
    """Read and validate a pipeline config; ``seed`` overrides the file's seed."""
    path = Path(path)
    raw = _read_json_strict(path)
    return config_from_dict(raw, path.resolve().parent, seed)


# -- stage bookkeeping ---------------------------------------------------------------


@contextmanager
def stage(name: str, timings: dict[str, float] | None = None) -> Iterator[None]:
    """Tag package errors with the stage they came from and time the block."""
    t0 = time.perf_counter()
    try:
        yield
    except GreenPriorError as exc:
        if exc.stage is None:
            exc.stage = name
        raise
    finally:
        if timings is not None:
            timings[name] = timings.get(name, 0.0) + time.perf_counter() - t0


# -- layers ---------------------------------------------------------------------------


@dataclass
class Layers:
    stack: Stack
    kriging: dict[str, KrigingRun] = field(default_factory=dict)


def _spectral_grids(cfg: PipelineConfig, src: dict[str, Any]) -> list[Grid]:
    per_index: dict[str, list[Grid]] = {n: [] for n in src["indices"]}
    bands_needed = required_bands(src["indices"])
    for scene in src["scenes"]:
        bands = {b: io.read_grid(cfg.path(scene[b]), b) for b in bands_needed}
        for name in src["indices"]:
            per_index[name].append(compute_index(name, bands))
    return [temporal_mean(g, name=n) for n, g in per_index.items()]


def _lst_grids(cfg: PipelineConfig, src: dict[str, Any]) -> list[Grid]:
    out = {"day": "DLST", "night": "NLST", "difference": "DIFFLST"}
    out.update(src.get("outputs", {}))
    day = temporal_mean([io.read_grid(cfg.path(p)) for p in src["day"]], name=out["day"])
    night = temporal_mean([io.read_grid(cfg.path(p)) for p in src["night"]], name=out["night"])
    if not day.georef.aligned_with(night.georef):
        raise MisalignedGrids("day and night LST composites must share one grid")
    return [day, night, lst_difference(day, night, name=out["difference"])]


def source_grids(cfg: PipelineConfig, roles: Sequence[str] = ROLES, timings=None) -> tuple[list[Grid], dict]:
    """Load (and derive) every layer of the given roles, in manifest order."""
    grids: list[Grid] = []
    kriging: dict[str, KrigingRun] = {}
    for src in cfg.sources:
        role = src["role"]
        if role not in roles:
            continue
        if role == "zones":
            with stage("zones", timings):
                zones = io.read_zones(cfg.path(src["path"]))
                index = zone_index_grid(zones, cfg.target, int(src.get("subsamples_per_axis", 4)))
                grids += [rasterize_zones(zones, a, cfg.target, index=index) for a in src["attributes"]]
        elif role == "stations":
            with stage("krige", timings):
                obs = io.read_observations(cfg.path(src["path"]))
                run = krige_daily_mean(
                    obs,
                    cfg.target,
                    name=src["name"],
                    min_stations=int(src.get("min_stations", cfg.kriging.get("min_stations", 10))),
                    n_bins=int(cfg.kriging.get("n_bins", 10)),
                )
                kriging[src["name"]] = run
                grids.append(run.grid)
        elif role == "raster":
            with stage("load", timings):
                grids.append(io.read_grid(cfg.path(src["path"]), src["name"]))
        elif role == "lst":
            with stage("indices", timings):
                grids += _lst_grids(cfg, src)
        elif role == "spectral":
            with stage("indices", timings):
                grids += _spectral_grids(cfg, src)
    return grids, kriging


def build_layers(cfg: PipelineConfig, timings=None) -> Layers:
    grids, kriging = source_grids(cfg, timings=timings)
    with stage("align", timings):
        stack = align_stack(grids, cfg.target)
    return Layers(stack, kriging)


def sample_table(cfg: PipelineConfig, stack: Stack) -> FeatureTable:
    if cfg.samples is None:
        raise ConfigError("config has no 'samples' path")
    with stage("table"):
        return extract_samples(stack, io.read_points(cfg.path(cfg.samples)))


# -- model stages -----------------------------------------------------------------------


@dataclass
class StageResult:
    features: list[str]
    model: Model
    params: dict[str, Any]
    metrics: MetricsReport
    trials: list[TrialRecord]
    grid: Grid


def _fit(
    cfg: PipelineConfig,
    table: FeatureTable,
    train: np.ndarray,
    params: dict[str, Any] | None,
    timings,
) -> tuple[Model, dict[str, Any], list[TrialRecord]]:
    mc = cfg.model
    trials: list[TrialRecord] = []
    train_table = table.subset(train)
    if params is None:
        params = dict(mc.params)
        if mc.tune_budget > 0:
            with stage("tune", timings):
                space = space_from_config(mc.search_space) if mc.search_space else None
                best, trials = tune_model(
                    train_table, mc.kind, mc.tune_budget, cfg.seed, space=space, fixed=mc.params
                )
                params.update(best)
    with stage("train", timings):
        model = train_model(train_table, mc.kind, params, cfg.seed)
    return model, params, trials


def predict_pixels(cfg: PipelineConfig, stack: Stack, values_for_rows, name: str) -> Grid:
    """Apply ``values_for_rows`` to every complete pixel; the rest stay nodata."""
    pixels = stack_to_table(stack)
    out = np.full(cfg.target.nrows * cfg.target.ncols, cfg.target.nodata)
    out[pixels.provenance] = values_for_rows(pixels.X)
    return Grid(cfg.target, name, out.reshape(cfg.target.shape))


def run_binary_stage(cfg: PipelineConfig, layers: Layers, table: FeatureTable, timings=None):
    """Prune, split, (tune,) train and classify every complete pixel.

    Returns ``(StageResult, kept, dropped, train_idx, test_idx)``.
    """
    with stage("prune", timings):
        kept, dropped = prune_correlated(table, cfg.correlation_threshold)
        missing = [n for n in cfg.drop_for_priority if n not in kept]
        if missing:
            raise ConfigError(f"drop_for_priority names {missing} are not among the kept features")
    pruned = select_features(table, kept)
    with stage("split", timings):
        train, test = stratified_split(pruned.labels, cfg.test_fraction, cfg.seed)
    model, params, trials = _fit(cfg, pruned, train, None, timings)
    with stage("evaluate", timings):
        metrics = classification_metrics(pruned.labels[test], predict_class(model, pruned.X[test]))
    with stage("predict", timings):
        sub = Stack(layers.stack.georef, [layers.stack[n] for n in kept])
        grid = predict_pixels(cfg, sub, lambda X: predict_class(model, X), "binary")
    return StageResult(kept, model, params, metrics, trials, grid), kept, dropped, train, test


def run_probability_stage(
    cfg: PipelineConfig,
    layers: Layers,
    table: FeatureTable,
    kept: list[str],
    train: np.ndarray,
    test: np.ndarray,
    stage1_params: dict[str, Any],
    timings=None,
) -> StageResult:
    """Retrain without the drop list and map P(non-vegetated) per pixel."""
    reduced = drop_features(select_features(table, kept), cfg.drop_for_priority)
    reuse = stage1_params if (cfg.model.reuse_params or cfg.model.tune_budget == 0) else None
    model, params, trials = _fit(cfg, reduced, train, reuse, timings)
    with stage("evaluate", timings):
        metrics = classification_metrics(reduced.labels[test], predict_class(model, reduced.X[test]))
    with stage("predict", timings):
        sub = Stack(layers.stack.georef, [layers.stack[n] for n in reduced.feature_names])
        grid = predict_pixels(cfg, sub, lambda X: predict_proba(model, X), "probability")
    return StageResult(list(reduced.feature_names), model, params, metrics, trials, grid)


def fuse_priority(binary: Grid, proba: Grid) -> Grid:
    """Vegetated (0) pixels stay 0, non-vegetated (1) pixels take ``proba``."""
    if not binary.georef.aligned_with(proba.georef):
        raise MisalignedGrids("binary and probability grids are not aligned")
    b, p = binary.values, proba.values
    valid = binary.valid & proba.valid
    if not np.isin(b[binary.valid], (0.0, 1.0)).all():
        raise ConfigError("binary grid must hold only 0, 1 or nodata")
    out = np.where(b == 0.0, 0.0, np.clip(p, 0.0, 1.0))
    return Grid.from_masked(binary.georef, "priority", out, valid)


def report_importance(model: Model) -> list[tuple[str, float]]:
    """Features sorted by decreasing importance (ties by name)."""
    imp = feature_importance(model)
    pairs = [(n, float(v)) for n, v in zip(model.feature_names, imp)]
    return sorted(pairs, key=lambda nv: (-nv[1], nv[0]))


def validate_grid_vs_stations(grid: Grid, station_csv) -> ValidationReport:
    return validate_points(grid, io.read_observations(station_csv))


# -- run-all ------------------------------------------------------------------------


@dataclass
class RunResult:
    binary: Grid
    probability: Grid
    priority: Grid
    stage1: StageResult
    stage2: StageResult
    report: dict[str, Any]


def _stage_report(res: StageResult, n_train: int, n_test: int, kind: str) -> dict[str, Any]:
    return {
        "kind": kind,
        "features": res.features,
        "params": res.params,
        "metrics": res.metrics.to_dict(),
        "n_train": n_train,
        "n_test": n_test,
        "tuning": [t.to_dict() for t in res.trials],
    }


def run_validation(cfg: PipelineConfig, stack: Stack) -> list[dict[str, Any]]:
    out = []
    for k, entry in enumerate(cfg.validation):
        if "layer" not in entry or "stations" not in entry:
            raise ConfigError(f"validation entry {k} needs 'layer' and 'stations'")
        with stage("validate"):
            rep = validate_grid_vs_stations(stack[entry["layer"]], cfg.path(entry["stations"]))
        out.append({"layer": entry["layer"], "stations": str(entry["stations"]), **rep.to_dict()})
    return out


def run_all(cfg: PipelineConfig, out_dir=None) -> RunResult:
    """Execute the full flow; when ``out_dir`` is given, write every output there."""
    timings: dict[str, float] = {}
    t0 = time.perf_counter()
    layers = build_layers(cfg, timings)
    with stage("table", timings):
        table = sample_table(cfg, layers.stack)
    s1, kept, dropped, train, test = run_binary_stage(cfg, layers, table, timings)
    s2 = run_probability_stage(cfg, layers, table, kept, train, test, s1.params, timings)
    with stage("fuse", timings):
        priority = fuse_priority(s1.grid, s2.grid)
    with stage("importance", timings):
        ranking = report_importance(s2.model)
    validation = run_validation(cfg, layers.stack)

    flags = []
    if s2.metrics.oa < LOW_STAGE2_OA:
        flags.append("stage2_low_oa")
    pv = priority.values[priority.valid]
    report: dict[str, Any] = {
        "seed": cfg.seed,
        "layers": layers.stack.names,
        "table": {
            "rows": table.n_rows,
            "drops": table.drops,
            "class_counts": np.bincount(table.labels, minlength=2).tolist(),
        },
        "pruning": {"threshold": cfg.correlation_threshold, "kept": kept, "dropped": dropped},
        "drop_for_priority": cfg.drop_for_priority,
        "stage1": _stage_report(s1, len(train), len(test), cfg.model.kind),
        "stage2": _stage_report(s2, len(train), len(test), cfg.model.kind),
        "importance": [[n, v] for n, v in ranking],
        "importance_method": "mdi" if s2.model.is_forest else "gain",
        "kriging": {
            name: {
                "days": [
                    {
                        "date": d.date.isoformat(),
                        "n_stations": d.n_stations,
                        "variogram": d.variogram.to_dict(),
                        "cv_rmse": d.cv_rmse,
                        "degenerate": d.degenerate,
                    }
                    for d in run.days
                ],
                "excluded_days": [d.isoformat() for d in run.excluded_days],
            }
            for name, run in layers.kriging.items()
        },
        "validation": validation,
        "priority": {
            "valid_cells": int(priority.valid.sum()),
            "zero_cells": int((pv == 0).sum()),
            "mean_nonzero": float(pv[pv > 0].mean()) if (pv > 0).any() else 0.0,
        },
        "flags": flags,
    }
    if out_dir is not None:
        with stage("write", timings):
            out = Path(out_dir)
            io.write_grid(s1.grid, out / "binary.asc")
            io.write_grid(s2.grid, out / "probability.asc")
            io.write_grid(priority, out / "priority.asc")
            io.atomic_write_text(out / "model_binary.json", dumps_model(s1.model) + "\n")
            io.atomic_write_text(out / "model_priority.json", dumps_model(s2.model) + "\n")
            render_map(priority, cfg.ramp, out / "priority.pgm")
    timings["total"] = time.perf_counter() - t0
    report["timings"] = {k: round(v, 6) for k, v in sorted(timings.items())}
    if out_dir is not None:
        io.write_json(report, Path(out_dir) / "report.json")
    return RunResult(s1.grid, s2.grid, priority, s1, s2, report)
