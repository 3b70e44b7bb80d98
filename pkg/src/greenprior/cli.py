"""Command-line entry point: ``greenprior <command> --config CONFIG [...]``.

Every command reads a JSON config, honours ``--seed`` and writes into
``--out-dir``.  Failures print one JSON object on a single stderr line and
exit with 2 (config), 3 (data) or 4 (numerical failure).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Callable, Sequence

from . import io
from .dataset import prune_correlated, select_features, stratified_split
from .errors import ConfigError, GreenPriorError, UnknownFeature
from .ml import dumps_model, loads_model, predict_class, predict_proba
from .ml.tuning import space_from_config, tune_model
from .pipeline import (
    PipelineConfig,
    build_layers,
    fuse_priority,
    load_config,
    predict_pixels,
    report_importance,
    run_all,
    run_binary_stage,
    run_probability_stage,
    run_validation,
    sample_table,
    source_grids,
    stage,
    validate_grid_vs_stations,
)
from .raster import Stack
from .render import render_map
from .synth import ScenarioSpec, generate_scenario, load_spec

EXIT_INTERNAL = 1


def _out(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _cfg(args) -> PipelineConfig:
    return load_config(args.config, seed=args.seed)


def _say(msg: str) -> None:
    print(msg, file=sys.stdout)


# -- commands -------------------------------------------------------------------------


def cmd_synth(args) -> None:
    spec = load_spec(args.config)
    if args.seed is not None:
        spec = ScenarioSpec.from_dict({**spec.to_dict(), "seed": args.seed})
    out, _ = generate_scenario(spec, _out(args))
    _say(str(out / "config.json"))


def cmd_krige(args) -> None:
    cfg, out = _cfg(args), _out(args)
    grids, runs = source_grids(cfg, roles=("stations",))
    if not grids:
        raise ConfigError("config has no 'stations' source to krige")
    for g in grids:
        io.write_grid(g, out / f"{g.name}.asc")
    io.write_json(
        {
            name: {
                "days": [
                    {"date": d.date.isoformat(), "n_stations": d.n_stations, "variogram": d.variogram.to_dict(), "cv_rmse": d.cv_rmse}
                    for d in run.days
                ],
                "excluded_days": [d.isoformat() for d in run.excluded_days],
            }
            for name, run in runs.items()
        },
        out / "kriging.json",
    )


def cmd_indices(args) -> None:
    cfg, out = _cfg(args), _out(args)
    grids, _ = source_grids(cfg, roles=("spectral", "lst"))
    if not grids:
        raise ConfigError("config has no 'spectral' or 'lst' source")
    for g in grids:
        io.write_grid(g, out / f"{g.name}.asc")


def cmd_table(args) -> None:
    cfg, out = _cfg(args), _out(args)
    layers = build_layers(cfg)
    table = sample_table(cfg, layers.stack)
    io.write_table(table, out / "table.csv")
    io.write_json({"rows": table.n_rows, "features": table.feature_names, "drops": table.drops}, out / "table.json")


def _load_or_build_table(cfg: PipelineConfig, out: Path):
    path = out / "table.csv"
    if path.exists():
        return io.read_table(path)
    return sample_table(cfg, build_layers(cfg).stack)


def cmd_prune(args) -> None:
    cfg, out = _cfg(args), _out(args)
    table = _load_or_build_table(cfg, out)
    with stage("prune"):
        kept, dropped = prune_correlated(table, cfg.correlation_threshold)
    io.write_json({"threshold": cfg.correlation_threshold, "kept": kept, "dropped": dropped}, out / "prune.json")


def cmd_tune(args) -> None:
    cfg, out = _cfg(args), _out(args)
    budget = args.budget if args.budget is not None else cfg.model.tune_budget
    if budget < 1:
        raise ConfigError("tuning needs a positive budget (model.tune_budget or --budget)")
    table = _load_or_build_table(cfg, out)
    kept, _ = prune_correlated(table, cfg.correlation_threshold)
    pruned = select_features(table, kept)
    train, _ = stratified_split(pruned.labels, cfg.test_fraction, cfg.seed)
    space = space_from_config(cfg.model.search_space) if cfg.model.search_space else None
    with stage("tune"):
        best, trials = tune_model(pruned.subset(train), cfg.model.kind, budget, cfg.seed, space=space, fixed=cfg.model.params)
    io.write_json(
        {"kind": cfg.model.kind, "seed": cfg.seed, "best": {**cfg.model.params, **best}, "trials": [t.to_dict() for t in trials]},
        out / "tuning.json",
    )


def cmd_train(args) -> None:
    cfg, out = _cfg(args), _out(args)
    layers = build_layers(cfg)
    table = sample_table(cfg, layers.stack)
    s1, kept, dropped, train, test = run_binary_stage(cfg, layers, table)
    s2 = run_probability_stage(cfg, layers, table, kept, train, test, s1.params)
    io.atomic_write_text(out / "model_binary.json", dumps_model(s1.model) + "\n")
    io.atomic_write_text(out / "model_priority.json", dumps_model(s2.model) + "\n")
    io.write_json(
        {
            "seed": cfg.seed,
            "kept": kept,
            "dropped": dropped,
            "stage1": s1.metrics.to_dict(),
            "stage2": s2.metrics.to_dict(),
            "importance": [[n, v] for n, v in report_importance(s2.model)],
        },
        out / "metrics.json",
    )


def _model_stack(stack: Stack, names: Sequence[str]) -> Stack:
    missing = [n for n in names if n not in stack.names]
    if missing:
        raise UnknownFeature(f"model features {missing} are not produced by the config")
    return Stack(stack.georef, [stack[n] for n in names])


def cmd_predict(args) -> None:
    cfg, out = _cfg(args), _out(args)
    jobs: list[tuple[Path, str, str]] = []
    if args.model:
        mode = args.mode or "proba"
        jobs.append((Path(args.model), args.name or ("probability" if mode == "proba" else "binary"), mode))
    else:
        jobs.append((out / "model_binary.json", "binary", args.mode or "class"))
        jobs.append((out / "model_priority.json", "probability", args.mode or "proba"))
    layers = build_layers(cfg)
    for path, name, mode in jobs:
        if not path.exists():
            raise ConfigError(f"model file not found: {path} (run 'train' first or pass --model)")
        with stage("predict"):
            model = loads_model(path.read_text(encoding="utf-8"))
            sub = _model_stack(layers.stack, model.feature_names)
            fn = (lambda X, m=model: predict_proba(m, X)) if mode == "proba" else (lambda X, m=model: predict_class(m, X))
            grid = predict_pixels(cfg, sub, fn, name)
        io.write_grid(grid, out / f"{name}.asc")


def cmd_fuse(args) -> None:
    _cfg(args)  # validates the config even though fusion needs nothing from it
    out = _out(args)
    binary = io.read_grid(args.binary or out / "binary.asc", "binary")
    proba = io.read_grid(args.proba or out / "probability.asc", "probability")
    with stage("fuse"):
        io.write_grid(fuse_priority(binary, proba), out / "priority.asc")


def cmd_validate(args) -> None:
    cfg, out = _cfg(args), _out(args)
    if args.grid:
        if not args.stations:
            raise ConfigError("--grid needs --stations")
        grid = io.read_grid(args.grid)
        with stage("validate"):
            rep = validate_grid_vs_stations(grid, args.stations)
        results = [{"grid": str(args.grid), "stations": str(args.stations), **rep.to_dict()}]
    else:
        if not cfg.validation:
            raise ConfigError("config has no 'validation' entries (or pass --grid/--stations)")
        results = run_validation(cfg, build_layers(cfg).stack)
    io.write_json(results, out / "validation.json")


def cmd_render(args) -> None:
    cfg, out = _cfg(args), _out(args)
    grid = io.read_grid(args.grid or out / "priority.asc")
    target = Path(args.output) if args.output else out / "priority.pgm"
    render_map(grid, cfg.ramp, target)


def cmd_run_all(args) -> None:
    cfg, out = _cfg(args), _out(args)
    run_all(cfg, out)
    _say(str(out / "report.json"))


COMMANDS: dict[str, tuple[Callable, str]] = {
    "synth": (cmd_synth, "generate a synthetic scenario bundle"),
    "krige": (cmd_krige, "krige station sources to daily-mean grids"),
    "indices": (cmd_indices, "compute spectral indices and LST layers"),
    "table": (cmd_table, "build the labelled sample table"),
    "prune": (cmd_prune, "drop correlated features"),
    "tune": (cmd_tune, "tune model hyperparameters"),
    "train": (cmd_train, "train both stages and report metrics"),
    "predict": (cmd_predict, "predict class or probability grids"),
    "fuse": (cmd_fuse, "fuse binary and probability grids"),
    "validate": (cmd_validate, "compare grids with station observations"),
    "render": (cmd_render, "render a [0, 1] grid to PGM or PNG"),
    "run-all": (cmd_run_all, "run the whole flow and write the report"),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"usage: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="greenprior", description="Green-space prioritization toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="JSON config path")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out-dir", default=".", help="output directory (default: .)")
        if name == "tune":
            p.add_argument("--budget", type=int, default=None)
        if name == "predict":
            p.add_argument("--model", default=None)
            p.add_argument("--mode", choices=("class", "proba"), default=None)
            p.add_argument("--name", default=None)
        if name == "fuse":
            p.add_argument("--binary", default=None)
            p.add_argument("--proba", default=None)
        if name == "validate":
            p.add_argument("--grid", default=None)
            p.add_argument("--stations", default=None)
        if name == "render":
            p.add_argument("--grid", default=None)
            p.add_argument("--output", default=None, help=".pgm or .png path")
    return parser


def _error_line(kind: str, code: int, message: str, stage_name: str | None) -> str:
    return json.dumps({"error": kind, "code": code, "stage": stage_name, "message": " ".join(message.split())})


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        COMMANDS[args.command][0](args)
        return 0
    except GreenPriorError as exc:
        print(_error_line(exc.kind, exc.exit_code, str(exc), exc.stage), file=sys.stderr)
        return exc.exit_code
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except Exception as exc:  # pragma: no cover - defensive
        print(_error_line(type(exc).__name__, EXIT_INTERNAL, str(exc), None), file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
