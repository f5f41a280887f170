"""Command-line front end.

    python app.py run rabi -c config/defaults.json5 -o results
    python app.py parse-check data/sequences/transfer.seq
    python app.py fit cosine results/rabi.csv
    python app.py sweep repeated-init -c config/laser_power_table.json5
    python app.py history

Exit codes: 0 success, 1 runtime failure (or a fit that did not converge),
2 usage, configuration or parse errors.
"""

import argparse
import inspect
import json
import logging
import math
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from . import experiments, fitkit
from .config import ConfigError, RunConfig, database_path, line_of, load_config, log_level, thread_limit
from .database import RunDatabase
from .experiments import SweepResult
from .sequence import SequenceError, bind, load_sequence, sweep_points, validate_timing
from .spin_core import RegisterParams
from .utils import format_si, format_timestamp, generate_params_hash, truncate_text

logger = logging.getLogger(__name__)

EXPERIMENTS = {
    "rabi": experiments.run_rabi,
    "fid": experiments.run_fid,
    "init-tomography": experiments.run_init_tomography,
    "repeated-init": experiments.run_repeated_init,
    "transfer-storage": experiments.run_fidelity_report,
    "cpmg-storage": experiments.run_cpmg_storage,
    "extended-dd": experiments.run_extended_dd,
    "power-scan": experiments.run_power_scan,
}
GRID_ARGUMENT = {
    "rabi": "durations",
    "fid": "delays",
    "init-tomography": "durations",
    "transfer-storage": "delays",
    "cpmg-storage": "times",
    "power-scan": "powers",
}
HEADLINES = {
    "rabi": "rabi_frequency_hz",
    "fid": "t2star_n_s",
    "init-tomography": "peak_p_up",
    "repeated-init": "p_up_final",
    "transfer-storage": "mean_fidelity",
    "cpmg-storage": "decay_time_s",
    "extended-dd": "decay_time_s",
    "power-scan": "best_p_up",
}
FIT_MODELS = ("cosine", "damped-cosine", "exponential", "rates")
STATE_SLUGS = {"+X": "plus_x", "-X": "minus_x", "+Y": "plus_y", "-Y": "minus_y"}


@dataclass
class Outcome:
    results: Dict[str, SweepResult]
    summary: Dict[str, float]
    report: Optional[dict] = None
    warnings: List[str] = field(default_factory=list)


def configure_logging(verbosity: int = 0):
    if verbosity >= 2:
        level = logging.DEBUG
    elif verbosity == 1:
        level = logging.INFO
    else:
        level = getattr(logging, log_level(), logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)


def _kwargs(cfg: RunConfig, name: str, n_jobs: int) -> dict:
    runner = EXPERIMENTS[name]
    signature = inspect.signature(runner).parameters
    common = {
        "params": cfg.register,
        "rates": cfg.effective_rates,
        "rate_table": cfg.rate_table,
        "readout_noise": cfg.readout_noise,
        "seed": cfg.seed,
        "ensemble": cfg.ensemble,
        "n_jobs": n_jobs,
    }
    kwargs = {k: v for k, v in common.items() if k in signature}
    if name == "power-scan" and not cfg.rate_table:
        raise ConfigError("power-scan needs a rate_table", cfg.path, line_of(cfg.path, "experiment"))
    if cfg.grid is not None:
        if name not in GRID_ARGUMENT:
            raise ConfigError(f"{name} takes no grid", cfg.path, line_of(cfg.path, "grid"))
        kwargs[GRID_ARGUMENT[name]] = cfg.grid
    for key, value in cfg.options.items():
        if key not in signature or key in common or key == GRID_ARGUMENT.get(name):
            raise ConfigError(f"unknown option {key!r} for {name}", cfg.path, line_of(cfg.path, key))
        kwargs[key] = value
    return kwargs


def execute(cfg: RunConfig, name: str, n_jobs: int = 1) -> Outcome:
    """Run one experiment described by ``cfg``."""
    result = EXPERIMENTS[name](**_kwargs(cfg, name, n_jobs))
    if name == "transfer-storage":
        report = result.to_dict()
        summary = {"mean_fidelity": report["mean_fidelity"], "reference_delta": report["reference_delta"]}
        summary.update({f"fidelity_{STATE_SLUGS[k]}": v for k, v in report["fidelities"].items()})
        results = {f"{name}_{STATE_SLUGS[k]}": sweep for k, sweep in result.sweeps.items()}
        return Outcome(results, summary, report)
    if name == "init-tomography":
        total, up = result
        summary = {**total.summary, **up.summary}
        return Outcome({f"{name}_total": total, f"{name}_up": up}, summary,
                       warnings=total.warnings + up.warnings)
    return Outcome({name: result}, dict(result.summary), warnings=list(result.warnings))


def _json_default(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"cannot serialize {type(value).__name__}")


def write_csv(frame: pd.DataFrame, path: Path, header: Dict[str, object]):
    """CSV with ``#`` comment lines; re-readable with ``pd.read_csv(path, comment='#')``."""
    with open(path, "w", newline="", encoding="utf-8") as handle:
        for key, value in header.items():
            handle.write(f"# {key}: {value}\n")
        frame.to_csv(handle, index=False, float_format="%.12g", lineterminator="\n")


def write_meta(payload: dict, path: Path):
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(payload, handle, indent=2, sort_keys=True, default=_json_default)
        handle.write("\n")


def summary_line(name: str, summary: Dict[str, float]) -> str:
    key = HEADLINES[name]
    return f"{key}: {format_si(summary.get(key, math.nan))}"


def _load(args, name: Optional[str]) -> RunConfig:
    cfg = load_config(args.config, name) if args.config else RunConfig(experiment=name)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.ensemble is not None:
        if args.ensemble < 1:
            raise ConfigError("--ensemble must be positive", "<command line>", 1)
        cfg = replace(cfg, ensemble=args.ensemble)
    return cfg


def _unknown_experiment(name: Optional[str]) -> int:
    print(f"error: unknown experiment {name!r}; available: {', '.join(EXPERIMENTS)}", file=sys.stderr)
    return 2


def cmd_run(args) -> int:
    name = args.experiment
    if name not in EXPERIMENTS:
        return _unknown_experiment(name)
    cfg = _load(args, name)
    outcome = execute(cfg, name, thread_limit())
    out_dir = Path(args.out) if args.out else cfg.output_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    params_hash = generate_params_hash(cfg.snapshot())

    for stem, result in outcome.results.items():
        header = {"experiment": result.experiment, "params_hash": params_hash, "seed": result.seed,
                  "x_unit": result.x_unit}
        write_csv(result.to_frame(), out_dir / f"{stem}.csv", header)
    for warning in outcome.warnings:
        logger.warning(warning)
    meta = {
        "experiment": name,
        "params_hash": params_hash,
        "config": cfg.snapshot(),
        "summary": outcome.summary,
        "results": {stem: r.metadata() for stem, r in outcome.results.items()},
        "report": outcome.report,
    }
    write_meta(meta, out_dir / f"{name}.meta.json")
    RunDatabase(database_path()).store_run(name, params_hash, cfg.seed, outcome.summary, out_dir)
    print(summary_line(name, outcome.summary))
    return 0


def cmd_parse_check(args) -> int:
    try:
        ir = load_sequence(args.sequence)
    except SequenceError as exc:
        print(exc.render(), file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"{args.sequence}: error: {exc.strerror}", file=sys.stderr)
        return 2

    point = sweep_points(ir)[0]
    missing = [v for v in ir.unresolved if v not in point]
    diagnostics = []
    if missing:
        logger.info("timing not checked, unbound variables %s", missing)
    else:
        try:
            diagnostics = validate_timing(bind(ir, point), RegisterParams())
        except SequenceError as exc:
            print(exc.render(), file=sys.stderr)
            return 2
    for diagnostic in diagnostics:
        print(diagnostic.render(), file=sys.stderr)
    print(f"{args.sequence}: {len(ir.events)} events")
    return 2 if any(d.severity == "error" for d in diagnostics) else 0


def _read_csv(path: str) -> pd.DataFrame:
    frame = pd.read_csv(path, comment="#")
    if frame.empty:
        raise ValueError(f"{path}: no data rows")
    return frame.apply(pd.to_numeric, errors="raise")


def _column(frame: pd.DataFrame, name: str, path: str) -> np.ndarray:
    if name not in frame.columns:
        raise ValueError(f"{path}: missing column {name!r}")
    return frame[name].to_numpy(dtype=float)


def _sigma(frame: pd.DataFrame) -> Optional[np.ndarray]:
    if "y_err" not in frame.columns:
        return None
    sigma = frame["y_err"].to_numpy(dtype=float)
    return sigma if np.all(sigma > 0) else None


def _fit(model: str, paths: List[str]) -> fitkit.FitResult:
    frames = [_read_csv(p) for p in paths]
    if model == "rates":
        if len(frames) == 1:
            frame, path = frames[0], paths[0]
            return fitkit.fit_rate_params(_column(frame, "x", path), _column(frame, "total", path),
                                          _column(frame, "up", path))
        if len(frames) != 2:
            raise ValueError("rates needs one CSV with x,total,up or the total and up CSVs")
        x_total, x_up = _column(frames[0], "x", paths[0]), _column(frames[1], "x", paths[1])
        if x_total.shape != x_up.shape or not np.allclose(x_total, x_up):
            raise ValueError("total and up CSVs have different x grids")
        return fitkit.fit_rate_params(x_total, _column(frames[0], "y", paths[0]), _column(frames[1], "y", paths[1]))
    if len(frames) != 1:
        raise ValueError(f"{model} fits take exactly one CSV")
    frame, path = frames[0], paths[0]
    x, y, sigma = _column(frame, "x", path), _column(frame, "y", path), _sigma(frame)
    if model == "cosine":
        return fitkit.fit_cosine(x, y, sigma=sigma)
    if model == "damped-cosine":
        return fitkit.fit_damped_cosine(x, y, sigma=sigma)
    return fitkit.fit_exponential(x, y, sigma=sigma)


def cmd_fit(args) -> int:
    try:
        fit = _fit(args.model, args.csv)
    except (OSError, ValueError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(fit.to_dict(), indent=2, sort_keys=True, default=_json_default))
    return 0 if fit.converged else 1


def _headline(cfg: RunConfig, name: str) -> float:
    return float(execute(cfg, name, 1).summary.get(HEADLINES[name], math.nan))


def cmd_sweep(args) -> int:
    cfg = _load(args, args.experiment)
    name = cfg.experiment
    if name not in EXPERIMENTS:
        return _unknown_experiment(name)
    if cfg.sweep is None:
        raise ConfigError("configuration has no sweep section", cfg.path, 1)
    points = [cfg.with_value(cfg.sweep.param, v) for v in cfg.sweep.values]
    values = Parallel(n_jobs=thread_limit())(delayed(_headline)(point, name) for point in points)
    frame = pd.DataFrame({"x": np.array(cfg.sweep.values, dtype=float), "y": np.array(values, dtype=float)})

    out_dir = Path(args.out) if args.out else cfg.output_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    params_hash = generate_params_hash(cfg.snapshot())
    header = {"experiment": name, "params_hash": params_hash, "seed": cfg.seed,
              "x": cfg.sweep.param, "y": HEADLINES[name]}
    write_csv(frame, out_dir / f"{name}_sweep.csv", header)
    write_meta({"experiment": name, "params_hash": params_hash, "config": cfg.snapshot(),
                "sweep": {"param": cfg.sweep.param, "values": list(cfg.sweep.values)}},
               out_dir / f"{name}_sweep.meta.json")
    print(f"sweep_points: {len(frame)}")
    return 0


def cmd_history(args) -> int:
    runs = RunDatabase(database_path()).get_run_history(limit=args.limit, experiment=args.experiment)
    for run in runs:
        summary = json.dumps(run["summary"], sort_keys=True)
        print(f"{format_timestamp(run['created_at'])}  {run['experiment']:<18} {run['params_hash']}  "
              f"{truncate_text(summary, 80)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nvmem", description="NV electron + 13C memory simulator")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (-vv for debug)")
    sub = parser.add_subparsers(dest="command", required=True)

    def run_options(p):
        p.add_argument("-c", "--config", help="JSON5 run configuration")
        p.add_argument("-o", "--out", help="output directory")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--ensemble", type=int, help="override the trajectory ensemble size")

    run = sub.add_parser("run", help="run one experiment")
    run.add_argument("experiment", help=f"one of: {', '.join(EXPERIMENTS)}")
    run_options(run)
    run.set_defaults(handler=cmd_run)

    check = sub.add_parser("parse-check", help="parse and validate a sequence file")
    check.add_argument("sequence")
    check.set_defaults(handler=cmd_parse_check)

    fit = sub.add_parser("fit", help="fit a model to CSV data")
    fit.add_argument("model", choices=FIT_MODELS)
    fit.add_argument("csv", nargs="+")
    fit.set_defaults(handler=cmd_fit)

    sweep = sub.add_parser("sweep", help="sweep one configuration parameter")
    sweep.add_argument("experiment", nargs="?", help="defaults to the configured experiment")
    run_options(sweep)
    sweep.set_defaults(handler=cmd_sweep)

    history = sub.add_parser("history", help="list recorded runs")
    history.add_argument("--limit", type=int, default=20)
    history.add_argument("--experiment")
    history.set_defaults(handler=cmd_history)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    configure_logging(args.verbose)
    try:
        return args.handler(args)
    except (ConfigError, SequenceError) as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except Exception:
        logger.exception("run failed")
        return 1
