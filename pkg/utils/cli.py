"""Command-line surface: run, sweep and validate."""
import argparse
import math
from pathlib import Path
from typing import List, Optional, Sequence

import pandas as pd

from .config_manager import EMIT_FLAGS, RunConfig
from .csv_writer import SimulationCSVWriter
from .errors import (ConfigError, MarkerError, OpticsError, OracleFailure, PacketError, RunFailure,
                     ScheduleError, SimulationError)
from .logger import get_logger, initialize_logger_manager, log_error_with_context
from .oracle import run_suite
from .performance_monitor import log_timing_summary, timed_stage
from .scenarios import RunReport, build, field_grid, resolve_field_time, run
from .svg_plotter import plot_trajectories

logger = get_logger("CLI")

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUN = 2

BUILD_ERRORS = (ConfigError, ScheduleError, OpticsError, MarkerError, PacketError)
SWEEP_PARAMETERS = {"a2": "essw_spin", "t_c": "wheeler_delayed"}


def load_config(config_path: Optional[str], seed: Optional[int] = None, n: Optional[int] = None,
                out: Optional[str] = None, emit: Optional[Sequence[str]] = None) -> RunConfig:
    """Load a config file (or the defaults) and apply command-line overrides."""
    config = RunConfig.load_from_file(config_path) if config_path else RunConfig()
    return config.apply_overrides(seed=seed, n=n, out=out, emit=list(emit) if emit is not None else None)


def _write_outputs(config: RunConfig, report: RunReport, scenario, directory: Path, t_field: Optional[float]):
    with timed_stage("cli.write_outputs", emit=",".join(config.emit)):
        _write_files(config, report, scenario, directory, t_field)


def _write_files(config: RunConfig, report: RunReport, scenario, directory: Path, t_field: Optional[float]):
    # report.json goes last: its presence marks a complete output directory
    writer = SimulationCSVWriter(str(directory))
    if "trajectories" in config.emit:
        writer.write_trajectories(report.trajectories)
    if "fields" in config.emit:
        writer.write_fields(field_grid(scenario, t_field, config.output["field_resolution"]))
    if "svg" in config.emit:
        plot_trajectories(scenario.layout, report.trajectories, directory / "trajectories.svg",
                          config.output["svg_max_trajectories"], title=scenario.name)
    report.save_to_file(directory / "report.json")


def cmd_run(config_path: Optional[str], seed: Optional[int] = None, n: Optional[int] = None,
            out: Optional[str] = None, emit: Optional[Sequence[str]] = None) -> int:
    """Build and run the configured scenario and write its outputs."""
    try:
        config = load_config(config_path, seed, n, out, emit)
        initialize_logger_manager(config)
        scenario = build(config.scenario_name, config.scenario_overrides())
        t_field = resolve_field_time(scenario, config.output["field_time"]) if "fields" in config.emit else None
    except BUILD_ERRORS as e:
        log_error_with_context(e, "building run")
        return EXIT_CONFIG

    directory = config.output_directory
    directory.mkdir(parents=True, exist_ok=True)
    try:
        report = run(scenario)
    except RunFailure as e:
        log_error_with_context(e, "running ensemble", scenario=scenario.name)
        if e.report is not None:
            e.report.save_to_file(directory / "report.json")
        return EXIT_RUN
    except SimulationError as e:
        log_error_with_context(e, "running ensemble", scenario=scenario.name)
        return EXIT_RUN

    try:
        _write_outputs(config, report, scenario, directory, t_field)
    except SimulationError as e:
        log_error_with_context(e, "writing outputs", scenario=scenario.name)
        return EXIT_RUN
    aggregates = report.aggregates
    logger.info(f"{scenario.name}: P(D1)={aggregates['P'].get('D1')} P(D2)={aggregates['P'].get('D2')} "
                f"crossings={aggregates['crossings']}")
    log_timing_summary()
    return EXIT_OK


def cmd_sweep(config_path: Optional[str], parameter: str, values: Sequence[float],
              seed: Optional[int] = None, n: Optional[int] = None, out: Optional[str] = None) -> int:
    """
    Run the configured scenario once per parameter value.

    t_c values inside an I2 transit window are recorded as rejected rather
    than failing the sweep.
    """
    try:
        if parameter not in SWEEP_PARAMETERS:
            raise ConfigError(f"unknown sweep parameter '{parameter}', expected one of {tuple(SWEEP_PARAMETERS)}")
        if not values:
            raise ConfigError("sweep needs at least one value")
        config = load_config(config_path, seed, n, out)
        initialize_logger_manager(config)
        if config.scenario_name != SWEEP_PARAMETERS[parameter]:
            raise ConfigError(f"sweeping {parameter} needs scenario {SWEEP_PARAMETERS[parameter]}, "
                              f"config has {config.scenario_name}")
    except BUILD_ERRORS as e:
        log_error_with_context(e, "preparing sweep")
        return EXIT_CONFIG

    directory = config.output_directory
    directory.mkdir(parents=True, exist_ok=True)
    writer = SimulationCSVWriter(str(directory))
    rows = []
    exit_code = EXIT_OK
    for i, value in enumerate(values):
        row = {"value": value, "P_D1": math.nan, "P_D2": math.nan,
               "straight_channel_1": math.nan, "straight_channel_2": math.nan, "status": "ok"}
        try:
            scenario = build(config.scenario_name, config.scenario_overrides(), **{parameter: value})
            report = run(scenario)
        except ScheduleError as e:
            logger.warning(f"{parameter}={value} rejected: {e}")
            row["status"] = "rejected"
            rows.append(row)
            continue
        except BUILD_ERRORS as e:
            log_error_with_context(e, "building sweep point", value=value)
            return EXIT_CONFIG
        except RunFailure as e:
            log_error_with_context(e, "sweep point", value=value)
            row["status"] = "failed"
            if e.report is not None:
                e.report.save_to_file(directory / f"report_{parameter}_{i:03d}.json")
            rows.append(row)
            exit_code = EXIT_RUN
            continue
        report.save_to_file(directory / f"report_{parameter}_{i:03d}.json")
        aggregates = report.aggregates
        row.update({
            "P_D1": _number(aggregates["P"].get("D1")),
            "P_D2": _number(aggregates["P"].get("D2")),
            "straight_channel_1": _number(aggregates["straight_fraction"]["channel_1"]),
            "straight_channel_2": _number(aggregates["straight_fraction"]["channel_2"]),
        })
        rows.append(row)
    writer.write_sweep_summary(rows)
    log_timing_summary()
    return exit_code


def _number(value) -> float:
    return math.nan if value is None else float(value)


def cmd_validate(config_path: Optional[str] = None, seed: Optional[int] = None, n: Optional[int] = None,
                 reflection_phase: Optional[str] = None) -> int:
    """Run the oracle suite and print a pass/fail table on stdout."""
    try:
        config = load_config(config_path)
        data = config.to_dict()
        if seed is not None:
            data["validate"]["seed"] = seed
        if n is not None:
            data["validate"]["n"] = n
        if reflection_phase is not None:
            data["geometry"]["reflection_phase"] = reflection_phase
        config = RunConfig.from_dict(data)
        initialize_logger_manager(config)
    except BUILD_ERRORS as e:
        log_error_with_context(e, "loading validation config")
        return EXIT_CONFIG

    try:
        results = run_suite(config)
    except (OracleFailure, SimulationError) as e:
        log_error_with_context(e, "oracle suite")
        return EXIT_RUN

    table = pd.DataFrame([{
        "check": r.name,
        "value": "-" if r.value is None else f"{r.value:.3e}",
        "threshold": r.threshold,
        "result": "PASS" if r.passed else "FAIL",
        "detail": r.detail,
    } for r in results])
    print(table.to_string(index=False))
    log_timing_summary()
    failed = [r.name for r in results if not r.passed]
    if failed:
        logger.error(f"{len(failed)} check(s) failed: {', '.join(failed)}")
        return EXIT_RUN
    return EXIT_OK


def _emit_flags(text: str) -> List[str]:
    flags = [flag.strip() for flag in text.split(",") if flag.strip()]
    unknown = [flag for flag in flags if flag not in EMIT_FLAGS]
    if unknown:
        raise argparse.ArgumentTypeError(f"unknown emit flag(s) {unknown}, expected {EMIT_FLAGS}")
    return flags


def _values(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"values must be comma-separated numbers: {e}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="main.py",
                                     description="Pilot-wave trajectories in a Mach-Zehnder interferometer")
    commands = parser.add_subparsers(dest="command", required=True)

    def common(sub):
        sub.add_argument("--config", default=None, help="JSON run configuration")
        sub.add_argument("--seed", type=int, default=None, help="ensemble seed override")
        sub.add_argument("--n", type=int, default=None, help="ensemble size override")

    run_parser = commands.add_parser("run", help="run one scenario")
    common(run_parser)
    run_parser.add_argument("--out", default=None, help="output directory")
    run_parser.add_argument("--emit", type=_emit_flags, default=None,
                            help="comma-separated outputs: trajectories,fields,svg")

    sweep_parser = commands.add_parser("sweep", help="run a scenario over parameter values")
    common(sweep_parser)
    sweep_parser.add_argument("--out", default=None, help="output directory")
    sweep_parser.add_argument("--parameter", required=True, help="a2 or t_c")
    sweep_parser.add_argument("--values", type=_values, required=True, help="comma-separated values")

    validate_parser = commands.add_parser("validate", help="run the oracle suite")
    common(validate_parser)
    validate_parser.add_argument("--reflection-phase", choices=("i", "-i"), default=None,
                                 help="reflection factor convention (fault injection)")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "run":
        return cmd_run(args.config, args.seed, args.n, args.out, args.emit)
    if args.command == "sweep":
        return cmd_sweep(args.config, args.parameter, args.values, args.seed, args.n, args.out)
    return cmd_validate(args.config, args.seed, args.n, args.reflection_phase)
