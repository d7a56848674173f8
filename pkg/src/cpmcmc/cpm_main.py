"""The cpm command line: simulate, run, tune, curves and table"""
import argparse
import logging
import os
from typing import List, Optional, Sequence, Union

from cpmcmc.config import CPM_LOG, TABLE_IDS
from cpmcmc.errors import ConfigError
from cpmcmc.experiment_config import ExperimentConfig, load_config
from cpmcmc.experiments import (
    cmd_curves,
    cmd_run,
    cmd_simulate,
    cmd_table,
    cmd_tune,
)

LOG_ENV_VAR = CPM_LOG

_LEVEL_NAMES = ("CRITICAL", "ERROR", "WARNING", "INFO", "DEBUG")


def log_level(value: Optional[str]) -> int:
    """
    Parses CPM_LOG, which is either a level name like DEBUG or an integer. Unset means
    INFO.
    """
    if value is None or not value.strip():
        return logging.INFO
    value = value.strip()
    try:
        return int(value)
    except ValueError:
        pass
    if value.upper() not in _LEVEL_NAMES:
        raise ConfigError(
            LOG_ENV_VAR,
            f"must be an integer or one of {', '.join(_LEVEL_NAMES)}, got {value!r}",
        )
    return getattr(logging, value.upper())


def _add_common_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, help="Path to the JSON config")
    parser.add_argument("--seed", type=int, help="Overrides the config's seed")
    parser.add_argument("--jobs", type=int, help="Worker processes, 1 runs in-process")
    parser.add_argument("--out", help="Output directory, overrides out_dir")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cpm",
        description="Correlated pseudo-marginal MCMC experiments",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    _add_common_arguments(
        subparsers.add_parser("simulate", help="Write simulated observations")
    )
    _add_common_arguments(
        subparsers.add_parser("run", help="Run a sampler and summarize the chain")
    )
    _add_common_arguments(
        subparsers.add_parser("tune", help="Calibrate psi and sweep beta")
    )

    curves = subparsers.add_parser("curves", help="Write the theoretical curves")
    curves.add_argument("--kappa-min", type=float, default=0.2)
    curves.add_argument("--kappa-max", type=float, default=4.0)
    curves.add_argument("--step", type=float, default=0.01)
    curves.add_argument("--out", default="out")

    table = subparsers.add_parser("table", help="Reproduce one of the tables")
    table.add_argument("table_id", choices=TABLE_IDS)
    _add_common_arguments(table)

    return parser


def _experiment_config(args: argparse.Namespace) -> ExperimentConfig:
    return load_config(args.config).with_overrides(args.seed, args.jobs, args.out)


def main(argv: Optional[Sequence[str]] = None) -> Union[str, List[str]]:
    """Runs one subcommand, returns the path(s) of the files it wrote"""
    args = make_parser().parse_args(argv)

    if args.command == "curves":
        return cmd_curves(args.kappa_min, args.kappa_max, args.step, args.out)

    config = _experiment_config(args)
    if args.command == "simulate":
        return cmd_simulate(config)
    elif args.command == "run":
        result = cmd_run(config)
        return [result.trace_path, result.summary_path]
    elif args.command == "tune":
        return cmd_tune(config)
    elif args.command == "table":
        return cmd_table(config, args.table_id)
    else:
        raise ValueError(f"Unexpected command {args.command}")


def command_line_main() -> None:
    logging.basicConfig(level=log_level(os.environ.get(LOG_ENV_VAR)))
    main()


if __name__ == "__main__":
    command_line_main()
