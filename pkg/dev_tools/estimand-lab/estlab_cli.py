"""
command line front end: validate-spec, truth, simulate and export subcommands
"""
# Copyright 2021, Blast Analytics & Marketing
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#    http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
import argparse
import inspect
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from StudyRunner import StudyRunner
from estlab_config import ScenarioConfig, load_scenario
from estlab_defaults import (
    DEFAULT_FAILURE_BUDGET,
    DEFAULT_ORACLE_SIZE,
    DEFAULT_REPLICATES,
    ERROR,
    EXIT_ERRORS,
    EXIT_OK,
    EXIT_WARNINGS,
    FAILURE,
    STREAM_IMPUTATION,
    SUCCESS,
    TOOL_NAME,
    WARNING,
)
from estlab_errors import EstimandLabError, SpecParseError, SpecValidationError, StudyAbortedError
from estlab_files import (
    RunManifest,
    default_output_dir,
    to_json,
    write_df_to_csv,
    write_json,
    write_manifest,
    write_partial_marker,
)
from estlab_imputation import impute
from estlab_logging import get_tool_version, log_exception, log_info, setup_logger
from estlab_oracle import strategy_truths
from estlab_planner import EstimandSpec, load_spec, resolve_plan, validate_spec
from estlab_simulator import block_to_frame, derive_stream, simulate_replicate_block

MODULE_NAME = Path(__file__).resolve().name
CWD_PATH = Path(__file__).resolve().parent

SUMMARY_JSON = "summary.json"
SUMMARY_CSV = "summary.csv"
REPLICATES_CSV = "replicates.csv"
FAILURES_CSV = "failures.csv"


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected an integer >= 1, got {text!r}")
    return value


def _seed(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError(f"seed must be in [0, 2^64), got {text!r}")
    return value


def _add_config(parser: argparse.ArgumentParser, required: bool) -> None:
    parser.add_argument(
        "-c",
        "--config",
        action="store",
        type=Path,
        required=required,
        default=None,
        help="scenario '.toml' file",
    )


def _add_spec(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "-s",
        "--spec",
        action="store",
        type=Path,
        required=True,
        help="estimand '.spec' file",
    )


def _add_seed(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--seed",
        action="store",
        type=_seed,
        required=False,
        default=None,
        help="master seed of every random stream (default: the scenario's seed)",
    )


def _add_jobs(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "-j",
        "--jobs",
        action="store",
        type=_positive_int,
        required=False,
        default=os.cpu_count() or 1,
        help="worker processes (default: all cores); results do not depend on it",
    )


def _add_oracle_size(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--oracle-size",
        action="store",
        type=_positive_int,
        required=False,
        default=DEFAULT_ORACLE_SIZE,
        help=f"patients per oracle evaluation (default={DEFAULT_ORACLE_SIZE})",
    )


def _add_out(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "-o",
        "--out",
        action="store",
        type=Path,
        required=False,
        default=None,
        help="output directory (default: $ESTLAB_OUTPUT_DIR or ./estlab_output)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog=TOOL_NAME, description="estimand simulation laboratory")
    parser.add_argument("--version", action="version", version=f"%(prog)s {get_tool_version()}")
    subparsers = parser.add_subparsers(dest="command", required=True)

    validate = subparsers.add_parser("validate-spec", help="check an estimand spec against the planning rules")
    _add_spec(validate)
    _add_config(validate, required=False)
    validate.add_argument(
        "--strict",
        action="store_true",
        required=False,
        default=False,
        help="exit 1 when the spec has warnings only",
    )
    validate.add_argument(
        "--json",
        action="store_true",
        required=False,
        default=False,
        help="print the report as json instead of text",
    )

    truth = subparsers.add_parser("truth", help="true estimand values of a scenario by simulation")
    _add_config(truth, required=True)
    _add_spec(truth)
    _add_seed(truth)
    _add_oracle_size(truth)
    _add_jobs(truth)

    simulate = subparsers.add_parser("simulate", help="run a simulation study and write its summary")
    _add_config(simulate, required=True)
    _add_spec(simulate)
    simulate.add_argument(
        "-r",
        "--replicates",
        action="store",
        type=_positive_int,
        required=False,
        default=DEFAULT_REPLICATES,
        help=f"number of simulated trials (default={DEFAULT_REPLICATES})",
    )
    simulate.add_argument(
        "-m",
        "--imputations",
        action="store",
        type=int,
        required=False,
        default=None,
        help="imputed copies per trial, at least 2 (default: imputations of the estimand spec)",
    )
    _add_seed(simulate)
    _add_jobs(simulate)
    _add_out(simulate)
    _add_oracle_size(simulate)
    simulate.add_argument(
        "--failure-budget",
        action="store",
        type=float,
        required=False,
        default=DEFAULT_FAILURE_BUDGET,
        help=f"fraction of failed trials tolerated before the study aborts (default={DEFAULT_FAILURE_BUDGET})",
    )
    simulate.add_argument(
        "--keep-replicates",
        action="store_true",
        required=False,
        default=False,
        help="also write the per-trial estimates (replicates.csv, failures.csv)",
    )

    export = subparsers.add_parser("export", help="write the patient-visit data and imputed copies of one trial")
    _add_config(export, required=True)
    _add_spec(export)
    export.add_argument(
        "--replicate",
        action="store",
        type=int,
        required=False,
        default=0,
        help="trial index (default=0)",
    )
    export.add_argument(
        "-m",
        "--imputations",
        action="store",
        type=int,
        required=False,
        default=None,
        help="imputed copies, at least 2 (default: imputations of the estimand spec)",
    )
    _add_seed(export)
    _add_out(export)
    return parser


def parse_cmd_args(argv: Optional[Sequence[str]] = None, logger=None) -> dict:
    """ parse command line arguments"""
    method = f"{inspect.currentframe().f_code.co_name}()"
    parser = build_parser()
    # convert parser to dict with vars()
    args = vars(parser.parse_args(argv))
    if args.get("imputations") is not None and args["imputations"] < 2:
        parser.error(f"--imputations must be >= 2, got {args['imputations']}")
    if "failure_budget" in args and not 0.0 <= args["failure_budget"] <= 1.0:
        parser.error(f"--failure-budget must be in [0, 1], got {args['failure_budget']}")
    if "replicate" in args and args["replicate"] < 0:
        parser.error(f"--replicate must be >= 0, got {args['replicate']}")
    log_info(logger=logger, msg=f"{method} {args}")
    return args


def _scenario(config_path: Path, seed: Optional[int], logger=None) -> ScenarioConfig:
    config = load_scenario(config_path, logger=logger)
    return config if seed is None else config.with_updates(seed=seed)


def _output_dir(out: Optional[Path]) -> Path:
    return Path(out) if out is not None else default_output_dir()


def cmd_validate(spec_path: Path, config_path: Path = None, strict: bool = False, as_json: bool = False,
                 logger=None) -> int:
    """prints the validation report; exit 2 on errors, 1 on warnings under --strict"""
    method = f"{inspect.currentframe().f_code.co_name}()"
    try:
        spec = load_spec(spec_path, logger=logger)
        config = load_scenario(config_path, logger=logger) if config_path is not None else None
    except SpecParseError as ex:
        print(f"{ERROR} {spec_path}: {ex}", file=sys.stderr)
        if as_json:
            print(to_json({"errors": [{"rule": "parse", "message": str(ex), "line": ex.line,
                                       "column": ex.column}], "warnings": [], "resolved_plan": []}), end="")
        return EXIT_ERRORS
    except (EstimandLabError, OSError) as ex:
        print(f"{ERROR} {ex}", file=sys.stderr)
        return EXIT_ERRORS
    report = validate_spec(spec, config)
    print(to_json(report.as_dict()), end="") if as_json else print(report.text())
    if not report.ok:
        log_info(logger=logger, msg=f"{method} {FAILURE} '{spec_path}' {len(report.errors)} error(s)")
        return EXIT_ERRORS
    if report.warnings and strict:
        log_info(logger=logger, msg=f"{method} {WARNING} '{spec_path}' {len(report.warnings)} warning(s)")
        return EXIT_WARNINGS
    log_info(logger=logger, msg=f"{method} {SUCCESS} '{spec_path}'")
    return EXIT_OK


def cmd_truth(config_path: Path, spec_path: Path, n_oracle: int = DEFAULT_ORACLE_SIZE, seed: int = None,
              jobs: int = 1, logger=None) -> int:
    """prints one TrueEstimand per strategy of the spec (plus the composed estimand) as json"""
    method = f"{inspect.currentframe().f_code.co_name}()"
    try:
        config = _scenario(config_path, seed, logger=logger)
        spec = load_spec(spec_path, logger=logger)
        truths = strategy_truths(config, spec, n_oracle, jobs, logger=logger)
    except (EstimandLabError, OSError, ValueError) as ex:
        log_exception(logger=logger, error_msg=f"{method} {FAILURE}")
        print(f"{ERROR} {ex}", file=sys.stderr)
        return EXIT_ERRORS
    print(to_json([truth.as_dict() for truth in truths]), end="")
    return EXIT_OK


def cmd_simulate(config_path: Path, spec_path: Path, replicates: int = DEFAULT_REPLICATES,
                 imputations: Optional[int] = None, seed: int = None, jobs: int = 1, out: Path = None,
                 n_oracle: int = DEFAULT_ORACLE_SIZE, failure_budget: float = DEFAULT_FAILURE_BUDGET,
                 keep_replicates: bool = False, logger=None) -> int:
    """
    writes manifest.json first, then summary.json / summary.csv (and the
    per-trial tables with keep_replicates); an aborted study leaves its
    partial summary next to a PARTIAL marker
    """
    method = f"{inspect.currentframe().f_code.co_name}()"
    output_dir = _output_dir(out)
    try:
        config = _scenario(config_path, seed, logger=logger)
        spec = load_spec(spec_path, logger=logger)
        imputations = spec.m if imputations is None else imputations
        manifest = RunManifest.build(
            "simulate", config_path, spec_path,
            seed=config.seed, replicates=replicates, imputations=imputations, n_oracle=n_oracle,
            output_dir=str(output_dir), failure_budget=failure_budget, keep_replicates=keep_replicates,
        )
        write_manifest(output_dir, manifest, logger=logger)
        runner = StudyRunner(config, spec, replicates, imputations, jobs, failure_budget, n_oracle, logger=logger)
        runner.prepare()
    except SpecValidationError as ex:
        print(ex.report.text(), file=sys.stderr)
        return EXIT_ERRORS
    except (EstimandLabError, OSError, ValueError) as ex:
        log_exception(logger=logger, error_msg=f"{method} {FAILURE}")
        print(f"{ERROR} {ex}", file=sys.stderr)
        return EXIT_ERRORS

    exit_code = EXIT_OK
    try:
        summary = runner.run()
    except StudyAbortedError as ex:
        summary = ex.partial
        write_partial_marker(output_dir, str(ex), logger=logger)
        print(f"{ERROR} {ex}", file=sys.stderr)
        exit_code = EXIT_ERRORS
    try:
        write_json(Path(output_dir, SUMMARY_JSON), summary.as_dict(), logger=logger)
        write_df_to_csv(Path(output_dir, SUMMARY_CSV), summary.as_frame(), table_name="summary", logger=logger)
        if keep_replicates:
            write_df_to_csv(Path(output_dir, REPLICATES_CSV), runner.replicate_frame(), table_name="replicates",
                            logger=logger)
            write_df_to_csv(Path(output_dir, FAILURES_CSV), runner.failure_frame(), table_name="failures",
                            logger=logger)
    except (OSError, ValueError) as ex:
        print(f"{ERROR} {ex}", file=sys.stderr)
        return EXIT_ERRORS
    return exit_code


def cmd_export(config_path: Path, spec_path: Path, replicate: int = 0, imputations: Optional[int] = None,
               seed: int = None, out: Path = None, logger=None) -> int:
    """patient-visit csv and imputed copies (primary estimand) of one trial"""
    method = f"{inspect.currentframe().f_code.co_name}()"
    output_dir = _output_dir(out)
    try:
        config = _scenario(config_path, seed, logger=logger)
        spec = load_spec(spec_path, logger=logger)
        report = validate_spec(spec, config)
        if not report.ok:
            raise SpecValidationError(report)
        imputations = spec.m if imputations is None else imputations
        manifest = RunManifest.build(
            "export", config_path, spec_path,
            seed=config.seed, replicates=1, imputations=imputations, n_oracle=0,
            output_dir=str(output_dir), failure_budget=0.0,
        )
        write_manifest(output_dir, manifest, logger=logger)
        block = simulate_replicate_block(config, replicate)
        write_df_to_csv(Path(output_dir, f"patient_visits_r{replicate:04d}.csv"), block_to_frame(block),
                        table_name="patient_visits", logger=logger)
        plan = resolve_plan(block, spec, logger=logger)
        # same stream as the primary estimand row of a study
        stream = derive_stream(config.seed, STREAM_IMPUTATION, replicate, 0)
        imputed = impute(block, plan, spec, imputations, stream, logger=logger)
        write_df_to_csv(Path(output_dir, f"imputed_r{replicate:04d}.csv"), imputed.export_frame(),
                        table_name="imputed", logger=logger)
    except SpecValidationError as ex:
        print(ex.report.text(), file=sys.stderr)
        return EXIT_ERRORS
    except (EstimandLabError, OSError, ValueError) as ex:
        log_exception(logger=logger, error_msg=f"{method} {FAILURE}")
        print(f"{ERROR} {ex}", file=sys.stderr)
        return EXIT_ERRORS
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None, logger=None) -> int:
    logger = logger or setup_logger(MODULE_NAME)
    args = parse_cmd_args(argv, logger=logger)
    command = args["command"]
    if command == "validate-spec":
        return cmd_validate(args["spec"], args["config"], args["strict"], args["json"], logger=logger)
    if command == "truth":
        return cmd_truth(args["config"], args["spec"], args["oracle_size"], args["seed"], args["jobs"],
                         logger=logger)
    if command == "simulate":
        return cmd_simulate(args["config"], args["spec"], args["replicates"], args["imputations"], args["seed"],
                            args["jobs"], args["out"], args["oracle_size"], args["failure_budget"],
                            args["keep_replicates"], logger=logger)
    return cmd_export(args["config"], args["spec"], args["replicate"], args["imputations"], args["seed"],
                      args["out"], logger=logger)


if __name__ == "__main__":
    sys.exit(main())
