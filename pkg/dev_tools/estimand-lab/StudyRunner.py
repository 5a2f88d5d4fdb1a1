"""
Study Runner class: replicate loop of a simulation study
(simulate -> resolve plan -> impute -> analyze -> pool -> compare to truth)
"""
import inspect
import math
import os
import pprint as pp
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from estlab_analysis import EstimandResult, ReplicateResult, StudySummary, analyze_imputed, failed_patients, summarize
from estlab_config import ScenarioConfig
from estlab_defaults import (
    DEFAULT_FAILURE_BUDGET,
    DEFAULT_ORACLE_SIZE,
    DEFAULT_REPLICATES,
    FAILURE,
    STREAM_IMPUTATION,
    SUCCESS,
    WARNING,
)
from estlab_errors import EstimandLabError, ReplicateError, SpecValidationError, StudyAbortedError
from estlab_imputation import impute
from estlab_oracle import true_estimand
from estlab_planner import EstimandSpec, estimand_variants, resolve_plan, validate_spec
from estlab_simulator import derive_stream, simulate_replicate_block

MODULE_PATH = Path(__file__).resolve()
CWD_PATH = Path(__file__).resolve().parent

Variant = Tuple[str, EstimandSpec, float]


def _oracle_key(spec: EstimandSpec) -> tuple:
    """parts of a spec the true value depends on"""
    return spec.regimen, spec.strategies, spec.population, spec.endpoint, spec.composite


def run_replicate(config: ScenarioConfig, variants: Sequence[Variant], truths: Dict[str, float], m: int,
                  replicate_index: int) -> ReplicateResult:
    """
    one replicate for every estimand row; an error inside the replicate is
    returned as a failed ReplicateResult instead of raised
    """
    try:
        block = simulate_replicate_block(config, replicate_index)
        results = []
        for variant_index, (label, spec, death_delta) in enumerate(variants):
            plan = resolve_plan(block, spec)
            stream = derive_stream(config.seed, STREAM_IMPUTATION, replicate_index, variant_index)
            imputed = impute(block, plan, spec, m, stream, death_delta=death_delta)
            endpoint = spec.composite if spec.endpoint == "composite" else None
            failed = failed_patients(block, endpoint) if endpoint is not None else None
            members = spec.population.mask(block.baseline, block.ps_variable)
            pooled = analyze_imputed(imputed, endpoint, failed, members)
            results.append(EstimandResult.evaluate(label, pooled, truths[label]))
        return ReplicateResult(replicate_index, tuple(results))
    except (EstimandLabError, ValueError, np.linalg.LinAlgError) as error:
        return ReplicateResult(replicate_index, error=str(ReplicateError(replicate_index, str(error))))


class StudyRunner:
    """ StudyRunner class """

    def __init__(
            self,
            config: ScenarioConfig,
            spec: EstimandSpec,
            replicates: int = DEFAULT_REPLICATES,
            imputations: Optional[int] = None,
            jobs: int = 1,
            failure_budget: float = DEFAULT_FAILURE_BUDGET,
            n_oracle: int = DEFAULT_ORACLE_SIZE,
            logger=None,
    ):
        """ initialize class, imputations defaults to the estimand spec's m """
        imputations = spec.m if imputations is None else imputations
        if replicates < 1:
            raise ValueError(f"replicates must be >= 1, got {replicates}")
        if imputations < 2:
            raise ValueError(f"imputations must be >= 2, got {imputations}")
        if not 0.0 <= failure_budget <= 1.0:
            raise ValueError(f"failure_budget must be in [0, 1], got {failure_budget}")
        self.__cls_name = f"{type(self).__name__}"
        self.__config = config
        self.__spec = spec
        self.__replicates = int(replicates)
        self.__imputations = int(imputations)
        self.__jobs = max(1, int(jobs))
        self.__failure_budget = failure_budget
        self.__n_oracle = int(n_oracle)
        self.__logger = logger
        self.__variants: List[Variant] = []
        self.__truths: Dict[str, float] = {}
        self.__results: List[ReplicateResult] = []
        # state of StudyRunner
        self.__summary: Optional[StudySummary] = None
        self.__is_aborted = False

    def __str__(self) -> str:
        """returns informal name of class, called by str()"""
        return f"{self.__cls_name} {self.__config.name}"

    def __repr__(self) -> str:
        """returns official string representation of class, called by repr()"""
        return (f"{self.__cls_name} {self.__config.name} "
                f"replicates: {self.__replicates} imputations: {self.__imputations} jobs: {self.__jobs} "
                f"completed: {len(self.__results)} is_aborted: {self.__is_aborted}")

    def show_state(self) -> None:
        """displays all class variables (types and values)"""
        print(f"\n{MODULE_PATH}")
        for key, val in self.__dict__.items():
            print(f"self.{key:36} {str(type(val)):36}\t '{val}'")

    def show_data(self, title: str, data) -> None:
        """displays all data values"""
        print(f"\n{self.__cls_name} {title}")
        pp.pprint(data, indent=2, width=160, compact=True, sort_dicts=False)

    def __log_info(self, msg: str) -> None:
        """print message to stderr if logger=None"""
        self.__logger.info(msg) if self.__logger else print(msg, file=sys.stderr)

    def __log_exception(self, error_msg: str = None) -> None:
        """ custom exception handling logging function."""
        ex_type, ex_value, ex_tb = sys.exc_info()
        ex_type = f"{ex_type.__name__}" if ex_type else ""
        ex_value = " ".join(f"{str(ex_value)}".split()) if ex_value else ""
        src_name = f"{os.path.split(ex_tb.tb_frame.f_code.co_filename)[1]}" if ex_tb else ""
        line_num = f"{ex_tb.tb_lineno}" if ex_tb else ""
        base_msg = f"{ex_type} {ex_value} | {src_name}:{line_num}"
        exc_msg = f"{error_msg} | {base_msg}" if error_msg else base_msg
        self.__logger.error(exc_msg) if self.__logger else print(exc_msg, file=sys.stderr)

    @property
    def budget(self) -> int:
        """number of failed replicates tolerated"""
        return int(math.floor(self.__failure_budget * self.__replicates))

    @property
    def imputations(self) -> int:
        return self.__imputations

    @property
    def truths(self) -> Dict[str, float]:
        return dict(self.__truths)

    @property
    def results(self) -> List[ReplicateResult]:
        return list(self.__results)

    @property
    def summary(self) -> Optional[StudySummary]:
        return self.__summary

    def prepare(self) -> None:
        """validates the spec and computes the oracle truth of every estimand row"""
        method = f"{inspect.currentframe().f_code.co_name}()"
        report = validate_spec(self.__spec, self.__config)
        if not report.ok:
            raise SpecValidationError(report)
        for issue in report.warnings:
            self.__log_info(msg=f"{method} {WARNING} {issue}")
        if self.__spec.population.kind == "principal_stratum":
            raise EstimandLabError("principal_stratum population needs S under the test treatment for every "
                                   "patient; use the truth subcommand for this estimand")
        self.__variants = estimand_variants(self.__spec)
        cache: Dict[tuple, float] = {}
        for label, spec, _ in self.__variants:
            key = _oracle_key(spec)
            if key not in cache:
                cache[key] = true_estimand(self.__config, spec, self.__n_oracle, self.__jobs,
                                           logger=self.__logger).value
            self.__truths[label] = cache[key]
        self.__log_info(msg=f"{method} {SUCCESS} {len(self.__variants)} estimand row(s), "
                            f"{len(cache)} oracle evaluation(s)")

    def run(self) -> StudySummary:
        """
        runs every replicate and reduces them in replicate order; raises
        StudyAbortedError (carrying the partial summary) once the failures
        exceed the budget
        """
        method = f"{inspect.currentframe().f_code.co_name}()"
        if not self.__variants:
            self.prepare()
        args = (self.__config, self.__variants, self.__truths, self.__imputations)
        failed = 0
        try:
            if self.__jobs > 1 and self.__replicates > 1:
                with ProcessPoolExecutor(max_workers=self.__jobs) as executor:
                    futures = [executor.submit(run_replicate, *args, index) for index in range(self.__replicates)]
                    for future in futures:
                        failed += self.__collect(future.result())
                        if failed > self.budget:
                            for pending in futures:
                                pending.cancel()
                            break
            else:
                for index in range(self.__replicates):
                    failed += self.__collect(run_replicate(*args, index))
                    if failed > self.budget:
                        break
            self.__summary = summarize(self.__config.name, self.__results, self.__truths)
            if failed > self.budget:
                self.__is_aborted = True
                raise StudyAbortedError(failed, self.budget, partial=self.__summary)
        except StudyAbortedError:
            self.__log_exception(error_msg=f"{method} {FAILURE} '{self.__config.name}'")
            raise
        self.__log_info(msg=f"{method} {SUCCESS} '{self.__config.name}' {self.__replicates} replicate(s), "
                            f"{failed} failed")
        return self.__summary

    def __collect(self, result: ReplicateResult) -> int:
        self.__results.append(result)
        if result.failed:
            self.__log_info(msg=f"{WARNING} {result.error}")
            return 1
        return 0

    def replicate_frame(self) -> pd.DataFrame:
        """one row per replicate x estimand"""
        rows = [row for result in self.__results for row in result.rows()]
        return pd.DataFrame(rows)

    def failure_frame(self) -> pd.DataFrame:
        rows = [{"replicate": result.replicate_index, "error": result.error}
                for result in self.__results if result.failed]
        return pd.DataFrame(rows, columns=["replicate", "error"])

    def aborted(self) -> bool:
        return self.__is_aborted

    def successful(self) -> bool:
        """ returns study success or failure """
        return self.__summary is not None and not self.__is_aborted


def run_study(config: ScenarioConfig, spec: EstimandSpec, replicates: int = DEFAULT_REPLICATES,
              imputations: Optional[int] = None, jobs: int = 1,
              failure_budget: float = DEFAULT_FAILURE_BUDGET, n_oracle: int = DEFAULT_ORACLE_SIZE,
              logger=None) -> StudySummary:
    runner = StudyRunner(config, spec, replicates, imputations, jobs, failure_budget, n_oracle, logger=logger)
    return runner.run()
