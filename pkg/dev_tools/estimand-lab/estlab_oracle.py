"""
true estimand values by direct evaluation of potential-outcome expectations
over large simulated populations (full counterfactuals, no missing data)
"""
from __future__ import annotations

import inspect
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from estlab_config import ScenarioConfig
from estlab_defaults import DEFAULT_ORACLE_SIZE, ORACLE_BLOCK_SIZE, STREAM_ORACLE, SUCCESS
from estlab_errors import PlanResolutionError, StratumEmptyError
from estlab_logging import log_info
from estlab_model import CAUSES, KINDS, CompositeEndpoint
from estlab_planner import CDH, NTH, PTH, TREATMENT_POLICY, EstimandSpec, EstimandStrategy, Population
from estlab_simulator import PatientBlock, derive_stream, simulate_block

MODULE_NAME = Path(__file__).resolve().name

NOT_ICE = -1
UNCOVERED = -2


@dataclass(frozen=True)
class TrueEstimand:
    strategy: str
    value: float
    mc_se: float
    n_oracle: int
    stratum_prevalence: Optional[float] = None

    def as_dict(self) -> dict:
        result = {"strategy": self.strategy, "value": self.value, "mc_se": self.mc_se, "n_oracle": self.n_oracle}
        if self.stratum_prevalence is not None:
            result["stratum_prevalence"] = self.stratum_prevalence
        return result


@dataclass(frozen=True)
class OracleTarget:
    """
    what one oracle evaluation measures: either one strategy for every ICE or a
    full spec (regimen, per-cause strategies), within a population and endpoint
    """
    strategy: Optional[EstimandStrategy] = None
    spec: Optional[EstimandSpec] = None
    population: Population = Population()
    endpoint: Optional[CompositeEndpoint] = None
    everyone: bool = False

    @property
    def label(self) -> str:
        label = self.spec.name if self.spec is not None else self.strategy.label
        if self.population.kind == "principal_stratum":
            return f"PrincipalStratum({self.population.threshold!r}, {label})"
        return label

    def strategy_table(self) -> Tuple[np.ndarray, List[EstimandStrategy]]:
        """(cause, kind) -> strategy index; the extra last row/column maps NO_EVENT"""
        table = np.full((len(CAUSES) + 1, len(KINDS) + 1), NOT_ICE, dtype=int)
        if self.everyone:
            # the NO_EVENT row and column included: the regimen replaces every trajectory
            table[:, :] = 0
            return table, [self.strategy]
        if self.spec is None:
            table[:-1, :-1] = 0
            return table, [self.strategy]
        strategies: List[EstimandStrategy] = []
        for cause in CAUSES:
            for kind in KINDS:
                if self.spec.in_regimen(cause, kind):
                    continue
                strategy = self.spec.strategy_for(cause, kind)
                if strategy is None:
                    table[cause.index, kind.index] = UNCOVERED
                    continue
                if strategy.kind == "PrincipalStratum":
                    strategy = strategy.inner
                if strategy not in strategies:
                    strategies.append(strategy)
                table[cause.index, kind.index] = strategies.index(strategy)
        return table, strategies


def _failure_table(endpoint: CompositeEndpoint) -> np.ndarray:
    table = np.zeros((len(CAUSES) + 1, len(KINDS) + 1), dtype=bool)
    for cause in CAUSES:
        for kind in KINDS:
            table[cause.index, kind.index] = endpoint.is_failure(cause, kind)
    return table


def _strategy_mean(block: PatientBlock, arm: int, strategy: EstimandStrategy, stop: np.ndarray) -> np.ndarray:
    """(n, V) mean part of the trajectory a strategy assigns to ICE patients"""
    if strategy.kind == "CDH":
        return block.full_mean(arm)
    if strategy.kind == "NTH":
        return block.no_treatment_mean()
    if strategy.kind == "PTH":
        return block.partial_mean(arm, stop)
    if strategy.kind == "TreatmentPolicy":
        return block.arms[arm].actual_mean
    if strategy.kind == "DTR":
        return block.dynamic_rule_mean(arm, strategy.threshold)
    raise PlanResolutionError(f"{strategy.label} has no potential-outcome trajectory")


def arm_values(block: PatientBlock, arm: int, target: OracleTarget) -> np.ndarray:
    """
    per-patient mean part of the arm's final value: the first ICE (outside the
    regimen) picks the trajectory, patients without one keep ActualPolicy
    """
    table, strategies = target.strategy_table()
    history = block.arms[arm]
    codes = table[history.event_cause, history.event_kind]
    if (codes == UNCOVERED).any():
        raise PlanResolutionError("oracle population has ICEs without a strategy")
    is_ice = codes >= 0
    has_ice = is_ice.any(axis=1)
    first = np.where(has_ice, np.argmax(is_ice, axis=1), 0)
    chosen = np.where(has_ice, codes[np.arange(block.size), first], NOT_ICE)
    final = block.config.final_visit
    values = np.array(history.actual_mean[:, final])
    for index, strategy in enumerate(strategies):
        rows = chosen == index
        if rows.any():
            stop = np.where(rows, first, 0)
            values = np.where(rows, _strategy_mean(block, arm, strategy, stop)[:, final], values)
    return values


def _contrast(block: PatientBlock, target: OracleTarget) -> np.ndarray:
    """patient-level contrasts arm 1 - arm 0 over the target population"""
    members = target.population.mask(block.baseline, block.ps_variable)
    treated, control = arm_values(block, 1, target), arm_values(block, 0, target)
    if target.endpoint is None:
        contrast = treated - control
    else:
        failure = _failure_table(target.endpoint)
        final = block.config.final_visit
        success = []
        for arm, mean_part in ((0, control), (1, treated)):
            history = block.arms[arm]
            failed = failure[history.event_cause, history.event_kind].any(axis=1)
            value = mean_part + block.residual[:, final]
            met = target.endpoint.criterion(value, block.baseline)
            success.append((met & ~failed).astype(float))
        contrast = success[1] - success[0]
    return contrast[members]


def _evaluate_block(config: ScenarioConfig, target: OracleTarget, block_index: int, size: int) -> Tuple[np.ndarray, int]:
    stream = derive_stream(config.seed, STREAM_ORACLE, block_index)
    block = simulate_block(config, size, stream, assign=False)
    return _contrast(block, target), size


def _block_sizes(n_oracle: int) -> List[int]:
    sizes = [ORACLE_BLOCK_SIZE] * (n_oracle // ORACLE_BLOCK_SIZE)
    if n_oracle % ORACLE_BLOCK_SIZE:
        sizes.append(n_oracle % ORACLE_BLOCK_SIZE)
    return sizes


def evaluate(config: ScenarioConfig, target: OracleTarget, n_oracle: int = DEFAULT_ORACLE_SIZE,
             jobs: int = 1, logger=None) -> TrueEstimand:
    """
    Monte Carlo truth over n_oracle patients in fixed blocks; block streams are
    keyed by block index and the reduction is exact (fsum), so the result does
    not depend on the number of jobs
    """
    method = f"{inspect.currentframe().f_code.co_name}()"
    if n_oracle < 2:
        raise ValueError(f"n_oracle must be >= 2, got {n_oracle}")
    sizes = _block_sizes(n_oracle)
    if jobs > 1 and len(sizes) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as executor:
            results = list(executor.map(_evaluate_block, [config] * len(sizes), [target] * len(sizes),
                                        range(len(sizes)), sizes))
    else:
        results = [_evaluate_block(config, target, index, size) for index, size in enumerate(sizes)]
    contrasts = np.concatenate([contrast for contrast, _ in results])
    n_members = contrasts.shape[0]
    prevalence = n_members / n_oracle if target.population.kind != "all_randomized" else None
    if n_members == 0:
        threshold = target.population.threshold if target.population.kind == "principal_stratum" else None
        raise StratumEmptyError(f"stratum prevalence zero at threshold {threshold!r}" if threshold is not None
                                else "population is empty")
    value, mc_se = _mean_and_se(contrasts)
    if logger:
        log_info(logger=logger, msg=f"{method} {SUCCESS} {target.label} = {value:.6g} (mc_se {mc_se:.3g})")
    return TrueEstimand(target.label, value, mc_se, n_oracle, prevalence)


def _mean_and_se(contrasts: np.ndarray) -> Tuple[float, float]:
    n = contrasts.shape[0]
    if np.all(contrasts == contrasts[0]):
        return float(contrasts[0]), 0.0
    mean = math.fsum(contrasts) / n
    if n < 2:
        return mean, 0.0
    variance = math.fsum((contrasts - mean) ** 2) / (n - 1)
    return mean, math.sqrt(variance / n)


# one strategy for every ICE -----------------------------------------------------

def true_cdh(config: ScenarioConfig, n_oracle: int = DEFAULT_ORACLE_SIZE, jobs: int = 1) -> TrueEstimand:
    """E[Y(1,1) - Y(0,0)] over all randomized patients"""
    return evaluate(config, OracleTarget(strategy=CDH), n_oracle, jobs)


def true_nth(config: ScenarioConfig, n_oracle: int = DEFAULT_ORACLE_SIZE, jobs: int = 1) -> TrueEstimand:
    """ICE patients of arm a take the no-treatment trajectory"""
    return evaluate(config, OracleTarget(strategy=NTH), n_oracle, jobs)


def true_pth(config: ScenarioConfig, n_oracle: int = DEFAULT_ORACLE_SIZE, jobs: int = 1) -> TrueEstimand:
    """ICE patients of arm a take PartialUntil(a, first ICE visit)"""
    return evaluate(config, OracleTarget(strategy=PTH), n_oracle, jobs)


def true_treatment_policy(config: ScenarioConfig, n_oracle: int = DEFAULT_ORACLE_SIZE,
                          jobs: int = 1) -> TrueEstimand:
    return evaluate(config, OracleTarget(strategy=TREATMENT_POLICY), n_oracle, jobs)


def true_dtr(config: ScenarioConfig, threshold: float, n_oracle: int = DEFAULT_ORACLE_SIZE,
             jobs: int = 1) -> TrueEstimand:
    """contrast of DynamicRule(a, threshold) trajectories for every patient"""
    strategy = EstimandStrategy("DTR", threshold=threshold)
    return evaluate(config, OracleTarget(strategy=strategy, everyone=True), n_oracle, jobs)


def true_principal_stratum(config: ScenarioConfig, threshold: float, inner: EstimandStrategy,
                           n_oracle: int = DEFAULT_ORACLE_SIZE, jobs: int = 1) -> TrueEstimand:
    """inner strategy averaged over {S(1,1) > threshold}"""
    if inner.kind == "PrincipalStratum":
        raise ValueError("inner strategy must not be PrincipalStratum")
    population = Population(kind="principal_stratum", threshold=threshold)
    target = OracleTarget(strategy=inner, population=population, everyone=inner.kind == "DTR")
    return evaluate(config, target, n_oracle, jobs)


def true_composite(config: ScenarioConfig, endpoint: CompositeEndpoint, n_oracle: int = DEFAULT_ORACLE_SIZE,
                   jobs: int = 1) -> TrueEstimand:
    """difference in success proportions on ActualPolicy trajectories and counterfactual ICE histories"""
    return evaluate(config, OracleTarget(strategy=TREATMENT_POLICY, endpoint=endpoint), n_oracle, jobs)


def spec_population(config: ScenarioConfig, spec: EstimandSpec) -> Population:
    """population of the spec; a principal stratum without its own threshold uses the scenario's"""
    population = spec.population
    if population.kind == "principal_stratum" and population.threshold == -math.inf:
        return replace(population, threshold=config.ps_threshold)
    return population


def true_estimand(config: ScenarioConfig, spec: EstimandSpec, n_oracle: int = DEFAULT_ORACLE_SIZE,
                  jobs: int = 1, logger=None) -> TrueEstimand:
    """truth of a full spec: per-cause strategies, population and endpoint"""
    endpoint = spec.composite if spec.endpoint == "composite" else None
    return evaluate(config, OracleTarget(spec=spec, population=spec_population(config, spec), endpoint=endpoint),
                    n_oracle, jobs, logger=logger)


def strategy_truths(config: ScenarioConfig, spec: EstimandSpec, n_oracle: int = DEFAULT_ORACLE_SIZE,
                    jobs: int = 1, logger=None) -> List[TrueEstimand]:
    """one truth per distinct strategy of the spec (applied to every ICE) plus the composed estimand"""
    endpoint = spec.composite if spec.endpoint == "composite" else None
    strategies: List[EstimandStrategy] = []
    for _, strategy in spec.strategies:
        if strategy not in strategies and strategy.kind not in ("Composite", "PrincipalStratum"):
            strategies.append(strategy)
    truths = []
    for strategy in strategies:
        target = OracleTarget(strategy=strategy, population=spec_population(config, spec), endpoint=endpoint,
                              everyone=strategy.kind == "DTR")
        truths.append(evaluate(config, target, n_oracle, jobs, logger=logger))
    truths.append(true_estimand(config, spec, n_oracle, jobs, logger=logger))
    return truths
