"""
analysis of completed datasets (ANCOVA on the final visit, difference in
proportions for composite endpoints), per-replicate results and the
operating characteristics of a study
"""
from __future__ import annotations

import inspect
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import statsmodels.api as sm

from estlab_defaults import ALPHA, WARNING
from estlab_imputation import ImputedDatasetSet, PooledEstimate, pool
from estlab_logging import log_warning
from estlab_model import CAUSES, KINDS, NO_EVENT, CompositeEndpoint
from estlab_planner import DEAD

MODULE_NAME = Path(__file__).resolve().name


@dataclass(frozen=True)
class CopyEstimate:
    point: float
    variance: float
    df: float


def analyze_copy(values: np.ndarray, arms: np.ndarray, endpoint: Optional[CompositeEndpoint] = None,
                 failed: Optional[np.ndarray] = None, logger=None) -> CopyEstimate:
    """
    continuous endpoint: least squares of the final value on (1, baseline, arm);
    composite endpoint: difference in success proportions with binomial variance
    """
    method = f"{inspect.currentframe().f_code.co_name}()"
    values = np.asarray(values, dtype=float)
    arms = np.asarray(arms)
    baseline, final = values[:, 0], values[:, -1]
    if endpoint is not None:
        failed = np.zeros(arms.shape[0], dtype=bool) if failed is None else np.asarray(failed, dtype=bool)
        success = np.where(failed, False, endpoint.criterion(np.nan_to_num(final), baseline)).astype(float)
        n1, n0 = int((arms == 1).sum()), int((arms == 0).sum())
        p1, p0 = success[arms == 1].mean(), success[arms == 0].mean()
        return CopyEstimate(float(p1 - p0), float(p1 * (1.0 - p1) / n1 + p0 * (1.0 - p0) / n0), float(n1 + n0 - 2))
    if np.ptp(baseline) == 0.0:
        log_warning(logger=logger, msg=f"{method} {WARNING} constant baseline, dropped from the model")
        exog = np.column_stack([np.ones(arms.shape[0]), arms])
    else:
        exog = np.column_stack([np.ones(arms.shape[0]), baseline, arms])
    fit = sm.OLS(final, exog).fit()
    point = float(fit.params[-1])
    if fit.df_resid <= 0:
        return CopyEstimate(point, math.nan, 0.0)
    return CopyEstimate(point, float(fit.cov_params()[-1, -1]), float(fit.df_resid))


def failed_patients(block, endpoint: CompositeEndpoint) -> np.ndarray:
    """composite failure from the assigned arm's observed ICEs before the final visit"""
    final = block.config.final_visit
    failed = np.zeros(block.size, dtype=bool)
    for arm in (0, 1):
        history = block.arms[arm]
        rows = np.flatnonzero(block.assigned == arm)
        for row in rows:
            for visit in np.flatnonzero(history.event_cause[row, :final] != NO_EVENT):
                cause = CAUSES[history.event_cause[row, visit]]
                kind = KINDS[history.event_kind[row, visit]]
                if endpoint.is_failure(cause, kind):
                    failed[row] = True
    return failed


def analyze_imputed(imputed: ImputedDatasetSet, endpoint: Optional[CompositeEndpoint] = None,
                    failed: Optional[np.ndarray] = None, members: Optional[np.ndarray] = None,
                    logger=None) -> PooledEstimate:
    """analyzes every copy of the target population and pools with Rubin's rules"""
    method = f"{inspect.currentframe().f_code.co_name}()"
    n = imputed.arms.shape[0]
    keep = np.ones(n, dtype=bool) if members is None else np.asarray(members, dtype=bool)
    dead_final = imputed.provenance[:, -1] == DEAD
    if endpoint is not None and failed is not None:
        # death listed as a failure event is a failure, not a missing outcome
        dead_final &= ~failed
    if (dead_final & keep).any():
        log_warning(logger=logger, msg=f"{method} {WARNING} {int((dead_final & keep).sum())} patient(s) "
                                       f"dead at the final visit excluded")
    keep &= ~dead_final
    estimates = []
    for copy in range(imputed.m):
        estimate = analyze_copy(imputed.values[copy][keep], imputed.arms[keep], endpoint,
                                None if failed is None else failed[keep], logger=logger)
        estimates.append(estimate)
    df_complete = min(estimate.df for estimate in estimates)
    return pool([(estimate.point, estimate.variance) for estimate in estimates],
                df_complete=df_complete if df_complete > 0 else math.inf)


@dataclass(frozen=True)
class EstimandResult:
    label: str
    pooled: PooledEstimate
    truth: float
    ci_covers: bool
    rejected: bool

    @classmethod
    def evaluate(cls, label: str, pooled: PooledEstimate, truth: float, alpha: float = ALPHA) -> "EstimandResult":
        return cls(label, pooled, truth, pooled.covers(truth), bool(pooled.p_value < alpha))


@dataclass(frozen=True)
class ReplicateResult:
    replicate_index: int
    results: Tuple[EstimandResult, ...] = ()
    error: Optional[str] = None

    @property
    def failed(self) -> bool:
        return self.error is not None

    def rows(self) -> List[dict]:
        return [{
            "replicate": self.replicate_index,
            "estimand": result.label,
            "point": result.pooled.point,
            "within_var": result.pooled.within_var,
            "between_var": result.pooled.between_var,
            "total_var": result.pooled.total_var,
            "df": result.pooled.df,
            "ci_lower": result.pooled.ci[0],
            "ci_upper": result.pooled.ci[1],
            "truth": result.truth,
            "ci_covers": result.ci_covers,
            "rejected": result.rejected,
        } for result in self.results]


@dataclass(frozen=True)
class EstimandSummary:
    label: str
    truth: float
    n_replicates: int
    bias: float
    empirical_se: float
    mean_model_se: float
    coverage: float
    rejection_rate: float
    bias_mc_se: float
    coverage_mc_se: float


@dataclass(frozen=True)
class StudySummary:
    scenario: str
    replicates: int
    failed: int
    estimands: Tuple[EstimandSummary, ...]

    def row(self, label: str) -> EstimandSummary:
        for summary in self.estimands:
            if summary.label == label:
                return summary
        raise KeyError(label)

    def as_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "replicates": self.replicates,
            "failed": self.failed,
            "estimands": [summary.__dict__.copy() for summary in self.estimands],
        }

    def as_frame(self) -> pd.DataFrame:
        """tidy table: one row per estimand x scenario"""
        frame = pd.DataFrame([summary.__dict__ for summary in self.estimands])
        frame.insert(0, "scenario", self.scenario)
        return frame


def summarize(scenario: str, results: Sequence[ReplicateResult], truths: Dict[str, float]) -> StudySummary:
    """ordered reduction of replicate results into operating characteristics"""
    ordered = sorted(results, key=lambda result: result.replicate_index)
    succeeded = [result for result in ordered if not result.failed]
    rows = []
    for label, truth in truths.items():
        picked = [item for result in succeeded for item in result.results if item.label == label]
        count = len(picked)
        if count == 0:
            rows.append(EstimandSummary(label, truth, 0, *([math.nan] * 7)))
            continue
        points = np.array([item.pooled.point for item in picked])
        mean_point = math.fsum(points) / count
        empirical_se = math.sqrt(math.fsum((points - mean_point) ** 2) / (count - 1)) if count > 1 else 0.0
        model_se = math.fsum(item.pooled.se for item in picked) / count
        coverage = sum(item.ci_covers for item in picked) / count
        rows.append(EstimandSummary(
            label=label,
            truth=truth,
            n_replicates=count,
            bias=mean_point - truth,
            empirical_se=empirical_se,
            mean_model_se=model_se,
            coverage=coverage,
            rejection_rate=sum(item.rejected for item in picked) / count,
            bias_mc_se=empirical_se / math.sqrt(count),
            coverage_mc_se=math.sqrt(coverage * (1.0 - coverage) / count),
        ))
    return StudySummary(scenario, len(ordered), len(ordered) - len(succeeded), tuple(rows))
