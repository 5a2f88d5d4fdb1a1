"""
multiple imputation engines (MAR, return-to-baseline, retrieved dropout,
jump-to-reference, copy-reference, special pattern), delta adjustment and
Rubin's rules pooling
"""
from __future__ import annotations

import inspect
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import statsmodels.api as sm
from scipy import stats

from estlab_defaults import ALPHA, SUCCESS
from estlab_errors import ImputationError
from estlab_logging import log_info
from estlab_model import CAUSES, NO_EVENT, EventKind, IceCause
from estlab_planner import DEAD, IMPUTE, OBSERVE, CellPlan, EstimandSpec, ImputationMethod, key_text
from estlab_simulator import NEVER, child_stream

MODULE_NAME = Path(__file__).resolve().name

PROVENANCE = {OBSERVE: "Observed", IMPUTE: "Imputed", DEAD: "Dead"}
MIN_DONORS = 3


# posterior of the sequential MAR model --------------------------------------------

@dataclass(frozen=True)
class VisitFit:
    """least-squares summary of y_t on (1, y_0..y_t-1)"""
    params: np.ndarray
    unscaled_cov: np.ndarray
    ssr: float
    df: int


@dataclass(frozen=True)
class ArmDistribution:
    """multivariate normal of one arm over visits 0..T"""
    mean: np.ndarray
    cov: np.ndarray


@dataclass(frozen=True)
class MarModel:
    arm: int
    baseline_mean: float
    baseline_ss: float
    n_baseline: int
    fits: Tuple[VisitFit, ...]

    def draw(self, rng: np.random.Generator) -> ArmDistribution:
        """one proper posterior draw of (mean, covariance)"""
        n_visits = len(self.fits) + 1
        mean = np.empty(n_visits)
        cov = np.empty((n_visits, n_visits))
        sigma0 = self.baseline_ss / rng.chisquare(self.n_baseline - 1)
        mean[0] = self.baseline_mean + math.sqrt(sigma0 / self.n_baseline) * rng.standard_normal()
        cov[0, 0] = sigma0
        for visit, fit in enumerate(self.fits, start=1):
            sigma = fit.ssr / rng.chisquare(fit.df)
            chol = np.linalg.cholesky(sigma * fit.unscaled_cov)
            beta = fit.params + chol @ rng.standard_normal(fit.params.shape[0])
            slopes = beta[1:]
            past = cov[:visit, :visit]
            mean[visit] = beta[0] + slopes @ mean[:visit]
            cross = slopes @ past
            cov[visit, :visit] = cross
            cov[:visit, visit] = cross
            cov[visit, visit] = cross @ slopes + sigma
        return ArmDistribution(mean, cov)


def fit_mar_model(values: np.ndarray, rows: np.ndarray, arm: int = 0) -> MarModel:
    """
    Bayesian sequential regressions of each visit on its history, fitted on the
    complete cases of the selected rows; needs t + 2 cases at visit t
    """
    data = values[rows]
    n_visits = data.shape[1]
    baseline = data[:, 0]
    if baseline.shape[0] < 2:
        raise ImputationError(f"arm {arm}, visit 0: {baseline.shape[0]} case(s), need 2")
    fits = []
    for visit in range(1, n_visits):
        complete = ~np.isnan(data[:, :visit + 1]).any(axis=1)
        n_cases = int(complete.sum())
        if n_cases < visit + 2:
            raise ImputationError(f"arm {arm}, visit {visit}: {n_cases} complete case(s), need {visit + 2}")
        exog = sm.add_constant(data[complete, :visit], has_constant="add")
        fit = sm.OLS(data[complete, visit], exog).fit()
        fits.append(VisitFit(np.asarray(fit.params), np.asarray(fit.normalized_cov_params),
                             float(fit.ssr), int(round(fit.df_resid))))
    return MarModel(arm, float(baseline.mean()), float(((baseline - baseline.mean()) ** 2).sum()),
                    baseline.shape[0], tuple(fits))


def conditional_draw(rng: np.random.Generator, mean: np.ndarray, cov: np.ndarray, known: np.ndarray,
                     targets: np.ndarray, values: np.ndarray) -> np.ndarray:
    """
    draws y[targets] | y[known] ~ N for every row of values; mean may be one
    vector or one vector per row
    """
    mean = np.broadcast_to(mean, values.shape)
    sigma_tt = cov[np.ix_(targets, targets)]
    if known.size:
        sigma_kk = cov[np.ix_(known, known)]
        sigma_kt = cov[np.ix_(known, targets)]
        coef = np.linalg.solve(sigma_kk, sigma_kt)
        centre = mean[:, targets] + (values[:, known] - mean[:, known]) @ coef
        sigma_tt = sigma_tt - sigma_kt.T @ coef
    else:
        centre = mean[:, targets]
    chol = np.linalg.cholesky((sigma_tt + sigma_tt.T) / 2.0)
    return centre + rng.standard_normal(centre.shape) @ chol.T


# donors -----------------------------------------------------------------------------

@dataclass(frozen=True)
class DonorIndex:
    """assigned-arm ICE visits per cause and first non-regimen rescue, (n, C) and (n,)"""
    cause_visit: np.ndarray
    rescue_visit: np.ndarray

    @classmethod
    def from_block(cls, block, spec: EstimandSpec) -> "DonorIndex":
        n = block.size
        cause_visit = np.full((n, len(CAUSES)), NEVER, dtype=np.int64)
        rescue_visit = np.full(n, NEVER, dtype=np.int64)
        for arm in (0, 1):
            history = block.arms[arm]
            rows = np.flatnonzero(block.assigned == arm)
            for row in rows:
                for visit in np.flatnonzero(history.event_cause[row] != NO_EVENT)[::-1]:
                    cause = CAUSES[history.event_cause[row, visit]]
                    kind = history.event_kind[row, visit]
                    cause_visit[row, cause.index] = visit
                    if kind == EventKind.RescueStart.index and spec.strategy_for(cause, EventKind.RescueStart):
                        rescue_visit[row] = visit
        return cls(cause_visit, rescue_visit)


def _retrieved_dropout_fit(observed: np.ndarray, arm_rows: np.ndarray, donors: DonorIndex, cause: IceCause,
                           visit: int, arm: int, at_ice_visit: bool = False):
    """
    regression on baseline over same-arm patients of the cause still observed
    at visit; at_ice_visit admits values from the ICE visit itself (NTH cells)
    """
    ice_visit = donors.cause_visit[:, cause.index]
    after_ice = ice_visit <= visit if at_ice_visit else ice_visit < visit
    eligible = (arm_rows & after_ice & ~np.isnan(observed[:, visit])
                & (donors.rescue_visit >= visit))
    n_donors = int(eligible.sum())
    if n_donors == 0:
        raise ImputationError(f"no retrieved dropouts for cause {cause.value} (arm {arm}, visit {visit})")
    if n_donors < MIN_DONORS:
        raise ImputationError(f"{n_donors} retrieved dropout(s) for cause {cause.value} "
                              f"(arm {arm}, visit {visit}), need {MIN_DONORS}")
    exog = sm.add_constant(observed[eligible, 0], has_constant="add")
    fit = sm.OLS(observed[eligible, visit], exog).fit()
    return VisitFit(np.asarray(fit.params), np.asarray(fit.normalized_cov_params), float(fit.ssr),
                    int(round(fit.df_resid)))


def _draw_regression(rng: np.random.Generator, fit: VisitFit, baseline: np.ndarray) -> np.ndarray:
    sigma = fit.ssr / rng.chisquare(fit.df)
    beta = fit.params + np.linalg.cholesky(sigma * fit.unscaled_cov) @ rng.standard_normal(fit.params.shape[0])
    return beta[0] + beta[1] * baseline + math.sqrt(sigma) * rng.standard_normal(baseline.shape[0])


# imputed sets -----------------------------------------------------------------------

@dataclass
class ImputedDatasetSet:
    """m completed copies (m, n, V); provenance and method per cell"""
    values: np.ndarray
    provenance: np.ndarray
    method: np.ndarray
    methods: List[ImputationMethod]
    arms: np.ndarray
    death: np.ndarray
    replicate: int = 0
    keys: List = field(default_factory=list)

    @property
    def m(self) -> int:
        return self.values.shape[0]

    def copy_frame(self, copy: int) -> pd.DataFrame:
        """wide completed dataset of one copy: patient, arm, y0..yT"""
        n_visits = self.values.shape[2]
        frame = pd.DataFrame(self.values[copy], columns=[f"y{visit}" for visit in range(n_visits)])
        frame.insert(0, "arm", self.arms)
        frame.insert(0, "patient", np.arange(self.arms.shape[0]))
        return frame

    def export_frame(self) -> pd.DataFrame:
        """long format: replicate, copy, patient, visit, value, provenance, method"""
        m, n, n_visits = self.values.shape
        names = np.array([method.name for method in self.methods] + [""], dtype=object)
        provenance = np.array([PROVENANCE[code] for code in (OBSERVE, IMPUTE, DEAD)], dtype=object)
        return pd.DataFrame({
            "replicate": np.full(m * n * n_visits, self.replicate),
            "copy": np.repeat(np.arange(m), n * n_visits),
            "patient": np.tile(np.repeat(np.arange(n), n_visits), m),
            "visit": np.tile(np.arange(n_visits), m * n),
            "value": self.values.ravel(),
            "provenance": np.tile(provenance[self.provenance].ravel(), m),
            "method": np.tile(names[self.method].ravel(), m),
        })


def apply_delta(imputed: ImputedDatasetSet, delta: float, target_cells: np.ndarray) -> ImputedDatasetSet:
    """shifts the targeted (n, V) cells by delta in every copy"""
    target_cells = np.asarray(target_cells, dtype=bool)
    if (target_cells & (imputed.provenance != IMPUTE)).any():
        raise ImputationError("delta can only target imputed cells")
    values = imputed.values + np.where(target_cells, delta, 0.0)[None, :, :] if delta != 0.0 else imputed.values
    return replace(imputed, values=values)


def _blocks(row_targets: np.ndarray, row_methods: np.ndarray) -> List[Tuple[int, Tuple[int, ...]]]:
    """per patient: (method index, target visits) in order of first visit"""
    blocks: Dict[int, List[int]] = {}
    for visit in np.flatnonzero(row_targets):
        blocks.setdefault(int(row_methods[visit]), []).append(int(visit))
    return sorted(((index, tuple(visits)) for index, visits in blocks.items()), key=lambda item: item[1][0])


class _CopyContext:
    """posterior draws shared by every patient of one copy"""

    def __init__(self, rng, models: Dict[int, MarModel]):
        self.rng = rng
        self.distributions = {arm: model.draw(rng) for arm, model in models.items()}
        self.regressions: Dict[tuple, VisitFit] = {}
        self.shifts: Dict[tuple, float] = {}


def impute(block, plan: CellPlan, spec: EstimandSpec, m: int, stream: np.random.SeedSequence,
           death_delta: float = 0.0, logger=None) -> ImputedDatasetSet:
    """
    fills every DiscardAndImpute cell of the plan in m copies; copy k uses its
    own derived stream so copies are independent of evaluation order
    """
    method_name = f"{inspect.currentframe().f_code.co_name}()"
    if m < 2:
        raise ValueError(f"m must be >= 2, got {m}")
    observed = block.observed
    arms = np.asarray(block.assigned)
    working = np.where(plan.decision == OBSERVE, observed, np.nan)
    values = np.repeat(working[None, :, :], m, axis=0)
    targets = plan.decision == IMPUTE
    result = ImputedDatasetSet(values, plan.decision.copy(), plan.method.copy(), list(plan.methods), arms,
                               plan.death.copy(), block.replicate, list(plan.keys))
    if not targets.any():
        return result

    used = {plan.methods[index].kind for index in np.unique(plan.method[targets])}
    needs_model = used - {"retrieved_dropout"}
    models: Dict[int, MarModel] = {}
    if needs_model:
        wanted = set(np.unique(arms[targets.any(axis=1)]).tolist())
        if used & {"jump_to_reference", "copy_reference"}:
            wanted.add(spec.reference_arm)
        models = {arm: fit_mar_model(working, arms == arm, arm) for arm in sorted(wanted)}
    donors = DonorIndex.from_block(block, spec) if used & {"retrieved_dropout", "special_pattern"} else None

    rows_with_targets = np.flatnonzero(targets.any(axis=1))
    patient_blocks = {row: _blocks(targets[row], plan.method[row]) for row in rows_with_targets}
    n_stages = max(len(blocks) for blocks in patient_blocks.values())
    for copy in range(m):
        context = _CopyContext(np.random.default_rng(child_stream(stream, copy)), models)
        filled = values[copy]
        for stage in range(n_stages):
            groups: Dict[tuple, List[int]] = {}
            for row, blocks in patient_blocks.items():
                if stage < len(blocks):
                    index, visits = blocks[stage]
                    known = tuple(int(v) for v in np.flatnonzero(~np.isnan(filled[row])))
                    groups.setdefault((int(arms[row]), index, visits, known), []).append(row)
            for (arm, index, visits, known), rows in sorted(groups.items()):
                rows = np.array(rows)
                method = plan.methods[index]
                filled[np.ix_(rows, visits)] = _draw(context, method, arm, rows, np.array(visits), np.array(known),
                                                     filled, observed, arms, plan, donors, spec)
    # shifts apply after every stage so later draws condition on unshifted values
    for index, method in enumerate(plan.methods):
        result = apply_delta(result, method.delta, targets & (plan.method == index))
    result = apply_delta(result, death_delta, targets & plan.death)
    if logger:
        log_info(logger=logger, msg=f"{method_name} {SUCCESS} {int(targets.sum())} cell(s) x {m} cop(ies) "
                                    f"with {', '.join(sorted(key_text(key) for key in plan.keys))}")
    return result


def _draw(context: _CopyContext, method: ImputationMethod, arm: int, rows: np.ndarray, visits: np.ndarray,
          known: np.ndarray, filled: np.ndarray, observed: np.ndarray, arms: np.ndarray, plan: CellPlan,
          donors: Optional[DonorIndex], spec: EstimandSpec) -> np.ndarray:
    rng = context.rng
    if method.kind == "retrieved_dropout":
        if plan.ice_cause[rows[0], visits[0]] == NO_EVENT:
            raise ImputationError("retrieved_dropout needs an ICE cause, it cannot fill NonIce cells")
        cause = CAUSES[int(plan.ice_cause[rows[0], visits[0]])]
        at_ice_visit = plan.keys[int(plan.method[rows[0], visits[0]])][1] == "NTH"
        draws = []
        for visit in visits:
            key = (arm, cause, int(visit), at_ice_visit)
            if key not in context.regressions:
                context.regressions[key] = _retrieved_dropout_fit(observed, arms == arm, donors, cause, int(visit),
                                                                  arm, at_ice_visit)
            draws.append(_draw_regression(rng, context.regressions[key], filled[rows, 0]))
        return np.column_stack(draws)
    own = context.distributions[arm]
    if method.kind == "return_to_baseline":
        centred = np.zeros((rows.shape[0], own.mean.shape[0]))
        baseline_only = np.array([0])
        return filled[rows, 0][:, None] + conditional_draw(rng, np.zeros(own.mean.shape[0]), own.cov,
                                                            baseline_only, visits, centred)
    if method.kind in ("jump_to_reference", "copy_reference"):
        reference = context.distributions[spec.reference_arm]
        mean = reference.mean
        if method.kind == "jump_to_reference":
            mean = np.where(np.arange(mean.shape[0]) < visits.min(), own.mean, reference.mean)
        return conditional_draw(rng, mean, reference.cov, known, visits, filled[rows])
    draws = conditional_draw(rng, own.mean, own.cov, known, visits, filled[rows])
    if method.kind == "special_pattern":
        key = (arm, method.donor)
        if key not in context.shifts:
            context.shifts[key] = _pattern_shift(observed, arms == arm, donors, method.donor, own.mean, arm)
        draws = draws + context.shifts[key]
    return draws


def _pattern_shift(observed: np.ndarray, arm_rows: np.ndarray, donors: DonorIndex, cause: IceCause,
                   own_mean: np.ndarray, arm: int) -> float:
    """mean departure of the donor pattern from the arm mean at the donors' last observed visit"""
    ice_visit = donors.cause_visit[:, cause.index]
    rows = np.flatnonzero(arm_rows & (ice_visit != NEVER))
    rows = rows[~np.isnan(observed[rows, ice_visit[rows]])] if rows.size else rows
    if rows.size == 0:
        raise ImputationError(f"no {cause.value} donors for special_pattern (arm {arm})")
    last = observed[rows, ice_visit[rows]]
    return math.fsum(last - own_mean[ice_visit[rows]]) / rows.size


# pooling ------------------------------------------------------------------------------

@dataclass(frozen=True)
class PooledEstimate:
    point: float
    within_var: float
    between_var: float
    total_var: float
    df: float
    ci: Tuple[float, float]
    m: int

    @property
    def se(self) -> float:
        return math.sqrt(self.total_var) if self.total_var >= 0.0 else math.nan

    @property
    def p_value(self) -> float:
        """two-sided test of zero effect on the t(df) reference"""
        if math.isnan(self.total_var):
            return math.nan
        if self.total_var == 0.0:
            return 0.0 if self.point != 0.0 else 1.0
        statistic = abs(self.point) / self.se
        if math.isinf(self.df):
            return float(2.0 * stats.norm.sf(statistic))
        return float(2.0 * stats.t.sf(statistic, self.df))

    def covers(self, truth: float) -> bool:
        return self.ci[0] <= truth <= self.ci[1]


def barnard_rubin_df(m: int, within: float, between: float, df_complete: float = math.inf) -> float:
    """small-sample degrees of freedom of the pooled estimate"""
    total = within + (1.0 + 1.0 / m) * between
    if total == 0.0:
        return df_complete
    fraction = (1.0 + 1.0 / m) * between / total
    df_old = math.inf if fraction == 0.0 else (m - 1) / fraction ** 2
    if math.isinf(df_complete):
        return df_old
    df_observed = (df_complete + 1.0) / (df_complete + 3.0) * df_complete * (1.0 - fraction)
    if math.isinf(df_old):
        return df_observed
    return df_old * df_observed / (df_old + df_observed)


def pool(estimates: Sequence[Tuple[float, float]], df_complete: float = math.inf,
         alpha: float = ALPHA) -> PooledEstimate:
    """Rubin's rules over m (point, variance) pairs"""
    m = len(estimates)
    if m < 2:
        raise ValueError(f"pooling needs m >= 2 estimates, got {m}")
    points = np.array([point for point, _ in estimates], dtype=float)
    variances = np.array([variance for _, variance in estimates], dtype=float)
    point = math.fsum(points) / m
    within = math.fsum(variances) / m
    between = math.fsum((points - point) ** 2) / (m - 1)
    total = within + (1.0 + 1.0 / m) * between
    if math.isnan(total):
        return PooledEstimate(point, within, between, total, math.nan, (math.nan, math.nan), m)
    df = barnard_rubin_df(m, within, between, df_complete)
    quantile = stats.norm.ppf(1.0 - alpha / 2.0) if math.isinf(df) else stats.t.ppf(1.0 - alpha / 2.0, df)
    half_width = float(quantile) * math.sqrt(total)
    return PooledEstimate(point, within, between, total, df, (point - half_width, point + half_width), m)
