"""
generation of counterfactual patient trajectories, per-arm ICE processes and
the observed dataset under the actual assignment
"""
from __future__ import annotations

import inspect
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import statsmodels.api as sm
from scipy.special import expit

from estlab_config import ScenarioConfig
from estlab_defaults import NON_ICE_REASON, STREAM_REPLICATE, SUCCESS
from estlab_logging import log_info
from estlab_model import (CAUSES, KINDS, NO_EVENT, ActualPolicy, AssignedFull, DynamicRule, EventKind,
                          IceEvent, MissingnessClass, NoTreatment, ObservedCell, PartialUntil, PatientRecord,
                          PotentialTrajectory, washout_mean)

MODULE_NAME = Path(__file__).resolve().name

NEVER = np.iinfo(np.int64).max // 2


def derive_stream(seed: int, *keys: int) -> np.random.SeedSequence:
    """independent, order-free stream for (seed, keys)"""
    return np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(key) for key in keys))


def child_stream(stream: np.random.SeedSequence, *keys: int) -> np.random.SeedSequence:
    """child of a stream without mutating its spawn counter"""
    return np.random.SeedSequence(entropy=stream.entropy, spawn_key=tuple(stream.spawn_key) + tuple(keys))


@dataclass
class ArmHistory:
    """counterfactual ICE process and trajectories of one arm, all (n, V) or (n,)"""
    event_cause: np.ndarray
    event_kind: np.ndarray
    actual_mean: np.ndarray
    withdrawn_at: np.ndarray
    death_at: np.ndarray

    @property
    def first_event(self) -> np.ndarray:
        """T_i(a), 0 for patients without an event"""
        has_event = self.event_cause != NO_EVENT
        first = np.argmax(has_event, axis=1)
        return np.where(has_event.any(axis=1), first, 0)

    @property
    def indicator(self) -> np.ndarray:
        """Δ_i(a)"""
        return (self.event_cause != NO_EVENT).any(axis=1).astype(int)


@dataclass
class PatientBlock:
    """struct-of-arrays view of many patients (replicate or oracle block)"""
    config: ScenarioConfig
    residual: np.ndarray
    arms: Dict[int, ArmHistory]
    ps_variable: np.ndarray
    assigned: Optional[np.ndarray] = None
    observed: Optional[np.ndarray] = None
    reason: Optional[np.ndarray] = None
    replicate: int = 0

    @property
    def size(self) -> int:
        return self.residual.shape[0]

    @property
    def baseline(self) -> np.ndarray:
        return self.config.baseline_mean + self.residual[:, 0]

    def full_mean(self, arm: int) -> np.ndarray:
        return np.broadcast_to(self.config.mean_matrix[arm], self.residual.shape)

    def no_treatment_mean(self) -> np.ndarray:
        return np.broadcast_to(self.config.no_treatment_vector, self.residual.shape)

    def partial_mean(self, arm: int, stop: np.ndarray) -> np.ndarray:
        """PartialUntil(arm, stop) means, stop = 0 means no stop (AssignedFull)"""
        visits = np.arange(self.config.n_visits)
        stop = np.asarray(stop)[:, None]
        stopped = (stop > 0) & (visits[None, :] > stop)
        power = np.where(stopped, visits[None, :] - stop, 0)
        factor = np.where(stopped, self.config.washout ** power, 1.0)
        return washout_mean(self.full_mean(arm), self.no_treatment_mean(), factor)

    def intermediate(self, arm: int) -> np.ndarray:
        """Z_i(a)(t) for t = 1..T: AssignedFull(a) value at t - 1"""
        full = self.full_mean(arm) + self.residual
        return full[:, :-1]

    def dynamic_rule_mean(self, arm: int, threshold: float) -> np.ndarray:
        """DynamicRule(arm, δ): rescue from the first visit whose Z exceeds δ"""
        z_values = self.intermediate(arm)
        triggered = np.cumsum(z_values > threshold, axis=1) > 0
        rescued = np.concatenate([np.zeros((self.size, 1), dtype=bool), triggered], axis=1)
        mean = np.array(self.full_mean(arm))
        return np.where(rescued, mean + self.config.rescue_effect, mean)

    def values(self, mean: np.ndarray, rows: Optional[np.ndarray] = None) -> np.ndarray:
        """mean part plus the patients' residuals; rows selects the patients mean belongs to"""
        residual = self.residual if rows is None else self.residual[rows]
        if np.shape(mean) != residual.shape:
            raise ValueError(f"mean of shape {np.shape(mean)} does not match residuals {residual.shape}")
        return mean + residual


def _arm_history(config: ScenarioConfig, arm: int, residual: np.ndarray, draws: dict) -> ArmHistory:
    """sequential ICE process of one arm evaluated on its own latent trajectory"""
    n = residual.shape[0]
    n_visits = config.n_visits
    final_visit = config.final_visit
    mu = config.mean_matrix[arm]
    nu = config.no_treatment_vector
    washout = config.washout
    event_cause = np.full((n, n_visits), NO_EVENT, dtype=int)
    event_kind = np.full((n, n_visits), NO_EVENT, dtype=int)
    stopped_at = np.full(n, NEVER, dtype=np.int64)
    pause_from = np.full(n, NEVER, dtype=np.int64)
    pause_to = np.full(n, -1, dtype=np.int64)
    rescued_at = np.full(n, NEVER, dtype=np.int64)
    withdrawn_at = np.full(n, NEVER, dtype=np.int64)
    death_at = np.full(n, NEVER, dtype=np.int64)
    fired = np.zeros((n, len(CAUSES)), dtype=bool)

    def mean_at(visit: int) -> np.ndarray:
        stopped = stopped_at < visit
        paused = (pause_from < visit) & (visit <= pause_to)
        since = np.where(stopped, visit - np.minimum(stopped_at, visit), visit - np.minimum(pause_from, visit))
        factor = np.where(stopped | paused, washout ** since, 1.0)
        mean = washout_mean(mu[visit], nu[visit], factor)
        return np.where(rescued_at < visit, mean + config.rescue_effect, mean)

    for visit in range(1, final_visit):
        latent = mean_at(visit) + residual[:, visit]
        free = (withdrawn_at == NEVER) & (death_at == NEVER)
        for cause in CAUSES:
            hazard = config.hazard(cause)
            if hazard.is_zero or (cause.is_pandemic and not config.in_pandemic(visit)):
                continue
            col = cause.index
            eligible = free & ~fired[:, col]
            if hazard.kind is EventKind.Discontinuation:
                eligible &= stopped_at == NEVER
            elif hazard.kind is EventKind.RescueStart:
                eligible &= rescued_at == NEVER
            else:
                eligible &= (stopped_at == NEVER) & ~((pause_from < visit) & (visit <= pause_to))
            prob = expit(hazard.intercept + hazard.outcome * latent + hazard.arm * arm)
            fire = eligible & (draws["ice"][:, visit - 1, col] < prob)
            if hazard.kind is EventKind.ProlongedInterruption:
                length = draws["pause"][:, visit - 1]
                fire &= length >= config.prolonged_threshold
            if not fire.any():
                continue
            fired[:, col] |= fire
            free &= ~fire
            kind = np.full(n, hazard.kind.index)
            if hazard.kind is EventKind.Discontinuation:
                stopped_at = np.where(fire, visit, stopped_at)
                withdraw = fire & (draws["withdraw"][:, visit - 1] < hazard.withdrawal_probability)
                withdrawn_at = np.where(withdraw, visit, withdrawn_at)
            elif hazard.kind is EventKind.RescueStart:
                rescued_at = np.where(fire, visit, rescued_at)
            else:
                pause_from = np.where(fire, visit, pause_from)
                pause_to = np.where(fire, visit + draws["pause"][:, visit - 1], pause_to)
            if hazard.death_probability > 0.0:
                dies = fire & (draws["death"][:, visit - 1] < hazard.death_probability)
                kind = np.where(dies, EventKind.Death.index, kind)
                death_at = np.where(dies, visit, death_at)
                withdrawn_at = np.where(dies, visit, withdrawn_at)
            event_cause[fire, visit] = col
            event_kind[fire, visit] = kind[fire]

    actual = np.column_stack([mean_at(visit) for visit in range(n_visits)])
    # visit 0 precedes treatment
    actual[:, 0] = config.baseline_mean
    return ArmHistory(event_cause, event_kind, actual, withdrawn_at, death_at)


def simulate_block(config: ScenarioConfig, n: int, stream: np.random.SeedSequence,
                   assign: bool = True, replicate: int = 0) -> PatientBlock:
    """
    draws n patients; one standardized residual vector per patient is shared by
    every regimen (rank-preserving) and ICE uniforms are shared by both arms
    """
    rng = np.random.default_rng(stream)
    n_visits = config.n_visits
    final_visit = config.final_visit
    residual = rng.standard_normal((n, n_visits)) @ config.cov_cholesky.T
    steps = max(final_visit - 1, 1)
    draws = {
        "ice": rng.random((n, steps, len(CAUSES))),
        "withdraw": rng.random((n, steps)),
        "death": rng.random((n, steps)),
        "pause": rng.integers(1, config.interruption_max_visits + 1, size=(n, steps)),
    }
    missing_draw = rng.random((n, n_visits))
    ps_noise = rng.standard_normal(n)
    assigned = None
    if assign:
        if n % 2:
            raise ValueError(f"1:1 randomization needs an even number of patients, got {n}")
        assigned = rng.permutation(np.repeat(np.array([0, 1]), n // 2))
    arms = {arm: _arm_history(config, arm, residual, draws) for arm in (0, 1)}
    full_one = config.mean_matrix[1][config.ps_visit] + residual[:, config.ps_visit]
    block = PatientBlock(
        config=config,
        residual=residual,
        arms=arms,
        ps_variable=full_one + config.ps_noise_sd * ps_noise,
        assigned=assigned,
        replicate=replicate,
    )
    if assign:
        apply_observation_model(block, missing_draw)
    return block


def _reason_codes(history: ArmHistory, rows: np.ndarray) -> np.ndarray:
    """'Cause/Kind' of the data-stopping event of each patient"""
    stop_visit = history.withdrawn_at[rows]
    codes = np.full(rows.shape[0], "", dtype=object)
    has_stop = stop_visit != NEVER
    visits = np.where(has_stop, stop_visit, 0)
    causes = history.event_cause[rows, visits]
    kinds = history.event_kind[rows, visits]
    for pos in np.flatnonzero(has_stop):
        codes[pos] = f"{CAUSES[causes[pos]].value}/{KINDS[kinds[pos]].value}"
    return codes


def apply_observation_model(block: PatientBlock, missing_draw: np.ndarray = None) -> PatientBlock:
    """
    fills the observed matrix: ActualPolicy(assigned arm) values, missing after a
    data-stopping ICE (reason carries the ICE) and at the extra MCAR rate
    """
    config = block.config
    n, n_visits = block.residual.shape
    if missing_draw is None:
        missing_draw = np.ones((n, n_visits))
    visits = np.arange(n_visits)[None, :]
    observed = np.empty((n, n_visits))
    reason = np.full((n, n_visits), "", dtype=object)
    for arm in (0, 1):
        rows = np.flatnonzero(block.assigned == arm)
        history = block.arms[arm]
        observed[rows] = block.values(history.actual_mean[rows], rows)
        after_stop = visits > history.withdrawn_at[rows][:, None]
        codes = _reason_codes(history, rows)
        reason[rows] = np.where(after_stop, codes[:, None], reason[rows])
        observed[rows] = np.where(after_stop, np.nan, observed[rows])
    extra = (missing_draw < config.extra_missingness) & (visits >= 1) & ~np.isnan(observed)
    observed = np.where(extra, np.nan, observed)
    reason = np.where(extra, NON_ICE_REASON, reason)
    block.observed = observed
    block.reason = reason
    return block


def simulate_replicate_block(config: ScenarioConfig, replicate_index: int) -> PatientBlock:
    if replicate_index < 0:
        raise ValueError(f"replicate_index must be >= 0, got {replicate_index}")
    stream = derive_stream(config.seed, STREAM_REPLICATE, replicate_index)
    return simulate_block(config, 2 * config.n_per_arm, stream, assign=True, replicate=replicate_index)


def _events(history: ArmHistory, row: int) -> tuple:
    return tuple(
        IceEvent(cause=CAUSES[history.event_cause[row, visit]], visit=int(visit),
                 kind=KINDS[history.event_kind[row, visit]])
        for visit in np.flatnonzero(history.event_cause[row] != NO_EVENT)
    )


def block_records(block: PatientBlock, logger=None) -> List[PatientRecord]:
    """per-patient PatientRecord views of a block"""
    method = f"{inspect.currentframe().f_code.co_name}()"
    config = block.config
    records = []
    no_treatment = block.values(block.no_treatment_mean())
    full = {arm: block.values(block.full_mean(arm)) for arm in (0, 1)}
    actual = {arm: block.values(block.arms[arm].actual_mean) for arm in (0, 1)}
    dynamic = {arm: block.values(block.dynamic_rule_mean(arm, config.dtr_threshold)) for arm in (0, 1)}
    first = {arm: block.arms[arm].first_event for arm in (0, 1)}
    intermediate = {arm: block.intermediate(arm) for arm in (0, 1)}
    partial = {arm: block.values(block.partial_mean(arm, first[arm])) for arm in (0, 1)}
    for row in range(block.size):
        trajectories = {NoTreatment(): PotentialTrajectory(NoTreatment(), tuple(float(v) for v in no_treatment[row]))}
        for arm in (0, 1):
            for regimen, values in ((AssignedFull(arm), full[arm][row]),
                                    (ActualPolicy(arm), actual[arm][row]),
                                    (DynamicRule(arm, config.dtr_threshold), dynamic[arm][row])):
                trajectories[regimen] = PotentialTrajectory(regimen, tuple(float(v) for v in values))
            stop = int(first[arm][row])
            if stop > 0:
                regimen = PartialUntil(arm, stop)
                trajectories[regimen] = PotentialTrajectory(regimen, tuple(float(v) for v in partial[arm][row]))
        observed = ()
        if block.observed is not None:
            observed = tuple(
                ObservedCell(None if math.isnan(value) else float(value), str(reason))
                for value, reason in zip(block.observed[row], block.reason[row])
            )
        records.append(PatientRecord(
            id=row,
            baseline_covariate=float(block.baseline[row]),
            assigned_arm=int(block.assigned[row]) if block.assigned is not None else 0,
            trajectories=trajectories,
            ice_history={arm: _events(block.arms[arm], row) for arm in (0, 1)},
            intermediate={arm: tuple(float(v) for v in intermediate[arm][row]) for arm in (0, 1)},
            ps_variable=float(block.ps_variable[row]),
            observed=observed,
            replicate=block.replicate,
        ))
    if logger:
        log_info(logger=logger, msg=f"{method} {SUCCESS} {len(records)} patient record(s)")
    return records


def generate_patient(config: ScenarioConfig, stream: np.random.SeedSequence, arm: int = 0) -> PatientRecord:
    """single patient assigned to arm, observed columns filled"""
    block = simulate_block(config, 1, stream, assign=False)
    block.assigned = np.array([arm])
    rng = np.random.default_rng(child_stream(stream, 1))
    apply_observation_model(block, rng.random((1, config.n_visits)))
    return block_records(block)[0]


def generate_replicate(config: ScenarioConfig, replicate_index: int, logger=None) -> List[PatientRecord]:
    """2 * n_per_arm patients, 1:1 randomization, stream derived from (seed, replicate_index)"""
    return block_records(simulate_replicate_block(config, replicate_index), logger=logger)


# missingness mechanisms -------------------------------------------------------

def classify_mechanism(config: ScenarioConfig) -> MissingnessClass:
    """
    label of the missingness induced by the scenario: hazards on the current
    latent value are MAR while that value is always observed and MNAR once
    extra missingness can hide it
    """
    data_stopping = [
        config.hazard(cause) for cause in CAUSES
        if not config.hazard(cause).is_zero
        and (config.hazard(cause).withdrawal_probability > 0.0 or config.hazard(cause).death_probability > 0.0)
    ]
    if any(hazard.outcome != 0.0 for hazard in data_stopping):
        return MissingnessClass.MNAR if config.extra_missingness > 0.0 else MissingnessClass.MAR
    if any(hazard.arm != 0.0 for hazard in data_stopping):
        return MissingnessClass.CovMAR
    return MissingnessClass.MCAR


def mar_diagnostic(block: PatientBlock) -> Dict[str, float]:
    """
    pooled discrete-time check of MAR: among patients observed at visit t, the
    dropout-after-t indicator is regressed on arm, the observed history and the
    unobserved innovation of visit t+1; under MAR the innovation coefficient is 0
    """
    config = block.config
    cov = config.cov_matrix
    rows_x, rows_y = [], []
    for visit in range(1, config.final_visit):
        at_risk = ~np.isnan(block.observed[:, visit]) & ~np.isnan(block.observed[:, :visit + 1]).any(axis=1)
        if not at_risk.any():
            continue
        drop = np.isnan(block.observed[:, visit + 1]) & (block.reason[:, visit + 1] != NON_ICE_REASON)
        past = slice(0, visit + 1)
        weights = np.linalg.solve(cov[past, past], cov[past, visit + 1])
        innovation = block.residual[:, visit + 1] - block.residual[:, past] @ weights
        design = np.column_stack([block.assigned, block.observed[:, visit], block.observed[:, 0],
                                  np.full(block.size, visit), innovation])
        rows_x.append(design[at_risk])
        rows_y.append(drop[at_risk].astype(float))
    exog = sm.add_constant(np.vstack(rows_x), has_constant="add")
    fit = sm.OLS(np.concatenate(rows_y), exog).fit(cov_type="HC1")
    return {"coefficient": float(fit.params[-1]), "t_value": float(fit.tvalues[-1]),
            "p_value": float(fit.pvalues[-1]), "n": int(exog.shape[0])}


def block_to_frame(block: PatientBlock) -> pd.DataFrame:
    """long patient-visit frame in the documented column order"""
    n, n_visits = block.observed.shape
    history = {arm: block.arms[arm] for arm in (0, 1)}
    cause = np.where(block.assigned[:, None] == 1, history[1].event_cause, history[0].event_cause)
    kind = np.where(block.assigned[:, None] == 1, history[1].event_kind, history[0].event_kind)
    cause_names = np.array([c.value for c in CAUSES] + [""], dtype=object)
    kind_names = np.array([k.value for k in KINDS] + [""], dtype=object)
    return pd.DataFrame({
        "replicate": np.full(n * n_visits, block.replicate),
        "patient": np.repeat(np.arange(n), n_visits),
        "arm": np.repeat(block.assigned, n_visits),
        "visit": np.tile(np.arange(n_visits), n),
        "observed_value": block.observed.ravel(),
        "missing_reason": block.reason.ravel(),
        "ice_cause": cause_names[cause.ravel()],
        "ice_kind": kind_names[kind.ravel()],
    })


def records_frame(records: Sequence[PatientRecord]) -> pd.DataFrame:
    """same layout as block_to_frame() built from PatientRecord objects"""
    rows = []
    for record in records:
        events = {event.visit: event for event in record.ice_history.get(record.assigned_arm, ())}
        for visit, cell in enumerate(record.observed):
            event = events.get(visit)
            rows.append({
                "replicate": record.replicate,
                "patient": record.id,
                "arm": record.assigned_arm,
                "visit": visit,
                "observed_value": np.nan if cell.missing else cell.value,
                "missing_reason": cell.reason,
                "ice_cause": event.cause.value if event else "",
                "ice_kind": event.kind.value if event else "",
            })
    return pd.DataFrame(rows)
