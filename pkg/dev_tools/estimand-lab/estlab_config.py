"""
helper module for scenario configuration ('.toml') loading and validation
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
from __future__ import annotations

import inspect
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
import toml

from estlab_defaults import SUCCESS, FAILURE
from estlab_errors import ConfigError
from estlab_logging import log_exception, log_info
from estlab_model import CAUSES, EventKind, IceCause, VisitSchedule

MODULE_NAME = Path(__file__).resolve().name
CWD_PATH = Path(__file__).resolve().parent
CONFIG_PATH = Path(CWD_PATH, "config")

# section -> allowed keys, None marks the per-cause table
SCHEMA = {
    "scenario": {"name", "n_per_arm", "seed", "visits"},
    "baseline": {"mean", "sd"},
    "means": {"arm0", "arm1", "no_treatment"},
    "residual": {"cov", "sd", "correlation"},
    "treatment": {"washout", "rescue_effect"},
    "ice": None,
    "pandemic": {"start", "end"},
    "interruption": {"max_visits", "prolonged_threshold"},
    "missingness": {"extra"},
    "dynamic_rule": {"threshold"},
    "principal_stratum": {"threshold", "visit", "noise_sd"},
}
HAZARD_KEYS = {"intercept", "outcome", "arm", "kind", "withdrawal_probability", "death_probability"}
DEFAULT_KINDS = {
    IceCause.AeNormal: EventKind.Discontinuation,
    IceCause.AePandemic: EventKind.Discontinuation,
    IceCause.LackOfEfficacy: EventKind.RescueStart,
    IceCause.AdminDocumented: EventKind.Discontinuation,
    IceCause.AdminLostToFollowUp: EventKind.Discontinuation,
    IceCause.PandemicControl: EventKind.ProlongedInterruption,
}
ALLOWED_KINDS = (EventKind.Discontinuation, EventKind.RescueStart, EventKind.ProlongedInterruption)


@dataclass(frozen=True)
class IceHazard:
    """discrete-time logistic hazard: expit(intercept + outcome * y_t + arm * a)"""
    intercept: float = -math.inf
    outcome: float = 0.0
    arm: float = 0.0
    kind: EventKind = EventKind.Discontinuation
    withdrawal_probability: float = 0.0
    death_probability: float = 0.0

    @property
    def is_zero(self) -> bool:
        return self.intercept == -math.inf


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    n_per_arm: int
    seed: int
    schedule: VisitSchedule
    baseline_mean: float
    arm_means: Tuple[Tuple[float, ...], Tuple[float, ...]]
    no_treatment_means: Tuple[float, ...]
    residual_cov: Tuple[Tuple[float, ...], ...]
    washout: float = 0.5
    rescue_effect: float = 0.0
    ice_hazards: Dict[IceCause, IceHazard] = field(default_factory=dict)
    pandemic_window: Optional[Tuple[int, int]] = None
    extra_missingness: float = 0.0
    interruption_max_visits: int = 1
    prolonged_threshold: int = 1
    dtr_threshold: float = math.inf
    ps_threshold: float = -math.inf
    ps_visit: int = 1
    ps_noise_sd: float = 0.0

    @property
    def final_visit(self) -> int:
        return self.schedule.final_visit

    @property
    def n_visits(self) -> int:
        return len(self.schedule)

    @cached_property
    def mean_matrix(self) -> np.ndarray:
        """rows: arm 0, arm 1; columns: visits 0..T (visit 0 = baseline mean)"""
        return np.array([[self.baseline_mean, *means] for means in self.arm_means], dtype=float)

    @cached_property
    def no_treatment_vector(self) -> np.ndarray:
        return np.array([self.baseline_mean, *self.no_treatment_means], dtype=float)

    @cached_property
    def cov_matrix(self) -> np.ndarray:
        return np.array(self.residual_cov, dtype=float)

    @cached_property
    def cov_cholesky(self) -> np.ndarray:
        return np.linalg.cholesky(self.cov_matrix)

    def hazard(self, cause: IceCause) -> IceHazard:
        return self.ice_hazards.get(cause, IceHazard(kind=DEFAULT_KINDS[cause]))

    def in_pandemic(self, visit: int) -> bool:
        if self.pandemic_window is None:
            return False
        return self.pandemic_window[0] <= visit <= self.pandemic_window[1]

    def with_updates(self, **changes) -> "ScenarioConfig":
        """validated copy with some fields replaced"""
        updated = replace(self, **changes)
        validate_scenario(updated)
        return updated


def _float_list(section: str, key: str, value, length: int) -> Tuple[float, ...]:
    if not isinstance(value, list) or len(value) != length:
        raise ConfigError(f"[{section}] {key}: expected a list of {length} numbers, got {value!r}")
    try:
        return tuple(float(item) for item in value)
    except (TypeError, ValueError) as ex:
        raise ConfigError(f"[{section}] {key}: non-numeric entry in {value!r}") from ex


def _number(section: str, key: str, value, kind=float):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"[{section}] {key}: expected a number, got {value!r}")
    if kind is int:
        if isinstance(value, float) and not value.is_integer():
            raise ConfigError(f"[{section}] {key}: expected an integer, got {value!r}")
        return int(value)
    return float(value)


def _probability(section: str, key: str, value) -> float:
    prob = _number(section, key, value)
    if not 0.0 <= prob <= 1.0:
        raise ConfigError(f"[{section}] {key}: probability {prob} outside [0, 1]")
    return prob


def _check_keys(raw: dict) -> None:
    for section, body in raw.items():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        if not isinstance(body, dict):
            raise ConfigError(f"[{section}] must be a table")
        allowed = SCHEMA[section]
        if allowed is None:
            for cause_name, table in body.items():
                if cause_name not in IceCause.__members__:
                    raise ConfigError(f"unknown ICE cause [ice.{cause_name}]")
                unknown = sorted(set(table) - HAZARD_KEYS)
                if unknown:
                    raise ConfigError(f"[ice.{cause_name}] unknown key(s): {unknown}")
            continue
        unknown = sorted(set(body) - allowed)
        if unknown:
            raise ConfigError(f"[{section}] unknown key(s): {unknown}")


def _residual_cov(raw: dict, n_visits: int) -> Tuple[Tuple[float, ...], ...]:
    section = raw.get("residual")
    if not section:
        raise ConfigError("[residual] section is required")
    if "cov" in section:
        if "sd" in section or "correlation" in section:
            raise ConfigError("[residual] give either cov or sd + correlation, not both")
        rows = section["cov"]
        if not isinstance(rows, list) or len(rows) != n_visits:
            raise ConfigError(f"[residual] cov: expected {n_visits} rows")
        return tuple(_float_list("residual", "cov", row, n_visits) for row in rows)
    sds = np.array(_float_list("residual", "sd", section.get("sd"), n_visits))
    rho = _number("residual", "correlation", section.get("correlation", 0.0))
    corr = np.full((n_visits, n_visits), rho)
    np.fill_diagonal(corr, 1.0)
    cov = corr * np.outer(sds, sds)
    return tuple(tuple(float(val) for val in row) for row in cov)


def _hazards(raw: dict) -> Dict[IceCause, IceHazard]:
    hazards = {}
    for cause_name, table in raw.get("ice", {}).items():
        cause = IceCause(cause_name)
        section = f"ice.{cause_name}"
        kind_name = table.get("kind", DEFAULT_KINDS[cause].value)
        if kind_name not in {kind.value for kind in ALLOWED_KINDS}:
            raise ConfigError(f"[{section}] kind must be one of {[k.value for k in ALLOWED_KINDS]}")
        kind = EventKind(kind_name)
        withdrawal = _probability(section, "withdrawal_probability", table.get("withdrawal_probability", 0.0))
        if cause is IceCause.AdminLostToFollowUp:
            if "withdrawal_probability" in table and withdrawal != 1.0:
                raise ConfigError(f"[{section}] lost to follow-up always ends data collection")
            withdrawal = 1.0
        if withdrawal > 0.0 and kind is not EventKind.Discontinuation:
            raise ConfigError(f"[{section}] withdrawal_probability needs kind Discontinuation")
        death = _probability(section, "death_probability", table.get("death_probability", 0.0))
        if death > 0.0 and not cause.is_adverse_event:
            raise ConfigError(f"[{section}] death_probability is only allowed for AE causes")
        hazards[cause] = IceHazard(
            intercept=_number(section, "intercept", table.get("intercept", -math.inf)),
            outcome=_number(section, "outcome", table.get("outcome", 0.0)),
            arm=_number(section, "arm", table.get("arm", 0.0)),
            kind=kind,
            withdrawal_probability=withdrawal,
            death_probability=death,
        )
    return hazards


def validate_scenario(config: ScenarioConfig) -> None:
    """invariant checks shared by file loading and programmatic construction"""
    n_visits = config.n_visits
    final_visit = config.final_visit
    if config.n_per_arm < 1:
        raise ConfigError(f"n_per_arm must be >= 1, got {config.n_per_arm}")
    if not 0 <= config.seed < 2**64:
        raise ConfigError(f"seed must be a 64-bit unsigned integer, got {config.seed}")
    for arm, means in enumerate(config.arm_means):
        if len(means) != final_visit:
            raise ConfigError(f"means.arm{arm}: expected {final_visit} values, got {len(means)}")
    if len(config.no_treatment_means) != final_visit:
        raise ConfigError(f"means.no_treatment: expected {final_visit} values")
    cov = np.array(config.residual_cov, dtype=float)
    if cov.shape != (n_visits, n_visits) or not np.allclose(cov, cov.T):
        raise ConfigError(f"residual covariance must be a symmetric {n_visits}x{n_visits} matrix")
    try:
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as ex:
        raise ConfigError("residual covariance is not positive definite") from ex
    if not 0.0 <= config.washout <= 1.0:
        raise ConfigError(f"washout must lie in [0, 1], got {config.washout}")
    if not 0.0 <= config.extra_missingness <= 1.0:
        raise ConfigError(f"missingness.extra must lie in [0, 1], got {config.extra_missingness}")
    if config.pandemic_window is not None:
        start, end = config.pandemic_window
        if not 1 <= start <= end <= final_visit:
            raise ConfigError(f"pandemic window [{start}, {end}] outside visits 1..{final_visit}")
    if config.interruption_max_visits < 1 or config.prolonged_threshold < 1:
        raise ConfigError("interruption lengths must be >= 1 visit")
    if not 1 <= config.ps_visit <= final_visit:
        raise ConfigError(f"principal_stratum.visit must lie in 1..{final_visit}")
    if config.ps_noise_sd < 0.0:
        raise ConfigError("principal_stratum.noise_sd must be >= 0")
    for cause, hazard in config.ice_hazards.items():
        if math.isnan(hazard.intercept) or hazard.intercept == math.inf and hazard.outcome != 0.0:
            raise ConfigError(f"[ice.{cause.value}] an infinite intercept needs outcome = 0")


def parse_scenario(raw: dict, name: str = "scenario") -> ScenarioConfig:
    """builds a ScenarioConfig from the parsed '.toml' dictionary"""
    _check_keys(raw)
    scenario = raw.get("scenario", {})
    final_visit = _number("scenario", "visits", scenario.get("visits", 0), int)
    if final_visit < 1:
        raise ConfigError("[scenario] visits must be >= 1")
    n_visits = final_visit + 1
    means = raw.get("means", {})
    for key in ("arm0", "arm1", "no_treatment"):
        if key not in means:
            raise ConfigError(f"[means] {key} is required")
    baseline = raw.get("baseline", {})
    if "mean" not in baseline:
        raise ConfigError("[baseline] mean is required")
    residual_cov = _residual_cov(raw, n_visits)
    if "sd" in baseline:
        baseline_sd = _number("baseline", "sd", baseline["sd"])
        if not math.isclose(baseline_sd, math.sqrt(residual_cov[0][0]), rel_tol=1e-9):
            raise ConfigError("[baseline] sd disagrees with the visit-0 residual variance")
    pandemic = raw.get("pandemic")
    window = None
    if pandemic:
        window = (_number("pandemic", "start", pandemic.get("start"), int),
                  _number("pandemic", "end", pandemic.get("end"), int))
    interruption = raw.get("interruption", {})
    stratum = raw.get("principal_stratum", {})
    try:
        config = ScenarioConfig(
            name=str(scenario.get("name", name)),
            n_per_arm=_number("scenario", "n_per_arm", scenario.get("n_per_arm", 100), int),
            seed=_number("scenario", "seed", scenario.get("seed", 0), int),
            schedule=VisitSchedule.of_length(final_visit),
            baseline_mean=_number("baseline", "mean", baseline["mean"]),
            arm_means=(_float_list("means", "arm0", means["arm0"], final_visit),
                       _float_list("means", "arm1", means["arm1"], final_visit)),
            no_treatment_means=_float_list("means", "no_treatment", means["no_treatment"], final_visit),
            residual_cov=residual_cov,
            washout=_number("treatment", "washout", raw.get("treatment", {}).get("washout", 0.5)),
            rescue_effect=_number("treatment", "rescue_effect", raw.get("treatment", {}).get("rescue_effect", 0.0)),
            ice_hazards=_hazards(raw),
            pandemic_window=window,
            extra_missingness=_number("missingness", "extra", raw.get("missingness", {}).get("extra", 0.0)),
            interruption_max_visits=_number("interruption", "max_visits", interruption.get("max_visits", 1), int),
            prolonged_threshold=_number("interruption", "prolonged_threshold",
                                        interruption.get("prolonged_threshold", 1), int),
            dtr_threshold=_number("dynamic_rule", "threshold", raw.get("dynamic_rule", {}).get("threshold", math.inf)),
            ps_threshold=_number("principal_stratum", "threshold", stratum.get("threshold", -math.inf)),
            ps_visit=_number("principal_stratum", "visit", stratum.get("visit", 1), int),
            ps_noise_sd=_number("principal_stratum", "noise_sd", stratum.get("noise_sd", 0.0)),
        )
    except ValueError as ex:
        raise ConfigError(str(ex)) from ex
    validate_scenario(config)
    return config


def load_scenario(config_path: Path, logger=None) -> ScenarioConfig:
    """extracts and validates a scenario from a '.toml' config file."""
    method = f"{inspect.currentframe().f_code.co_name}()"
    config_path = Path(config_path)
    try:
        if not (config_path.is_file() and config_path.stat().st_size > 0):
            raise ConfigError(f"scenario file not found or empty: {config_path}")
        raw = toml.load(config_path)
        config = parse_scenario(raw, name=config_path.stem)
        log_info(logger=logger, msg=f"{method} {SUCCESS} {config_path.name} ({config.name})")
        return config
    except toml.TomlDecodeError as ex:
        log_exception(logger=logger, error_msg=f"{method} {FAILURE} {config_path.name}")
        raise ConfigError(f"{config_path.name}: {ex}") from ex
    except ConfigError:
        log_exception(logger=logger, error_msg=f"{method} {FAILURE} {config_path.name}")
        raise


def scenario_hazard_table(config: ScenarioConfig) -> Dict[str, dict]:
    """plain-data view of the hazards (manifest / debugging output)"""
    return {
        cause.value: {
            "intercept": config.hazard(cause).intercept,
            "outcome": config.hazard(cause).outcome,
            "arm": config.hazard(cause).arm,
            "kind": config.hazard(cause).kind.value,
            "withdrawal_probability": config.hazard(cause).withdrawal_probability,
            "death_probability": config.hazard(cause).death_probability,
        }
        for cause in CAUSES
    }
