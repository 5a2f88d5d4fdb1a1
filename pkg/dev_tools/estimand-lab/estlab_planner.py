"""
estimand spec files: parsing, canonical serialization, rule validation, the
default road map and per-cell handling decisions for observed datasets
"""
from __future__ import annotations

import inspect
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from estlab_config import DEFAULT_KINDS, ScenarioConfig
from estlab_defaults import DEFAULT_IMPUTATIONS, FAILURE, NO_POST_ICE_CAUSES, NON_ICE_REASON, SUCCESS, WARNING
from estlab_errors import PlanResolutionError, SpecParseError
from estlab_logging import log_exception, log_info, log_warning
from estlab_model import CAUSES, KINDS, NO_EVENT, CompositeEndpoint, EventDescriptor, EventKind, IceCause, IceEvent

MODULE_NAME = Path(__file__).resolve().name

STRATEGY_KINDS = ("CDH", "NTH", "PTH", "TreatmentPolicy", "DTR", "Composite", "PrincipalStratum")
METHOD_KINDS = ("mar", "return_to_baseline", "retrieved_dropout", "jump_to_reference", "copy_reference",
                "special_pattern")
METHOD_NAMES = {
    "mar": "MarMI",
    "return_to_baseline": "ReturnToBaseline",
    "retrieved_dropout": "RetrievedDropout",
    "jump_to_reference": "JumpToReference",
    "copy_reference": "CopyReference",
    "special_pattern": "SpecialPattern",
}
POPULATIONS = ("all_randomized", "baseline_subset", "principal_stratum")
ENDPOINTS = ("continuous_change", "composite")
SUMMARIES = {"continuous_change": "difference_in_means", "composite": "difference_in_proportions"}

ESTIMAND_KEYS = ("name", "population", "baseline_lower", "baseline_upper", "ps_threshold", "endpoint", "summary",
                 "reference_arm", "reference_is_placebo", "pragmatic", "loe_prior_visits_collected",
                 "imputations", "death_deltas")
COMPOSITE_KEYS = ("measure", "threshold", "direction", "failure_events")
SECTIONS = ("estimand", "regimen", "strategy", "imputation", "composite")

NON_ICE_KEY = (None, NON_ICE_REASON)


# value types ----------------------------------------------------------------

@dataclass(frozen=True)
class EstimandStrategy:
    kind: str
    threshold: Optional[float] = None
    inner: Optional["EstimandStrategy"] = None

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ValueError(f"unknown strategy '{self.kind}'")
        if self.kind in ("DTR", "PrincipalStratum") and self.threshold is None:
            raise ValueError(f"{self.kind} needs a threshold")
        if self.kind == "PrincipalStratum":
            if self.inner is None or self.inner.kind == "PrincipalStratum":
                raise ValueError("PrincipalStratum wraps exactly one non-PrincipalStratum strategy")
        elif self.inner is not None:
            raise ValueError(f"{self.kind} takes no inner strategy")

    @property
    def label(self) -> str:
        if self.kind == "DTR":
            return f"DTR({self.threshold!r})"
        if self.kind == "PrincipalStratum":
            return f"PrincipalStratum({self.threshold!r}, {self.inner.label})"
        return self.kind

    @classmethod
    def parse(cls, text: str) -> "EstimandStrategy":
        text = text.strip()
        if text in ("CDH", "NTH", "PTH", "TreatmentPolicy", "Composite"):
            return cls(text)
        match = re.fullmatch(r"DTR\(\s*([^()]+?)\s*\)", text)
        if match:
            return cls("DTR", threshold=float(match.group(1)))
        match = re.fullmatch(r"PrincipalStratum\(\s*([^,()]+?)\s*,\s*(.+?)\s*\)", text)
        if match:
            return cls("PrincipalStratum", threshold=float(match.group(1)), inner=cls.parse(match.group(2)))
        raise ValueError(f"malformed strategy '{text}'")

    def __str__(self) -> str:
        return self.label


CDH = EstimandStrategy("CDH")
NTH = EstimandStrategy("NTH")
PTH = EstimandStrategy("PTH")
TREATMENT_POLICY = EstimandStrategy("TreatmentPolicy")


@dataclass(frozen=True)
class ImputationMethod:
    kind: str
    donor: Optional[IceCause] = None
    delta: float = 0.0

    def __post_init__(self):
        if self.kind not in METHOD_KINDS:
            raise ValueError(f"unknown imputation method '{self.kind}'")
        if (self.kind == "special_pattern") != (self.donor is not None):
            raise ValueError("special_pattern needs a donor cause, other methods take none")
        if math.isnan(self.delta) or math.isinf(self.delta):
            raise ValueError("delta must be finite")

    @property
    def name(self) -> str:
        return METHOD_NAMES[self.kind]

    @property
    def text(self) -> str:
        text = f"special_pattern({self.donor.value})" if self.donor is not None else self.kind
        return f"{text} delta={self.delta!r}" if self.delta != 0.0 else text

    @classmethod
    def parse(cls, text: str) -> "ImputationMethod":
        tokens = text.split()
        if not tokens:
            raise ValueError("empty imputation method")
        head, options = tokens[0], tokens[1:]
        delta = 0.0
        for option in options:
            if not option.startswith("delta="):
                raise ValueError(f"unknown imputation option '{option}'")
            delta = float(option[len("delta="):])
        match = re.fullmatch(r"special_pattern\(\s*(\w+)\s*\)", head)
        if match:
            return cls("special_pattern", donor=IceCause(match.group(1)), delta=delta)
        return cls(head, delta=delta)

    def shifted(self, delta: float) -> "ImputationMethod":
        return replace(self, delta=self.delta + delta)

    def __str__(self) -> str:
        return self.text


ImputationKey = Tuple[Optional[IceCause], str]


def key_text(key: ImputationKey) -> str:
    cause, strategy = key
    return NON_ICE_REASON if cause is None else f"{cause.value}.{strategy}"


def parse_key(text: str) -> ImputationKey:
    text = text.strip()
    if text == NON_ICE_REASON:
        return NON_ICE_KEY
    cause_text, _, strategy = text.partition(".")
    if strategy not in STRATEGY_KINDS:
        raise ValueError(f"imputation key '{text}' must be <Cause>.<STRATEGY> or {NON_ICE_REASON}")
    return IceCause(cause_text), strategy


@dataclass(frozen=True)
class Population:
    kind: str = "all_randomized"
    lower: float = -math.inf
    upper: float = math.inf
    threshold: float = -math.inf

    def __post_init__(self):
        if self.kind not in POPULATIONS:
            raise ValueError(f"unknown population '{self.kind}'")
        if self.lower > self.upper:
            raise ValueError("baseline_lower must not exceed baseline_upper")

    def mask(self, baseline: np.ndarray, ps_variable: np.ndarray = None) -> np.ndarray:
        """membership of each patient"""
        if self.kind == "baseline_subset":
            return (baseline >= self.lower) & (baseline <= self.upper)
        if self.kind == "principal_stratum":
            return ps_variable > self.threshold
        return np.ones(np.shape(baseline), dtype=bool)


@dataclass(frozen=True)
class SensitivityVariant:
    name: str
    strategies: Tuple[Tuple[EventDescriptor, EstimandStrategy], ...] = ()
    imputations: Tuple[Tuple[ImputationKey, ImputationMethod], ...] = ()


@dataclass(frozen=True)
class EstimandSpec:
    name: str = "estimand"
    population: Population = Population()
    endpoint: str = "continuous_change"
    summary: str = "difference_in_means"
    composite: Optional[CompositeEndpoint] = None
    regimen: Tuple[EventDescriptor, ...] = ()
    strategies: Tuple[Tuple[EventDescriptor, EstimandStrategy], ...] = ()
    imputations: Tuple[Tuple[ImputationKey, ImputationMethod], ...] = ()
    reference_arm: int = 0
    reference_is_placebo: bool = True
    pragmatic: bool = False
    loe_prior_visits_collected: bool = False
    m: int = DEFAULT_IMPUTATIONS
    death_deltas: Tuple[float, ...] = ()
    sensitivity: Tuple[SensitivityVariant, ...] = ()

    @property
    def strategy_map(self) -> Dict[EventDescriptor, EstimandStrategy]:
        return dict(self.strategies)

    @property
    def imputation_map(self) -> Dict[ImputationKey, ImputationMethod]:
        return dict(self.imputations)

    def in_regimen(self, cause: IceCause, kind: EventKind) -> bool:
        return any(descriptor.matches(cause, kind) for descriptor in self.regimen)

    def strategy_for(self, cause: IceCause, kind: EventKind) -> Optional[EstimandStrategy]:
        """Cause/Kind entry, then Kind, then Cause; None for regimen events or no entry"""
        if self.in_regimen(cause, kind):
            return None
        strategies = self.strategy_map
        for descriptor in (EventDescriptor(cause, kind), EventDescriptor(kind=kind), EventDescriptor(cause=cause)):
            if descriptor in strategies:
                return strategies[descriptor]
        return None

    def method_for(self, cause: Optional[IceCause], strategy: Optional[EstimandStrategy]) -> ImputationMethod:
        key = NON_ICE_KEY if cause is None else (cause, strategy.kind)
        method = self.imputation_map.get(key)
        if method is None:
            raise PlanResolutionError(f"no imputation method for {key_text(key)}")
        return method

    def with_variant(self, variant: SensitivityVariant) -> "EstimandSpec":
        """spec with a sensitivity variant's overrides applied (each override replaces every key it covers)"""
        strategies = list(self.strategies)
        for descriptor, strategy in variant.strategies:
            strategies = [(key, value) for key, value in strategies if not key.within(descriptor)]
            strategies.append((descriptor, strategy))
        imputations = dict(self.imputations)
        imputations.update(dict(variant.imputations))
        return replace(self, name=f"{self.name}:{variant.name}", strategies=tuple(strategies),
                       imputations=tuple(imputations.items()), sensitivity=())

    def with_death_delta(self, delta: float) -> "EstimandSpec":
        return replace(self, name=f"{self.name}:death_delta={delta!r}", sensitivity=())


# parsing ----------------------------------------------------------------------

def _bool(text: str) -> bool:
    if text.lower() in ("true", "yes", "1"):
        return True
    if text.lower() in ("false", "no", "0"):
        return False
    raise ValueError(f"expected true or false, got '{text}'")


def _descriptors(text: str) -> Tuple[EventDescriptor, ...]:
    if text.strip().lower() in ("", "none"):
        return ()
    return tuple(EventDescriptor.parse(part) for part in text.split(","))


def _floats(text: str) -> Tuple[float, ...]:
    if text.strip().lower() in ("", "none"):
        return ()
    return tuple(float(part) for part in text.split(","))


def _estimand_value(key: str, value: str):
    if key == "name":
        if not value:
            raise ValueError("name must not be empty")
        return value
    if key == "population":
        if value not in POPULATIONS:
            raise ValueError(f"population must be one of {', '.join(POPULATIONS)}")
        return value
    if key == "endpoint":
        if value not in ENDPOINTS:
            raise ValueError(f"endpoint must be one of {', '.join(ENDPOINTS)}")
        return value
    if key == "summary":
        if value not in SUMMARIES.values():
            raise ValueError(f"summary must be one of {', '.join(SUMMARIES.values())}")
        return value
    if key in ("baseline_lower", "baseline_upper", "ps_threshold"):
        return float(value)
    if key == "reference_arm":
        arm = int(value)
        if arm not in (0, 1):
            raise ValueError("reference_arm must be 0 or 1")
        return arm
    if key in ("reference_is_placebo", "pragmatic", "loe_prior_visits_collected"):
        return _bool(value)
    if key == "imputations":
        m = int(value)
        if m < 2:
            raise ValueError("imputations must be >= 2")
        return m
    return _floats(value)


def parse_spec(text: str) -> EstimandSpec:
    """parses the line-oriented estimand spec grammar; SpecParseError carries line and column"""
    seen_sections = set()
    section = None
    variant = None
    estimand: Dict[str, object] = {}
    key_lines: Dict[str, int] = {}
    regimen: Tuple[EventDescriptor, ...] = ()
    strategies: Dict[EventDescriptor, EstimandStrategy] = {}
    imputations: Dict[ImputationKey, ImputationMethod] = {}
    composite: Dict[str, object] = {}
    variants: List[dict] = []
    seen_keys = set()

    for line_no, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.strip()
        indent = len(raw) - len(raw.lstrip()) + 1
        if not stripped or stripped.startswith("#"):
            continue
        if stripped.startswith("["):
            if not stripped.endswith("]"):
                raise SpecParseError("malformed section header", line_no, indent)
            section = stripped[1:-1].strip()
            variant = None
            if section.startswith("sensitivity."):
                name = section[len("sensitivity."):]
                if not re.fullmatch(r"[A-Za-z0-9_\-]+", name):
                    raise SpecParseError(f"malformed sensitivity name '{name}'", line_no, indent + 1)
                variant = {"name": name, "strategies": {}, "imputations": {}}
                variants.append(variant)
            elif section not in SECTIONS:
                raise SpecParseError(f"unknown section '{section}'", line_no, indent + 1)
            if section in seen_sections:
                raise SpecParseError(f"duplicate section '{section}'", line_no, indent + 1)
            seen_sections.add(section)
            continue
        if "=" not in stripped:
            raise SpecParseError("expected 'key = value'", line_no, indent)
        if section is None:
            raise SpecParseError("key outside of a section", line_no, indent)
        key, _, value = stripped.partition("=")
        key, value = key.strip(), value.strip()
        after = raw[raw.index("=") + 1:]
        value_column = raw.index("=") + 2 + len(after) - len(after.lstrip())
        if (section, key) in seen_keys:
            raise SpecParseError(f"duplicate key '{key}' in [{section}]", line_no, indent)
        seen_keys.add((section, key))
        try:
            if section == "estimand":
                if key not in ESTIMAND_KEYS:
                    raise SpecParseError(f"unknown key '{key}' in [estimand]", line_no, indent)
                estimand[key] = _estimand_value(key, value)
                key_lines[key] = line_no
            elif section == "regimen":
                if key != "part_of_regimen":
                    raise SpecParseError(f"unknown key '{key}' in [regimen]", line_no, indent)
                regimen = _descriptors(value)
            elif section == "strategy" or (variant is not None and "." not in key and key != NON_ICE_REASON):
                target = strategies if variant is None else variant["strategies"]
                try:
                    descriptor = EventDescriptor.parse(key)
                except ValueError as ex:
                    raise SpecParseError(f"unknown key '{key}': {ex}", line_no, indent) from ex
                if descriptor in target:
                    raise SpecParseError(f"duplicate strategy entry for {descriptor}", line_no, indent)
                target[descriptor] = EstimandStrategy.parse(value)
            elif section == "imputation" or variant is not None:
                target = imputations if variant is None else variant["imputations"]
                try:
                    imputation_key = parse_key(key)
                except ValueError as ex:
                    raise SpecParseError(f"unknown key '{key}': {ex}", line_no, indent) from ex
                if imputation_key in target:
                    raise SpecParseError(f"duplicate imputation entry for {key}", line_no, indent)
                target[imputation_key] = ImputationMethod.parse(value)
            else:
                if key not in COMPOSITE_KEYS:
                    raise SpecParseError(f"unknown key '{key}' in [composite]", line_no, indent)
                composite[key] = float(value) if key == "threshold" else (
                    _descriptors(value) if key == "failure_events" else value)
        except SpecParseError:
            raise
        except ValueError as ex:
            raise SpecParseError(f"malformed value for '{key}': {ex}", line_no, value_column) from ex

    endpoint = estimand.get("endpoint", "continuous_change")
    summary = estimand.get("summary", SUMMARIES[endpoint])
    if summary != SUMMARIES[endpoint]:
        raise SpecParseError(f"summary '{summary}' does not fit endpoint '{endpoint}'", key_lines["summary"])
    composite_endpoint = None
    if "composite" in seen_sections:
        if "threshold" not in composite:
            raise SpecParseError("[composite] needs a threshold", len(text.splitlines()))
        try:
            composite_endpoint = CompositeEndpoint(
                threshold=composite["threshold"],
                direction=composite.get("direction", "below"),
                measure=composite.get("measure", "change"),
                failure_events=composite.get("failure_events", ()),
            )
        except ValueError as ex:
            raise SpecParseError(str(ex), len(text.splitlines())) from ex
    if endpoint == "composite" and composite_endpoint is None:
        raise SpecParseError("endpoint 'composite' needs a [composite] section", key_lines["endpoint"])
    try:
        population = Population(
            kind=estimand.get("population", "all_randomized"),
            lower=estimand.get("baseline_lower", -math.inf),
            upper=estimand.get("baseline_upper", math.inf),
            threshold=estimand.get("ps_threshold", -math.inf),
        )
    except ValueError as ex:
        raise SpecParseError(str(ex), key_lines.get("baseline_lower", key_lines.get("population", 1))) from ex
    return EstimandSpec(
        name=estimand.get("name", "estimand"),
        population=population,
        endpoint=endpoint,
        summary=summary,
        composite=composite_endpoint,
        regimen=regimen,
        strategies=tuple(strategies.items()),
        imputations=tuple(imputations.items()),
        reference_arm=estimand.get("reference_arm", 0),
        reference_is_placebo=estimand.get("reference_is_placebo", True),
        pragmatic=estimand.get("pragmatic", False),
        loe_prior_visits_collected=estimand.get("loe_prior_visits_collected", False),
        m=estimand.get("imputations", DEFAULT_IMPUTATIONS),
        death_deltas=estimand.get("death_deltas", ()),
        sensitivity=tuple(
            SensitivityVariant(variant["name"], tuple(variant["strategies"].items()),
                               tuple(variant["imputations"].items()))
            for variant in variants
        ),
    )


def _list_text(values) -> str:
    return ", ".join(values) if values else "none"


def serialize_spec(spec: EstimandSpec) -> str:
    """canonical text, parse_spec(serialize_spec(spec)) == spec"""
    population = spec.population
    lines = [
        "[estimand]",
        f"name = {spec.name}",
        f"population = {population.kind}",
        f"baseline_lower = {population.lower!r}",
        f"baseline_upper = {population.upper!r}",
        f"ps_threshold = {population.threshold!r}",
        f"endpoint = {spec.endpoint}",
        f"summary = {spec.summary}",
        f"reference_arm = {spec.reference_arm}",
        f"reference_is_placebo = {str(spec.reference_is_placebo).lower()}",
        f"pragmatic = {str(spec.pragmatic).lower()}",
        f"loe_prior_visits_collected = {str(spec.loe_prior_visits_collected).lower()}",
        f"imputations = {spec.m}",
        f"death_deltas = {_list_text([repr(delta) for delta in spec.death_deltas])}",
        "",
        "[regimen]",
        f"part_of_regimen = {_list_text([descriptor.text for descriptor in spec.regimen])}",
        "",
        "[strategy]",
        *(f"{descriptor.text} = {strategy.label}" for descriptor, strategy in spec.strategies),
        "",
        "[imputation]",
        *(f"{key_text(key)} = {method.text}" for key, method in spec.imputations),
    ]
    if spec.composite is not None:
        composite = spec.composite
        lines += [
            "",
            "[composite]",
            f"measure = {composite.measure}",
            f"threshold = {composite.threshold!r}",
            f"direction = {composite.direction}",
            f"failure_events = {_list_text([descriptor.text for descriptor in composite.failure_events])}",
        ]
    for variant in spec.sensitivity:
        lines += ["", f"[sensitivity.{variant.name}]"]
        lines += [f"{descriptor.text} = {strategy.label}" for descriptor, strategy in variant.strategies]
        lines += [f"{key_text(key)} = {method.text}" for key, method in variant.imputations]
    return "\n".join(lines) + "\n"


def _decode_spec(raw: bytes) -> str:
    """utf-8 text of a spec file; undecodable bytes are reported by line and column"""
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError as ex:
        line = raw.count(b"\n", 0, ex.start) + 1
        column = ex.start - (raw.rfind(b"\n", 0, ex.start) + 1) + 1
        raise SpecParseError(f"not valid UTF-8 text (byte 0x{raw[ex.start]:02x})", line, column) from None


def load_spec(spec_path: Path, logger=None) -> EstimandSpec:
    """reads and parses a '.spec' file"""
    method = f"{inspect.currentframe().f_code.co_name}()"
    spec_path = Path(spec_path)
    try:
        spec = parse_spec(_decode_spec(spec_path.read_bytes()))
        log_info(logger=logger, msg=f"{method} {SUCCESS} {spec_path.name} ({spec.name})")
        return spec
    except (SpecParseError, OSError):
        log_exception(logger=logger, error_msg=f"{method} {FAILURE} {spec_path.name}")
        raise


# validation -------------------------------------------------------------------

@dataclass(frozen=True)
class ValidationIssue:
    rule: str
    message: str

    def __str__(self) -> str:
        return f"{self.rule}: {self.message}"


@dataclass(frozen=True)
class ValidationReport:
    errors: Tuple[ValidationIssue, ...] = ()
    warnings: Tuple[ValidationIssue, ...] = ()
    resolved_plan: Tuple[Tuple[str, str, str], ...] = ()
    resolved_spec: Optional[EstimandSpec] = None

    @property
    def ok(self) -> bool:
        return not self.errors

    def as_dict(self) -> dict:
        return {
            "errors": [{"rule": issue.rule, "message": issue.message} for issue in self.errors],
            "warnings": [{"rule": issue.rule, "message": issue.message} for issue in self.warnings],
            "resolved_plan": [
                {"event": event, "strategy": strategy, "imputation": imputation}
                for event, strategy, imputation in self.resolved_plan
            ],
        }

    def text(self) -> str:
        lines = [f"ERROR {issue}" for issue in self.errors] + [f"WARNING {issue}" for issue in self.warnings]
        lines.append("resolved plan:")
        lines += [f"  {event:<40} {strategy:<24} {imputation}" for event, strategy, imputation in self.resolved_plan]
        return "\n".join(lines)


def event_universe(config: ScenarioConfig = None) -> List[Tuple[IceCause, EventKind]]:
    """(cause, kind) pairs the simulator can produce for the scenario (every configurable pair without one)"""
    events = []
    for cause in CAUSES:
        if config is None:
            events.append((cause, DEFAULT_KINDS[cause]))
            if cause.is_adverse_event:
                events.append((cause, EventKind.Death))
            continue
        hazard = config.hazard(cause)
        if hazard.is_zero or (cause.is_pandemic and config.pandemic_window is None):
            continue
        events.append((cause, hazard.kind))
        if hazard.death_probability > 0.0:
            events.append((cause, EventKind.Death))
    return events


def _no_post_ice_observation(cause: IceCause, config: Optional[ScenarioConfig]) -> bool:
    if cause.value in NO_POST_ICE_CAUSES:
        return True
    if config is None:
        return False
    hazard = config.hazard(cause)
    return not hazard.is_zero and hazard.kind is EventKind.Discontinuation and hazard.withdrawal_probability >= 1.0


def _check(spec: EstimandSpec, config: Optional[ScenarioConfig], errors: list, warnings: list) -> tuple:
    universe = event_universe(config)
    # R0 circularity
    for descriptor, _ in spec.strategies:
        for declared in spec.regimen:
            if descriptor.within(declared):
                errors.append(ValidationIssue(
                    "R0", f"'{descriptor}' is part of the treatment regimen ({declared}) and cannot be an ICE"))
    strategies = [strategy for _, strategy in spec.strategies]
    for strategy in strategies:
        if strategy.kind == "Composite":
            errors.append(ValidationIssue(
                "R3", "Composite is not an ICE strategy; set endpoint = composite with failure_events instead"))
        if strategy.kind == "PrincipalStratum":
            errors.append(ValidationIssue(
                "R7", f"{strategy.label} is a population, declare population = principal_stratum instead"))
    for descriptor, strategy in spec.strategies:
        if strategy.kind == "TreatmentPolicy" and descriptor.cause is not None and descriptor.cause.is_pandemic:
            errors.append(ValidationIssue(
                "R1", f"TreatmentPolicy must not be applied to {descriptor} (pandemic-related ICE)"))
    rows = []
    used_keys = []
    for cause, kind in universe:
        label = f"{cause.value}/{kind.value}"
        if spec.in_regimen(cause, kind):
            rows.append((label, "part_of_regimen", ""))
            continue
        strategy = spec.strategy_for(cause, kind)
        if strategy is None:
            errors.append(ValidationIssue("R0", f"no strategy for {label}"))
            continue
        if strategy.kind == "TreatmentPolicy" and cause.is_pandemic:
            issue = ValidationIssue("R1", f"TreatmentPolicy must not be applied to {label} (pandemic-related ICE)")
            if not any(e.rule == "R1" and cause.value in e.message for e in errors):
                errors.append(issue)
        if strategy.kind in ("Composite", "PrincipalStratum"):
            rows.append((label, strategy.label, ""))
            continue
        key = (cause, strategy.kind)
        method = spec.imputation_map.get(key)
        if method is None:
            errors.append(ValidationIssue("R6", f"no imputation method for {key_text(key)}"))
            rows.append((label, strategy.label, ""))
            continue
        if key not in used_keys:
            used_keys.append(key)
        rows.append((label, strategy.label, method.text))
    non_ice = spec.imputation_map.get(NON_ICE_KEY)
    if non_ice is None:
        errors.append(ValidationIssue("R6", f"no imputation method for {NON_ICE_REASON} missingness"))
    else:
        rows.append((NON_ICE_REASON, "", non_ice.text))
    if any(strategy.kind == "TreatmentPolicy" for strategy in strategies) and not spec.pragmatic:
        warnings.append(ValidationIssue(
            "R2", "TreatmentPolicy should generally be avoided unless the trial is declared pragmatic"))
    for key, method in spec.imputations:
        cause = key[0]
        if method.kind == "retrieved_dropout" and cause is not None and _no_post_ice_observation(cause, config):
            warnings.append(ValidationIssue(
                "R4", f"retrieved_dropout for {key_text(key)}: {cause.value} ICEs have no post-ICE observations"))
        if method.kind in ("jump_to_reference", "copy_reference") and not spec.reference_is_placebo:
            warnings.append(ValidationIssue(
                "R8", f"{method.name} for {key_text(key)} with a reference arm that is not placebo"))
    return rows, used_keys


def _loe_sensitivity(spec: EstimandSpec) -> bool:
    for variant in spec.sensitivity:
        for key, method in variant.imputations:
            if key[0] is IceCause.LackOfEfficacy and (method.kind == "special_pattern" or method.delta != 0.0):
                return True
    return any(key[0] is IceCause.LackOfEfficacy and method.delta != 0.0 for key, method in spec.imputations)


def validate_spec(spec: EstimandSpec, config: ScenarioConfig = None) -> ValidationReport:
    """rule checks R0-R8; the scenario (optional) narrows the ICE universe and enables R4"""
    errors: List[ValidationIssue] = []
    warnings: List[ValidationIssue] = []
    rows, used_keys = _check(spec, config, errors, warnings)
    loe_cdh = any(
        strategy_label == "CDH" and event.startswith(f"{IceCause.LackOfEfficacy.value}/")
        for event, strategy_label, _ in rows
    )
    if loe_cdh and not spec.loe_prior_visits_collected and not _loe_sensitivity(spec):
        warnings.append(ValidationIssue(
            "R5", "CDH for LackOfEfficacy without guaranteed prior-visit collection: add a "
                  "special_pattern(LackOfEfficacy) or delta sensitivity variant"))
    for variant in spec.sensitivity:
        variant_errors: List[ValidationIssue] = []
        variant_warnings: List[ValidationIssue] = []
        _check(spec.with_variant(variant), config, variant_errors, variant_warnings)
        errors += [ValidationIssue(issue.rule, f"[sensitivity.{variant.name}] {issue.message}")
                   for issue in variant_errors]
        warnings += [ValidationIssue(issue.rule, f"[sensitivity.{variant.name}] {issue.message}")
                     for issue in variant_warnings if issue not in warnings]
    resolved_spec = None
    if not errors:
        resolved_spec = replace(
            spec,
            strategies=tuple(
                (EventDescriptor(cause, kind), spec.strategy_for(cause, kind))
                for cause, kind in event_universe(config) if not spec.in_regimen(cause, kind)
            ),
            imputations=tuple((key, spec.imputation_map[key]) for key in [*used_keys, NON_ICE_KEY]),
        )
    return ValidationReport(tuple(_unique(errors)), tuple(_unique(warnings)), tuple(rows), resolved_spec)


def _unique(issues: Sequence[ValidationIssue]) -> List[ValidationIssue]:
    return list(dict.fromkeys(issues))


def default_plan() -> EstimandSpec:
    """road map of ICE handling by cause, with the alternates as named sensitivity variants"""
    cause = EventDescriptor
    mar = ImputationMethod("mar")
    return EstimandSpec(
        name="default_plan",
        strategies=(
            (cause(IceCause.AeNormal), NTH),
            (cause(IceCause.AePandemic), CDH),
            (cause(IceCause.LackOfEfficacy), CDH),
            (cause(IceCause.AdminDocumented), CDH),
            (cause(IceCause.AdminLostToFollowUp), CDH),
            (cause(IceCause.PandemicControl), CDH),
        ),
        imputations=(
            ((IceCause.AeNormal, "NTH"), ImputationMethod("return_to_baseline")),
            ((IceCause.AePandemic, "CDH"), mar),
            ((IceCause.LackOfEfficacy, "CDH"), mar),
            ((IceCause.AdminDocumented, "CDH"), mar),
            ((IceCause.AdminLostToFollowUp, "CDH"), mar),
            ((IceCause.PandemicControl, "CDH"), mar),
            (NON_ICE_KEY, mar),
        ),
        death_deltas=(1.0, 2.0),
        sensitivity=(
            SensitivityVariant(
                "pth_retrieved_dropout",
                strategies=((cause(IceCause.AeNormal), PTH),),
                imputations=(((IceCause.AeNormal, "PTH"), ImputationMethod("retrieved_dropout")),),
            ),
            SensitivityVariant(
                "nth_retrieved_dropout",
                imputations=(((IceCause.AeNormal, "NTH"), ImputationMethod("retrieved_dropout")),),
            ),
            SensitivityVariant(
                "loe_special_pattern",
                imputations=(((IceCause.LackOfEfficacy, "CDH"),
                              ImputationMethod("special_pattern", donor=IceCause.LackOfEfficacy)),),
            ),
            SensitivityVariant(
                "ltfu_special_pattern",
                imputations=(((IceCause.AdminLostToFollowUp, "CDH"),
                              ImputationMethod("special_pattern", donor=IceCause.LackOfEfficacy)),),
            ),
        ),
    )


def estimand_variants(spec: EstimandSpec) -> List[Tuple[str, EstimandSpec, float]]:
    """(label, spec, death delta) rows of a study: primary, sensitivity variants, death-delta sweep"""
    primary = replace(spec, sensitivity=())
    variants = [("primary", primary, 0.0)]
    variants += [(variant.name, spec.with_variant(variant), 0.0) for variant in spec.sensitivity]
    variants += [(f"death_delta={delta!r}", spec.with_death_delta(delta), delta) for delta in spec.death_deltas]
    return variants


# per-cell decisions -------------------------------------------------------------

@dataclass(frozen=True)
class UseObserved:
    pass


@dataclass(frozen=True)
class DiscardAndImpute:
    method: ImputationMethod
    key: ImputationKey
    death: bool = False
    ice_visit: int = 0


@dataclass(frozen=True)
class DeadCell:
    pass


USE_OBSERVED = UseObserved()
DEAD_CELL = DeadCell()

OBSERVE, IMPUTE, DEAD = 0, 1, 2


def discard_start(event: IceEvent, strategy: EstimandStrategy) -> Optional[int]:
    """first visit whose observed value is not a realization of the estimand's regimen"""
    if strategy.kind == "CDH":
        return event.visit + 1
    if strategy.kind == "NTH":
        return event.visit
    if strategy.kind == "PTH":
        if event.kind in (EventKind.Discontinuation, EventKind.ProlongedInterruption):
            return None
        return event.visit + 1
    if strategy.kind in ("TreatmentPolicy", "DTR"):
        return None
    raise PlanResolutionError(f"{strategy.label} cannot handle {event.label}")


def decide_cells(events: Sequence[IceEvent], missing: Sequence[bool], reasons: Sequence[str],
                 spec: EstimandSpec) -> Tuple[object, ...]:
    """
    handling of every visit of one patient; the earliest discard wins (ties go to
    the earlier event) and remaining missing cells follow the ICE that stopped
    data collection
    """
    n_visits = len(missing)
    death_visit = next((event.visit for event in events if event.kind is EventKind.Death), None)
    governing = None
    handled = {}
    for event in events:
        strategy = spec.strategy_for(event.cause, event.kind)
        if strategy is None:
            if not spec.in_regimen(event.cause, event.kind):
                raise PlanResolutionError(f"no strategy for {event.label}")
            continue
        handled[event.label] = (event, strategy)
        start = discard_start(event, strategy)
        if start is not None and (governing is None or start < governing[0]):
            governing = (start, event, strategy)
    decisions = [USE_OBSERVED] * n_visits
    for visit in range(1, n_visits):
        dead = death_visit is not None and visit > death_visit
        if governing is not None and visit >= governing[0]:
            _, event, strategy = governing
            key = (event.cause, strategy.kind)
            decisions[visit] = DiscardAndImpute(spec.method_for(event.cause, strategy), key, dead, event.visit)
        elif dead:
            decisions[visit] = DEAD_CELL
        elif missing[visit]:
            if reasons[visit] in handled:
                event, strategy = handled[reasons[visit]]
                key = (event.cause, strategy.kind)
                decisions[visit] = DiscardAndImpute(spec.method_for(event.cause, strategy), key, False, event.visit)
            else:
                decisions[visit] = DiscardAndImpute(spec.method_for(None, None), NON_ICE_KEY, False, 0)
    return tuple(decisions)


def resolve_patient_strategy(patient, spec: EstimandSpec) -> Tuple[object, ...]:
    """per-visit decisions for a PatientRecord (assigned arm's ICE history)"""
    events = patient.ice_history.get(patient.assigned_arm, ())
    return decide_cells(events, [cell.missing for cell in patient.observed],
                        [cell.reason for cell in patient.observed], spec)


@dataclass
class CellPlan:
    """(n, V) decision arrays for a whole dataset; method indexes into methods"""
    decision: np.ndarray
    method: np.ndarray
    death: np.ndarray
    ice_visit: np.ndarray
    ice_cause: np.ndarray
    methods: List[ImputationMethod] = field(default_factory=list)
    keys: List[ImputationKey] = field(default_factory=list)

    @property
    def n_targets(self) -> int:
        return int((self.decision == IMPUTE).sum())

    def method_index(self, key: ImputationKey, method: ImputationMethod) -> int:
        if key not in self.keys:
            self.keys.append(key)
            self.methods.append(method)
        return self.keys.index(key)


def _events(history, row: int) -> Tuple[IceEvent, ...]:
    return tuple(
        IceEvent(CAUSES[history.event_cause[row, visit]], int(visit), KINDS[history.event_kind[row, visit]])
        for visit in np.flatnonzero(history.event_cause[row] != NO_EVENT)
    )


def resolve_plan(block, spec: EstimandSpec, logger=None) -> CellPlan:
    """CellPlan of a simulated replicate (PatientBlock with the observation model applied)"""
    method_name = f"{inspect.currentframe().f_code.co_name}()"
    n, n_visits = block.observed.shape
    plan = CellPlan(
        decision=np.zeros((n, n_visits), dtype=np.int8),
        method=np.full((n, n_visits), -1, dtype=int),
        death=np.zeros((n, n_visits), dtype=bool),
        ice_visit=np.zeros((n, n_visits), dtype=int),
        ice_cause=np.full((n, n_visits), NO_EVENT, dtype=int),
    )
    missing = np.isnan(block.observed)
    for row in range(n):
        history = block.arms[int(block.assigned[row])]
        if not missing[row].any() and not (history.event_cause[row] != NO_EVENT).any():
            continue
        decisions = decide_cells(_events(history, row), missing[row], block.reason[row], spec)
        for visit, decision in enumerate(decisions):
            if isinstance(decision, DeadCell):
                plan.decision[row, visit] = DEAD
                plan.death[row, visit] = True
            elif isinstance(decision, DiscardAndImpute):
                plan.decision[row, visit] = IMPUTE
                plan.method[row, visit] = plan.method_index(decision.key, decision.method)
                plan.death[row, visit] = decision.death
                plan.ice_visit[row, visit] = decision.ice_visit
                plan.ice_cause[row, visit] = decision.key[0].index if decision.key[0] is not None else NO_EVENT
    if logger:
        log_info(logger=logger, msg=f"{method_name} {SUCCESS} {plan.n_targets} imputation target(s), "
                                    f"{int((plan.decision == DEAD).sum())} dead cell(s)")
    if (plan.decision == IMPUTE).all(axis=0)[1:].any() and logger:
        log_warning(logger=logger, msg=f"{method_name} {WARNING} a post-baseline visit has no usable observation")
    return plan
