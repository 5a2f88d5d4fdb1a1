"""
core vocabulary shared by every module: visit schedules, regimens, potential
trajectories, intercurrent events, missingness classes and endpoints
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Optional, Tuple

import numpy as np

from estlab_errors import ImputationRequiredError


class IceCause(Enum):
    """reason an intercurrent event happened, declaration order = competing order"""
    AeNormal = "AeNormal"
    AePandemic = "AePandemic"
    LackOfEfficacy = "LackOfEfficacy"
    AdminDocumented = "AdminDocumented"
    AdminLostToFollowUp = "AdminLostToFollowUp"
    PandemicControl = "PandemicControl"

    @property
    def index(self) -> int:
        return CAUSES.index(self)

    @property
    def is_pandemic(self) -> bool:
        return self in (IceCause.AePandemic, IceCause.PandemicControl)

    @property
    def is_adverse_event(self) -> bool:
        return self in (IceCause.AeNormal, IceCause.AePandemic)


class EventKind(Enum):
    Discontinuation = "Discontinuation"
    RescueStart = "RescueStart"
    Death = "Death"
    ProlongedInterruption = "ProlongedInterruption"

    @property
    def index(self) -> int:
        return KINDS.index(self)


CAUSES = tuple(IceCause)
KINDS = tuple(EventKind)
NO_EVENT = -1


class MissingnessClass(Enum):
    """missingness mechanisms, ordered from most to least restrictive"""
    MCAR = 0
    CovMAR = 1
    MAR = 2
    MNAR = 3

    def satisfies(self, other: "MissingnessClass") -> bool:
        """lattice MCAR ⊂ CovMAR ⊂ MAR; MNAR satisfies only itself"""
        if self is MissingnessClass.MNAR or other is MissingnessClass.MNAR:
            return self is other
        return self.value <= other.value


@dataclass(frozen=True)
class VisitSchedule:
    """visits 0..T, visit 0 is baseline"""
    times: Tuple[int, ...]

    def __post_init__(self):
        if len(self.times) < 2:
            raise ValueError("schedule needs baseline and at least one post-baseline visit")
        if self.times[0] != 0 or any(b <= a for a, b in zip(self.times, self.times[1:])):
            raise ValueError(f"visit times must start at 0 and strictly increase: {self.times}")

    @classmethod
    def of_length(cls, final_visit: int) -> "VisitSchedule":
        return cls(tuple(range(final_visit + 1)))

    @property
    def final_visit(self) -> int:
        return self.times[-1]

    def __len__(self) -> int:
        return len(self.times)


# regimens -------------------------------------------------------------------

@dataclass(frozen=True)
class AssignedFull:
    arm: int


@dataclass(frozen=True)
class NoTreatment:
    pass


@dataclass(frozen=True)
class PartialUntil:
    arm: int
    stop_visit: int


@dataclass(frozen=True)
class ActualPolicy:
    arm: int


@dataclass(frozen=True)
class DynamicRule:
    arm: int
    threshold: float


REGIMEN_TYPES = (AssignedFull, NoTreatment, PartialUntil, ActualPolicy, DynamicRule)


def regimen_label(regimen) -> str:
    if isinstance(regimen, NoTreatment):
        return "NoTreatment"
    if isinstance(regimen, PartialUntil):
        return f"PartialUntil({regimen.arm},{regimen.stop_visit})"
    if isinstance(regimen, DynamicRule):
        return f"DynamicRule({regimen.arm},{regimen.threshold!r})"
    return f"{type(regimen).__name__}({regimen.arm})"


@dataclass(frozen=True)
class IceEvent:
    cause: IceCause
    visit: int
    kind: EventKind

    def __post_init__(self):
        if self.visit < 1:
            raise ValueError(f"ICE visit must be >= 1, got {self.visit}")

    @property
    def label(self) -> str:
        return f"{self.cause.value}/{self.kind.value}"


@dataclass(frozen=True)
class EventDescriptor:
    """matches events by cause, kind or both (None = any)"""
    cause: Optional[IceCause] = None
    kind: Optional[EventKind] = None

    def __post_init__(self):
        if self.cause is None and self.kind is None:
            raise ValueError("event descriptor needs a cause or a kind")

    def matches(self, cause: IceCause, kind: EventKind) -> bool:
        return (self.cause is None or self.cause is cause) and (self.kind is None or self.kind is kind)

    def within(self, other: "EventDescriptor") -> bool:
        """every event this descriptor matches is also matched by other"""
        cause_ok = other.cause is None or other.cause is self.cause
        kind_ok = other.kind is None or other.kind is self.kind
        return cause_ok and kind_ok

    @property
    def text(self) -> str:
        if self.cause is not None and self.kind is not None:
            return f"{self.cause.value}/{self.kind.value}"
        return self.cause.value if self.cause is not None else self.kind.value

    @classmethod
    def parse(cls, text: str) -> "EventDescriptor":
        text = text.strip()
        if "/" in text:
            cause_text, kind_text = (part.strip() for part in text.split("/", 1))
            return cls(IceCause(cause_text), EventKind(kind_text))
        if text in IceCause.__members__:
            return cls(cause=IceCause(text))
        if text in EventKind.__members__:
            return cls(kind=EventKind(text))
        raise ValueError(f"unknown event descriptor '{text}'")

    def __str__(self) -> str:
        return self.text


@dataclass(frozen=True)
class PotentialTrajectory:
    regimen: object
    values: Tuple[float, ...]


@dataclass(frozen=True)
class ObservedCell:
    """value is None when missing; reason is '' for observed cells"""
    value: Optional[float]
    reason: str = ""

    @property
    def missing(self) -> bool:
        return self.value is None


@dataclass(frozen=True)
class PatientRecord:
    id: int
    baseline_covariate: float
    assigned_arm: int
    trajectories: Dict[object, PotentialTrajectory]
    ice_history: Dict[int, Tuple[IceEvent, ...]]
    intermediate: Dict[int, Tuple[float, ...]]
    ps_variable: float
    observed: Tuple[ObservedCell, ...]
    replicate: int = 0

    def __post_init__(self):
        for cell in self.observed:
            if cell.missing and not cell.reason:
                raise ValueError(f"patient {self.id}: missing cell without a reason code")
        for arm, events in self.ice_history.items():
            visits = [event.visit for event in events]
            if visits != sorted(visits):
                raise ValueError(f"patient {self.id}: events of arm {arm} are not time-ordered")
            deaths = [event.visit for event in events if event.kind is EventKind.Death]
            if deaths and max(visits) > deaths[0]:
                raise ValueError(f"patient {self.id}: event after death on arm {arm}")

    def trajectory(self, regimen) -> PotentialTrajectory:
        return self.trajectories[regimen]

    def first_ice_visit(self, arm: int) -> Optional[int]:
        """T_i(a): visit of the first event under arm, None when there is none"""
        events = self.ice_history.get(arm, ())
        return events[0].visit if events else None

    def death_visit(self, arm: int) -> Optional[int]:
        for event in self.ice_history.get(arm, ()):
            if event.kind is EventKind.Death:
                return event.visit
        return None

    @property
    def final_observed(self) -> ObservedCell:
        return self.observed[-1]


@dataclass(frozen=True)
class CompositeEndpoint:
    """success = criterion on the final measure AND no failure event before the final visit"""
    threshold: float
    direction: str = "below"
    measure: str = "change"
    failure_events: Tuple[EventDescriptor, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.direction not in ("below", "above"):
            raise ValueError(f"direction must be 'below' or 'above', got '{self.direction}'")
        if self.measure not in ("change", "value"):
            raise ValueError(f"measure must be 'change' or 'value', got '{self.measure}'")

    def criterion(self, final_value, baseline_value):
        """vectorised outcome criterion (works on floats and numpy arrays)"""
        measure = final_value - baseline_value if self.measure == "change" else final_value
        if self.direction == "below":
            return measure <= self.threshold
        return measure >= self.threshold

    def is_failure(self, cause: IceCause, kind: EventKind) -> bool:
        return any(descriptor.matches(cause, kind) for descriptor in self.failure_events)

    def failed(self, events, final_visit: int) -> bool:
        return any(self.is_failure(event.cause, event.kind) for event in events if event.visit < final_visit)


def ice_indicator(patient: PatientRecord, arm: int) -> int:
    """Δ_i(a): 1 when the patient has at least one ICE under arm"""
    if arm not in patient.ice_history:
        raise KeyError(f"patient {patient.id} has no counterfactual ICE history for arm {arm}")
    return int(len(patient.ice_history[arm]) > 0)


def composite_success(patient: PatientRecord, endpoint: CompositeEndpoint, arm: Optional[int] = None) -> int:
    """
    composite success on observed data (arm=None) or on the oracle ActualPolicy
    trajectory of the given arm; failure events override the outcome criterion
    """
    evaluated_arm = patient.assigned_arm if arm is None else arm
    final_visit = len(patient.observed) - 1
    if endpoint.failed(patient.ice_history.get(evaluated_arm, ()), final_visit):
        return 0
    if arm is None:
        final = patient.final_observed
        if final.missing:
            raise ImputationRequiredError(
                f"patient {patient.id}: final value missing ({final.reason}), requires imputation first"
            )
        final_value = final.value
        baseline_value = patient.observed[0].value
    else:
        values = patient.trajectory(ActualPolicy(arm)).values
        final_value, baseline_value = values[-1], values[0]
    return int(bool(endpoint.criterion(final_value, baseline_value)))


def washout_mean(mu, nu, factor):
    """
    mean after washout, factor = λ^k; factor 1 keeps μ and factor 0 gives ν
    bit-for-bit so boundary cases compare exactly
    """
    mu, nu, factor = np.broadcast_arrays(np.asarray(mu, dtype=float), np.asarray(nu, dtype=float),
                                         np.asarray(factor, dtype=float))
    blended = nu + factor * (mu - nu)
    return np.where(factor == 1.0, mu, np.where(factor == 0.0, nu, blended))
