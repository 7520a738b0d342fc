"""Tactical scheduling: observations, the satisfy-then-optimize rule policy and
the safety shield that wraps every decision."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Protocol

from .domain import AccelConfig, Kind, MobilityProfile, Scenario, SliceClass
from .workload import SecurityEvent


class Action(str, enum.Enum):
    IMMEDIATE = "immediate"
    DEFER = "defer"
    OFFLOAD = "offload"


# fixed tie-break order for argmax over actions
ACTION_ORDER = (Action.IMMEDIATE, Action.DEFER, Action.OFFLOAD)


class ShieldFlag(str, enum.Enum):
    STORM_RELAX = "StormRelax"
    CONGESTION_SAFE_MODE = "CongestionSafeMode"
    URLLC_BYPASS = "UrllcBypass"


def flags_str(flags) -> str:
    return "|".join(sorted(f.value for f in flags))


@dataclass(frozen=True, slots=True)
class Observation:
    headroom_ms: float
    cell_load: float
    mobility_rate: float
    energy_proxy_mJ: float
    queue_residency_ms: float
    in_storm: bool = False
    now_ms: float = 0.0
    # work already committed to the next batching window
    pending_window_ms: float = 0.0
    accel_residency_ms: float = 0.0
    accel_depth: int = 0


@dataclass(frozen=True, slots=True)
class ScheduleDecision:
    action: Action = Action.IMMEDIATE
    window_start_ms: Optional[float] = None
    prefer_resume: bool = False
    shield_applied: frozenset = frozenset()


IMMEDIATE = ScheduleDecision()


class Policy(Protocol):
    name: str

    def decide(self, obs: Observation, event: SecurityEvent) -> ScheduleDecision: ...


def build_observation(event: SecurityEvent, scenario: Scenario, *, now_ms: float,
                      queue_residency_ms: float, cell_load: float = 0.0,
                      mobility_rate: float = 0.0, in_storm: bool = False,
                      pending_window_ms: float = 0.0, accel_residency_ms: float = 0.0,
                      accel_depth: int = 0) -> Observation:
    cost = scenario.cost_model
    service = cost.time(event.kind)
    return Observation(
        headroom_ms=scenario.budget_ms(event.slice) - (queue_residency_ms + service),
        cell_load=min(1.0, max(0.0, cell_load)),
        mobility_rate=mobility_rate,
        energy_proxy_mJ=cost.energy(event.kind),
        queue_residency_ms=queue_residency_ms,
        in_storm=in_storm,
        now_ms=now_ms,
        pending_window_ms=pending_window_ms,
        accel_residency_ms=accel_residency_ms,
        accel_depth=accel_depth,
    )


def next_window_ms(now_ms: float, window_ms: float) -> float:
    """Smallest multiple of ``window_ms`` strictly after ``now_ms``."""
    if window_ms <= 0:
        raise ValueError("window_ms must be positive")
    k = math.floor(now_ms / window_ms) + 1
    w = k * window_ms
    # guard against float rounding landing on or before now
    while w <= now_ms:
        k += 1
        w = k * window_ms
    return w


def deferred_completion_ms(obs: Observation, event: SecurityEvent, scenario: Scenario) -> float:
    """Estimated arrival-to-completion time if deferred to the next window."""
    w = next_window_ms(obs.now_ms, scenario.batching.window_ms)
    start = max(obs.now_ms + obs.queue_residency_ms, w) + obs.pending_window_ms
    return start + scenario.cost_model.time(event.kind) - event.arrival_ms


def deferral_allowed(obs: Observation, event: SecurityEvent, scenario: Scenario) -> bool:
    b = scenario.batching
    if not b.enabled or event.slice is SliceClass.URLLC or event.kind is Kind.RESUMED:
        return False
    if obs.cell_load >= b.low_load_threshold:
        return False
    limit = b.safety_margin_frac * scenario.budget_ms(event.slice)
    return deferred_completion_ms(obs, event, scenario) <= limit


def accelerator_admit(event: SecurityEvent, obs: Observation, accel: Optional[AccelConfig],
                      accel_depth: int, scenario: Scenario) -> bool:
    if accel is None or accel_depth >= accel.queue_depth_cap:
        return False
    service = scenario.cost_model.time(event.kind) / accel.speedup
    if obs.accel_residency_ms + service > scenario.budget_ms(event.slice):
        return False
    saving = obs.energy_proxy_mJ * (1.0 - 1.0 / accel.speedup)
    return accel.per_op_overhead_mJ < saving


def shield(decision: ScheduleDecision, obs: Observation, scenario: Scenario) -> ScheduleDecision:
    flags = set(decision.shield_applied)
    action, window = decision.action, decision.window_start_ms
    if obs.in_storm:
        flags.add(ShieldFlag.STORM_RELAX)
        if action is Action.DEFER:
            action, window = Action.IMMEDIATE, None
    if obs.queue_residency_ms > scenario.shield.queue_residency_critical_ms:
        flags.add(ShieldFlag.CONGESTION_SAFE_MODE)
        if action is not Action.IMMEDIATE:
            action, window = Action.IMMEDIATE, None
    if action is decision.action and len(flags) == len(decision.shield_applied):
        return decision
    return replace(decision, action=action, window_start_ms=window, shield_applied=frozenset(flags))


def rule_decide(obs: Observation, event: SecurityEvent, scenario: Scenario) -> ScheduleDecision:
    """Satisfy-then-optimize rule, before shielding.

    URLLC bypasses all scheduling; resumed eMBB runs at once with priority;
    full eMBB goes to the accelerator when that is a net gain, otherwise into
    the next batching window when the deferred completion estimate stays
    within the safety margin of the budget, otherwise runs at once.
    """
    if event.slice is SliceClass.URLLC:
        return ScheduleDecision(Action.IMMEDIATE, prefer_resume=event.kind is Kind.RESUMED,
                                shield_applied=frozenset({ShieldFlag.URLLC_BYPASS}))
    if event.kind is Kind.RESUMED:
        return ScheduleDecision(Action.IMMEDIATE, prefer_resume=True)
    if accelerator_admit(event, obs, scenario.accelerator, obs.accel_depth, scenario):
        return ScheduleDecision(Action.OFFLOAD)
    if deferral_allowed(obs, event, scenario):
        return ScheduleDecision(Action.DEFER,
                                window_start_ms=next_window_ms(obs.now_ms, scenario.batching.window_ms))
    return IMMEDIATE


@dataclass(frozen=True)
class ResumptionCache:
    uplift_per_target: float = 0.0
    horizon: int = 0


def preseed_uplift(cache: ResumptionCache, mobility: MobilityProfile) -> float:
    """Resumption-probability uplift from pre-seeding ``horizon`` likely targets."""
    raw = cache.uplift_per_target * cache.horizon
    return max(0.0, min(raw, 1.0 - mobility.resumption_prob))


def freeze_rekeys(due_ms: float, storm: Optional[tuple[float, float]],
                  safety_deadline_ms: float) -> float:
    """Fire time of a rekey due at ``due_ms`` given a storm window ``[start, end)``."""
    if storm is None:
        return due_ms
    start, end = storm
    if not (start <= due_ms < end):
        return due_ms
    return max(due_ms, min(end, safety_deadline_ms))


class BaselinePolicy:
    """Legacy behaviour: everything runs at once in arrival order."""

    name = "baseline"

    def decide(self, obs: Observation, event: SecurityEvent) -> ScheduleDecision:
        return IMMEDIATE


@dataclass
class RulePolicy:
    scenario: Scenario
    name: str = "rule"
    freezes_rekeys: bool = True
    cache: ResumptionCache = field(init=False)

    def __post_init__(self):
        p = self.scenario.preseed
        self.cache = ResumptionCache(uplift_per_target=p.uplift_per_target, horizon=p.horizon)

    def resumption_uplift(self, scenario: Scenario) -> float:
        return preseed_uplift(self.cache, scenario.mobility)

    def decide(self, obs: Observation, event: SecurityEvent) -> ScheduleDecision:
        return shield(rule_decide(obs, event, self.scenario), obs, self.scenario)
