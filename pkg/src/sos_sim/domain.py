"""Shared types, scenario schema and closed-form energy arithmetic.

All times are milliseconds (or seconds where the field name says so) and all
energies are millijoules.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Optional


class ConfigError(ValueError):
    """A scenario document failed validation.

    ``issues`` holds every problem found, each naming the offending path.
    """

    def __init__(self, issues: list["ConfigIssue"]):
        self.issues = list(issues)
        super().__init__("; ".join(str(i) for i in self.issues))


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class ConfigIssue:
    kind: str  # MissingField | OutOfRange | UnknownKey | TypeMismatch
    path: str
    detail: str = ""

    def __str__(self) -> str:
        tail = f" ({self.detail})" if self.detail else ""
        return f"{self.kind}({self.path!r}){tail}"


class SliceClass(str, enum.Enum):
    URLLC = "URLLC"
    EMBB = "eMBB"


class Kind(str, enum.Enum):
    FULL = "full"
    RESUMED = "resumed"


class Topology(str, enum.Enum):
    SHARED = "shared"
    PER_ORU = "per_oru"


class ServiceDiscipline(str, enum.Enum):
    DETERMINISTIC = "deterministic"
    EXPONENTIAL = "exponential"


@dataclass(frozen=True)
class CostModel:
    full_energy_mJ: float = 17.57
    full_time_ms: float = 98.48
    resumed_energy_mJ: float = 0.88
    resumed_time_ms: float = 4.92

    def energy(self, kind: Kind) -> float:
        return self.full_energy_mJ if kind is Kind.FULL else self.resumed_energy_mJ

    def time(self, kind: Kind) -> float:
        return self.full_time_ms if kind is Kind.FULL else self.resumed_time_ms


@dataclass(frozen=True)
class StormParams:
    start_s: float
    duration_s: float
    arrival_multiplier: float
    resumption_penalty: float = 0.0

    @property
    def start_ms(self) -> float:
        return self.start_s * 1000.0

    @property
    def end_ms(self) -> float:
        return (self.start_s + self.duration_s) * 1000.0

    def contains(self, t_ms: float) -> bool:
        return self.start_ms <= t_ms < self.end_ms


@dataclass(frozen=True)
class MobilityProfile:
    name: str = "urban-vehicular-60kmh"
    resumption_prob: float = 0.0
    handover_rate_per_hour: float = 90.0
    storm: Optional[StormParams] = None

    def resumption_at(self, t_ms: float) -> float:
        if self.storm is not None and self.storm.contains(t_ms):
            return max(0.0, self.resumption_prob - self.storm.resumption_penalty)
        return self.resumption_prob


@dataclass(frozen=True)
class SliceConfig:
    urllc_fraction: float = 0.0
    urllc_budget_ms: float = 10.0


@dataclass(frozen=True)
class BatchConfig:
    enabled: bool = False
    window_ms: float = 50.0
    safety_margin_frac: float = 0.8
    low_load_threshold: float = 0.5


@dataclass(frozen=True)
class ShieldConfig:
    queue_residency_critical_ms: float = 75.0
    storm_detect_multiplier: float = 3.0
    control_cycle_ms: float = 250.0
    storm_history_cycles: int = 10
    storm_min_events: int = 4


@dataclass(frozen=True)
class AccelConfig:
    speedup: float
    per_op_overhead_mJ: float = 0.0
    queue_depth_cap: int = 1


@dataclass(frozen=True)
class PreseedConfig:
    horizon: int = 0
    uplift_per_target: float = 0.0


@dataclass(frozen=True)
class RekeyConfig:
    interval_s: float
    max_delay_s: float = 0.0


@dataclass(frozen=True)
class Scenario:
    n_orus: int = 100
    horizon_s: float = 86400.0
    arrival_rate_per_oru_per_hour: float = 90.0
    cost_model: CostModel = field(default_factory=CostModel)
    mobility: MobilityProfile = field(default_factory=MobilityProfile)
    topology: Topology = Topology.SHARED
    servers: int = 1
    service_discipline: ServiceDiscipline = ServiceDiscipline.DETERMINISTIC
    sla_ms: float = 150.0
    slices: SliceConfig = field(default_factory=SliceConfig)
    batching: BatchConfig = field(default_factory=BatchConfig)
    shield: ShieldConfig = field(default_factory=ShieldConfig)
    accelerator: Optional[AccelConfig] = None
    preseed: PreseedConfig = field(default_factory=PreseedConfig)
    rekey: Optional[RekeyConfig] = None
    seed: int = 20240601

    @property
    def horizon_ms(self) -> float:
        return self.horizon_s * 1000.0

    def budget_ms(self, slice_: SliceClass) -> float:
        return self.slices.urllc_budget_ms if slice_ is SliceClass.URLLC else self.sla_ms

    def with_resumption(self, p: float) -> "Scenario":
        return replace(self, mobility=replace(self.mobility, resumption_prob=p))

    def with_seed(self, seed: int) -> "Scenario":
        return replace(self, seed=seed)


# --- closed-form energy -----------------------------------------------------


def _check_prob(p: float) -> None:
    if not (0.0 <= p <= 1.0) or math.isnan(p):
        raise DomainError(f"resumption probability {p} outside [0, 1]")


def expected_energy_mJ(cost: CostModel, p_resume: float) -> float:
    """Mean energy per handshake when a fraction ``p_resume`` is resumed."""
    _check_prob(p_resume)
    return p_resume * cost.resumed_energy_mJ + (1.0 - p_resume) * cost.full_energy_mJ


def relative_energy(cost: CostModel, p_resume: float) -> float:
    return expected_energy_mJ(cost, p_resume) / expected_energy_mJ(cost, 0.0)


def resumption_for_savings(cost: CostModel, savings_frac: float) -> float:
    """Resumption probability needed to cut mean energy by ``savings_frac``."""
    max_savings = 1.0 - cost.resumed_energy_mJ / cost.full_energy_mJ
    if not (0.0 <= savings_frac <= max_savings) or math.isnan(savings_frac):
        raise DomainError(
            f"savings {savings_frac} unreachable; the cost ratio caps savings at {max_savings:.6f}"
        )
    return savings_frac / max_savings


# --- validation -------------------------------------------------------------

_NUM = (int, float)


class _Reader:
    """Walks one JSON object, collecting issues instead of stopping at the first."""

    def __init__(self, raw: Any, path: str, issues: list[ConfigIssue]):
        self.path = path
        self.issues = issues
        if not isinstance(raw, dict):
            issues.append(ConfigIssue("TypeMismatch", path or "<root>", "expected an object"))
            raw = {}
        self.raw = raw
        self.seen: set[str] = set()

    def _p(self, key: str) -> str:
        return f"{self.path}.{key}" if self.path else key

    def get(self, key: str, default: Any = ..., *, kind=_NUM, lo=None, hi=None,
            lo_open=False, hi_open=False, choices=None) -> Any:
        self.seen.add(key)
        if key not in self.raw:
            if default is ...:
                self.issues.append(ConfigIssue("MissingField", self._p(key)))
                return None
            return default
        v = self.raw[key]
        if kind is _NUM:
            if isinstance(v, bool) or not isinstance(v, _NUM) or not math.isfinite(v):
                self.issues.append(ConfigIssue("TypeMismatch", self._p(key), "expected a finite number"))
                return default if default is not ... else None
            v = float(v)
        elif kind is int:
            if isinstance(v, bool) or not isinstance(v, int):
                self.issues.append(ConfigIssue("TypeMismatch", self._p(key), "expected an integer"))
                return default if default is not ... else None
        elif not isinstance(v, kind):
            self.issues.append(ConfigIssue("TypeMismatch", self._p(key), f"expected {kind.__name__}"))
            return default if default is not ... else None
        if choices is not None and v not in choices:
            self.issues.append(ConfigIssue("OutOfRange", self._p(key), f"one of {sorted(choices)}"))
            return default if default is not ... else None
        if lo is not None and (v <= lo if lo_open else v < lo):
            self.issues.append(ConfigIssue("OutOfRange", self._p(key), f"{'>' if lo_open else '>='} {lo}"))
        if hi is not None and (v >= hi if hi_open else v > hi):
            self.issues.append(ConfigIssue("OutOfRange", self._p(key), f"{'<' if hi_open else '<='} {hi}"))
        return v

    def child(self, key: str) -> Optional["_Reader"]:
        self.seen.add(key)
        if key not in self.raw or self.raw[key] is None:
            return None
        return _Reader(self.raw[key], self._p(key), self.issues)

    def finish(self) -> None:
        for key in sorted(set(self.raw) - self.seen):
            self.issues.append(ConfigIssue("UnknownKey", self._p(key)))


def _read_cost(r: Optional[_Reader]) -> CostModel:
    d = CostModel()
    if r is None:
        return d
    c = CostModel(
        full_energy_mJ=r.get("full_energy_mJ", d.full_energy_mJ, lo=0, lo_open=True),
        full_time_ms=r.get("full_time_ms", d.full_time_ms, lo=0, lo_open=True),
        resumed_energy_mJ=r.get("resumed_energy_mJ", d.resumed_energy_mJ, lo=0, lo_open=True),
        resumed_time_ms=r.get("resumed_time_ms", d.resumed_time_ms, lo=0, lo_open=True),
    )
    r.finish()
    if c.resumed_energy_mJ >= c.full_energy_mJ:
        r.issues.append(ConfigIssue("OutOfRange", r._p("resumed_energy_mJ"), "< full_energy_mJ"))
    if c.resumed_time_ms >= c.full_time_ms:
        r.issues.append(ConfigIssue("OutOfRange", r._p("resumed_time_ms"), "< full_time_ms"))
    return c


def _read_storm(r: Optional[_Reader]) -> Optional[StormParams]:
    if r is None:
        return None
    s = StormParams(
        start_s=r.get("start_s", lo=0),
        duration_s=r.get("duration_s", lo=0, lo_open=True),
        arrival_multiplier=r.get("arrival_multiplier", lo=1, lo_open=True),
        resumption_penalty=r.get("resumption_penalty", 0.0, lo=0, hi=1),
    )
    r.finish()
    return s


def _read_mobility(r: Optional[_Reader]) -> MobilityProfile:
    d = MobilityProfile()
    if r is None:
        return d
    m = MobilityProfile(
        name=r.get("name", d.name, kind=str),
        resumption_prob=r.get("resumption_prob", d.resumption_prob, lo=0, hi=1),
        handover_rate_per_hour=r.get("handover_rate_per_hour", d.handover_rate_per_hour, lo=0),
        storm=_read_storm(r.child("storm")),
    )
    r.finish()
    return m


def _read_plain(cls, r: Optional[_Reader], bounds: dict[str, dict]):
    """Read a flat dataclass whose fields all have defaults."""
    if r is None:
        return cls()
    d = cls()
    kw = {}
    for f in fields(cls):
        spec = dict(bounds.get(f.name, {}))
        kw[f.name] = r.get(f.name, getattr(d, f.name), **spec)
    r.finish()
    return cls(**kw)


def validate_scenario(raw: Any) -> Scenario:
    """Build a fully-defaulted :class:`Scenario` from a parsed JSON tree.

    Raises :class:`ConfigError` listing every issue found.
    """
    issues: list[ConfigIssue] = []
    r = _Reader(raw, "", issues)
    d = Scenario()

    topo_kind, servers = d.topology, d.servers
    tr = r.child("topology")
    if tr is not None:
        k = tr.get("kind", d.topology.value, kind=str, choices={t.value for t in Topology})
        topo_kind = Topology(k) if k in {t.value for t in Topology} else d.topology
        servers = tr.get("servers", d.servers, kind=int, lo=1)
        tr.finish()

    disc = r.get("service_discipline", d.service_discipline.value, kind=str,
                 choices={s.value for s in ServiceDiscipline})

    accel = None
    ar = r.child("accelerator")
    if ar is not None:
        accel = AccelConfig(
            speedup=ar.get("speedup", lo=1, lo_open=True),
            per_op_overhead_mJ=ar.get("per_op_overhead_mJ", 0.0, lo=0),
            queue_depth_cap=ar.get("queue_depth_cap", 1, kind=int, lo=1),
        )
        ar.finish()

    rekey = None
    rr = r.child("rekey")
    if rr is not None:
        rekey = RekeyConfig(
            interval_s=rr.get("interval_s", lo=0, lo_open=True),
            max_delay_s=rr.get("max_delay_s", 0.0, lo=0),
        )
        rr.finish()

    seed = r.get("seed", d.seed, kind=int, lo=0, hi=2**64 - 1)

    sc = Scenario(
        n_orus=r.get("n_orus", d.n_orus, kind=int, lo=1),
        horizon_s=r.get("horizon_s", d.horizon_s, lo=0),
        arrival_rate_per_oru_per_hour=r.get("arrival_rate_per_oru_per_hour",
                                            d.arrival_rate_per_oru_per_hour, lo=0),
        cost_model=_read_cost(r.child("cost_model")),
        mobility=_read_mobility(r.child("mobility")),
        topology=topo_kind,
        servers=servers,
        service_discipline=ServiceDiscipline(disc) if disc in {s.value for s in ServiceDiscipline}
        else d.service_discipline,
        sla_ms=r.get("sla_ms", d.sla_ms, lo=0, lo_open=True),
        slices=_read_plain(SliceConfig, r.child("slices"), {
            "urllc_fraction": dict(lo=0, hi=1),
            "urllc_budget_ms": dict(lo=0, lo_open=True),
        }),
        batching=_read_plain(BatchConfig, r.child("batching"), {
            "enabled": dict(kind=bool),
            "window_ms": dict(lo=0, lo_open=True),
            "safety_margin_frac": dict(lo=0, hi=1, lo_open=True),
            "low_load_threshold": dict(lo=0, hi=1),
        }),
        shield=_read_plain(ShieldConfig, r.child("shield"), {
            "queue_residency_critical_ms": dict(lo=0, lo_open=True),
            "storm_detect_multiplier": dict(lo=1, lo_open=True),
            "control_cycle_ms": dict(lo=100, hi=500),
            "storm_history_cycles": dict(kind=int, lo=1),
            "storm_min_events": dict(kind=int, lo=1),
        }),
        accelerator=accel,
        preseed=_read_plain(PreseedConfig, r.child("preseed"), {
            "horizon": dict(kind=int, lo=0),
            "uplift_per_target": dict(lo=0, hi=1),
        }),
        rekey=rekey,
        seed=seed if seed is not None else d.seed,
    )
    r.finish()
    if sc.sla_ms > 0 and sc.slices.urllc_budget_ms >= sc.sla_ms:
        issues.append(ConfigIssue("OutOfRange", "slices.urllc_budget_ms", "< sla_ms"))
    if issues:
        raise ConfigError(issues)
    return sc


def _plain(obj: Any) -> Any:
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    return obj


def scenario_to_dict(sc: Scenario) -> dict:
    """Inverse of :func:`validate_scenario` (all defaults written out)."""
    d = _plain(asdict(sc))
    d["topology"] = {"kind": d.pop("topology"), "servers": d.pop("servers")}
    return d


def dumps_scenario(sc: Scenario) -> str:
    return json.dumps(scenario_to_dict(sc), indent=2, sort_keys=True)


def load_scenario(path) -> Scenario:
    with open(path, encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError([ConfigIssue("TypeMismatch", "<root>", f"invalid JSON: {exc}")]) from exc
    return validate_scenario(raw)
