"""Discrete-event core: clock, future-event list, enforcement-endpoint servers.

Each server runs preemptive-resume priority with three classes:

    0  URLLC and resume-preferred handshakes
    1  handshakes entering from a batching window
    2  everything else

Within a class service is FIFO by queue-entry time, ties by event id. A
baseline policy puts every event in class 2, which makes the server a plain
FIFO queue.
"""

from __future__ import annotations

import csv
import heapq
from collections import deque
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .domain import Kind, Scenario, ServiceDiscipline, SliceClass, Topology
from .scheduler import (
    Action,
    Policy,
    ScheduleDecision,
    ShieldFlag,
    build_observation,
    flags_str,
    freeze_rekeys,
    next_window_ms,
)
from .workload import (
    STREAM_ARRIVALS,
    STREAM_SERVICE,
    SecurityEvent,
    generate_events,
    make_rng,
)


class SimulationInvariantError(RuntimeError):
    pass


PRIO_URGENT, PRIO_WINDOW, PRIO_NORMAL = 0, 1, 2

_DEPART, _ENTER, _ARRIVE = 0, 1, 2


@dataclass(slots=True)
class CompletionRecord:
    id: int
    arrival_ms: float
    start_service_ms: float
    completion_ms: float
    kind: Kind
    energy_mJ: float
    deferred_ms: float
    server: int
    shield_flags: frozenset
    slice: SliceClass = SliceClass.EMBB
    service_ms: float = 0.0
    action: Action = Action.IMMEDIATE
    preempted_ms: float = 0.0

    @property
    def latency_ms(self) -> float:
        return self.completion_ms - self.arrival_ms


@dataclass
class EpisodeStats:
    n_events: int = 0
    n_deferred: int = 0
    n_offloaded: int = 0
    n_preemptions: int = 0
    n_storm_relax: int = 0
    n_congestion_safe: int = 0
    deferral_violations: list = field(default_factory=list)
    deferred_urllc: int = 0
    defers_in_safe_mode: int = 0


@dataclass(slots=True)
class _Job:
    event: SecurityEvent
    decision: ScheduleDecision
    prio: int
    entry_ms: float
    service_ms: float
    expected_ms: float
    energy_mJ: float
    remaining: float = 0.0
    start_ms: float = -1.0
    seg_start: float = 0.0
    preempted_ms: float = 0.0
    server: int = -1


class Server:
    """One enforcement endpoint (tunnel terminator, O-RU agent or accelerator)."""

    __slots__ = ("id", "is_accelerator", "busy_until_ms", "current", "suspended", "queue",
                 "queued_work", "periods", "open_since", "version", "_seq")

    def __init__(self, id: int, is_accelerator: bool = False):
        self.id = id
        self.is_accelerator = is_accelerator
        self.busy_until_ms = 0.0
        self.current: Optional[_Job] = None
        self.suspended: list[_Job] = []
        self.queue: list = []
        self.queued_work = 0.0
        self.periods: deque = deque()  # closed busy periods (start, end)
        self.open_since: Optional[float] = None
        self.version = 0
        self._seq = 0

    @property
    def depth(self) -> int:
        return len(self.queue)

    @property
    def in_system(self) -> int:
        return len(self.queue) + len(self.suspended) + (self.current is not None)

    def utilization(self, now: float, window: float) -> float:
        lo = now - window
        periods = self.periods
        while periods and periods[0][1] <= lo:
            periods.popleft()
        busy = 0.0
        for s, e in periods:
            busy += min(e, now) - max(s, lo)
        if self.open_since is not None:
            busy += now - max(self.open_since, lo)
        return busy / window


def queue_residency_ms(server: Server, now_ms: float) -> float:
    """Remaining in-service work plus expected service of everything queued."""
    return max(0.0, server.busy_until_ms - now_ms) + server.queued_work


def service_time_ms(rng: Optional[np.random.Generator], discipline: ServiceDiscipline, kind: Kind,
                    cost, accelerated: bool = False, speedup: float = 1.0) -> float:
    mean = cost.time(kind)
    if accelerated:
        mean /= speedup
    if discipline is ServiceDiscipline.DETERMINISTIC:
        return mean
    return mean * float(rng.standard_exponential())


class Engine:
    """Single-threaded event loop for one scenario and one policy."""

    def __init__(self, scenario: Scenario, policy: Policy, *, trace: bool = False):
        self.scenario = scenario
        self.policy = policy
        self.trace = trace
        self.now = 0.0
        if scenario.topology is Topology.PER_ORU:
            n = scenario.n_orus
        else:
            n = scenario.servers
        self.servers = [Server(i) for i in range(n)]
        self.accel: Optional[Server] = Server(n, is_accelerator=True) if scenario.accelerator else None
        self.fel: list = []  # future event list: (time, order, seq, payload)
        self._seq = 0
        self.pending_window: dict[float, float] = {}
        self.records: list[CompletionRecord] = []
        self.decisions: list[tuple] = []
        self.stats = EpisodeStats()
        sh = scenario.shield
        self._cycle_ms = sh.control_cycle_ms
        self._cycle = 0
        self._cycle_count = 0
        self._history: deque = deque(maxlen=sh.storm_history_cycles + 1)
        self._cycle_obs: tuple[float, bool] = (0.0, False)

    # -- future event list ---------------------------------------------------

    def _schedule(self, t: float, order: int, payload) -> None:
        self._seq += 1
        heapq.heappush(self.fel, (t, order, self._seq, payload))

    # -- control-cycle statistics --------------------------------------------

    def _roll_cycle(self, now: float) -> None:
        c = int(now // self._cycle_ms)
        if c == self._cycle:
            return
        h = self._history
        h.append(self._cycle_count)
        gap = min(c - self._cycle - 1, h.maxlen)
        for _ in range(gap):
            h.append(0)
        self._cycle, self._cycle_count = c, 0
        last = h[-1]
        sh = self.scenario.shield
        if len(h) > 1:
            mean = (sum(h) - last) / (len(h) - 1)
            storm = last >= sh.storm_min_events and last > sh.storm_detect_multiplier * mean
        else:
            storm = False
        self._cycle_obs = (last * 1000.0 / self._cycle_ms, storm)

    # -- server mechanics ----------------------------------------------------

    def _pick_server(self, event: SecurityEvent) -> Server:
        if self.scenario.topology is Topology.PER_ORU:
            return self.servers[event.oru_id]
        if len(self.servers) == 1:
            return self.servers[0]
        now = self.now
        return min(self.servers, key=lambda s: (queue_residency_ms(s, now), s.id))

    def _start(self, srv: Server, job: _Job) -> None:
        now = self.now
        if job.start_ms < 0:
            job.start_ms = now
            job.remaining = job.service_ms
        else:
            job.preempted_ms += now - job.seg_start
        job.seg_start = now
        job.server = srv.id
        srv.current = job
        srv.version += 1
        if srv.open_since is None:
            srv.open_since = now
        self._schedule(now + job.remaining, _DEPART, (srv, srv.version))

    def _enqueue(self, srv: Server, job: _Job) -> None:
        now = self.now
        cur = srv.current
        if cur is None:
            srv.busy_until_ms = now + job.service_ms
            self._start(srv, job)
            return
        if job.prio < cur.prio:
            cur.remaining -= now - cur.seg_start
            cur.seg_start = now
            srv.suspended.append(cur)
            srv.busy_until_ms += job.service_ms
            self.stats.n_preemptions += 1
            self._start(srv, job)
            return
        srv._seq += 1
        heapq.heappush(srv.queue, (job.prio, job.entry_ms, job.event.id, srv._seq, job))
        srv.queued_work += job.expected_ms

    def _depart(self, srv: Server, version: int) -> None:
        if version != srv.version:
            return  # preempted; a fresh departure was scheduled
        job = srv.current
        srv.current = None
        now = self.now
        self._complete(job, srv)
        nxt = None
        if srv.suspended and srv.queue:
            top = srv.queue[0]
            sus = srv.suspended[-1]
            if top[0] < sus.prio:
                nxt = self._pop(srv)
            else:
                nxt = srv.suspended.pop()
        elif srv.suspended:
            nxt = srv.suspended.pop()
        elif srv.queue:
            nxt = self._pop(srv)
        if nxt is None:
            srv.periods.append((srv.open_since, now))
            srv.open_since = None
            return
        if nxt.start_ms < 0:
            srv.busy_until_ms = now + nxt.service_ms + sum(j.remaining for j in srv.suspended)
        self._start(srv, nxt)

    def _pop(self, srv: Server) -> _Job:
        job = heapq.heappop(srv.queue)[-1]
        srv.queued_work -= job.expected_ms
        if not srv.queue:
            srv.queued_work = 0.0  # drop float drift
        return job

    def _complete(self, job: _Job, srv: Server) -> None:
        ev = job.event
        now = self.now
        deferred = job.entry_ms - ev.arrival_ms
        rec = CompletionRecord(
            id=ev.id, arrival_ms=ev.arrival_ms, start_service_ms=job.start_ms, completion_ms=now,
            kind=ev.kind, energy_mJ=job.energy_mJ, deferred_ms=deferred, server=srv.id,
            shield_flags=job.decision.shield_applied, slice=ev.slice, service_ms=job.service_ms,
            action=job.decision.action,
            preempted_ms=job.preempted_ms,
        )
        self.records.append(rec)
        if job.decision.action is Action.DEFER:
            budget = self.scenario.budget_ms(ev.slice)
            if rec.latency_ms > budget and not ev.is_storm_period:
                self.stats.deferral_violations.append(ev.id)
        hook = getattr(self.policy, "on_complete", None)
        if hook is not None:
            hook(rec, self)

    # -- arrivals ------------------------------------------------------------

    def observe(self, event: SecurityEvent):
        now = self.now
        srv = self._pick_server(event)
        rate, storm = self._cycle_obs
        w = next_window_ms(now, self.scenario.batching.window_ms)
        if self.scenario.topology is Topology.SHARED and len(self.servers) > 1:
            load = sum(s.utilization(now, self._cycle_ms) for s in self.servers) / len(self.servers)
        else:
            load = srv.utilization(now, self._cycle_ms)
        acc = self.accel
        obs = build_observation(
            event, self.scenario, now_ms=now,
            queue_residency_ms=queue_residency_ms(srv, now),
            cell_load=load, mobility_rate=rate, in_storm=storm,
            pending_window_ms=self.pending_window.get(w, 0.0),
            accel_residency_ms=queue_residency_ms(acc, now) if acc else 0.0,
            accel_depth=acc.in_system if acc else 0,
        )
        return obs, srv

    def _arrive(self, event: SecurityEvent, unit_exp: float) -> None:
        self._roll_cycle(self.now)
        if not event.is_rekey:
            self._cycle_count += 1
        obs, srv = self.observe(event)
        d = self.policy.decide(obs, event)
        self._check_decision(d, obs, event)
        if self.trace:
            self.decisions.append((event.id, d.action.value, d.window_start_ms, flags_str(d.shield_applied)))
        st = self.stats
        if ShieldFlag.STORM_RELAX in d.shield_applied:
            st.n_storm_relax += 1
        if ShieldFlag.CONGESTION_SAFE_MODE in d.shield_applied:
            st.n_congestion_safe += 1

        sc = self.scenario
        cost = sc.cost_model
        mean = cost.time(event.kind)
        energy = cost.energy(event.kind)
        if d.action is Action.OFFLOAD:
            if self.accel is None:
                raise SimulationInvariantError(f"event {event.id}: offload without accelerator")
            acc = sc.accelerator
            mean /= acc.speedup
            energy = energy / acc.speedup + acc.per_op_overhead_mJ
        service = mean if sc.service_discipline is ServiceDiscipline.DETERMINISTIC else mean * unit_exp
        prio = PRIO_URGENT if (event.slice is SliceClass.URLLC or d.prefer_resume) else PRIO_NORMAL
        job = _Job(event=event, decision=d, prio=prio, entry_ms=self.now, service_ms=service,
                   expected_ms=mean, energy_mJ=energy)

        if d.action is Action.DEFER:
            w = d.window_start_ms
            job.entry_ms = w
            job.prio = PRIO_WINDOW
            self.pending_window[w] = self.pending_window.get(w, 0.0) + mean
            st.n_deferred += 1
            self._schedule(w, _ENTER, job)
        elif d.action is Action.OFFLOAD:
            st.n_offloaded += 1
            self._enqueue(self.accel, job)
        else:
            self._enqueue(srv, job)

    def _check_decision(self, d: ScheduleDecision, obs, event: SecurityEvent) -> None:
        if d.action is Action.DEFER:
            if event.slice is SliceClass.URLLC:
                self.stats.deferred_urllc += 1
                raise SimulationInvariantError(f"event {event.id}: URLLC deferred")
            if ShieldFlag.CONGESTION_SAFE_MODE in d.shield_applied:
                self.stats.defers_in_safe_mode += 1
                raise SimulationInvariantError(f"event {event.id}: deferral in safe mode")
            if d.window_start_ms is None or d.window_start_ms <= self.now:
                raise SimulationInvariantError(f"event {event.id}: bad window {d.window_start_ms}")

    def _enter(self, job: _Job) -> None:
        w = job.entry_ms
        left = self.pending_window[w] - job.expected_ms
        if left <= 1e-9:
            del self.pending_window[w]
        else:
            self.pending_window[w] = left
        self._enqueue(self._pick_server(job.event), job)

    # -- main loop -----------------------------------------------------------

    def run(self, events: Sequence[SecurityEvent]) -> list[CompletionRecord]:
        n = len(events)
        if self.scenario.service_discipline is ServiceDiscipline.EXPONENTIAL:
            unit = make_rng(self.scenario.seed, STREAM_SERVICE).standard_exponential(n).tolist()
        else:
            unit = None
        i = 0
        fel = self.fel
        while i < n or fel:
            if i < n and (not fel or (events[i].arrival_ms, _ARRIVE) < fel[0][:2]):
                ev = events[i]
                i += 1
                self.now = ev.arrival_ms
                self._arrive(ev, unit[ev.id] if unit else 1.0)
                continue
            t, order, _, payload = heapq.heappop(fel)
            if t < self.now:
                raise SimulationInvariantError(f"clock moved backwards: {t} < {self.now}")
            self.now = t
            if order == _DEPART:
                self._depart(*payload)
            else:
                self._enter(payload)
        self.stats.n_events = n
        self._verify(events)
        return self.records

    def _verify(self, events: Sequence[SecurityEvent]) -> None:
        if len(self.records) != len(events):
            raise SimulationInvariantError(
                f"{len(events)} events generated but {len(self.records)} completed")
        for r in self.records:
            if not (r.arrival_ms <= r.start_service_ms <= r.completion_ms):
                raise SimulationInvariantError(f"record {r.id} breaks causality")
            if r.deferred_ms < 0 or r.preempted_ms < -1e-6:
                raise SimulationInvariantError(f"record {r.id} has negative deferral/preemption")
        for s in self.servers + ([self.accel] if self.accel else []):
            if s.current is not None or s.queue or s.suspended:
                raise SimulationInvariantError(f"server {s.id} not drained")


@dataclass
class RunResult:
    records: list[CompletionRecord]
    stats: EpisodeStats
    events: list[SecurityEvent]
    decisions: list[tuple]


def prepare_events(scenario: Scenario, policy: Policy) -> list[SecurityEvent]:
    uplift_fn = getattr(policy, "resumption_uplift", None)
    uplift = uplift_fn(scenario) if uplift_fn is not None else 0.0
    events = generate_events(scenario, make_rng(scenario.seed, STREAM_ARRIVALS), uplift=uplift)
    storm = scenario.mobility.storm
    if getattr(policy, "freezes_rekeys", False) and storm is not None and scenario.rekey is not None:
        window = (storm.start_ms, storm.end_ms)
        moved = False
        for e in events:
            if e.is_rekey:
                t = freeze_rekeys(e.arrival_ms, window, e.deadline_ms)
                if t != e.arrival_ms:
                    e.arrival_ms = t
                    moved = True
        if moved:
            events.sort(key=lambda e: (e.arrival_ms, e.id))
    return events


def run(scenario: Scenario, policy: Policy, *, trace: bool = False,
        events: Optional[list[SecurityEvent]] = None) -> RunResult:
    """Simulate one scenario under ``policy``; every event completes exactly once."""
    if events is None:
        events = prepare_events(scenario, policy)
    eng = Engine(scenario, policy, trace=trace)
    records = eng.run(events)
    return RunResult(records=records, stats=eng.stats, events=events, decisions=eng.decisions)


RECORD_CSV_HEADER = ("id", "arrival_ms", "start_ms", "completion_ms", "kind", "energy_mJ",
                     "deferred_ms", "server", "shield")


def write_records_csv(path, records: Sequence[CompletionRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RECORD_CSV_HEADER)
        for r in sorted(records, key=lambda r: r.id):
            w.writerow((r.id, repr(r.arrival_ms), repr(r.start_service_ms), repr(r.completion_ms),
                        r.kind.value, repr(r.energy_mJ), repr(r.deferred_ms), r.server,
                        flags_str(r.shield_flags)))


DECISION_CSV_HEADER = ("event_id", "action", "window_start_ms", "shield_flags")


def write_decisions_csv(path, decisions: Sequence[tuple]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DECISION_CSV_HEADER)
        for eid, action, window, flags in decisions:
            w.writerow((eid, action, "" if window is None else repr(window), flags))
