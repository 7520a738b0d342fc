"""Security-event stream: Poisson arrivals per O-RU, full/resumed classification,
optional handover-storm bursts and periodic rekeys.

Random numbers come from numpy's Philox4x64-10 counter-based generator. A
stream is identified by ``(seed, stream)`` and keyed as ``seed + stream * 2**64``
with a zero counter, so identical seeds give identical streams on every
platform for a given numpy release.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .domain import Kind, MobilityProfile, Scenario, SliceClass

# stream ids; one Philox key per consumer so adding draws in one place never
# perturbs another
STREAM_ARRIVALS = 0
STREAM_SERVICE = 1
STREAM_POLICY = 2


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=int(seed) + (int(stream) << 64)))


@dataclass(slots=True)
class SecurityEvent:
    id: int
    arrival_ms: float
    oru_id: int
    slice: SliceClass
    kind: Kind
    is_storm_period: bool = False
    is_rekey: bool = False
    deadline_ms: Optional[float] = None


def classify_kind(rng: np.random.Generator, mobility: MobilityProfile, t_ms: float,
                  uplift: float = 0.0) -> Kind:
    p = min(1.0, mobility.resumption_at(t_ms) + uplift)
    return Kind.RESUMED if rng.random() < p else Kind.FULL


def mobility_rate(n_events: int, window_ms: float) -> float:
    """Mobility events per second observed over ``window_ms``."""
    if window_ms <= 0:
        raise ValueError("window_ms must be positive")
    return n_events * 1000.0 / window_ms


def _segments(scenario: Scenario) -> list[tuple[float, float, float]]:
    """Piecewise-constant (start_ms, end_ms, multiplier) covering the horizon."""
    H = scenario.horizon_ms
    storm = scenario.mobility.storm
    if storm is None or storm.start_ms >= H:
        return [(0.0, H, 1.0)]
    s0, s1 = storm.start_ms, min(storm.end_ms, H)
    segs = [(0.0, s0, 1.0), (s0, s1, storm.arrival_multiplier), (s1, H, 1.0)]
    return [s for s in segs if s[1] > s[0]]


def generate_events(scenario: Scenario, rng: Optional[np.random.Generator] = None,
                    uplift: float = 0.0) -> list[SecurityEvent]:
    """Sorted security events for one run.

    Every event gets one uniform draw for its kind, so raising the resumption
    probability (e.g. through pre-seeding ``uplift``) only ever flips Full to
    Resumed for the same seed.
    """
    if rng is None:
        rng = make_rng(scenario.seed, STREAM_ARRIVALS)
    H = scenario.horizon_ms
    lam = scenario.arrival_rate_per_oru_per_hour / 3.6e6  # per ms per O-RU
    n_orus = scenario.n_orus

    times, orus, storm_flag = [], [], []
    if H > 0 and lam > 0:
        for s0, s1, mult in _segments(scenario):
            counts = rng.poisson(lam * mult * (s1 - s0), size=n_orus)
            total = int(counts.sum())
            times.append(s0 + rng.random(total) * (s1 - s0))
            orus.append(np.repeat(np.arange(n_orus), counts))
            storm_flag.append(np.full(total, mult != 1.0))

    rekey = scenario.rekey
    rekey_due = np.empty(0)
    rekey_oru = np.empty(0, dtype=np.int64)
    if rekey is not None and H > 0:
        step = rekey.interval_s * 1000.0
        phase = rng.random(n_orus) * step
        per = [np.arange(ph, H, step) for ph in phase]
        rekey_due = np.concatenate(per) if per else np.empty(0)
        rekey_oru = np.repeat(np.arange(n_orus), [len(p) for p in per])

    if not times and rekey_due.size == 0:
        return []

    t = np.concatenate(times) if times else np.empty(0)
    o = np.concatenate(orus) if orus else np.empty(0, dtype=np.int64)
    st = np.concatenate(storm_flag) if storm_flag else np.empty(0, dtype=bool)
    n_mob = t.size
    n_rk = rekey_due.size
    t = np.concatenate([t, rekey_due])
    o = np.concatenate([o, rekey_oru]).astype(np.int64)
    is_rk = np.concatenate([np.zeros(n_mob, bool), np.ones(n_rk, bool)])
    storm = scenario.mobility.storm
    if storm is not None and n_rk:
        st = np.concatenate([st, (rekey_due >= storm.start_ms) & (rekey_due < storm.end_ms)])
    else:
        st = np.concatenate([st, np.zeros(n_rk, bool)])

    order = np.lexsort((o, t))
    t, o, st, is_rk = t[order], o[order], st[order], is_rk[order]
    n = t.size
    u_kind = rng.random(n)
    u_slice = rng.random(n)

    base = np.full(n, scenario.mobility.resumption_prob)
    if storm is not None:
        base = np.where(st, max(0.0, scenario.mobility.resumption_prob - storm.resumption_penalty), base)
    p = np.minimum(1.0, base + uplift)
    resumed = (u_kind < p) & ~is_rk
    urllc = u_slice < scenario.slices.urllc_fraction
    max_delay = rekey.max_delay_s * 1000.0 if rekey is not None else 0.0

    out = []
    for i in range(n):
        rk = bool(is_rk[i])
        out.append(SecurityEvent(
            id=i,
            arrival_ms=float(t[i]),
            oru_id=int(o[i]),
            slice=SliceClass.URLLC if urllc[i] and not rk else SliceClass.EMBB,
            kind=Kind.RESUMED if resumed[i] else Kind.FULL,
            is_storm_period=bool(st[i]),
            is_rekey=rk,
            deadline_ms=float(t[i]) + max_delay if rk else None,
        ))
    return out


EVENT_CSV_HEADER = ("id", "arrival_ms", "oru_id", "slice", "kind", "is_storm")


def write_events_csv(path, events: Iterable[SecurityEvent]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVENT_CSV_HEADER)
        for e in events:
            w.writerow((e.id, repr(e.arrival_ms), e.oru_id, e.slice.value, e.kind.value,
                        int(e.is_storm_period)))


def inter_arrival_ms(events: Sequence[SecurityEvent]) -> np.ndarray:
    t = np.fromiter((e.arrival_ms for e in events), float, len(events))
    return np.diff(t)
