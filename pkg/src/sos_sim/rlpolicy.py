"""Constrained tabular Q-learning over a 48-state discretized observation.

Safety is structural: the action mask is computed from the same tests the
shield and the admission controller use, so a masked action can never be
emitted, in training or in evaluation.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .domain import Kind, Scenario, SliceClass
from .scheduler import (
    ACTION_ORDER,
    Action,
    Observation,
    ScheduleDecision,
    accelerator_admit,
    deferral_allowed,
    next_window_ms,
    shield,
)
from .workload import STREAM_POLICY, SecurityEvent, make_rng

HEADROOM_EDGES = (0.0, 25.0, 75.0)
LOAD_EDGES = (0.3, 0.7)
N_HEADROOM, N_LOAD, N_MOBILITY, N_PROXY = 4, 3, 2, 2
N_STATES = N_HEADROOM * N_LOAD * N_MOBILITY * N_PROXY
N_ACTIONS = len(ACTION_ORDER)
_ACTION_INDEX = {a: i for i, a in enumerate(ACTION_ORDER)}


class EmptyMask(RuntimeError):
    pass


@dataclass(frozen=True)
class StateIndex:
    headroom: int
    load: int
    mobility: int
    proxy: int

    def encode(self) -> int:
        return ((self.headroom * N_LOAD + self.load) * N_MOBILITY + self.mobility) * N_PROXY + self.proxy

    @classmethod
    def decode(cls, idx: int) -> "StateIndex":
        if not 0 <= idx < N_STATES:
            raise ValueError(f"state index {idx} out of range")
        idx, proxy = divmod(idx, N_PROXY)
        idx, mobility = divmod(idx, N_MOBILITY)
        headroom, load = divmod(idx, N_LOAD)
        return cls(headroom, load, mobility, proxy)

    @classmethod
    def from_observation(cls, obs: Observation, full_energy_mJ: float) -> "StateIndex":
        h = obs.headroom_ms
        hb = 0 if h < HEADROOM_EDGES[0] else 1 if h < HEADROOM_EDGES[1] else 2 if h < HEADROOM_EDGES[2] else 3
        lb = 0 if obs.cell_load < LOAD_EDGES[0] else 1 if obs.cell_load < LOAD_EDGES[1] else 2
        return cls(hb, lb, int(obs.in_storm), int(obs.energy_proxy_mJ >= full_energy_mJ))


@dataclass
class QTable:
    values: np.ndarray = field(default_factory=lambda: np.zeros((N_STATES, N_ACTIONS)))
    visits: np.ndarray = field(default_factory=lambda: np.zeros((N_STATES, N_ACTIONS), dtype=np.int64))

    def to_json(self) -> str:
        rows = [
            {"state": s, "action": a.value, "value": float(self.values[s, i]),
             "visits": int(self.visits[s, i])}
            for s in range(N_STATES) for i, a in enumerate(ACTION_ORDER)
        ]
        return json.dumps(rows, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "QTable":
        q = cls()
        for row in json.loads(text):
            i = _ACTION_INDEX[Action(row["action"])]
            q.values[row["state"], i] = row["value"]
            q.visits[row["state"], i] = row["visits"]
        if not np.all(np.isfinite(q.values)):
            raise ValueError("checkpoint holds non-finite values")
        return q


def action_mask(obs: Observation, event: SecurityEvent, scenario: Scenario) -> tuple[Action, ...]:
    if event.slice is SliceClass.URLLC:
        return (Action.IMMEDIATE,)
    congested = obs.queue_residency_ms > scenario.shield.queue_residency_critical_ms
    mask = [Action.IMMEDIATE]
    if not congested and not obs.in_storm and deferral_allowed(obs, event, scenario):
        mask.append(Action.DEFER)
    if not congested and accelerator_admit(event, obs, scenario.accelerator, obs.accel_depth, scenario):
        mask.append(Action.OFFLOAD)
    return tuple(mask)


def select_action(q: QTable, state: int, mask: Sequence[Action], epsilon: float,
                  rng: Optional[np.random.Generator]) -> Action:
    """Epsilon-greedy over the allowed actions; ties go to the earliest in ACTION_ORDER."""
    if not mask:
        raise EmptyMask(f"no admissible action in state {state}")
    if epsilon > 0 and rng.random() < epsilon:
        return mask[int(rng.integers(len(mask)))]
    row = q.values[state]
    best = None
    for a in ACTION_ORDER:
        if a in mask and (best is None or row[_ACTION_INDEX[a]] > row[_ACTION_INDEX[best]]):
            best = a
    return best


def update(q: QTable, state: int, action: Action, reward: float, next_state: Optional[int],
           alpha: float, gamma: float, next_mask: Sequence[Action] = ACTION_ORDER) -> QTable:
    """One-step Q-learning; ``next_state=None`` marks a terminal transition."""
    i = _ACTION_INDEX[action]
    target = reward
    if next_state is not None and gamma > 0:
        target += gamma * max(q.values[next_state, _ACTION_INDEX[a]] for a in next_mask)
    q.values[state, i] += alpha * (target - q.values[state, i])
    q.visits[state, i] += 1
    return q


def reward_for(record, scenario: Scenario, penalty: float) -> float:
    r = -record.energy_mJ / scenario.cost_model.full_energy_mJ
    if record.completion_ms - record.arrival_ms > scenario.budget_ms(record.slice):
        r -= penalty
    return r


@dataclass(frozen=True)
class RlHyper:
    alpha: float = 0.1
    gamma: float = 0.0
    epsilon: float = 0.1
    epsilon_decay: float = 0.9
    sla_penalty: float = 10.0


class RlPolicy:
    """Masked epsilon-greedy policy; learns from completions when ``learning``."""

    name = "rl"

    def __init__(self, scenario: Scenario, q: Optional[QTable] = None, *, epsilon: float = 0.0,
                 learning: bool = False, hyper: RlHyper = RlHyper(), seed: Optional[int] = None,
                 mask_fn=None):
        self.scenario = scenario
        self.mask_fn = mask_fn or action_mask
        self.q = q if q is not None else QTable()
        self.epsilon = epsilon
        self.learning = learning
        self.hyper = hyper
        self.rng = make_rng(scenario.seed if seed is None else seed, STREAM_POLICY)
        self.masked_emissions = 0
        self.audit: list[tuple[int, Action, tuple]] | None = None
        self._k = 0
        self._pending: dict[int, tuple[int, Action, int]] = {}
        self._state_at: dict[int, tuple[int, tuple]] = {}
        self._waiting: dict[int, tuple[int, Action, float]] = {}

    def bind(self, scenario: Scenario) -> None:
        """Evaluate on another scenario (e.g. a held-out seed) with a fresh policy stream."""
        self.scenario = scenario
        self.rng = make_rng(scenario.seed, STREAM_POLICY)

    def decide(self, obs: Observation, event: SecurityEvent) -> ScheduleDecision:
        sc = self.scenario
        s = StateIndex.from_observation(obs, sc.cost_model.full_energy_mJ).encode()
        mask = self.mask_fn(obs, event, sc)
        a = select_action(self.q, s, mask, self.epsilon, self.rng)
        if a not in mask:
            self.masked_emissions += 1
        if self.audit is not None:
            self.audit.append((event.id, a, mask))
        if self.learning:
            k = self._k
            self._k += 1
            prev = self._waiting.pop(k - 1, None)
            if prev is not None:
                ps, pa, pr = prev
                update(self.q, ps, pa, pr, s, self.hyper.alpha, self.hyper.gamma, mask)
            else:
                self._state_at[k] = (s, mask)
            self._pending[event.id] = (s, a, k)
        d = ScheduleDecision(
            action=a,
            window_start_ms=next_window_ms(obs.now_ms, sc.batching.window_ms) if a is Action.DEFER else None,
            prefer_resume=event.kind is Kind.RESUMED,
        )
        return shield(d, obs, sc)

    def on_complete(self, record, engine=None) -> None:
        if not self.learning:
            return
        s, a, k = self._pending.pop(record.id)
        r = reward_for(record, self.scenario, self.hyper.sla_penalty)
        nxt = self._state_at.pop(k + 1, None)
        if nxt is not None:
            update(self.q, s, a, r, nxt[0], self.hyper.alpha, self.hyper.gamma, nxt[1])
        else:
            self._waiting[k] = (s, a, r)

    def end_episode(self) -> None:
        for s, a, r in self._waiting.values():
            update(self.q, s, a, r, None, self.hyper.alpha, self.hyper.gamma)
        self._waiting.clear()
        self._state_at.clear()
        self._pending.clear()
        self._k = 0

    def frozen(self) -> "RlPolicy":
        return RlPolicy(self.scenario, QTable(self.q.values.copy(), self.q.visits.copy()),
                        mask_fn=self.mask_fn)


@dataclass
class TrainingResult:
    policy: RlPolicy
    curve: list[dict]
    masked_emissions: int


def episode_seed(base_seed: int, episode: int) -> int:
    return (base_seed + 1 + episode) % 2**64


def heldout_seed(base_seed: int) -> int:
    return (base_seed + 1_000_003) % 2**64


def train(scenario: Scenario, episodes: int, hyper: RlHyper = RlHyper(), *,
          mask_fn=None) -> TrainingResult:
    """Run ``episodes`` learning episodes and return the frozen greedy policy.

    Episode ``e`` simulates ``scenario`` with seed ``scenario.seed + 1 + e``.
    ``mask_fn`` replaces the action mask (used to check masked equivalence).
    """
    from .engine import run  # local: engine imports scheduler, not us

    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    learner = RlPolicy(scenario, learning=True, epsilon=hyper.epsilon, hyper=hyper, mask_fn=mask_fn)
    curve = []
    for e in range(episodes):
        sc = scenario.with_seed(episode_seed(scenario.seed, e))
        learner.bind(sc)
        res = run(sc, learner)
        learner.end_episode()
        n = len(res.records)
        energy = sum(r.energy_mJ for r in res.records)
        viol = sum(1 for r in res.records if r.completion_ms - r.arrival_ms > sc.budget_ms(r.slice))
        curve.append({
            "episode": e, "seed": sc.seed, "epsilon": learner.epsilon,
            "mean_energy_mJ": energy / n if n else 0.0,
            "sla_violation_frac": viol / n if n else 0.0,
            "offloaded": res.stats.n_offloaded, "deferred": res.stats.n_deferred,
        })
        learner.epsilon *= hyper.epsilon_decay
    return TrainingResult(policy=learner.frozen(), curve=curve, masked_emissions=learner.masked_emissions)


TRAINING_CSV_HEADER = ("episode", "seed", "epsilon", "mean_energy_mJ", "sla_violation_frac",
                       "offloaded", "deferred")


def write_training_csv(path, curve: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=TRAINING_CSV_HEADER, lineterminator="\n")
        w.writeheader()
        for row in curve:
            w.writerow(row)
