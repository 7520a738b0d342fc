"""Aggregation of completion records into energy, latency and SLA figures."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .domain import CostModel, Kind, Scenario, expected_energy_mJ


class EmptyInput(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioSummary:
    n_events: int
    n_full: int
    n_resumed: int
    mean_energy_mJ: float
    relative_energy: float
    p95_ms: float
    sla_compliance_frac: float
    total_energy_J: float
    cdf: list

    def to_json(self) -> str:
        d = asdict(self)
        d["cdf"] = [list(p) for p in self.cdf]
        return json.dumps(d, indent=2)


def percentile(latencies: Sequence[float], q: float) -> float:
    """Nearest-rank percentile: the ceil(q*n)-th smallest value (1-based)."""
    n = len(latencies)
    if n == 0:
        raise EmptyInput("percentile of an empty sample")
    if not 0.0 < q < 1.0:
        raise ValueError("q must lie in (0, 1)")
    rank = max(1, math.ceil(q * n))
    return float(np.partition(np.asarray(latencies, dtype=float), rank - 1)[rank - 1])


def sla_compliance(latencies: Sequence[float], threshold_ms: float) -> float:
    if len(latencies) == 0:
        raise EmptyInput("compliance of an empty sample")
    if threshold_ms <= 0:
        raise ValueError("threshold must be positive")
    a = np.asarray(latencies, dtype=float)
    return float(np.count_nonzero(a <= threshold_ms)) / a.size


def cdf_points(latencies: Sequence[float]) -> list[tuple[float, float]]:
    if len(latencies) == 0:
        raise EmptyInput("CDF of an empty sample")
    a = np.sort(np.asarray(latencies, dtype=float))
    values, counts = np.unique(a, return_counts=True)
    cum = np.cumsum(counts)
    n = a.size
    return [(float(v), float(c) / n) for v, c in zip(values, cum)]


def cdf_at(latencies: Sequence[float], x_ms: float) -> float:
    """Cumulative fraction of latencies at or below ``x_ms``."""
    return sla_compliance(latencies, x_ms) if x_ms > 0 else 0.0


def thin_cdf(points: list[tuple[float, float]], max_points: int = 2000) -> list[tuple[float, float]]:
    """Keep at most ``max_points`` points, evenly spaced in cumulative fraction.

    The last point (max latency, 1.0) is always kept.
    """
    if len(points) <= max_points:
        return list(points)
    fracs = np.fromiter((p[1] for p in points), float, len(points))
    targets = np.linspace(0.0, 1.0, max_points + 1)[1:]
    idx = np.unique(np.searchsorted(fracs, targets - 1e-12, side="left").clip(0, len(points) - 1))
    out = [points[i] for i in idx]
    if out[-1] != points[-1]:
        out[-1] = points[-1]
    return out


def summarize(records, scenario: Scenario, *, full_cdf: bool = False) -> ScenarioSummary:
    n = len(records)
    if n == 0:
        raise EmptyInput("no records to summarize")
    cost: CostModel = scenario.cost_model
    energy = np.fromiter((r.energy_mJ for r in records), float, n)
    lat = np.fromiter((r.completion_ms - r.arrival_ms for r in records), float, n)
    n_full = sum(1 for r in records if r.kind is Kind.FULL)
    mean_e = float(math.fsum(energy)) / n
    pts = cdf_points(lat)
    return ScenarioSummary(
        n_events=n,
        n_full=n_full,
        n_resumed=n - n_full,
        mean_energy_mJ=mean_e,
        relative_energy=mean_e / expected_energy_mJ(cost, 0.0),
        p95_ms=percentile(lat, 0.95),
        sla_compliance_frac=sla_compliance(lat, scenario.sla_ms),
        total_energy_J=float(math.fsum(energy)) / 1000.0,
        cdf=pts if full_cdf else thin_cdf(pts),
    )


def latencies(records) -> np.ndarray:
    return np.fromiter((r.completion_ms - r.arrival_ms for r in records), float, len(records))


def write_cdf_csv(path, points) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("latency_ms", "cum_frac"))
        for x, y in points:
            w.writerow((repr(x), repr(y)))


SWEEP_CSV_HEADER = ("scenario", "p_resume", "relative_energy", "p95_ms", "sla_compliance")


def write_sweep_csv(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_CSV_HEADER)
        for row in rows:
            w.writerow(row)
