import json

import pytest
from hypothesis import given, strategies as st

from sos_sim.domain import Kind, Scenario
from sos_sim.engine import CompletionRecord
from sos_sim.metrics import (
    EmptyInput,
    cdf_points,
    percentile,
    sla_compliance,
    summarize,
    thin_cdf,
)


def rec(i, latency, kind=Kind.FULL):
    e = 17.57 if kind is Kind.FULL else 0.88
    return CompletionRecord(id=i, arrival_ms=0.0, start_service_ms=0.0, completion_ms=latency, kind=kind,
                            energy_mJ=e, deferred_ms=0.0, server=0, shield_flags=frozenset())


@pytest.mark.parametrize("xs, q, expected", [
    (list(range(1, 101)), 0.95, 95),
    ([5], 0.95, 5),
    ([10, 20, 30, 40], 0.5, 20),
    ([40, 10, 30, 20], 0.5, 20),
])
def test_percentile_nearest_rank(xs, q, expected):
    assert percentile(xs, q) == expected


def test_empty_inputs_raise():
    for fn in (lambda: percentile([], 0.5), lambda: sla_compliance([], 1.0), lambda: cdf_points([]),
               lambda: summarize([], Scenario())):
        with pytest.raises(EmptyInput):
            fn()


def brute_rank(xs, q):
    # independent oracle: smallest x with at least q*n samples <= x
    n = len(xs)
    for x in sorted(xs):
        if sum(1 for y in xs if y <= x) >= q * n - 1e-12:
            return x


@given(st.lists(st.floats(0, 1e4), min_size=1, max_size=60), st.floats(0.01, 0.99))
def test_percentile_matches_brute_force(xs, q):
    assert percentile(xs, q) == brute_rank(xs, q)


@given(st.lists(st.floats(0, 1e4), min_size=1, max_size=60), st.floats(0.01, 0.99),
       st.floats(0.01, 0.99), st.randoms())
def test_percentile_permutation_invariant_and_monotone(xs, q1, q2, rnd):
    shuffled = list(xs)
    rnd.shuffle(shuffled)
    assert percentile(xs, q1) == percentile(shuffled, q1)
    lo, hi = sorted((q1, q2))
    assert percentile(xs, lo) <= percentile(xs, hi)


def test_sla_compliance():
    assert sla_compliance([1, 2, 3], 150) == 1.0
    assert sla_compliance([100, 200], 150) == 0.5
    assert sla_compliance([150, 151], 150) == 0.5


def test_cdf_points():
    assert cdf_points([5, 5, 100]) == [(5.0, pytest.approx(2 / 3)), (100.0, 1.0)]
    assert cdf_points([7]) == [(7.0, 1.0)]


@given(st.lists(st.floats(0, 1e4), min_size=1, max_size=200))
def test_cdf_monotone_and_ends_at_max(xs):
    pts = cdf_points(xs)
    assert pts[-1] == (max(xs), 1.0)
    for (x0, y0), (x1, y1) in zip(pts, pts[1:]):
        assert x0 < x1 and y0 < y1


@given(st.lists(st.floats(0, 1e4), min_size=1, max_size=500), st.integers(2, 50))
def test_thin_cdf_bounded_and_keeps_last(xs, k):
    pts = cdf_points(xs)
    thin = thin_cdf(pts, k)
    assert len(thin) <= max(k, 1) or len(thin) == len(pts)
    assert thin[-1] == pts[-1]
    assert all(p in pts for p in thin)


def test_summarize_two_records():
    s = summarize([rec(0, 98.48), rec(1, 4.92, Kind.RESUMED)], Scenario())
    assert s.mean_energy_mJ == pytest.approx(9.225)
    assert (s.n_events, s.n_full, s.n_resumed) == (2, 1, 1)
    assert s.total_energy_J == pytest.approx(18.45e-3)
    assert s.sla_compliance_frac == 1.0
    assert s.cdf[-1] == (98.48, 1.0)


def test_summarize_all_full_relative_one():
    s = summarize([rec(i, 98.48 + i) for i in range(20)], Scenario())
    assert s.mean_energy_mJ == 17.57 and s.relative_energy == 1.0
    assert s.p95_ms == 98.48 + 18


def test_summary_json_has_exactly_the_fields():
    s = summarize([rec(0, 10.0)], Scenario())
    d = json.loads(s.to_json())
    assert set(d) == {"n_events", "n_full", "n_resumed", "mean_energy_mJ", "relative_energy", "p95_ms",
                      "sla_compliance_frac", "total_energy_J", "cdf"}
