#!/usr/bin/env python3
"""Reproduce the urban-macro case study: Baseline, SOS-Low and SOS-High.

Writes ``case_study.csv`` and one CDF file per scenario into ``--out`` and
prints a comparison against the published figures.
"""

import argparse
import csv
import time
from pathlib import Path

from sos_sim import scenario_path
from sos_sim.domain import load_scenario
from sos_sim.engine import run
from sos_sim.metrics import summarize, write_cdf_csv
from sos_sim.scheduler import BaselinePolicy, RulePolicy

# name, scenario file, policy, published (mean mJ, relative, p95 ms, compliance)
CASES = [
    ("Baseline", "urban-macro", "baseline", (17.57, 1.00, 191.0, 0.857)),
    ("SOS-Low", "urban-macro-sos-low", "rule", (10.89, 0.62, 150.0, None)),
    ("SOS-High", "urban-macro-sos-high", "rule", (7.06, 0.40, 98.0, 0.982)),
]


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="out/case-study")
    ap.add_argument("--seed", type=int, default=None)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    rows = []
    for label, name, policy, published in CASES:
        sc = load_scenario(scenario_path(name))
        if args.seed is not None:
            sc = sc.with_seed(args.seed)
        pol = BaselinePolicy() if policy == "baseline" else RulePolicy(sc)
        t0 = time.perf_counter()
        res = run(sc, pol)
        s = summarize(res.records, sc)
        write_cdf_csv(out / f"cdf_{name}.csv", s.cdf)
        rows.append((label, s.n_events, s.mean_energy_mJ, s.relative_energy, s.p95_ms,
                     s.sla_compliance_frac, *published))
        print(f"{label:9s} {s.n_events} events in {time.perf_counter() - t0:.1f} s")

    with open(out / "case_study.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scenario", "n_events", "mean_energy_mJ", "relative_energy", "p95_ms", "sla_compliance",
                    "published_mean_mJ", "published_relative", "published_p95_ms", "published_compliance"])
        w.writerows(rows)

    print(f"\n{'scenario':9s} {'mean mJ':>14s} {'relative':>12s} {'p95 ms':>16s} {'SLA':>14s}")
    for label, _, m, rel, p95, sla, pm, prel, pp95, psla in rows:
        psla_s = f"{psla:.3f}" if psla is not None else "  n/a"
        print(f"{label:9s} {m:6.2f} ({pm:5.2f}) {rel:5.2f} ({prel:4.2f}) {p95:7.1f} ({pp95:5.0f}) "
              f"{sla:.3f} ({psla_s})")
    print("published values in parentheses")


if __name__ == "__main__":
    main()
