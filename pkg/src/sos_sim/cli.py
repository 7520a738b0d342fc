"""``sos-sim`` command line: run, sweep, train.

Exit codes: 0 success, 2 configuration error, 3 engine invariant breach.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

from . import __version__
from .domain import ConfigError, ConfigIssue, DomainError, Scenario, load_scenario
from .engine import (
    SimulationInvariantError,
    run,
    write_decisions_csv,
    write_records_csv,
)
from .metrics import summarize, write_cdf_csv, write_sweep_csv
from .rlpolicy import QTable, RlHyper, RlPolicy, heldout_seed, train, write_training_csv
from .scheduler import BaselinePolicy, RulePolicy
from .workload import write_events_csv

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


@dataclass
class RunManifest:
    scenario_path: str
    seed: int
    tool_version: str
    command: str
    policy: str
    input_digest: str
    started_at: float
    finished_at: float = 0.0
    outputs: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def write(self, out: Path) -> Path:
        self.finished_at = time.time()
        p = out / "manifest.json"
        p.write_text(json.dumps(asdict(self), indent=2, sort_keys=True), encoding="utf-8")
        return p


def _digest(*parts: bytes) -> str:
    h = hashlib.sha256()
    for part in parts:
        h.update(len(part).to_bytes(8, "little"))
        h.update(part)
    return h.hexdigest()


def _load(path: str) -> tuple[Scenario, bytes]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise ConfigError([ConfigIssue("MissingField", "--scenario", str(exc))]) from exc
    return load_scenario(path), raw


def make_policy(spec: str, scenario: Scenario):
    """Policy from ``baseline``, ``rule`` or ``rl:<checkpoint.json>``."""
    if spec == "baseline":
        return BaselinePolicy(), b""
    if spec == "rule":
        return RulePolicy(scenario), b""
    if spec.startswith("rl:"):
        path = spec[3:]
        try:
            blob = Path(path).read_bytes()
            q = QTable.from_json(blob.decode("utf-8"))
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise ConfigError([ConfigIssue("TypeMismatch", "--policy", f"bad checkpoint {path}: {exc}")]) from exc
        return RlPolicy(scenario, q), blob
    raise ConfigError([ConfigIssue("OutOfRange", "--policy", "baseline | rule | rl:<checkpoint>")])


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True), encoding="utf-8")


def cmd_run(args) -> int:
    started = time.time()
    scenario, raw = _load(args.scenario)
    if args.seed is not None:
        scenario = scenario.with_seed(args.seed)
    policy, blob = make_policy(args.policy, scenario)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    res = run(scenario, policy, trace=args.trace)
    summary = summarize(res.records, scenario, full_cdf=args.full_cdf)
    outputs = []
    p = out / "summary.json"
    p.write_text(summary.to_json(), encoding="utf-8")
    outputs.append(p)
    p = out / "cdf.csv"
    write_cdf_csv(p, summary.cdf)
    outputs.append(p)
    if args.trace:
        for name, writer, data in (("records.csv", write_records_csv, res.records),
                                   ("decisions.csv", write_decisions_csv, res.decisions),
                                   ("events.csv", write_events_csv, res.events)):
            p = out / name
            writer(p, data)
            outputs.append(p)
    man = RunManifest(
        scenario_path=str(args.scenario), seed=scenario.seed, tool_version=__version__,
        command="run", policy=args.policy,
        input_digest=_digest(raw, args.policy.encode(), str(scenario.seed).encode(), blob),
        started_at=started, outputs=[q.name for q in outputs],
        extra={"deferral_violations": len(res.stats.deferral_violations),
               "deferred": res.stats.n_deferred, "offloaded": res.stats.n_offloaded},
    )
    man.write(out)
    print(f"{len(res.records)} events  mean {summary.mean_energy_mJ:.4f} mJ  "
          f"relative {summary.relative_energy:.4f}  p95 {summary.p95_ms:.2f} ms  "
          f"SLA {summary.sla_compliance_frac:.4f}")
    return EXIT_OK


def _parse_list(text: str, conv, what: str) -> list:
    items = [t for t in (s.strip() for s in text.split(",")) if t]
    if not items:
        raise ConfigError([ConfigIssue("MissingField", what, "empty list")])
    try:
        return [conv(t) for t in items]
    except ValueError as exc:
        raise ConfigError([ConfigIssue("TypeMismatch", what, str(exc))]) from exc


def _sweep_one(job):
    scenario, policy_spec, rate, seed = job
    sc = scenario.with_resumption(rate).with_seed(seed)
    policy, _ = make_policy(policy_spec, sc)
    res = run(sc, policy)
    s = summarize(res.records, sc)
    return rate, seed, s


def cmd_sweep(args) -> int:
    started = time.time()
    scenario, raw = _load(args.scenario)
    rates = _parse_list(args.resume_rates, float, "--resume-rates")
    for r in rates:
        if not 0.0 <= r <= 1.0:
            raise ConfigError([ConfigIssue("OutOfRange", "--resume-rates", f"{r} outside [0, 1]")])
    seeds = _parse_list(args.seeds, int, "--seeds")
    for s in seeds:
        if not 0 <= s < 2**64:
            raise ConfigError([ConfigIssue("OutOfRange", "--seeds", f"{s} not an unsigned 64-bit integer")])
    make_policy(args.policy, scenario)  # validate early
    out = Path(args.out)
    (out / "runs").mkdir(parents=True, exist_ok=True)

    jobs = [(scenario, args.policy, r, s) for r in rates for s in seeds]
    cap = int(os.environ.get("SOS_SIM_THREADS", os.cpu_count() or 1))
    workers = max(1, min(cap, len(jobs)))
    if workers == 1:
        results = [_sweep_one(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_sweep_one, jobs))

    outputs = []
    by_rate: dict[float, list] = {}
    for rate, seed, s in results:
        by_rate.setdefault(rate, []).append(s)
        p = out / "runs" / f"p{rate:g}_seed{seed}.json"
        p.write_text(s.to_json(), encoding="utf-8")
        outputs.append(p)
    name = Path(args.scenario).stem
    rows = []
    for rate in rates:
        ss = by_rate[rate]
        k = len(ss)
        rows.append((name, rate, sum(x.relative_energy for x in ss) / k,
                     sum(x.p95_ms for x in ss) / k, sum(x.sla_compliance_frac for x in ss) / k))
    p = out / "sweep.csv"
    write_sweep_csv(p, rows)
    outputs.append(p)
    man = RunManifest(
        scenario_path=str(args.scenario), seed=seeds[0], tool_version=__version__, command="sweep",
        policy=args.policy, input_digest=_digest(raw, args.policy.encode(), args.resume_rates.encode(),
                                                 args.seeds.encode()),
        started_at=started, outputs=[str(q.relative_to(out)) for q in outputs],
        extra={"seeds": seeds, "resume_rates": rates},
    )
    man.write(out)
    for row in rows:
        print(f"p_resume {row[1]:.3f}  relative {row[2]:.4f}  p95 {row[3]:.2f} ms  SLA {row[4]:.4f}")
    return EXIT_OK


def cmd_train(args) -> int:
    started = time.time()
    scenario, raw = _load(args.scenario)
    if args.seed is not None:
        scenario = scenario.with_seed(args.seed)
    if args.episodes < 1:
        raise ConfigError([ConfigIssue("OutOfRange", "--episodes", ">= 1")])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    hyper = RlHyper(alpha=args.alpha, gamma=args.gamma, epsilon=args.epsilon)
    result = train(scenario, args.episodes, hyper)
    outputs = []
    p = out / "qtable.json"
    p.write_text(result.policy.q.to_json(), encoding="utf-8")
    outputs.append(p)
    p = out / "training_curve.csv"
    write_training_csv(p, result.curve)
    outputs.append(p)

    evaluation = {}
    if args.evaluate:
        held = scenario.with_seed(heldout_seed(scenario.seed))
        rl = result.policy
        rl.bind(held)
        e_rl = summarize(run(held, rl).records, held).mean_energy_mJ
        e_base = summarize(run(held, BaselinePolicy()).records, held).mean_energy_mJ
        e_rule = summarize(run(held, RulePolicy(held)).records, held).mean_energy_mJ
        evaluation = {"heldout_seed": held.seed, "rl_mean_energy_mJ": e_rl,
                      "baseline_mean_energy_mJ": e_base, "rule_mean_energy_mJ": e_rule,
                      "energy_ratio_vs_baseline": e_rl / e_base}
        p = out / "evaluation.json"
        _write_json(p, evaluation)
        outputs.append(p)
        print(f"held-out seed {held.seed}: RL/baseline energy ratio {e_rl / e_base:.4f}")
    man = RunManifest(
        scenario_path=str(args.scenario), seed=scenario.seed, tool_version=__version__, command="train",
        policy="rl", input_digest=_digest(raw, str(scenario.seed).encode(), str(args.episodes).encode(),
                                          json.dumps(asdict(hyper), sort_keys=True).encode()),
        started_at=started, outputs=[q.name for q in outputs],
        extra={"episodes": args.episodes, "masked_emissions": result.masked_emissions},
    )
    man.write(out)
    return EXIT_OK


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sos-sim", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="simulate one scenario")
    r.add_argument("--scenario", required=True)
    r.add_argument("--policy", default="rule", help="baseline | rule | rl:<checkpoint.json>")
    r.add_argument("--seed", type=_u64)
    r.add_argument("--out", required=True)
    r.add_argument("--trace", action="store_true", help="also write record, decision and event traces")
    r.add_argument("--full-cdf", action="store_true", help="do not thin the CDF to 2000 points")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="cross-product of resumption rates and seeds")
    s.add_argument("--scenario", required=True)
    s.add_argument("--resume-rates", required=True, help="comma-separated, e.g. 0,0.40,0.63")
    s.add_argument("--seeds", required=True, help="comma-separated unsigned integers")
    s.add_argument("--policy", default="rule")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep)

    t = sub.add_parser("train", help="train the constrained RL policy")
    t.add_argument("--scenario", required=True)
    t.add_argument("--episodes", type=int, required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=_u64)
    t.add_argument("--alpha", type=float, default=RlHyper.alpha)
    t.add_argument("--gamma", type=float, default=RlHyper.gamma)
    t.add_argument("--epsilon", type=float, default=RlHyper.epsilon)
    t.add_argument("--no-evaluate", dest="evaluate", action="store_false",
                   help="skip the held-out comparison against baseline and rule policies")
    t.set_defaults(func=cmd_train)
    return ap


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DomainError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SimulationInvariantError as exc:
        print(f"invariant breach: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
