"""Command line interface: ``singular-bbm {eigen,simulate,fk,experiment}``."""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import replace
from pathlib import Path

from . import experiments as ex
from .eigen import solve_lambda
from .engine import run_replicas
from .fk import estimate_fk, estimate_tail_fk, fkpp_extinction_fixed_point, mckean_fk_check
from .model import (
    BranchingMechanism,
    ModelError,
    RateMeasure,
    RunSettings,
    Scenario,
    build_signed_nu,
    load_scenario,
    tomllib,
    validate_scenario,
)
from .samplers import RngStream, selftest


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _default_scenario(seed: int) -> tuple[Scenario, RunSettings]:
    s = Scenario(RateMeasure.single_atom(1.0), BranchingMechanism.binary(), (0.0,), 2.0, (0.5, 1.0, 2.0), seed=seed)
    return s, RunSettings()


def _scenario(args) -> tuple[Scenario, RunSettings]:
    if args.config:
        s, settings = load_scenario(args.config)
    else:
        s, settings = _default_scenario(0)
    if getattr(args, "seed", None) is not None:
        s = replace(s, seed=args.seed)
    return s, settings


def cmd_eigen(args) -> int:
    if args.config:
        s, _ = load_scenario(args.config)
        nu = build_signed_nu(s.measure, s.mechanism)
    else:
        from .model import signed_nu_from_points

        if args.shell:
            d, R, w = _floats(args.shell)
            nu = signed_nu_from_points([(R, w)], int(d))
        else:
            pts = [tuple(_floats(p.replace(":", ","))) for p in (args.atoms or "0:1").split(";")]
            nu = signed_nu_from_points(pts, 1)
    e = solve_lambda(nu)
    if e is None:
        out = {"exists": False}
    else:
        p = e.profile()
        out = {
            "exists": True,
            "lambda": float(e.lam),
            "decay_rate": float(e.decay_rate),
            "critical_delta": p.critical_delta,
            "ballistic_delta": p.ballistic_delta,
        }
    print(json.dumps(out, indent=2, sort_keys=True))
    return 0


def cmd_simulate(args) -> int:
    s, settings = _scenario(args)
    if args.replicas is not None:
        s = replace(s, replica_count=args.replicas)
    if args.backend:
        settings = replace(settings, backend=args.backend)
    rep = validate_scenario(s)
    if not rep:
        print("invalid scenario: " + "; ".join(rep.reasons), file=sys.stderr)
        return 2
    eig = solve_lambda(build_signed_nu(s.measure, s.mechanism))
    ens = run_replicas(s, settings.backend, eig, settings, n_jobs=args.n_jobs)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "replicas.csv").write_text(ens.to_csv())
        (out / "summary.json").write_text(ens.summary_json() + "\n")
    else:
        sys.stdout.write(ens.summary_json() + "\n")
    return 0


def cmd_fk(args) -> int:
    s, settings = _scenario(args)
    nu = build_signed_nu(s.measure, s.mechanism)
    times = _floats(args.times) if args.times else list(s.observation_times)
    seed = s.seed
    rows = []
    if args.target == "extinction":
        u = fkpp_extinction_fixed_point(s.mechanism.per_site[0])
        rows.append((math.inf, u, 0.0))
    for k, t in enumerate(times if args.target != "extinction" else []):
        g = RngStream(seed, ex.FK_STREAM_BASE + k).generator
        if args.target == "mean":
            e = estimate_fk(s.initial_position, t, None, nu, args.N, args.dt, settings.epsilon, g, settings.local_time)
        elif args.target == "tail":
            e = estimate_tail_fk(s.initial_position, t, args.delta, 0.0, nu, args.N, args.dt, settings.epsilon, g,
                                 settings.local_time)
        else:
            e = mckean_fk_check(s.initial_position, t, args.delta * t, s.measure, s.mechanism, args.N, g, args.dt,
                                settings.local_time)
        rows.append((t, e.value, e.std_error))
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["t", "value", "se"])
    for t, v, se in rows:
        w.writerow(["inf" if math.isinf(t) else repr(t), repr(float(v)), repr(float(se))])
    if args.out:
        fh.close()
    return 0


def cmd_experiment(args) -> int:
    config = {}
    if args.config:
        config = tomllib.loads(Path(args.config).read_text())
    suite_cfg = config.get(args.suite) if args.suite != "all" else config
    reports = ex.run_suite(args.suite, seed=args.seed, n_jobs=args.n_jobs, config=suite_cfg)
    failed = False
    for r in reports:
        if args.out:
            ex.emit_report(r, args.out)
        for v in r.verdicts:
            print(f"{r.experiment_id:20s} {v.name:36s} {v.status:13s} measured={v.measured:.6g} target={v.target:.6g}")
        print(f"{r.experiment_id:20s} runtime {r.runtime:.1f}s")
        failed |= not r.ok
    return 1 if failed else 0


def cmd_selftest(args) -> int:
    checks = selftest(args.seed, args.N)
    for c in checks:
        print(f"{'PASS' if c.ok else 'FAIL'} {c.name}: {c.value:.6g} (target {c.target:.6g} +- {c.tolerance:.3g})")
    return 0 if all(c.ok for c in checks) else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="singular-bbm", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True, metavar="{eigen,simulate,fk,experiment}")

    e = sub.add_parser("eigen", help="principal eigenvalue and rate profile")
    e.add_argument("--config", help="scenario TOML; nu = (Q - 1) mu")
    e.add_argument("--atoms", help="signed atoms 'x:w;x:w' in d = 1")
    e.add_argument("--shell", help="single shell 'd,R,w'")
    e.set_defaults(func=cmd_eigen)

    s = sub.add_parser("simulate", help="run replicas of a scenario")
    s.add_argument("--config")
    s.add_argument("--backend", choices=["auto", "event", "discretized"])
    s.add_argument("--replicas", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--n-jobs", type=int, default=1)
    s.add_argument("--out", help="directory for replicas.csv and summary.json")
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("fk", help="Feynman-Kac estimates")
    f.add_argument("--config")
    f.add_argument("--target", choices=["mean", "tail", "extinction", "mckean"], default="mean")
    f.add_argument("--delta", type=float, default=1.0)
    f.add_argument("--times", help="comma separated times")
    f.add_argument("--N", type=int, default=100_000)
    f.add_argument("--dt", type=float, default=1e-2)
    f.add_argument("--seed", type=int)
    f.add_argument("--out")
    f.set_defaults(func=cmd_fk)

    x = sub.add_parser("experiment", help="run an experiment suite and emit reports")
    x.add_argument("--suite", choices=list(ex.SUITES) + ["all"], default="all")
    x.add_argument("--config", help="TOML with per-suite overrides")
    x.add_argument("--out")
    x.add_argument("--seed", type=int, default=0)
    x.add_argument("--n-jobs", type=int, default=1)
    x.set_defaults(func=cmd_experiment)

    t = sub.add_parser("selftest-samplers")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--N", type=int, default=100_000)
    t.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ModelError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
