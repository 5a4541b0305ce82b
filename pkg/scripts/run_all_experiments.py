"""Run every default experiment suite and write <id>.json / <id>.csv reports.

    python scripts/run_all_experiments.py --out reports --seed 0 --n-jobs -1
"""

import argparse
import sys
import time

from singular_bbm import experiments as ex


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="reports")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-jobs", type=int, default=1)
    p.add_argument("--suites", default=",".join(ex.SUITES))
    args = p.parse_args()

    failed = False
    for name in args.suites.split(","):
        t0 = time.perf_counter()
        for r in ex.run_suite(name, seed=args.seed, n_jobs=args.n_jobs):
            ex.emit_report(r, args.out)
            for v in r.verdicts:
                print(f"{r.experiment_id:18s} {v.name:32s} {v.status:12s} {v.measured: .5g} (target {v.target:.5g})")
            failed |= not r.ok
        print(f"-- {name}: {time.perf_counter() - t0:.1f}s", flush=True)
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
