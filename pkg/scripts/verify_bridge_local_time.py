"""Compare the exact bridge local-time sampler with brute-force fine-grid paths.

Each path runs on a grid of step dt and its occupation of (-eps, eps) divided
by 2 eps approximates L_1.  Given the end point, the exact sampler draws L_1
from the joint law; the two samples are compared with a two-sample KS test.
"""

import argparse
import math

import numba as nb
import numpy as np
from scipy import stats

from singular_bbm.samplers import RngStream, sample_bridge_local_time


@nb.njit(cache=True)
def fine_grid(seed, x0, n_paths, n_steps, dt, eps):
    np.random.seed(seed)
    ends = np.empty(n_paths)
    lt = np.empty(n_paths)
    sq = math.sqrt(dt)
    for p in range(n_paths):
        x = x0
        occ = 0.0
        for _ in range(n_steps):
            y = x + sq * np.random.standard_normal()
            if abs(0.5 * (x + y)) < eps:
                occ += dt
            x = y
        ends[p] = x
        lt[p] = occ / (2 * eps)
    return ends, lt


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--paths", type=int, default=10_000)
    p.add_argument("--dt", type=float, default=1e-5)
    p.add_argument("--eps", type=float, default=0.01)
    p.add_argument("--x0", type=float, nargs="+", default=[0.0, 0.3, 1.0])
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    n_steps = int(round(1.0 / args.dt))
    for i, x0 in enumerate(args.x0):
        ends, lt = fine_grid(args.seed + i, x0, args.paths, n_steps, args.dt, args.eps)
        exact = sample_bridge_local_time(RngStream(args.seed, i).generator, np.full(len(ends), x0), ends, 1.0)
        ks = stats.ks_2samp(lt, exact)
        print(f"x0={x0:5.2f}  mean grid {lt.mean():.4f}  exact {exact.mean():.4f}  "
              f"P(L>0) {np.mean(lt > 0):.4f} / {np.mean(exact > 0):.4f}  KS p={ks.pvalue:.3f}")


if __name__ == "__main__":
    main()
