"""Random primitives: Gaussian steps, hitting times, inverse local time, local-time increments.

All samplers take a ``numpy.random.Generator`` (or an :class:`RngStream`) and
are deterministic functions of its state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba as nb
import numpy as np

# same-sign steps further than this (in units of 2|x||y|/dt) from the point
# touch it with probability below e^{-50}; their local time is taken as zero
BRIDGE_SKIP = 50.0


@dataclass
class RngStream:
    """Counter-based stream keyed by (master_seed, stream_id).

    The key is hashed through ``SeedSequence`` into a Philox key, so streams for
    different replicas are independent and can be created in any order.
    """

    master_seed: int
    stream_id: int = 0
    generator: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        seq = np.random.SeedSequence(int(self.master_seed), spawn_key=(int(self.stream_id),))
        self.generator = np.random.Generator(np.random.Philox(seq))

    @property
    def counter(self):
        return self.generator.bit_generator.state["state"]["counter"].copy()

    def substream(self, tag: int) -> RngStream:
        """Independent stream for a sub-purpose of this stream."""
        return RngStream(self.master_seed, (int(self.stream_id) << 16) ^ (int(tag) + 0x9E3779B9))


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.generator
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def sample_gaussian_step(rng, dt: float, d: int = 1, size=None) -> np.ndarray:
    if not dt > 0:
        raise ValueError("dt must be positive")
    shape = (d,) if size is None else (size, d)
    return math.sqrt(dt) * as_generator(rng).standard_normal(shape)


def sample_first_passage(rng, start_offset: float, size=None):
    """Hitting time of 0 by Brownian motion from ``start_offset``: x^2 / Z^2."""
    x = float(start_offset)
    g = as_generator(rng)
    if x == 0:
        return 0.0 if size is None else np.zeros(size)
    z = g.standard_normal(size)
    return x * x / (z * z)


def first_passage_cdf(t, start_offset: float):
    from scipy.special import ndtr

    t = np.asarray(t, dtype=float)
    return 2.0 * ndtr(-abs(start_offset) / np.sqrt(t))


def sample_inverse_local_time(rng, ell: float, size=None):
    """Inverse local time at level ``ell``: the 1/2-stable subordinator, ell^2 / Z^2."""
    if ell < 0:
        raise ValueError("ell must be nonnegative")
    g = as_generator(rng)
    if ell == 0:
        return 0.0 if size is None else np.zeros(size)
    z = g.standard_normal(size)
    return ell * ell / (z * z)


def sample_bridge_local_time(rng, x, y, dt: float):
    """Local time at 0 of a Brownian bridge from x to y over time dt.

    Exact: P(L > l) = exp(-((|x| + |y| + l)^2 - (y - x)^2) / (2 dt)) for l >= 0.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    e = as_generator(rng).standard_exponential(np.broadcast(x, y).shape)
    ell = np.sqrt((y - x) ** 2 + 2.0 * dt * e) - (np.abs(x) + np.abs(y))
    return np.maximum(ell, 0.0)


def sample_survivor_position(rng, gamma: float, t: float, size=None, x0: float = 0.0):
    """B_t from x0 under the law weighted by exp(-gamma L_t), normalized.

    Rejection: propose B_t ~ N(x0, t), draw L_t from its exact conditional law
    given the endpoints, accept with probability exp(-gamma L_t).
    """
    if not gamma > 0 or not t > 0:
        raise ValueError("gamma and t must be positive")
    g = as_generator(rng)
    n = 1 if size is None else int(size)
    out = np.empty(n)
    filled = 0
    sd = math.sqrt(t)
    while filled < n:
        m = max(16, 2 * (n - filled))
        y = x0 + sd * g.standard_normal(m)
        ell = sample_bridge_local_time(g, np.full(m, x0), y, t)
        keep = y[g.random(m) < np.exp(-gamma * ell)]
        take = min(len(keep), n - filled)
        out[filled : filled + take] = keep[:take]
        filled += take
    return out[0] if size is None else out


def survival_probability(gamma: float, t: float) -> float:
    """E_0[exp(-gamma L_t)] = 2 e^{gamma^2 t/2} Phi(-gamma sqrt t)."""
    from scipy.special import log_ndtr

    return 2.0 * math.exp(0.5 * gamma * gamma * t + log_ndtr(-gamma * math.sqrt(t)))


def local_time_increment(pre_pos, post_pos, dt: float, epsilon: float):
    """Band surrogate (dt / 2 eps) 1{|midpoint| < eps} for the local time at 0."""
    if not dt > 0 or not epsilon > 0:
        raise ValueError("dt and epsilon must be positive")
    mid = 0.5 * (np.asarray(pre_pos, dtype=float) + np.asarray(post_pos, dtype=float))
    return np.where(np.abs(mid) < epsilon, dt / (2.0 * epsilon), 0.0)


def shell_local_time_increment(pre_r, post_r, R: float, dt: float, epsilon: float, d: int):
    """Band surrogate for the additive functional of the unit surface measure on |x| = R."""
    if not dt > 0 or not epsilon > 0 or not R > 0 or d < 2:
        raise ValueError("dt, epsilon, R must be positive and d >= 2")
    mid = 0.5 * (np.asarray(pre_r, dtype=float) + np.asarray(post_r, dtype=float))
    return np.where(np.abs(mid - R) < epsilon, dt / (2.0 * epsilon), 0.0)


# -- compiled helpers shared by the engine and the FK estimators ----------------


@nb.njit(cache=True)
def bridge_lt(rng, x, y, dt):
    """One draw of the bridge local time at 0 (see sample_bridge_local_time)."""
    ax = abs(x)
    ay = abs(y)
    if x * y > 0.0 and 2.0 * ax * ay > BRIDGE_SKIP * dt:
        return 0.0
    e = rng.standard_exponential()
    ell = math.sqrt((y - x) * (y - x) + 2.0 * dt * e) - (ax + ay)
    return ell if ell > 0.0 else 0.0


@nb.njit(cache=True)
def band_lt(x, y, dt, eps):
    if abs(0.5 * (x + y)) < eps:
        return dt / (2.0 * eps)
    return 0.0


@nb.njit(cache=True)
def sample_offspring(rng, cdf):
    u = rng.random()
    n = 0
    last = cdf.shape[0] - 1
    while n < last and u >= cdf[n]:
        n += 1
    return n


# -- distributional self-test ---------------------------------------------------


@dataclass(frozen=True)
class SamplerCheck:
    name: str
    value: float
    target: float
    tolerance: float

    @property
    def ok(self) -> bool:
        return abs(self.value - self.target) <= self.tolerance


def selftest(seed: int = 0, n: int = 100_000) -> list[SamplerCheck]:
    """Closed-form checks of the primitive samplers at a fixed seed."""
    from scipy.special import ndtr

    root = RngStream(seed, 0)
    out = []
    fp = sample_first_passage(root.substream(1).generator, 1.0, n)
    out.append(SamplerCheck("first_passage_cdf(t=1,x=1)", float(np.mean(fp <= 1.0)), float(2 * ndtr(-1.0)), 0.01))
    tau = sample_inverse_local_time(root.substream(2).generator, 1.0, n)
    out.append(SamplerCheck("inverse_local_time_laplace(a=0.5,l=1)", float(np.mean(np.exp(-0.5 * tau))), math.exp(-1.0), 0.005))
    g = root.substream(3).generator
    y = math.sqrt(2.0) * g.standard_normal(n)
    ell = sample_bridge_local_time(g, np.zeros(n), y, 2.0)
    sd = float(np.std(np.exp(ell)) / math.sqrt(n))
    out.append(SamplerCheck("bridge_local_time_exp_moment(t=2)", float(np.mean(np.exp(ell))),
                            float(2 * math.e * ndtr(math.sqrt(2.0))), 4 * sd))
    surv = np.abs(sample_survivor_position(root.substream(4).generator, 1.0, 1.0, n))
    out.append(SamplerCheck("survivor_abs_mean(gamma=1,t=1)", float(np.mean(surv)), survivor_abs_moment(1.0, 1.0),
                            4 * float(np.std(surv)) / math.sqrt(n)))
    return out


def joint_local_time_density(ell, y, t):
    """Density of (L_t, |B_t|) at (ell, y) for Brownian motion started at the point."""
    s = ell + y
    return 2.0 * s / math.sqrt(2.0 * math.pi * t**3) * np.exp(-s * s / (2.0 * t))


def survivor_abs_moment(gamma: float, t: float, k: int = 1) -> float:
    """E[|B_t|^k exp(-gamma L_t)] / E[exp(-gamma L_t)] by quadrature of the joint density."""
    from scipy.integrate import dblquad

    lim = 40.0 * math.sqrt(t)
    num, _ = dblquad(lambda l, y: y**k * math.exp(-gamma * l) * joint_local_time_density(l, y, t), 0, lim, 0, lim)
    return num / survival_probability(gamma, t)
