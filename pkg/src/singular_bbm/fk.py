"""Monte Carlo estimators of Feynman-Kac functionals E_x[exp(A_t^nu) f(B_t)], and the extinction fixed point.

Paths are simulated on a fixed step with the same local-time increments as the
discretized engine, so estimator and engine share their bias structure.  Tail
functionals use importance sampling: paths get a constant drift of magnitude
theta in a direction drawn uniformly from the sphere, and the weight carries
the likelihood ratio of the resulting mixture, which keeps the estimator
unbiased and symmetric.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba as nb
import numpy as np
from scipy.optimize import brentq
from scipy.special import gammaln, ive

from .engine import LOCAL_TIME_MODES
from .model import BranchingMechanism, MeasureKind, RateMeasure, SignedNu
from .samplers import as_generator, band_lt, bridge_lt


@dataclass(frozen=True)
class FkEstimate:
    value: float
    std_error: float
    sample_count: int
    tilt_drift: float | None = None
    target: str = ""


@dataclass(frozen=True)
class ConstantOne:
    """f = 1."""

    def __call__(self, y: np.ndarray) -> np.ndarray:
        return np.ones(len(y))


@dataclass(frozen=True)
class BallIndicator:
    """Indicator of the closed ball (or, with ``outside``, of its complement)."""

    center: tuple[float, ...]
    radius: float
    outside: bool = False

    def __call__(self, y: np.ndarray) -> np.ndarray:
        r = np.linalg.norm(y - np.asarray(self.center, dtype=float), axis=1)
        inside = r <= self.radius
        return (~inside if self.outside else inside).astype(float)


@nb.njit(cache=True)
def _fk_paths(rng, x0, N, n_steps, dt, eps, is_shell, locs, ws, lt_mode, theta):
    """End points and A_t for N independent paths; theta > 0 adds a random-direction drift."""
    d = x0.shape[0]
    ends = np.empty((N, d))
    A = np.zeros(N)
    pos = np.empty(d)
    drift = np.zeros(d)
    sq = math.sqrt(dt)
    n_sites = locs.shape[0]
    for p in range(N):
        if theta > 0.0:
            nrm = 0.0
            for c in range(d):
                drift[c] = rng.standard_normal()
                nrm += drift[c] * drift[c]
            nrm = math.sqrt(nrm)
            for c in range(d):
                drift[c] *= theta / nrm
        for c in range(d):
            pos[c] = x0[c]
        a = 0.0
        for _ in range(n_steps):
            pre0 = pos[0]
            r_pre = 0.0
            if is_shell:
                for c in range(d):
                    r_pre += pos[c] * pos[c]
                r_pre = math.sqrt(r_pre)
            for c in range(d):
                pos[c] += drift[c] * dt + sq * rng.standard_normal()
            r_post = 0.0
            if is_shell:
                for c in range(d):
                    r_post += pos[c] * pos[c]
                r_post = math.sqrt(r_post)
            for j in range(n_sites):
                if is_shell:
                    u = r_pre - locs[j]
                    v = r_post - locs[j]
                else:
                    u = pre0 - locs[j]
                    v = pos[0] - locs[j]
                if lt_mode == 0:
                    inc = bridge_lt(rng, u, v, dt)
                else:
                    inc = band_lt(u, v, dt, eps)
                a += ws[j] * inc
        for c in range(d):
            ends[p, c] = pos[c]
        A[p] = a
    return ends, A


def _measure_arrays(nu):
    """(is_shell, support, signed weights, dimension) for a SignedNu or RateMeasure."""
    if isinstance(nu, SignedNu):
        return nu.kind is MeasureKind.SHELLS_RADIAL, nu.support, np.asarray(nu.nu_weights, float), nu.dimension
    if isinstance(nu, RateMeasure):
        return nu.kind is MeasureKind.SHELLS_RADIAL, nu.support, nu.weights, nu.dimension
    raise TypeError("nu must be a SignedNu or RateMeasure")


def _simulate(x, t, nu, N, dt, epsilon, rng, local_time, theta, sign=1.0):
    if not t > 0:
        raise ValueError("t must be positive")
    if int(N) <= 0:
        raise ValueError("N must be positive")
    is_shell, locs, ws, d = _measure_arrays(nu)
    x0 = np.atleast_1d(np.asarray(x, dtype=float))
    if x0.shape != (d,):
        raise ValueError(f"start point must have dimension {d}")
    n_steps = max(1, int(round(t / dt)))
    h = t / n_steps
    eps = 2.0 * math.sqrt(h) if epsilon is None else float(epsilon)
    return _fk_paths(
        as_generator(rng), x0, int(N), n_steps, h, eps, is_shell, locs, sign * ws,
        LOCAL_TIME_MODES[local_time], float(theta),
    ) + (x0,)


def _mean_se(v: np.ndarray) -> tuple[float, float]:
    n = len(v)
    m = float(v.mean())
    se = float(v.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return m, se


def estimate_fk(
    x,
    t: float,
    f=None,
    nu=None,
    N: int = 100_000,
    dt: float = 1e-3,
    epsilon: float | None = None,
    rng=None,
    local_time: str = "bridge",
) -> FkEstimate:
    """Sample mean and standard error of exp(A_t^nu) f(B_t) over N Brownian paths from x."""
    f = f or ConstantOne()
    ends, A, _ = _simulate(x, t, nu, N, dt, epsilon, rng, local_time, 0.0)
    m, se = _mean_se(np.exp(A) * f(ends))
    return FkEstimate(m, se, int(N), None, f"E[exp(A_t) f(B_t)], t={t:g}")


def mixture_likelihood_ratio(b: np.ndarray, theta: float, t: float) -> np.ndarray:
    """dP/dQ at displacement b (rows) for Q = drift theta*u with u uniform on the sphere.

    avg_u exp(theta <u, b>) = Gamma(d/2) (2/z)^(d/2-1) I_(d/2-1)(z) with z = theta |b|.
    """
    b = np.atleast_2d(b)
    d = b.shape[1]
    z = theta * np.linalg.norm(b, axis=1)
    if d == 1:
        log_avg = z + np.log1p(np.exp(-2.0 * z)) - math.log(2.0)  # log cosh z
    else:
        nu_ = 0.5 * d - 1.0
        zs = np.maximum(z, 1e-300)
        log_avg = np.where(
            z > 1e-8,
            gammaln(0.5 * d) + nu_ * (math.log(2.0) - np.log(zs)) + np.log(ive(nu_, zs)) + z,
            0.0,
        )
    return np.exp(0.5 * theta * theta * t - log_avg)


def _tail(x, t, R, nu, N, dt, epsilon, rng, local_time, theta, sign, target):
    ends, A, x0 = _simulate(x, t, nu, N, dt, epsilon, rng, local_time, theta, sign)
    hit = np.linalg.norm(ends, axis=1) >= R
    w = np.zeros(len(A))
    if theta > 0:
        w[hit] = np.exp(A[hit]) * mixture_likelihood_ratio(ends[hit] - x0, theta, t)
    else:
        w[hit] = np.exp(A[hit])
    m, se = _mean_se(w)
    return FkEstimate(m, se, int(N), float(theta) if theta > 0 else None, target)


def estimate_tail_fk(
    x,
    t: float,
    delta: float,
    a_shift: float = 0.0,
    nu=None,
    N: int = 100_000,
    dt: float = 1e-3,
    epsilon: float | None = None,
    rng=None,
    local_time: str = "bridge",
    tilt: bool = True,
) -> FkEstimate:
    """E_x[exp(A_t^nu); |B_t| >= delta*t + a_shift], tilted by drift delta unless ``tilt`` is False."""
    if not delta > 0:
        raise ValueError("delta must be positive")
    R = delta * t + a_shift
    return _tail(
        x, t, R, nu, N, dt, epsilon, rng, local_time, delta if tilt else 0.0, 1.0,
        f"E[exp(A_t); |B_t| >= {R:g}], t={t:g}",
    )


def mckean_fk_check(
    x,
    t: float,
    R_threshold: float,
    mu: RateMeasure,
    mech: BranchingMechanism | None = None,
    N: int = 100_000,
    rng=None,
    dt: float = 1e-2,
    local_time: str = "bridge",
) -> FkEstimate:
    """E_x[exp(-A_t^mu); |B_t| >= R]: the no-branching lower bound for P_x(L_t >= R)."""
    if mech is not None and np.any(mech.pmf_matrix()[:, 0] > 0):
        raise ValueError("the lower bound is stated for mechanisms without deaths")
    theta = R_threshold / t if R_threshold > 0 else 0.0
    return _tail(
        x, t, R_threshold, mu, N, dt, None, rng, local_time, theta, -1.0,
        f"E[exp(-A_t); |B_t| >= {R_threshold:g}], t={t:g}",
    )


def fkpp_extinction_fixed_point(pmf) -> float:
    """Minimal root in [0, 1] of u = sum_n p_n u^n."""
    p = np.asarray(pmf, dtype=float)
    if p.ndim != 1 or len(p) == 0 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("pmf must be a nonnegative vector summing to 1")
    n = np.arange(len(p))
    Q = float(p @ n)
    if Q <= 1.0:
        return 1.0
    if p[0] == 0.0:
        return 0.0
    F = np.polynomial.Polynomial(p)
    dF = F.deriv()
    # F - u is convex, positive at 0 and decreasing until F'(u) = 1
    u_min = brentq(lambda u: dF(u) - 1.0, 0.0, 1.0, xtol=1e-15)
    return float(brentq(lambda u: F(u) - u, 0.0, u_min, xtol=1e-14, rtol=1e-15))


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    intercept: float
    slope_se: float
    residual: float


def fit_log_slope(t, values) -> SlopeFit:
    """Ordinary least squares of log(values) against t."""
    t = np.asarray(t, dtype=float)
    y = np.log(np.asarray(values, dtype=float))
    X = np.column_stack([t, np.ones_like(t)])
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    res = y - X @ coef
    dof = max(len(t) - 2, 1)
    s2 = float(res @ res) / dof
    se = math.sqrt(s2 / float(((t - t.mean()) ** 2).sum()))
    return SlopeFit(float(coef[0]), float(coef[1]), se, float(np.sqrt(np.mean(res**2))))
