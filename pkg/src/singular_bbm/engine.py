"""Branching Brownian motion with branching driven by the additive functional of an atom/shell measure.

Two backends:

* ``event``: exact event simulation for a single atom in d = 1.  A particle at
  distance x from the atom branches after the hitting time of the atom plus the
  inverse local time at level E / w (E ~ Exp(1)).  Positions of unbranched
  particles at observation times are drawn from the killed transition law.
* ``discretized``: fixed time step for every model.  The clock functional is
  advanced each step either by the exact bridge local time given the step
  endpoints (``local_time="bridge"``, default) or by the band surrogate
  (``local_time="band"``).

Replicas use independent counter-based streams keyed by (seed, replica id).
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field

import numba as nb
import numpy as np
from joblib import Parallel, delayed

from .eigen import EigenResult
from .model import MeasureKind, RunSettings, Scenario, validate_scenario
from .samplers import RngStream, as_generator, band_lt, bridge_lt, sample_offspring

CORE_MARGIN = 5.0
LOCAL_TIME_MODES = {"bridge": 0, "band": 1}


class CappedRun(Exception):
    pass


# -- compiled kernels ---------------------------------------------------------------


@nb.njit(cache=True)
def _grow1(a, need):
    if need <= a.shape[0]:
        return a
    b = np.empty(max(need, 2 * a.shape[0]), a.dtype)
    b[: a.shape[0]] = a
    return b


@nb.njit(cache=True)
def _grow2(a, need):
    if need <= a.shape[0]:
        return a
    b = np.empty((max(need, 2 * a.shape[0]), a.shape[1]), a.dtype)
    b[: a.shape[0]] = a
    return b


@nb.njit(cache=True)
def _event_single_atom(rng, x0, w, cdf, obs, cap):
    """Exact single-atom simulation; positions are relative to the atom.

    Returns (positions, offsets, n_branch, capped_index, extinction_time) where
    snapshot k is positions[offsets[k]:offsets[k+1]] and capped_index is the
    first observation index that could not be produced (or -1).
    """
    n_obs = obs.shape[0]
    cur_x = np.empty(16)
    cur_x[0] = x0
    n_cur = 1
    stack_x = np.empty(64)
    stack_s = np.empty(64)
    pend_x = np.empty(64)
    pend_s = np.empty(64)
    out = np.empty(64)
    n_out = 0
    offsets = np.zeros(n_obs + 1, np.int64)
    n_branch = 0
    capped_at = -1
    ext = np.nan
    t_prev = 0.0
    for k in range(n_obs):
        T = obs[k]
        stack_x = _grow1(stack_x, n_cur)
        stack_s = _grow1(stack_s, n_cur)
        for i in range(n_cur):
            stack_x[i] = cur_x[i]
            stack_s[i] = t_prev
        ns = n_cur
        npend = 0
        last_death = -1.0
        while ns > 0:
            ns -= 1
            x = stack_x[ns]
            s = stack_s[ns]
            z = s
            if x != 0.0:
                g = rng.standard_normal()
                z += x * x / (g * g)
            if z <= T:
                lev = rng.standard_exponential() / w
                g = rng.standard_normal()
                z += lev * lev / (g * g)
            if z <= T:
                m = sample_offspring(rng, cdf)
                n_branch += 1
                if m == 0 and z > last_death:
                    last_death = z
                stack_x = _grow1(stack_x, ns + m)
                stack_s = _grow1(stack_s, ns + m)
                for _ in range(m):
                    stack_x[ns] = 0.0
                    stack_s[ns] = z
                    ns += 1
                if ns + npend > cap:
                    capped_at = k
                    break
            else:
                pend_x = _grow1(pend_x, npend + 1)
                pend_s = _grow1(pend_s, npend + 1)
                pend_x[npend] = x
                pend_s[npend] = s
                npend += 1
        if capped_at >= 0:
            for q in range(k + 1, n_obs + 1):
                offsets[q] = n_out
            break
        out = _grow1(out, n_out + npend)
        cur_x = _grow1(cur_x, npend)
        for i in range(npend):
            x = pend_x[i]
            tau = T - pend_s[i]
            y = x
            if tau > 0.0:
                sd = math.sqrt(tau)
                while True:
                    y = x + sd * rng.standard_normal()
                    ell = bridge_lt(rng, x, y, tau)
                    if ell == 0.0 or rng.random() < math.exp(-w * ell):
                        break
            out[n_out] = y
            n_out += 1
            cur_x[i] = y
        n_cur = npend
        offsets[k + 1] = n_out
        t_prev = T
        if npend == 0:
            ext = last_death
            for q in range(k + 1, n_obs + 1):
                offsets[q] = n_out
            break
    return out[:n_out], offsets, n_branch, capped_at, ext


@nb.njit(cache=True)
def _discretized(rng, x0, is_shell, locs, ws, cdfs, obs_steps, dt, eps, lt_mode, cap):
    """Time-stepped simulation for atoms (d = 1) or radial shells (d >= 2)."""
    d = x0.shape[0]
    n_sites = locs.shape[0]
    n_obs = obs_steps.shape[0]
    pos = np.empty((64, d))
    A = np.empty(64)
    thr = np.empty(64)
    for c in range(d):
        pos[0, c] = x0[c]
    A[0] = 0.0
    thr[0] = rng.standard_exponential()
    n = 1
    out = np.empty((64, d))
    n_out = 0
    offsets = np.zeros(n_obs + 1, np.int64)
    ev_i = np.empty(16, np.int64)
    ev_site = np.empty(16, np.int64)
    site = np.empty(d)
    n_branch = 0
    capped_at = -1
    ext = np.nan
    sq = math.sqrt(dt)
    k = 0
    n_steps = obs_steps[n_obs - 1]
    for step in range(1, n_steps + 1):
        n_ev = 0
        for i in range(n):
            pre0 = pos[i, 0]
            r_pre = 0.0
            if is_shell:
                for c in range(d):
                    r_pre += pos[i, c] * pos[i, c]
                r_pre = math.sqrt(r_pre)
            for c in range(d):
                pos[i, c] += sq * rng.standard_normal()
            r_post = 0.0
            if is_shell:
                for c in range(d):
                    r_post += pos[i, c] * pos[i, c]
                r_post = math.sqrt(r_post)
            best = -1
            best_inc = 0.0
            tot = 0.0
            for j in range(n_sites):
                if is_shell:
                    a = r_pre - locs[j]
                    b = r_post - locs[j]
                else:
                    a = pre0 - locs[j]
                    b = pos[i, 0] - locs[j]
                if lt_mode == 0:
                    inc = bridge_lt(rng, a, b, dt)
                else:
                    inc = band_lt(a, b, dt, eps)
                inc *= ws[j]
                if inc > best_inc:
                    best_inc = inc
                    best = j
                tot += inc
            A[i] += tot
            if best >= 0 and A[i] >= thr[i]:
                ev_i = _grow1(ev_i, n_ev + 1)
                ev_site = _grow1(ev_site, n_ev + 1)
                ev_i[n_ev] = i
                ev_site[n_ev] = best
                n_ev += 1
        # descending order keeps swap-removal from disturbing pending events
        for q in range(n_ev - 1, -1, -1):
            i = ev_i[q]
            j = ev_site[q]
            m = sample_offspring(rng, cdfs[j])
            n_branch += 1
            if is_shell:
                r = 0.0
                for c in range(d):
                    r += pos[i, c] * pos[i, c]
                r = math.sqrt(r)
                if r == 0.0:
                    for c in range(d):
                        site[c] = rng.standard_normal()
                        r += site[c] * site[c]
                    r = math.sqrt(r)
                    for c in range(d):
                        site[c] *= locs[j] / r
                else:
                    for c in range(d):
                        site[c] = pos[i, c] * locs[j] / r
            else:
                site[0] = locs[j]
            if m == 0:
                n -= 1
                if i != n:
                    for c in range(d):
                        pos[i, c] = pos[n, c]
                    A[i] = A[n]
                    thr[i] = thr[n]
            else:
                for c in range(d):
                    pos[i, c] = site[c]
                A[i] = 0.0
                thr[i] = rng.standard_exponential()
                pos = _grow2(pos, n + m - 1)
                A = _grow1(A, n + m - 1)
                thr = _grow1(thr, n + m - 1)
                for _ in range(m - 1):
                    for c in range(d):
                        pos[n, c] = site[c]
                    A[n] = 0.0
                    thr[n] = rng.standard_exponential()
                    n += 1
        if n > cap:
            capped_at = k
            for q in range(k + 1, n_obs + 1):
                offsets[q] = n_out
            break
        while k < n_obs and obs_steps[k] == step:
            out = _grow2(out, n_out + n)
            for i in range(n):
                for c in range(d):
                    out[n_out, c] = pos[i, c]
                n_out += 1
            offsets[k + 1] = n_out
            k += 1
        if n == 0:
            ext = step * dt
            for q in range(k + 1, n_obs + 1):
                offsets[q] = n_out
            break
    return out[:n_out], offsets, n_branch, capped_at, ext


# -- observables ------------------------------------------------------------------------


@dataclass
class PopulationSnapshot:
    time: float
    positions: np.ndarray  # (n, d)

    @property
    def alive_count(self) -> int:
        return int(self.positions.shape[0])


@dataclass
class ObservableRow:
    Z: int
    Z_delta: np.ndarray
    L: float
    L_r: np.ndarray
    M: float
    Z_core: int


def _unit_directions(directions, d: int) -> np.ndarray:
    if not len(directions):
        return np.zeros((0, d))
    r = np.asarray(directions, dtype=float).reshape(len(directions), d)
    return r / np.linalg.norm(r, axis=1, keepdims=True)


def compute_observables(
    snapshot: PopulationSnapshot,
    deltas=(),
    directions=(),
    eigen: EigenResult | None = None,
    core: tuple | None = None,
) -> ObservableRow:
    """Counts, maximal displacement, directional maxima and the additive martingale at one time.

    ``core`` = (kind, support, radius) defines the compact set used as the
    survival proxy; its count is reported as Z_core.
    """
    x = np.asarray(snapshot.positions, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    t = snapshot.time
    d = x.shape[1]
    n = x.shape[0]
    dirs = _unit_directions(directions, d)
    if n == 0:
        return ObservableRow(0, np.zeros(len(deltas), dtype=np.int64), 0.0, np.zeros(len(dirs)), 0.0, 0)
    norms = np.linalg.norm(x, axis=1)
    z_delta = np.array([int(np.count_nonzero(norms >= dl * t)) for dl in deltas], dtype=np.int64)
    L_r = (x @ dirs.T).max(axis=0) if len(dirs) else np.zeros(0)
    M = math.nan
    if eigen is not None:
        M = math.exp(eigen.lam * t) * float(np.sum(eigen.h(x if d > 1 else x[:, 0])))
    z_core = 0
    if core is not None:
        kind, support, radius = core
        if kind is MeasureKind.ATOMS_1D:
            z_core = int(np.count_nonzero(np.min(np.abs(x[:, :1] - support[None, :]), axis=1) <= radius))
        else:
            z_core = int(np.count_nonzero(norms <= support.max() + radius))
    return ObservableRow(n, z_delta, float(norms.max()), L_r, M, z_core)


@dataclass
class ObservableSeries:
    times: np.ndarray
    Z: np.ndarray
    Z_delta: np.ndarray
    L: np.ndarray
    L_r: np.ndarray
    M: np.ndarray
    Z_core: np.ndarray
    extinct: np.ndarray
    valid: np.ndarray
    extinction_time: float
    n_branch: int
    capped: bool
    final_positions: np.ndarray | None = field(default=None, repr=False)


def _series_from_kernel(s: Scenario, out, offsets, n_branch, capped_at, ext, deltas, directions, eigen, shift, keep_final):
    d = s.dimension
    pos = np.asarray(out).reshape(-1, d)
    if shift is not None:
        pos = pos + shift
    times = np.asarray(s.observation_times)
    n_obs = len(times)
    n_dir = len(directions)
    Z = np.zeros(n_obs, dtype=np.int64)
    Zd = np.zeros((n_obs, len(deltas)), dtype=np.int64)
    L = np.zeros(n_obs)
    Lr = np.zeros((n_obs, n_dir))
    M = np.zeros(n_obs) if eigen is not None else np.full(n_obs, np.nan)
    Zc = np.zeros(n_obs, dtype=np.int64)
    valid = np.ones(n_obs, dtype=bool)
    core = (s.measure.kind, s.measure.support, CORE_MARGIN)
    extinct = np.zeros(n_obs, dtype=bool)
    if not math.isnan(ext):
        extinct = times >= ext
    if capped_at >= 0:
        valid[capped_at:] = False
    for k in range(n_obs):
        if not valid[k]:
            Z[k] = -1
            Zd[k] = -1
            L[k] = Lr[k] = M[k] = np.nan
            Zc[k] = -1
            continue
        snap = PopulationSnapshot(times[k], pos[offsets[k] : offsets[k + 1]])
        row = compute_observables(snap, deltas, directions, eigen, core)
        Z[k], Zd[k], L[k], Lr[k], M[k], Zc[k] = row.Z, row.Z_delta, row.L, row.L_r, row.M, row.Z_core
    final = None
    if keep_final and valid[-1]:
        final = pos[offsets[n_obs - 1] : offsets[n_obs]].copy()
    return ObservableSeries(
        times, Z, Zd, L, Lr, M, Zc, extinct, valid, float(ext), int(n_branch), capped_at >= 0, final
    )


def _cap(s: Scenario) -> int:
    return int(s.population_cap) if s.population_cap is not None else np.iinfo(np.int64).max


def _cdf(pmf) -> np.ndarray:
    c = np.cumsum(np.asarray(pmf, dtype=float))
    c[-1] = 1.0
    return c


def simulate_event_driven(
    s: Scenario,
    eigen: EigenResult | None = None,
    rng=None,
    deltas=(),
    directions=(),
    keep_final: bool = False,
) -> ObservableSeries:
    m = s.measure
    if m.kind is not MeasureKind.ATOMS_1D or len(m) != 1:
        raise ValueError(
            "event-driven backend supports a single atom in d = 1; use the discretized backend"
        )
    g = as_generator(rng if rng is not None else RngStream(s.seed, 0))
    (a, w), = m.atoms
    obs = np.asarray(s.observation_times, dtype=float)
    out, offsets, nb_, capped_at, ext = _event_single_atom(
        g, s.initial_position[0] - a, w, _cdf(s.mechanism.per_site[0]), obs, _cap(s)
    )
    return _series_from_kernel(s, out, offsets, nb_, capped_at, ext, deltas, directions, eigen, a, keep_final)


def observation_steps(times, dt: float) -> np.ndarray:
    """Observation times snapped to the nearest step index (at least 1)."""
    steps = np.maximum(np.rint(np.asarray(times) / dt).astype(np.int64), 1)
    if np.any(np.diff(steps) <= 0):
        raise ValueError("observation times closer than dt")
    return steps


def simulate_discretized(
    s: Scenario,
    dt: float = 1e-3,
    epsilon: float | None = None,
    eigen: EigenResult | None = None,
    rng=None,
    deltas=(),
    directions=(),
    local_time: str = "bridge",
    keep_final: bool = False,
) -> ObservableSeries:
    if not dt > 0:
        raise ValueError("dt must be positive")
    eps = 2.0 * math.sqrt(dt) if epsilon is None else epsilon
    if not eps > 0:
        raise ValueError("epsilon must be positive")
    m = s.measure
    g = as_generator(rng if rng is not None else RngStream(s.seed, 0))
    pm = s.mechanism.pmf_matrix()
    cdfs = np.cumsum(pm, axis=1)
    cdfs[:, -1] = 1.0
    out, offsets, nb_, capped_at, ext = _discretized(
        g,
        np.asarray(s.initial_position, dtype=float),
        m.kind is MeasureKind.SHELLS_RADIAL,
        m.support,
        m.weights,
        cdfs,
        observation_steps(s.observation_times, dt),
        dt,
        eps,
        LOCAL_TIME_MODES[local_time],
        _cap(s),
    )
    return _series_from_kernel(s, out, offsets, nb_, capped_at, ext, deltas, directions, eigen, None, keep_final)


# -- replicas -------------------------------------------------------------------------


def resolve_backend(s: Scenario, backend: str) -> str:
    if backend == "auto":
        single = s.measure.kind is MeasureKind.ATOMS_1D and len(s.measure) == 1
        return "event" if single else "discretized"
    if backend not in ("event", "discretized"):
        raise ValueError(f"unknown backend {backend!r}")
    return backend


def _run_one(s, backend, eigen, settings: RunSettings, replica: int, keep_final: bool):
    g = RngStream(s.seed, replica).generator
    if backend == "event":
        return simulate_event_driven(s, eigen, g, settings.deltas, settings.directions, keep_final)
    return simulate_discretized(
        s, settings.dt, settings.eps, eigen, g, settings.deltas, settings.directions, settings.local_time, keep_final
    )


def _run_chunk(s, backend, eigen, settings, ids, keep_final):
    return [_run_one(s, backend, eigen, settings, r, keep_final) for r in ids]


@dataclass
class ReplicaEnsemble:
    scenario: Scenario
    backend: str
    settings: RunSettings
    series: list[ObservableSeries]

    def stack(self, name: str) -> np.ndarray:
        return np.stack([getattr(r, name) for r in self.series])

    @property
    def times(self) -> np.ndarray:
        return np.asarray(self.scenario.observation_times)

    def survivors(self) -> np.ndarray:
        """Survival proxy: at least one particle in the core set at the final time, or capped."""
        zc = self.stack("Z_core")[:, -1]
        capped = np.array([r.capped for r in self.series])
        return (zc >= 1) | capped

    def to_csv(self) -> str:
        buf = io.StringIO()
        nd = len(self.settings.deltas)
        nr = len(self.settings.directions)
        cols = ["replica", "t", "Z"] + [f"Z_delta_{i}" for i in range(nd)] + ["L"]
        cols += [f"L_r_{j}" for j in range(nr)] + ["M", "extinct"]
        buf.write(",".join(cols) + "\n")
        for rid, r in enumerate(self.series):
            for k, t in enumerate(r.times):
                vals = [str(rid), repr(float(t)), str(int(r.Z[k]))]
                vals += [str(int(v)) for v in r.Z_delta[k]]
                vals += [repr(float(r.L[k]))] + [repr(float(v)) for v in r.L_r[k]]
                vals += [repr(float(r.M[k])), str(int(r.extinct[k]))]
                buf.write(",".join(vals) + "\n")
        return buf.getvalue()

    def summary(self) -> dict:
        def mean_se(a):
            a = np.asarray(a, dtype=float)
            ok = ~np.isnan(a)
            n = ok.sum(axis=0)
            mean = np.where(n > 0, np.nansum(a, axis=0) / np.maximum(n, 1), np.nan)
            var = np.nansum((a - mean) ** 2, axis=0) / np.maximum(n - 1, 1)
            return [float(v) for v in mean], [float(v) for v in np.sqrt(var / np.maximum(n, 1))]

        Z = self.stack("Z").astype(float)
        Z[Z < 0] = np.nan
        zm, zs = mean_se(Z)
        L = self.stack("L")
        lm, ls = mean_se(L)
        M = self.stack("M")
        mm, ms = mean_se(M)
        ext = self.stack("extinct").astype(float)
        em, es = mean_se(ext)
        return {
            "backend": self.backend,
            "replicas": len(self.series),
            "seed": self.scenario.seed,
            "times": [float(t) for t in self.times],
            "Z_mean": zm,
            "Z_se": zs,
            "L_mean": lm,
            "L_se": ls,
            "M_mean": mm,
            "M_se": ms,
            "extinct_frac": em,
            "extinct_se": es,
            "capped": int(sum(r.capped for r in self.series)),
        }

    def summary_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True, allow_nan=True)


def run_replicas(
    s: Scenario,
    backend: str = "auto",
    eigen: EigenResult | None = None,
    settings: RunSettings | None = None,
    n_jobs: int = 1,
    keep_final: bool = False,
) -> ReplicaEnsemble:
    """Run ``s.replica_count`` independent replicas; replica r uses stream (seed, r)."""
    rep = validate_scenario(s)
    if not rep:
        raise ValueError("invalid scenario: " + "; ".join(rep.reasons))
    settings = settings or RunSettings()
    backend = resolve_backend(s, backend)
    ids = np.arange(s.replica_count)
    if n_jobs == 1:
        series = _run_chunk(s, backend, eigen, settings, ids, keep_final)
    else:
        n_chunks = max(1, min(len(ids), 4 * (n_jobs if n_jobs > 0 else 8)))
        chunks = [c for c in np.array_split(ids, n_chunks) if len(c)]
        parts = Parallel(n_jobs=n_jobs)(
            delayed(_run_chunk)(s, backend, eigen, settings, c, keep_final) for c in chunks
        )
        series = [r for part in parts for r in part]
    return ReplicaEnsemble(s, backend, settings, series)
