import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from singular_bbm.eigen import lambda_radial_oracle, solve_lambda_single_atom
from singular_bbm.engine import (
    PopulationSnapshot,
    compute_observables,
    observation_steps,
    run_replicas,
    simulate_discretized,
    simulate_event_driven,
)
from singular_bbm.fk import BallIndicator, estimate_fk
from singular_bbm.model import BranchingMechanism, RateMeasure, RunSettings, Scenario, build_signed_nu
from singular_bbm.samplers import RngStream


def atom(pmf=(0.0, 0.0, 1.0), c=1.0, times=(0.5, 1.0, 2.0), reps=1, seed=0, cap=20_000_000, x0=0.0):
    return Scenario(RateMeasure.single_atom(c), BranchingMechanism.uniform(pmf), (x0,), max(times), times,
                    seed=seed, replica_count=reps, population_cap=cap)


# -- observables ----------------------------------------------------------------------


def test_observables_empty():
    row = compute_observables(PopulationSnapshot(1.0, np.zeros((0, 1))), [0.5], [[1.0]], solve_lambda_single_atom(1.0))
    assert row.Z == 0 and row.L == 0 and row.M == 0
    assert row.Z_delta.tolist() == [0]


def test_observables_examples():
    row = compute_observables(PopulationSnapshot(4.0, np.array([[3.0]])), [0.5])
    assert row.Z == 1 and row.Z_delta[0] == 1 and row.L == 3.0
    row = compute_observables(PopulationSnapshot(1.0, np.array([[-2.0], [2.0]])), [], [[1.0]])
    assert row.L == 2.0 and row.L_r[0] == 2.0


def test_martingale_value():
    e = solve_lambda_single_atom(1.0)
    row = compute_observables(PopulationSnapshot(2.0, np.array([[0.0], [1.0]])), eigen=e)
    assert row.M == pytest.approx(math.exp(-1.0) * (1 + math.exp(-1.0)))


@given(st.lists(st.floats(-50, 50), min_size=0, max_size=30), st.floats(0.1, 20), st.lists(st.floats(0, 3), max_size=4))
def test_count_radius_consistency(xs, t, deltas):
    row = compute_observables(PopulationSnapshot(t, np.array(xs).reshape(-1, 1)), deltas)
    for k, dl in enumerate(deltas):
        assert (row.Z_delta[k] >= 1) == (row.Z > 0 and row.L >= dl * t)
        assert row.Z_delta[k] <= row.Z


def test_observation_steps_snap():
    assert observation_steps([0.5, 1.0], 0.3).tolist() == [2, 3]
    with pytest.raises(ValueError):
        observation_steps([0.1, 0.11], 0.1)


# -- backends -------------------------------------------------------------------------


def test_no_branching_mechanism_keeps_one_particle():
    s = atom((0.0, 1.0))
    for r in (simulate_event_driven(s, rng=RngStream(1)), simulate_discretized(s, dt=1e-3, rng=RngStream(1))):
        assert r.Z.tolist() == [1, 1, 1]


def test_discretized_brownian_variance():
    d = 2
    s = Scenario(RateMeasure.single_shell(d, 1.0, 1.0), BranchingMechanism.uniform((0.0, 1.0)), (0.0,) * d, 1.0,
                 (1.0,), replica_count=20_000)
    ens = run_replicas(s, "discretized", settings=RunSettings(dt=0.05), keep_final=True)
    x = np.concatenate([r.final_positions for r in ens.series])
    assert (x**2).sum(axis=1).mean() == pytest.approx(1.0 * d, rel=0.02)


def test_tiny_weight_rarely_branches():
    s = atom(c=1e-6, times=(5.0,), reps=2000)
    ens = run_replicas(s, "event")
    assert sum(r.n_branch for r in ens.series) <= 2


def test_event_backend_rejects_other_models():
    s = Scenario(RateMeasure(1, "atoms", atoms=((0.0, 1.0), (1.0, 1.0))), BranchingMechanism.binary(2), (0.0,), 1.0,
                 (1.0,))
    with pytest.raises(ValueError):
        simulate_event_driven(s)
    assert run_replicas(s, "auto").backend == "discretized"


def test_extinction_is_absorbing():
    s = atom((0.6, 0.0, 0.4), times=(1.0, 2.0, 4.0, 8.0), reps=300, seed=3)
    for backend, kw in (("event", {}), ("discretized", {"settings": RunSettings(dt=1e-2, deltas=(0.1,))})):
        ens = run_replicas(s, backend, **kw)
        ext = ens.stack("extinct")
        assert ext.any()
        Z, L = ens.stack("Z"), ens.stack("L")
        assert np.all(Z[ext] == 0) and np.all(L[ext] == 0)
        assert np.all(np.diff(ext.astype(int), axis=1) >= 0)
        for r in ens.series:
            if r.extinct.any():
                assert r.extinction_time <= r.times[r.extinct][0]


def test_population_cap_flags_replica():
    s = atom(times=(1.0, 10.0), cap=50, reps=5)
    for backend in ("event", "discretized"):
        ens = run_replicas(s, backend, settings=RunSettings(dt=1e-2))
        capped = [r for r in ens.series if r.capped]
        assert capped
        for r in capped:
            assert not r.valid[-1] and r.Z[-1] == -1


def test_many_to_one_closed_form_both_backends():
    s = atom(times=(2.0,), reps=20_000, seed=5)
    target = 5.008980080762283
    for backend in ("event", "discretized"):
        Z = run_replicas(s, backend, settings=RunSettings(dt=1e-3)).stack("Z")[:, 0]
        assert abs(Z.mean() - target) < 3 * Z.std() / math.sqrt(len(Z))


def test_backends_agree_on_mean():
    s = atom(times=(1.0, 2.0), reps=20_000, seed=6)
    a = run_replicas(s, "event").stack("Z").astype(float)
    b = run_replicas(s, "discretized", settings=RunSettings(dt=1e-3)).stack("Z").astype(float)
    se = np.sqrt(a.var(0) / len(a) + b.var(0) / len(b))
    assert np.all(np.abs(a.mean(0) - b.mean(0)) < 1.96 * 2 * se)


@pytest.mark.parametrize("t", [0.5, 1.0, 2.0])
@pytest.mark.parametrize("pmf", [(0.0, 0.0, 1.0), (0.3, 0.0, 0.7)])
def test_many_to_one_with_ball_indicators(t, pmf):
    s = atom(pmf, times=(t,), reps=20_000, seed=int(10 * t))
    nu = build_signed_nu(s.measure, s.mechanism)
    ens = run_replicas(s, "event", keep_final=True)
    for f in (BallIndicator((0.0,), 0.5), BallIndicator((0.0,), 0.5, outside=True)):
        counts = np.array([f(r.final_positions).sum() if r.final_positions is not None else 0.0 for r in ens.series])
        est = estimate_fk((0.0,), t, f, nu, 100_000, 1e-2, None, RngStream(99, int(100 * t)).generator)
        se = math.sqrt(counts.var() / len(counts) + est.std_error**2)
        assert abs(counts.mean() - est.value) < 3 * se


def test_martingale_mean_constant():
    e = solve_lambda_single_atom(1.0)
    s = atom(times=(1.0, 2.0, 4.0), reps=5000, seed=8)
    M = run_replicas(s, "event", eigen=e).stack("M")
    m, se = M.mean(0), M.std(0) / math.sqrt(len(M))
    for i in range(3):
        for j in range(i + 1, 3):
            assert abs(m[i] - m[j]) < 3 * math.hypot(se[i], se[j])
    assert np.all(M >= 0)


def test_shell_growth_rate_d3():
    s = Scenario(RateMeasure.single_shell(3, 1.0, 1.0), BranchingMechanism.binary(), (0.0, 0.0, 0.0), 12.0,
                 (4.0, 6.0, 8.0, 10.0, 12.0), replica_count=300, seed=4)
    Z = run_replicas(s, "discretized", settings=RunSettings(dt=1e-2)).stack("Z").mean(0)
    slope = np.polyfit(s.observation_times, np.log(Z), 1)[0]
    lam = lambda_radial_oracle(3, [(1.0, 1.0)])
    assert slope == pytest.approx(-lam, rel=0.15)


# -- replicas -------------------------------------------------------------------------


def test_same_seed_identical_output():
    s = atom(reps=50, seed=12)
    st_ = RunSettings(deltas=(0.25,), directions=((1.0,),))
    assert run_replicas(s, "event", settings=st_).to_csv() == run_replicas(s, "event", settings=st_).to_csv()


def test_single_replica_equals_direct_call():
    s = atom(reps=1, seed=21)
    ens = run_replicas(s, "event")
    direct = simulate_event_driven(s, rng=RngStream(21, 0))
    np.testing.assert_array_equal(ens.series[0].Z, direct.Z)
    np.testing.assert_array_equal(ens.series[0].L, direct.L)


@settings(max_examples=5, deadline=None)
@given(st.integers(0, 2**32), st.integers(1, 20))
def test_doubling_replicas_keeps_prefix(seed, n):
    s = atom(reps=n, seed=seed)
    a = run_replicas(s, "event")
    b = run_replicas(replace(s, replica_count=2 * n), "event")
    for ra, rb in zip(a.series, b.series[:n]):
        np.testing.assert_array_equal(ra.L, rb.L)


def test_parallel_matches_serial():
    s = atom(reps=40, seed=13)
    st_ = RunSettings(dt=1e-2)
    for backend in ("event", "discretized"):
        assert run_replicas(s, backend, settings=st_, n_jobs=2).to_csv() == run_replicas(s, backend, settings=st_).to_csv()


def test_summary_fields():
    ens = run_replicas(atom(reps=10), "event")
    summ = ens.summary()
    assert summ["replicas"] == 10 and len(summ["Z_mean"]) == 3
    header = ens.to_csv().splitlines()[0]
    assert header.startswith("replica,t,Z") and header.endswith("M,extinct")


def test_invalid_scenario_rejected():
    with pytest.raises(ValueError):
        run_replicas(atom(reps=0), "event")
    with pytest.raises(ValueError):
        simulate_discretized(atom(), dt=0.0)
