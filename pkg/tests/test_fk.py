import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.special import ndtr

from singular_bbm.engine import run_replicas
from singular_bbm.fk import (
    BallIndicator,
    estimate_fk,
    estimate_tail_fk,
    fit_log_slope,
    fkpp_extinction_fixed_point,
    mckean_fk_check,
    mixture_likelihood_ratio,
)
from singular_bbm.model import BranchingMechanism, RateMeasure, Scenario, build_signed_nu, signed_nu_from_points
from singular_bbm.samplers import RngStream


def g(i):
    return RngStream(2024, i).generator


def zero_nu(d=1):
    if d == 1:
        return build_signed_nu(RateMeasure.single_atom(1.0), BranchingMechanism.uniform((0.0, 1.0)))
    return build_signed_nu(RateMeasure.single_shell(d, 1.0, 1.0), BranchingMechanism.uniform((0.0, 1.0)))


def atom_nu(c):
    return signed_nu_from_points([(0.0, c)], 1)


def levy(c, t):
    return 2 * math.exp(c * c * t / 2) * ndtr(c * math.sqrt(t))


def test_zero_measure_gives_one():
    e = estimate_fk(0.0, 1.0, None, zero_nu(), 1000, 1e-2, None, g(0))
    assert e.value == 1.0 and e.std_error == 0.0


def test_gaussian_tail_without_potential():
    e = estimate_tail_fk(0.0, 1.0, 2.0, 0.0, zero_nu(), 200_000, 0.5, None, g(1), tilt=False)
    assert e.value == pytest.approx(2 * ndtr(-2.0), abs=3 * e.std_error)
    e = estimate_tail_fk(0.0, 1.0, 2.0, 0.0, zero_nu(), 200_000, 0.5, None, g(2))
    assert e.value == pytest.approx(2 * ndtr(-2.0), abs=3 * e.std_error)
    assert e.std_error / (2 * ndtr(-2.0)) < 0.01


def test_ball_indicator_without_potential():
    e = estimate_fk(0.0, 1.0, BallIndicator((0.0,), 1.0), zero_nu(), 200_000, 0.5, None, g(3))
    assert e.value == pytest.approx(1 - 2 * ndtr(-1.0), abs=3 * e.std_error)


@pytest.mark.parametrize("t", [0.5, 2.0])
def test_single_atom_closed_form(t):
    e = estimate_fk(0.0, t, None, atom_nu(1.0), 200_000, 1e-2, None, g(4))
    assert e.value == pytest.approx(levy(1.0, t), abs=3 * e.std_error)


def test_negative_weight_killing():
    # E e^{-L_1} = 2 e^{1/2} Phi(-1)
    e = estimate_fk(0.0, 1.0, None, atom_nu(-1.0), 200_000, 1e-2, None, g(5))
    assert e.value == pytest.approx(2 * math.exp(0.5) * ndtr(-1.0), abs=3 * e.std_error)


def test_tilt_is_unbiased():
    nu = atom_nu(1.0)
    a = estimate_tail_fk(0.0, 4.0, 0.5, 0.0, nu, 200_000, 1e-2, None, g(6), tilt=True)
    b = estimate_tail_fk(0.0, 4.0, 0.5, 0.0, nu, 200_000, 1e-2, None, g(7), tilt=False)
    assert abs(a.value - b.value) < 3 * math.hypot(a.std_error, b.std_error)
    assert a.tilt_drift == 0.5 and b.tilt_drift is None


def test_tilt_reduces_variance_far_out():
    nu = zero_nu()
    a = estimate_tail_fk(0.0, 4.0, 1.5, 0.0, nu, 50_000, 1.0, None, g(8))
    exact = 2 * ndtr(-1.5 * 2.0)
    assert a.value == pytest.approx(exact, abs=3 * a.std_error)
    assert a.std_error / exact < 0.05


@given(st.floats(0.01, 5.0), st.floats(-20, 20), st.floats(0.1, 10))
def test_mixture_ratio_d1_closed_form(theta, b, t):
    lr = mixture_likelihood_ratio(np.array([[b]]), theta, t)[0]
    assert lr == pytest.approx(math.exp(theta * theta * t / 2) / math.cosh(theta * b), rel=1e-10)


@pytest.mark.parametrize("d", [2, 3])
def test_mixture_ratio_has_unit_mean(d):
    theta, t, n = 0.8, 2.0, 400_000
    r = g(9 + d)
    u = r.standard_normal((n, d))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    b = theta * t * u + math.sqrt(t) * r.standard_normal((n, d))
    lr = mixture_likelihood_ratio(b, theta, t)
    assert lr.mean() == pytest.approx(1.0, abs=4 * lr.std() / math.sqrt(n))


def test_mixture_ratio_d3_closed_form():
    # I_{1/2}: avg_u e^{z<u,e>} = sinh z / z
    theta, t = 1.3, 2.0
    b = np.array([[0.3, -1.0, 2.0], [0.0, 0.0, 0.0]])
    z = theta * np.linalg.norm(b[0])
    lr = mixture_likelihood_ratio(b, theta, t)
    assert lr[0] == pytest.approx(math.exp(theta**2 * t / 2) * z / math.sinh(z), rel=1e-10)
    assert lr[1] == pytest.approx(math.exp(theta**2 * t / 2), rel=1e-12)


def test_d3_shell_tail_tilt_unbiased():
    nu = signed_nu_from_points([(1.0, 1.0)], 3)
    x = (0.0, 0.0, 0.0)
    a = estimate_tail_fk(x, 2.0, 0.75, 0.0, nu, 100_000, 1e-2, None, g(20), tilt=True)
    b = estimate_tail_fk(x, 2.0, 0.75, 0.0, nu, 100_000, 1e-2, None, g(21), tilt=False)
    assert abs(a.value - b.value) < 3 * math.hypot(a.std_error, b.std_error)


@pytest.mark.parametrize("pmf, u", [((0.2, 0.0, 0.8), 0.25), ((0.0, 1.0), 1.0), ((0.0, 0.0, 1.0), 0.0),
                                    ((0.5, 0.0, 0.5), 1.0), ((0.25, 0.25, 0.25, 0.25), math.sqrt(2) - 1)])
def test_extinction_fixed_point(pmf, u):
    assert fkpp_extinction_fixed_point(pmf) == pytest.approx(u, abs=1e-10)


@given(st.lists(st.floats(0.0, 1.0), min_size=2, max_size=6).filter(lambda p: sum(p) > 0))
def test_extinction_fixed_point_is_minimal_root(p):
    p = np.asarray(p) / sum(p)
    u = fkpp_extinction_fixed_point(p)
    assert 0.0 <= u <= 1.0
    assert np.polynomial.Polynomial(p)(u) == pytest.approx(u, abs=1e-9)
    grid = np.linspace(0, u, 50)[:-1]
    assert np.all(np.polynomial.Polynomial(p)(grid) - grid > -1e-12)


def test_extinction_fixed_point_rejects_bad_pmf():
    with pytest.raises(ValueError):
        fkpp_extinction_fixed_point((0.5, 0.6))


def test_mckean_bound_trivial_cases():
    mu = RateMeasure.single_atom(1e-9)
    e = mckean_fk_check(0.0, 1.0, 0.0, mu, BranchingMechanism.binary(), 10_000, g(30))
    assert e.value <= 1.0
    assert e.value == pytest.approx(1.0, abs=1e-6)
    e = mckean_fk_check(0.0, 1.0, 2.0, mu, None, 200_000, g(31))
    assert e.value == pytest.approx(2 * ndtr(-2.0), abs=3 * e.std_error)
    with pytest.raises(ValueError):
        mckean_fk_check(0.0, 1.0, 1.0, mu, BranchingMechanism.uniform((0.2, 0.0, 0.8)))


def test_mckean_lower_bounds_branching_system():
    t, R = 6.0, 6.0
    mu = RateMeasure.single_atom(1.0)
    s = Scenario(mu, BranchingMechanism.binary(), (0.0,), t, (t,), seed=31, replica_count=20_000)
    L = run_replicas(s, "event").stack("L")[:, 0]
    p = np.mean(L >= R)
    se = math.sqrt(p * (1 - p) / len(L))
    lb = mckean_fk_check(0.0, t, R, mu, BranchingMechanism.binary(), 200_000, g(32), dt=1e-2)
    assert p >= lb.value - 3 * math.hypot(se, lb.std_error)


def test_asymptotic_constant_stabilizes():
    # e^{lam t} E_0 e^{c L_t} -> 2 for a single atom of weight c
    c = 0.5
    lam = -c * c / 2
    vals = []
    for k, t in enumerate((2.0, 4.0, 8.0)):
        e = estimate_fk(0.0, t, None, atom_nu(c), 200_000, 1e-2, None, g(40 + k))
        vals.append((math.exp(lam * t) * e.value, math.exp(lam * t) * e.std_error))
        assert vals[-1][0] == pytest.approx(math.exp(lam * t) * levy(c, t), abs=3 * vals[-1][1])
    gaps = [abs(2.0 - v) for v, _ in vals]
    assert gaps[2] < gaps[0]
    assert gaps[2] < 0.2


def test_fit_log_slope_exact():
    t = np.arange(1.0, 6.0)
    fit = fit_log_slope(t, 3.0 * np.exp(0.7 * t))
    assert fit.slope == pytest.approx(0.7) and math.exp(fit.intercept) == pytest.approx(3.0)
    assert fit.residual < 1e-12


def test_argument_errors():
    with pytest.raises(ValueError):
        estimate_fk(0.0, 0.0, None, atom_nu(1.0))
    with pytest.raises(ValueError):
        estimate_fk(0.0, 1.0, None, atom_nu(1.0), N=0)
    with pytest.raises(ValueError):
        estimate_fk((0.0, 0.0), 1.0, None, atom_nu(1.0))
    with pytest.raises(ValueError):
        estimate_tail_fk(0.0, 1.0, 0.0, nu=atom_nu(1.0))
    with pytest.raises(TypeError):
        estimate_fk(0.0, 1.0, None, "nu")
