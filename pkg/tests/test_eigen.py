import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate
from scipy.optimize import brentq

from singular_bbm.eigen import (
    _atom_norm_sq_quad,
    bisect_root,
    eigenfunction_eval,
    lambda_radial_oracle,
    lambda_variational_oracle,
    rate_profile,
    resolvent_free,
    resolvent_free_quad,
    resolvent_killed_point,
    shell_check_lambda,
    solve_lambda,
    solve_lambda_atoms_general,
    solve_lambda_shells,
    solve_lambda_single_atom,
    solve_lambda_two_atoms_signed,
)
from singular_bbm.model import signed_nu_from_points

# golden value: positive root of A^2 - A = 2 (1 - e^{-2A}), frozen from brentq at xtol 1e-15
TWO_ATOM_A = 1.987425907732608
TWO_ATOM_LAM = -0.5 * TWO_ATOM_A**2
# d = 3 unit shell of weight 1, cross-checked against the finite-volume grid (-0.3166)
SHELL3_LAM = -0.3174547852735208


def test_golden_two_atom_root_is_independent():
    A = brentq(lambda A: A * A - A - 2 * (1 - math.exp(-2 * A)), 0.5, 5, xtol=1e-15)
    assert A == pytest.approx(TWO_ATOM_A, abs=1e-12)


# -- resolvents ---------------------------------------------------------------------


def test_free_resolvent_closed_form():
    assert resolvent_free(0.5, 0.3, 0.3) == pytest.approx(1.0)
    assert resolvent_free(0.5, 0.0, 40.0) < 1e-15


@pytest.mark.parametrize("d", [2, 3, 4])
@pytest.mark.parametrize("r", [0.3, 1.0, 2.5])
def test_free_resolvent_matches_quadrature(d, r):
    x = np.zeros(d)
    y = np.zeros(d)
    y[0] = r
    assert resolvent_free(0.7, x, y, d) == pytest.approx(resolvent_free_quad(0.7, r, d), rel=1e-8)


def test_free_resolvent_green_limit_d3():
    r = 1.3
    green = math.gamma(0.5) / (2 * math.pi**1.5 * r)
    assert resolvent_free(1e-12, np.zeros(3), np.array([r, 0, 0]), 3) == pytest.approx(green, rel=1e-5)


def test_killed_resolvent_examples():
    np.testing.assert_allclose(resolvent_killed_point(0.5, 0.0, 0.4, -1.2), resolvent_free(0.5, 0.4, -1.2))
    for a, g in [(0.5, 1.0), (2.0, 0.3)]:
        s = math.sqrt(2 * a)
        assert resolvent_killed_point(a, g, 0.0, 0.0) == pytest.approx(1 / (s + g))
    assert resolvent_killed_point(0.5, 1.0, 1.0, 1.0) == pytest.approx(1 - 0.5 * math.exp(-2.0), abs=1e-12)


def test_killed_resolvent_stable_at_small_alpha():
    v = resolvent_killed_point(1e-14, 1.0, 0.5, 2.0)
    assert v == pytest.approx(1.0 + 0.5 + 2.0 - 1.5, rel=1e-5)


def test_bisect_root_expands_bracket():
    r = bisect_root(lambda x: x - 37.5, 0.0, 1.0)
    assert r == pytest.approx(37.5, abs=1e-10)


# -- atoms ----------------------------------------------------------------------------


@pytest.mark.parametrize("c", [0.5, 1.0, 2.0])
def test_single_atom_exact(c):
    e = solve_lambda_single_atom(c)
    assert abs(e.lam + c * c / 2) <= 1e-12
    assert e.decay_rate == pytest.approx(math.sqrt(-2 * e.lam), abs=1e-12)
    x = np.linspace(-5, 5, 101)
    np.testing.assert_allclose(e.h(x), math.sqrt(c) * np.exp(-c * np.abs(x)), rtol=1e-12)


def test_single_atom_constants():
    e = solve_lambda_single_atom(1.0)
    assert e.h(0.0) == pytest.approx(1.0)
    integral, _ = integrate.quad(lambda x: e.h(np.array([x]))[0], -np.inf, np.inf)
    assert e.h(0.0) * integral == pytest.approx(2.0, rel=1e-8)
    norm, _ = integrate.quad(lambda x: e.h(np.array([x]))[0] ** 2, -np.inf, np.inf)
    assert norm == pytest.approx(1.0, abs=1e-6)


def test_two_atom_existence_boundary():
    thr = 1.0 / 3.0
    assert solve_lambda_two_atoms_signed(1.0, thr * (1 - 1e-6), 1.0) is None
    e = solve_lambda_two_atoms_signed(1.0, thr * (1 + 1e-6), 1.0)
    assert e is not None and e.lam < 0
    assert solve_lambda_two_atoms_signed(1.0, 0.3, 1.0) is None


def test_two_atom_examples():
    e = solve_lambda_two_atoms_signed(0.0, 2.0, 1.0)
    assert e.decay_rate == pytest.approx(2.0, abs=1e-10)
    assert e.lam == pytest.approx(-2.0, abs=1e-10)
    e = solve_lambda_two_atoms_signed(1.0, 2.0, 1.0)
    assert e.decay_rate == pytest.approx(TWO_ATOM_A, abs=1e-10)
    assert e.lam == pytest.approx(TWO_ATOM_LAM, abs=1e-10)


def test_general_solver_reductions():
    assert solve_lambda_atoms_general([(0.0, 1.3)]).lam == pytest.approx(-0.5 * 1.3**2, abs=1e-10)
    e = solve_lambda_atoms_general([(0.0, -1.0), (1.0, 2.0)])
    assert e.lam == pytest.approx(TWO_ATOM_LAM, abs=1e-10)
    two = solve_lambda_atoms_general([(-1.0, 1.0), (1.0, 1.0)])
    assert two.lam < -0.5


def _residual(e):
    h = e.h(e.support)
    G = np.exp(-e.decay_rate * np.abs(e.support[:, None] - e.support[None, :])) / e.decay_rate
    return np.abs(h - G @ (e.weights * h)).max()


@pytest.mark.parametrize(
    "atoms",
    [
        [(0.0, 1.0)],
        [(-1.0, 1.0), (1.0, 1.0)],
        [(0.0, -1.0), (1.0, 2.0)],
        [(-2.0, 0.7), (0.0, -0.5), (1.5, 1.2)],
        [(-1.0, -0.3), (0.0, 1.5), (1.0, -0.4)],
    ],
)
def test_atom_eigen_equation_and_normalization(atoms):
    e = solve_lambda_atoms_general(atoms)
    assert e is not None
    assert _residual(e) < 1e-8
    x = np.linspace(-25, 25, 2001)
    assert np.all(e.h(x) > 0)
    norm = _atom_norm_sq_quad(e.alpha, e.support, e.eigen_coeffs) * e.norm_constant**2
    assert norm == pytest.approx(1.0, abs=1e-6)


@pytest.mark.parametrize(
    "pts, exact",
    [
        ([(0.0, 1.0)], -0.5),
        ([(0.0, -1.0), (1.0, 2.0)], TWO_ATOM_LAM),
        ([(-1.0, 1.0), (1.0, 1.0)], None),
    ],
)
def test_variational_oracle_agreement(pts, exact):
    nu = signed_nu_from_points(pts, 1)
    lam = solve_lambda(nu).lam
    if exact is not None:
        assert lam == pytest.approx(exact, abs=1e-10)
    assert abs(lam - lambda_variational_oracle(nu, 30.0, 1e-3)) <= 2e-2


def test_variational_oracle_free():
    assert lambda_variational_oracle(signed_nu_from_points([(0.0, 0.0)], 1)) >= 0


def test_ground_state_decay_band():
    # outside the support h is exactly proportional to e^{-A|x|} on each side
    for atoms in ([(0.0, 1.0)], [(-1.0, 1.0), (1.0, 1.0)], [(0.0, -1.0), (1.0, 2.0)]):
        e = solve_lambda_atoms_general(atoms)
        x = np.linspace(1, 20, 50)
        for side in (x + max(0.0, e.support.max() - 1), -x + min(0.0, e.support.min() + 1)):
            ratio = e.h(side) * np.exp(e.decay_rate * np.abs(side))
            assert ratio.min() > 0
            np.testing.assert_allclose(ratio, ratio[0], rtol=1e-9)


def test_h_monotone_outside_support():
    e = solve_lambda_atoms_general([(-1.0, 1.0), (1.0, 1.0)])
    x = np.linspace(1, 30, 200)
    assert np.all(np.diff(e.h(x)) < 0)
    assert np.all(np.diff(e.h(-x)) < 0)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(0.2, 2.0), min_size=1, max_size=3), st.integers(0, 2), st.floats(0.05, 1.0))
def test_weight_monotonicity(weights, idx, bump):
    pts = [(1.5 * i, w) for i, w in enumerate(weights)]
    k = idx % len(pts)
    bigger = list(pts)
    bigger[k] = (pts[k][0], pts[k][1] + bump)
    assert solve_lambda_atoms_general(bigger).lam < solve_lambda_atoms_general(pts).lam


# -- shells ---------------------------------------------------------------------------


def test_shell_check_example_d2():
    val = shell_check_lambda(2, 1.0, 2.0, 1.0, 1.0)
    assert val == pytest.approx(0.5 / (1 + 2 * math.log(2)), rel=1e-12)
    assert val < 1
    assert solve_lambda_shells(2, (2.0, 1.0), (1.0, 1.0, -1)) is not None


def test_single_shell_threshold_d3():
    assert shell_check_lambda(3, 0.5, 1.0, 0.0, 1.0) == pytest.approx(0.5)
    assert solve_lambda_shells(3, (1.0, 0.4)) is None
    assert solve_lambda_shells(3, (1.0, 0.5)) is None
    e = solve_lambda_shells(3, (1.0, 1.0))
    assert e.lam == pytest.approx(SHELL3_LAM, abs=1e-10)
    grid = lambda_variational_oracle(signed_nu_from_points([(1.0, 1.0)], 3), 30.0, 1e-3)
    assert abs(e.lam - grid) <= 2e-2


@pytest.mark.parametrize("d", [2, 3, 4])
@pytest.mark.parametrize("beta", [0.3, 1.0, 3.0])
@pytest.mark.parametrize("geom", [(0.5, 1.5), (1.5, 0.7)])
def test_shell_criterion_matches_radial_solver(d, beta, geom):
    r, R = geom
    for gamma in (0.3, 0.8, 2.0):
        crit = shell_check_lambda(d, r, R, beta, gamma) < 1
        lam = lambda_radial_oracle(d, [(R, gamma), (r, -beta)])
        assert crit == (lam is not None)


def test_shell_ground_state():
    e = solve_lambda_shells(3, (1.0, 1.0))
    rho = np.linspace(0, 15, 400)
    h = e.h(rho)
    assert np.all(h > 0)
    area = 4 * math.pi
    norm, _ = integrate.quad(lambda r: e.h(np.array([r]))[0] ** 2 * r * r * area, 0, 60, points=[1.0], limit=200)
    assert norm == pytest.approx(1.0, abs=1e-6)
    pts = np.array([[0.3, 0.4, 0.0], [0.0, 0.0, 0.5]])
    np.testing.assert_allclose(e.h(pts), e.h(np.array([0.5, 0.5])))


# -- rate profile ---------------------------------------------------------------------


def test_rate_profile_examples():
    p = rate_profile(-0.5)
    assert p(0.0) == pytest.approx(-0.5)
    assert p(0.25) == pytest.approx(-0.25)
    assert p(1.5) == pytest.approx(1.125)
    with pytest.raises(ValueError):
        rate_profile(0.0)


@given(st.floats(-10, -1e-3))
def test_rate_profile_continuity_and_sign(lam):
    p = rate_profile(lam)
    b = p.ballistic_delta
    left = lam + b * b
    right = 0.5 * b * b
    assert left == pytest.approx(right, abs=1e-12)
    assert p(p.critical_delta) == pytest.approx(0.0, abs=1e-12)
    grid = np.linspace(0, 3 * b, 31)
    vals = p(grid)
    assert np.all(vals[grid < p.critical_delta * (1 - 1e-9)] < 0)
    assert np.all(vals[grid > p.critical_delta * (1 + 1e-9)] > 0)


def test_eigenfunction_eval_shapes():
    e = solve_lambda_single_atom(1.0)
    assert np.shape(eigenfunction_eval(e, 0.0)) == ()
    assert eigenfunction_eval(e, np.zeros((4, 1))).shape == (4,)
