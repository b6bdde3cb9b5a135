import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import affine_problem, ex8_solution, remainder_ratio
from nslm.bilevel import build_para, make_example8, make_transportation, to_iterate
from nslm.mnlcs import (
    MnlcsProblem,
    NonFiniteError,
    ShapeError,
    central_difference_jacobian,
    dn_f_fb,
    dn_f_max,
    evaluate,
    grad_psi_fb,
    index_sets,
    psi_fb,
    residual_fb,
    residual_max,
    scalar_lcs,
    validate_derivatives,
)
from nslm.ncp import phi_fb, phi_max

A = 1 + math.sqrt(2) / 2


@pytest.fixture(scope="module")
def para():
    return build_para(make_example8(), 1.0)


@pytest.fixture(scope="module")
def z_sol():
    return to_iterate(make_example8(), "para", ex8_solution())


def test_scalar_lcs_residuals():
    prob = scalar_lcs()
    np.testing.assert_array_equal(residual_max(prob, [1, 1]), [2, -1])
    np.testing.assert_allclose(residual_fb(prob, [1, 1]), [2, -2 + math.sqrt(2)], atol=1e-15)
    assert psi_fb(prob, [1, 1]) == pytest.approx(0.5 * (4 + (2 - math.sqrt(2)) ** 2))
    assert psi_fb(prob, [1, 1]) == pytest.approx(2.17157, abs=1e-5)


def test_scalar_lcs_newton_derivatives():
    prob = scalar_lcs()
    np.testing.assert_array_equal(dn_f_max(prob, [0, 0]), [[1, 1], [-1, 0]])
    np.testing.assert_array_equal(dn_f_max(prob, [1, 0]), [[1, 1], [0, -1]])
    np.testing.assert_allclose(dn_f_fb(prob, [0, 0]), [[1, 1], [-A, -A]])


def test_fb_rows_at_strict_complementarity():
    # G = -1 < 0 and xi = 0: v_a = 1 + G/r = 0 and v_b = 1 - xi/r = 1
    prob = scalar_lcs()
    z = np.array([1.0, 0.0])
    np.testing.assert_allclose(dn_f_fb(prob, z)[1], [0.0, -1.0])
    fd = central_difference_jacobian(lambda q: residual_fb(prob, q), z)
    np.testing.assert_allclose(dn_f_fb(prob, z), fd, atol=1e-8)


def test_pure_equation_system_max_derivative_is_jac_H():
    prob = affine_problem([[2.0, 1.0], [0.0, 3.0]], [1.0, -1.0], np.zeros((0, 2)), [], p1=2)
    z = np.array([0.3, -0.7])
    np.testing.assert_array_equal(dn_f_max(prob, z), [[2, 1], [0, 3]])
    np.testing.assert_array_equal(dn_f_fb(prob, z), [[2, 1], [0, 3]])


def test_experiment1_solution_is_root(para, z_sol):
    assert np.linalg.norm(residual_max(para, z_sol)) == 0.0
    assert np.linalg.norm(residual_fb(para, z_sol)) == 0.0
    assert psi_fb(para, z_sol) == 0.0
    np.testing.assert_array_equal(grad_psi_fb(para, z_sol), np.zeros(5))


def test_index_sets_all_inactive():
    prob = affine_problem([[1, 0, 0, 0]], [0], [[-1, 0, 0, 0], [-1, 0, 0, 0], [-1, 0, 0, 0]], [0, 0, 0], p1=1)
    sets = index_sets(prob, [1, 0, 0, 0])
    assert sets.i_minus == sets.i_lt == frozenset({0, 1, 2})
    assert not (sets.i0 | sets.i_plus | sets.i00 | sets.i_ge)


def test_index_sets_partition(para, z_sol):
    sets = index_sets(para, z_sol)
    # G = -x inactive; g active with nu = 2 > 0 and nu_hat = 0 biactive
    assert sets.i_minus == {0}
    assert sets.i_plus == {1}
    assert sets.i00 == {2}
    assert sets.i_ge == {1, 2}
    with pytest.raises(ValueError):
        index_sets(para, z_sol, act_tol=-1.0)


def test_shape_and_finiteness_errors():
    bad = MnlcsProblem(1, 1, 1, lambda w, xi: np.zeros(2), lambda w, xi: np.zeros((1, 2)), lambda w, xi: np.zeros(1), lambda w, xi: np.zeros((1, 2)))
    with pytest.raises(ShapeError):
        residual_max(bad, [0, 0])
    nan = MnlcsProblem(1, 1, 1, lambda w, xi: np.array([np.nan]), lambda w, xi: np.zeros((1, 2)), lambda w, xi: np.zeros(1), lambda w, xi: np.zeros((1, 2)))
    with pytest.raises(NonFiniteError):
        residual_fb(nan, [0, 0])
    with pytest.raises(ShapeError):
        evaluate(scalar_lcs(), [0, 0, 0])


# -- norm equivalence -----------------------------------------------------------

# Componentwise |phi_FB(a,b)| / |max(a,b)| is extremal on the diagonal a = b:
# 2 + sqrt(2) for a = b > 0 and 2 - sqrt(2) for a = b < 0.
TSENG_K1 = 0.5857864376269049
TSENG_K2 = 3.414213562373095


def test_tseng_bounds_grid_oracle():
    a, b = np.meshgrid(np.linspace(-10, 10, 401), np.linspace(-10, 10, 401))
    m = phi_max(a, b)
    keep = m != 0
    ratio = np.abs(phi_fb(a, b)[keep]) / np.abs(m[keep])
    assert ratio.min() == pytest.approx(TSENG_K1, abs=1e-12)
    assert ratio.max() == pytest.approx(TSENG_K2, abs=1e-12)


@given(st.lists(st.tuples(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3)), min_size=1, max_size=6))
def test_tseng_bounds_hold_for_vectors(pairs):
    a, b = np.array(pairs).T
    nm, nf = np.linalg.norm(phi_max(a, b)), np.linalg.norm(phi_fb(a, b))
    # a + b + hypot(a, b) cancels; allow rounding of the size of the inputs
    slack = 1e-15 * np.linalg.norm(np.concatenate([a, b]))
    assert TSENG_K1 * nm <= nf + slack
    assert nf <= TSENG_K2 * nm + slack


root_component = st.one_of(
    st.tuples(st.floats(-1e3, 0.0), st.just(0.0)),
    st.tuples(st.just(0.0), st.floats(-1e3, 0.0)),
    st.tuples(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3)),
)


@given(root_component)
def test_shared_roots(pair):
    a, b = pair
    if phi_max(a, b) == 0.0:
        assert phi_fb(a, b) == 0.0
    if phi_fb(a, b) == 0.0:
        # cancellation in a + b + hypot(a, b) can hide a max of rounding size
        assert abs(phi_max(a, b)) <= 1e-12 * max(1.0, abs(a), abs(b))


@pytest.mark.parametrize("name", ["example8", "transport"])
def test_shared_roots_random_points(name):
    bp = make_example8() if name == "example8" else make_transportation(0)
    prob = build_para(bp, 1.0)
    rng = np.random.default_rng(11)
    n_pts = 10_000 if name == "example8" else 1_000
    for _ in range(n_pts):
        z = rng.uniform(-3, 3, prob.n_vars)
        zero_max = np.linalg.norm(residual_max(prob, z)) < 1e-12
        zero_fb = np.linalg.norm(residual_fb(prob, z)) < 1e-12
        assert zero_max == zero_fb


# -- Newton-derivatives of the residuals ---------------------------------------

# largest remainder ratio on these 20 base points, with a safety factor of 3 to 5
REMAINDER_C = {"max": 5.0, "fb": 50.0}


@pytest.mark.parametrize("kind", ["max", "fb"])
def test_residual_newton_derivative_remainder(para, kind):
    f, dn = (residual_max, dn_f_max) if kind == "max" else (residual_fb, dn_f_fb)
    rng = np.random.default_rng(3)
    for _ in range(20):
        z = np.concatenate([rng.uniform([0, -5], [10, 5]), rng.uniform(0, 3, 3)])
        for h in (1e-2, 1e-4, 1e-6):
            for _ in range(5):
                u = rng.normal(size=5)
                d = h * u / np.linalg.norm(u)
                assert remainder_ratio(lambda q: f(para, q), lambda q: dn(para, q), z, d) <= REMAINDER_C[kind]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=5, max_size=5))
def test_grad_psi_is_transpose_product(para, zs):
    z = np.array(zs)
    assert np.array_equal(grad_psi_fb(para, z), dn_f_fb(para, z).T @ residual_fb(para, z))


def test_grad_psi_matches_finite_differences(para):
    z = np.array([4.0, 1.5, 0.3, 0.7, 1.2])
    fd = central_difference_jacobian(lambda q: np.array([psi_fb(para, q)]), z).ravel()
    np.testing.assert_allclose(grad_psi_fb(para, z), fd, rtol=1e-6)


def test_validate_derivatives_pass_and_flag(para):
    pts = [np.array([4.0, 1.5, 0.3, 0.7, 1.2]), np.array([9.0, 3.0, 0.0, 2.0, 0.0])]
    assert validate_derivatives(para, pts).passed

    def jac_G_off(w, xi):
        J = para.jac_G(w, xi).copy()
        J[1, 0] += 0.1
        return J

    broken = MnlcsProblem(para.p1, para.p2, para.q1, para.eval_H, para.jac_H, para.eval_G, jac_G_off)
    rep = validate_derivatives(broken, pts)
    assert not rep.passed
    assert all(p.worst_entry == ("jac_G", 1, 0) for p in rep.points)
    assert all(p.max_rel_error == pytest.approx(0.1, rel=1e-4) for p in rep.points)
