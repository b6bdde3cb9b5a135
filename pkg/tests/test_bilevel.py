import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import ex8_solution
from nslm.bilevel import (
    SETTINGS,
    StationarityPoint,
    build,
    build_para,
    build_var1,
    build_var2,
    from_iterate,
    get_problem,
    kkt_residual,
    make_example8,
    make_transportation,
    optimal_plan,
    to_iterate,
    transport_data,
    upper_objective,
)
from nslm.mnlcs import residual_fb, residual_max, validate_derivatives
from nslm.ncp import phi_fb


@pytest.fixture(scope="module")
def ex8():
    return make_example8()


@pytest.fixture(scope="module")
def tp():
    return make_transportation(0)


def random_point(bp, rng, zeta=None):
    return StationarityPoint(
        rng.uniform(-2, 10, bp.n),
        rng.uniform(-5, 5, bp.m),
        rng.uniform(-1, 3, bp.s),
        rng.uniform(-1, 3, bp.t),
        rng.uniform(-1, 3, bp.t),
        rng.uniform(0.1, 3.0),
        zeta=zeta,
    )


# -- stationarity residual -----------------------------------------------------


def test_kkt_residual_at_solution(ex8):
    assert np.array_equal(kkt_residual(ex8, ex8_solution()), np.zeros(7))
    for lam in (0.5, 1.0, 4.0):
        assert np.array_equal(kkt_residual(ex8, ex8_solution(lam=lam)), np.zeros(7))


def test_kkt_residual_positive_nu_hat_leaves_lower_row(ex8):
    # grad_y f + g'_y nu_hat = 2 (y - 3) + 2 y nu_hat = 6 nu_hat at y = 3;
    # every other row of the family nu = 2 + lam nu_hat vanishes
    for lam in (0.5, 1.0, 2.0):
        r = kkt_residual(ex8, ex8_solution(lam=lam, nu_hat=1.0))
        np.testing.assert_allclose(r, [0, 0, 6, 0, 0, 0, 0], atol=1e-15)


def test_kkt_residual_perturbed_mu(ex8):
    pt = ex8_solution()
    pt.mu = np.array([0.1])
    r = kkt_residual(ex8, pt)
    assert r[0] == pytest.approx(-0.1)
    assert r[3] == phi_fb(-9.0, -0.1) != 0.0


def test_kkt_residual_negative_lambda(ex8):
    pt = ex8_solution()
    pt.lam = -0.5
    assert kkt_residual(ex8, pt)[-1] == -0.5


def test_kkt_residual_matches_para_residual(ex8, tp):
    rng = np.random.default_rng(4)
    for bp in (ex8, tp):
        for _ in range(50):
            pt = random_point(bp, rng)
            ref = residual_fb(build_para(bp, pt.lam), to_iterate(bp, "para", pt))
            np.testing.assert_allclose(kkt_residual(bp, pt)[:-1], ref, rtol=1e-13, atol=1e-13)


def test_kkt_zero_only_at_solution(ex8):
    pt0 = ex8_solution()
    prob = build_para(ex8, 1.0)
    z0 = to_iterate(ex8, "para", pt0)
    assert np.linalg.norm(residual_fb(prob, z0)) == 0.0
    rng = np.random.default_rng(8)
    for _ in range(1000):
        z = z0 + rng.normal(scale=0.1, size=z0.size)
        pt = from_iterate(ex8, "para", z, 1.0)
        kkt_zero = np.linalg.norm(kkt_residual(ex8, pt)) < 1e-12
        assert kkt_zero == (np.linalg.norm(residual_fb(prob, z)) < 1e-12)


# -- the three settings --------------------------------------------------------


def test_build_para_rejects_bad_lambda(ex8):
    for lam in (0.0, -1.0, float("nan")):
        with pytest.raises(ValueError):
            build_para(ex8, lam)
    with pytest.raises(ValueError):
        build(ex8, "var3")


def test_dimensions(ex8, tp):
    for bp in (ex8, tp):
        p, v1, v2 = build_para(bp, 1.0), build_var1(bp), build_var2(bp)
        assert (p.p1, p.p2, p.q1) == (bp.nm, bp.s + 2 * bp.t, bp.nm + bp.m)
        assert (v1.p1, v1.p2, v1.q1) == (bp.nm, bp.s + 2 * bp.t + 1, bp.nm + bp.m)
        assert (v2.p1, v2.p2, v2.q1) == (bp.nm + 1, bp.s + 2 * bp.t, bp.nm + bp.m)
    assert (tp.n, tp.m, tp.s, tp.t) == (5, 35, 6, 47)


def test_var1_lambda_encoding(ex8):
    prob = build_var1(ex8)
    pt = ex8_solution()
    pt.lam = -1.0
    z = to_iterate(ex8, "var1", pt)
    assert residual_max(prob, z)[-1] == 1.0
    for lam in np.linspace(-2, 2, 41):
        pt.lam = lam
        z = to_iterate(ex8, "var1", pt)
        for res in (residual_max, residual_fb):
            assert (res(prob, z)[-1] == 0.0) == (lam >= 0.0)


def test_var2_equals_para_with_zeta_squared(ex8, tp):
    rng = np.random.default_rng(6)
    for bp in (ex8, tp):
        var2 = build_var2(bp)
        for _ in range(200):
            zeta = rng.uniform(0.1, 3.0)
            pt = random_point(bp, rng, zeta=zeta)
            a = residual_fb(var2, to_iterate(bp, "var2", pt))
            b = residual_fb(build_para(bp, zeta**2), to_iterate(bp, "para", pt))
            np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


def test_var2_coincides_with_para_at_unit_zeta(ex8):
    rng = np.random.default_rng(9)
    var2, para = build_var2(ex8), build_para(ex8, 1.0)
    for _ in range(100):
        pt = random_point(ex8, rng, zeta=1.0)
        zv, zp = to_iterate(ex8, "var2", pt), to_iterate(ex8, "para", pt)
        assert np.array_equal(var2.eval_H(zv[:3], zv[3:]), para.eval_H(zp[:2], zp[2:]))


@pytest.mark.parametrize("setting", SETTINGS)
@pytest.mark.parametrize("name", ["example8", "transport"])
def test_assembled_jacobians_pass_validation(name, setting, ex8, tp):
    bp = ex8 if name == "example8" else tp
    prob = build(bp, setting, 1.3)
    rng = np.random.default_rng(10)
    pts = [rng.uniform(0.5, 4.0, prob.n_vars) for _ in range(3 if name == "transport" else 20)]
    rep = validate_derivatives(prob, pts)
    assert rep.passed, [(p.max_rel_error, p.worst_entry) for p in rep.points]


@settings(max_examples=50, deadline=None)
@given(st.sampled_from(SETTINGS), st.lists(st.floats(-10, 10), min_size=6, max_size=6))
def test_iterate_round_trip(setting, vals):
    bp = make_example8()
    x, y, mu, nu, nh, zeta = vals
    pt = StationarityPoint([x], [y], [mu], [nu], [nh], zeta * zeta, zeta=zeta if setting == "var2" else None)
    z = to_iterate(bp, setting, pt)
    back = from_iterate(bp, setting, z, lam=pt.lam)
    assert np.array_equal(to_iterate(bp, setting, back), z)
    assert back.lam == pytest.approx(pt.lam)


# -- built-in problems ---------------------------------------------------------


def test_example8_data(ex8):
    z = to_iterate(ex8, "para", ex8_solution())
    assert upper_objective(ex8, z) == 37.0
    assert ex8.info["best_known"] == 37.0
    assert get_problem("example8").name == "example8"
    with pytest.raises(KeyError):
        get_problem("nope")


def test_transport_data_reproducible():
    c1, b1, y1 = transport_data(3)
    c2, b2, y2 = transport_data(3)
    assert np.array_equal(c1, c2) and np.array_equal(b1, b2) and np.array_equal(y1, y2)
    assert not np.array_equal(transport_data(4)[0], c1)
    assert c1.shape == (5, 7) and np.all((c1 >= 0) & (c1 < 1))
    assert np.all(np.isin(b1, np.arange(1, 10)))
    with pytest.raises(ValueError):
        transport_data(0, plan="greedy")


def test_feasible_plan_meets_demand():
    c, b, y = transport_data(0, noise=0.0)
    np.testing.assert_allclose(y.sum(axis=0), b)
    assert np.all(y >= 0)


def test_optimal_plan_is_feasible_and_cheapest_route_for_single_consumer():
    c, b, y = transport_data(1, noise=0.0, plan="optimal")
    assert np.all(y >= -1e-9)
    np.testing.assert_allclose(y.sum(axis=0), b, atol=1e-9)
    plan = optimal_plan(np.array([[0.3], [0.1], [0.2]]), np.array([5.0, 5.0, 5.0]), np.array([4.0]))
    np.testing.assert_allclose(plan.ravel(), [0.0, 4.0, 0.0], atol=1e-12)
    with pytest.raises(ValueError):
        optimal_plan(np.ones((1, 1)), np.array([1.0]), np.array([2.0]))


def test_transport_problem_info(tp):
    assert tp.info["seed"] == 0 and tp.info["plan"] == "feasible"
    obs = np.zeros(35)
    bp = make_transportation(0, observed=obs)
    assert upper_objective(bp, np.zeros(40)) == 0.0
    assert tp.default_xy.shape == (40,)
