import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import remainder_ratio
from nslm.ncp import FB_ORIGIN_SLOPE, dn_max, dn_norm, dn_phi_fb, fb_partials, phi_fb, phi_max

finite = st.floats(-1e6, 1e6, allow_nan=False)


@pytest.mark.parametrize("a,b,want", [(0, 0, 0), (3, 4, 12), (-2, 0, 0)])
def test_phi_fb_values(a, b, want):
    assert phi_fb(a, b) == want


@pytest.mark.parametrize("a,b,want", [(1, 1, (1, 0)), (2, 5, (0, 1)), (5, 2, (1, 0))])
def test_dn_max_values(a, b, want):
    assert tuple(dn_max(a, b)) == want


def test_dn_norm_values():
    np.testing.assert_allclose(dn_norm([3, 4]), [0.6, 0.8])
    np.testing.assert_allclose(dn_norm([0, 0]), [math.sqrt(2) / 2] * 2)
    np.testing.assert_allclose(dn_norm([0, 0, 0, 0]), [0.5] * 4)
    with pytest.raises(ValueError):
        dn_norm([])


def test_dn_phi_fb_values():
    np.testing.assert_allclose(dn_phi_fb(0, 0), [1 + math.sqrt(2) / 2] * 2)
    assert FB_ORIGIN_SLOPE == pytest.approx(1.70711, abs=1e-5)
    np.testing.assert_allclose(dn_phi_fb(3, 4), [1.6, 1.8])
    np.testing.assert_allclose(dn_phi_fb(-1, 0), [0, 1])


def test_fb_partials_vectorized_origin_branch():
    da, db = fb_partials(np.array([0.0, 3.0, 1e-100]), np.array([0.0, 4.0, 0.0]))
    np.testing.assert_allclose(da, [FB_ORIGIN_SLOPE, 1.6, 2.0])
    np.testing.assert_allclose(db, [FB_ORIGIN_SLOPE, 1.8, 1.0])


def test_phi_fb_no_overflow():
    assert phi_fb(1e150, 1e150) == pytest.approx(1e150 * (2 + math.sqrt(2)))
    assert phi_fb(-1e150, 0.0) == 0.0


def test_root_characterization_grid():
    a, b = np.meshgrid(np.linspace(-5, 5, 201), np.linspace(-5, 5, 201))
    root = np.abs(phi_fb(a, b)) < 1e-12
    compl = (a <= 1e-12) & (b <= 1e-12) & (np.abs(a * b) <= 1e-12)
    assert np.array_equal(root, compl)
    assert root.sum() == 2 * 101 - 1


@given(finite, finite)
def test_dn_max_is_unit_basis_row(a, b):
    d = dn_max(a, b)
    assert sorted(d.tolist()) == [0.0, 1.0]
    assert d @ np.array([a, b]) == phi_max(a, b)


@given(st.lists(finite, min_size=1, max_size=8))
def test_dn_norm_unit_length(z):
    assert np.linalg.norm(dn_norm(z)) == pytest.approx(1.0, rel=1e-12)


@given(finite, finite)
def test_phi_fb_positively_homogeneous(a, b):
    # Euler identity: phi(z) = D_N phi(z) z for the degree-one homogeneous FB function
    assert dn_phi_fb(a, b) @ np.array([a, b]) == pytest.approx(phi_fb(a, b), rel=1e-9, abs=1e-9)


FUNCTIONS = {
    "max": (lambda z: phi_max(z[0], z[1]), lambda z: dn_max(z[0], z[1])),
    "fb": (lambda z: phi_fb(z[0], z[1]), lambda z: dn_phi_fb(z[0], z[1])),
    "norm": (lambda z: np.linalg.norm(z), dn_norm),
}
# remainder constant shared by all three functions on the integer grid [-2, 2]^2
REMAINDER_C = 1.0


@pytest.mark.parametrize("name", FUNCTIONS)
def test_newton_derivative_remainder(name):
    f, dn = FUNCTIONS[name]
    rng = np.random.default_rng(7)
    for a, b in itertools.product(range(-2, 3), repeat=2):
        z = np.array([a, b], dtype=float)
        for h in (1e-2, 1e-4, 1e-6):
            for _ in range(10):
                u = rng.normal(size=2)
                assert remainder_ratio(f, dn, z, h * u / np.linalg.norm(u)) <= REMAINDER_C
