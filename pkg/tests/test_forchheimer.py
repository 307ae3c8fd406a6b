import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from forchup.errors import DomainError
from forchup.forchheimer import (
    GField,
    GPolynomial,
    eval_G,
    eval_G_twoterm,
    eval_g,
    eval_h,
    invert_h,
    stack_fields,
)


def bisect_h(xi, poly, n=200):
    """Independent oracle: plain bisection on [0, xi]."""
    lo, hi = 0.0, xi
    for _ in range(n):
        mid = 0.5 * (lo + hi)
        if eval_h(mid, poly) > xi:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


coef = st.floats(0.0, 50.0, allow_nan=False)
polys = st.one_of(
    coef.map(GPolynomial.two_term),
    st.tuples(coef, coef).map(lambda t: GPolynomial.three_term(*t)),
    st.tuples(coef, st.floats(1.2, 3.0)).map(lambda t: GPolynomial.power_law(*t)),
    st.tuples(coef, coef, coef).map(lambda t: GPolynomial(((t[0], 0.5), (t[1], 1.0), (t[2], 2.5)))),
)


def test_darcy_law():
    p = GPolynomial.darcy()
    assert p.is_darcy
    assert eval_g(3.0, p) == 1.0
    assert invert_h(2.5, p) == 2.5
    assert eval_G(7.0, p) == 1.0


def test_two_term_values():
    p = GPolynomial.two_term(1.0)
    assert eval_g(2.0, p) == 3.0
    assert eval_h(2.0, p) == 6.0
    # s + s^2 = 2 -> s = 1, G = 1/2
    assert invert_h(2.0, p) == pytest.approx(1.0, rel=1e-14)
    assert eval_G(2.0, p) == pytest.approx(0.5, rel=1e-14)
    assert eval_G_twoterm(2.0, 1.0) == pytest.approx(0.5, rel=1e-15)


def test_zero_gradient_gives_unit_mobility():
    for p in (GPolynomial.two_term(3.0), GPolynomial.three_term(1.0, 2.0)):
        assert invert_h(0.0, p) == 0.0
        assert eval_G(0.0, p) == 1.0


@pytest.mark.parametrize("terms", [((1.0, 1.0), (1.0, 1.0)), ((1.0, 0.0),), ((-1.0, 1.0),), ((1.0, 2.0), (1.0, 1.0))])
def test_invalid_polynomials(terms):
    with pytest.raises(DomainError):
        GPolynomial(terms)


def test_negative_arguments_rejected():
    p = GPolynomial.two_term(1.0)
    for fn in (eval_g, eval_h, invert_h, eval_G):
        with pytest.raises(DomainError):
            fn(-1.0, p)


def test_from_config_forms():
    assert GPolynomial.from_config({"law": "two-term", "beta": 2.0}) == GPolynomial.two_term(2.0)
    assert GPolynomial.from_config([{"a": 1.0, "alpha": 1.0}, {"a": 2.0, "alpha": 2.0}]) == GPolynomial.three_term(1, 2)
    assert GPolynomial.from_config([(0.5, 0.5)]).terms == ((0.5, 0.5),)
    assert GPolynomial.from_config(None).is_darcy
    p = GPolynomial.three_term(1.0, 3.0)
    assert GPolynomial.from_config(p.to_config()) == p
    with pytest.raises(DomainError):
        GPolynomial.from_config({"law": "cubic"})


@settings(max_examples=300, deadline=None)
@given(polys, st.floats(0.0, 1e4, allow_nan=False))
def test_invert_h_matches_bisection(poly, xi):
    s = invert_h(xi, poly)
    assert s == pytest.approx(bisect_h(xi, poly), rel=1e-10, abs=1e-300)


@settings(max_examples=300, deadline=None)
@given(polys, st.floats(1e-8, 1e4))
def test_roundtrip(poly, s):
    assert invert_h(eval_h(s, poly), poly) == pytest.approx(s, rel=1e-10)


@settings(max_examples=200, deadline=None)
@given(coef, st.floats(0.0, 1e6))
def test_two_term_closed_form(beta, xi):
    assert eval_G(xi, GPolynomial.two_term(beta)) == pytest.approx(eval_G_twoterm(xi, beta), rel=1e-12)


@settings(max_examples=200, deadline=None)
@given(polys, st.floats(0.0, 1e3), st.floats(0.0, 1e3))
def test_mobility_in_unit_interval_and_decreasing(poly, a, b):
    lo, hi = sorted((a, b))
    g_lo, g_hi = eval_G(lo, poly), eval_G(hi, poly)
    assert 0.0 < g_hi <= g_lo <= 1.0 + 1e-15


@settings(max_examples=100, deadline=None)
@given(polys, st.floats(0.0, 1e3))
def test_flux_relation(poly, xi):
    # |u| = G(xi) xi solves h(|u|) = xi
    u = eval_G(xi, poly) * xi
    assert eval_h(u, poly) == pytest.approx(xi, rel=1e-10, abs=1e-14)


def test_field_matches_scalar_routines():
    rng = np.random.default_rng(0)
    a = rng.uniform(0, 5, size=(2, 4, 3))
    f = GField((0.5, 2.0), a)
    xi = rng.uniform(0, 20, size=(4, 3))
    G = f.mobility(xi)
    s = f.inverse_h(xi)
    for j in range(4):
        for i in range(3):
            p = f.cell((j, i))
            assert G[j, i] == pytest.approx(eval_G(xi[j, i], p), rel=1e-12)
            assert s[j, i] == pytest.approx(invert_h(xi[j, i], p), rel=1e-11)


def test_two_term_field_closed_form():
    beta = np.array([[0.0, 1.0], [2.0, 10.0]])
    f = GField.two_term(beta)
    assert f.is_two_term and not f.is_darcy
    xi = np.full((2, 2), 3.0)
    np.testing.assert_allclose(f.mobility(xi), [[eval_G_twoterm(3.0, b) for b in r] for r in beta], rtol=1e-15)


def test_darcy_field_reshape_and_take():
    f = GField.darcy((3, 4))
    assert f.is_darcy and f.shape == (3, 4)
    assert f.reshape((-1,)).shape == (12,)
    assert f.take((slice(0, 2), slice(1, 3))).shape == (2, 2)
    np.testing.assert_array_equal(f.mobility(np.ones((3, 4))), 1.0)


def test_stack_fields():
    a = GField.two_term(np.ones((2, 2)))
    b = GField.two_term(2 * np.ones(3))
    s = stack_fields([a, b])
    assert s.shape == (7,)
    with pytest.raises(DomainError):
        stack_fields([a, GField((2.0,), np.ones((1, 2)))])
