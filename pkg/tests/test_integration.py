from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cylhjm.integration import (
    BilinearPairing,
    ElementaryFunction,
    FiniteSpace,
    FiniteVectorMeasure,
    SemivariationBracket,
    bochner_quadrature,
    cylindrify,
    elementary_integral,
    semivariation,
    semivariation_brute,
    semivariation_witness,
)

from oracles import brute_semivariation

MUL = BilinearPairing.multiplication()
finite = st.floats(-5, 5, allow_nan=False)


def scalar_measure(values):
    values = np.asarray(values, dtype=float)
    return FiniteVectorMeasure(FiniteSpace(len(values)), values)


# -- elementary integral -------------------------------------------------------


def test_integral_by_hand():
    mu = scalar_measure([2.0, 3.0])
    f = ElementaryFunction(mu.space, [1.0, -1.0])
    assert elementary_integral(f, mu, MUL) == pytest.approx([-1.0])


def test_constant_and_zero_integrands():
    rng = np.random.default_rng(0)
    pairing = BilinearPairing(rng.normal(size=(2, 3, 4)))
    mu = FiniteVectorMeasure(FiniteSpace(5), rng.normal(size=(5, 3)))
    e = rng.normal(size=2)
    f = ElementaryFunction(mu.space, np.tile(e, (5, 1)))
    np.testing.assert_allclose(elementary_integral(f, mu, pairing), pairing(e, mu(range(5))), atol=1e-12)
    zero = ElementaryFunction(mu.space, np.zeros((5, 2)))
    assert not elementary_integral(zero, mu, pairing).any()


def test_dimension_mismatch():
    mu = FiniteVectorMeasure(FiniteSpace(3), np.ones((3, 2)))
    with pytest.raises(ValueError):
        elementary_integral(ElementaryFunction(mu.space, np.ones(3)), mu, MUL)
    with pytest.raises(ValueError):
        elementary_integral(ElementaryFunction(FiniteSpace(4), np.ones(4)), scalar_measure([1, 2, 3]), MUL)
    with pytest.raises(ValueError):
        FiniteVectorMeasure(FiniteSpace(2), np.ones(3))


@given(st.integers(1, 8), st.data())
def test_bilinearity(n, data):
    mu = scalar_measure(data.draw(arrays(float, n, elements=finite)))
    nu = scalar_measure(data.draw(arrays(float, n, elements=finite)))
    f = ElementaryFunction(mu.space, data.draw(arrays(float, n, elements=finite)))
    g = ElementaryFunction(mu.space, data.draw(arrays(float, n, elements=finite)))
    a, b = data.draw(finite), data.draw(finite)
    fg = ElementaryFunction(mu.space, a * f.values + b * g.values)
    lhs = elementary_integral(fg, mu, MUL)
    rhs = a * elementary_integral(f, mu, MUL) + b * elementary_integral(g, mu, MUL)
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)
    np.testing.assert_allclose(
        elementary_integral(f, mu + nu, MUL),
        elementary_integral(f, mu, MUL) + elementary_integral(f, nu, MUL),
        atol=1e-9,
    )


@given(st.integers(1, 8), st.data())
def test_restriction_consistency(n, data):
    mu = scalar_measure(data.draw(arrays(float, n, elements=finite)))
    support = data.draw(st.sets(st.integers(0, n - 1)))
    vals = np.zeros(n)
    for k in support:
        vals[k] = data.draw(finite)
    f = ElementaryFunction(mu.space, vals)
    np.testing.assert_allclose(
        elementary_integral(f, mu, MUL), elementary_integral(f, mu.restrict(support), MUL), atol=1e-12
    )


# -- semivariation ---------------------------------------------------------------


def test_semivariation_examples():
    assert semivariation(scalar_measure([1.0, -1.0]), MUL) == pytest.approx(2.0)
    assert semivariation(scalar_measure([0.5, 1.0, 2.0]), MUL) == pytest.approx(3.5)
    g = np.array([3.0, 4.0])
    one = FiniteVectorMeasure(FiniteSpace(1), g[None, :])
    pairing = BilinearPairing.scalar_action(2)
    assert semivariation(one, pairing) == pytest.approx(np.linalg.norm(pairing.left_operator(g), 2))


def test_semivariation_limits_and_modes():
    with pytest.raises(ValueError):
        semivariation(scalar_measure(np.ones(25)), MUL)
    with pytest.raises(ValueError):
        semivariation(scalar_measure([1.0]), MUL, mode="bogus")
    with pytest.raises(ValueError):
        semivariation(FiniteVectorMeasure(FiniteSpace(2), np.ones((2, 2))), BilinearPairing(np.ones((2, 2, 1))))


@settings(max_examples=60)
@given(st.integers(1, 10), st.integers(1, 3), st.data())
def test_exact_matches_enumeration_oracle(n, dim_h, data):
    coeffs = data.draw(arrays(float, (1, 1, dim_h), elements=finite))
    pairing = BilinearPairing(coeffs)
    mu = scalar_measure(data.draw(arrays(float, n, elements=finite)))
    rows = np.stack([pairing.left_operator(g)[:, 0] for g in mu.values])
    exact = semivariation(mu, pairing)
    assert exact == pytest.approx(brute_semivariation(rows), abs=1e-12)
    assert exact == pytest.approx(semivariation_brute(mu, pairing), abs=1e-12)


@settings(max_examples=60)
@given(st.integers(1, 10), st.data())
def test_operator_norm_bound_and_witness(n, data):
    mu = scalar_measure(data.draw(arrays(float, n, elements=finite)))
    value, signs = semivariation_witness(mu, MUL)
    witnessed = np.linalg.norm(elementary_integral(ElementaryFunction(mu.space, signs), mu, MUL))
    assert witnessed == pytest.approx(value, abs=1e-12)
    f = data.draw(arrays(float, n, elements=st.floats(-1, 1)))
    sup = np.abs(f).max()
    got = np.linalg.norm(elementary_integral(ElementaryFunction(mu.space, f), mu, MUL))
    assert got <= value * sup + 1e-12


@given(st.integers(1, 10), st.data())
def test_subadditivity(n, data):
    mu = scalar_measure(data.draw(arrays(float, n, elements=finite)))
    nu = scalar_measure(data.draw(arrays(float, n, elements=finite)))
    assert semivariation(mu + nu, MUL) <= semivariation(mu, MUL) + semivariation(nu, MUL) + 1e-12


def test_sampled_bracket_contains_exact_value():
    rng = np.random.default_rng(3)
    for _ in range(20):
        n = int(rng.integers(1, 8))
        pairing = BilinearPairing(rng.normal(size=(1, 2, 3)))
        mu = FiniteVectorMeasure(FiniteSpace(n), rng.normal(size=(n, 2)))
        exact = semivariation(mu, pairing)
        br = semivariation(mu, pairing, mode="sampled")
        assert isinstance(br, SemivariationBracket)
        assert br.lower <= exact + 1e-12 <= br.upper + 2e-12
        assert br.lower == pytest.approx(exact, rel=1e-6)


def test_sampled_vector_integrand_bracket_is_ordered():
    rng = np.random.default_rng(4)
    pairing = BilinearPairing(rng.normal(size=(3, 2, 2)))
    mu = FiniteVectorMeasure(FiniteSpace(6), rng.normal(size=(6, 2)))
    br = semivariation(mu, pairing, mode="sampled", n_samples=16, seed=1)
    assert 0 < br.lower <= br.upper
    for _ in range(200):
        f = rng.normal(size=(6, 3))
        f /= np.linalg.norm(f, axis=1, keepdims=True)
        assert np.linalg.norm(elementary_integral(ElementaryFunction(mu.space, f), mu, pairing)) <= br.upper + 1e-12


# -- cylindrification -------------------------------------------------------------


def test_cylindrify_scalar_test_space_is_original_map():
    rng = np.random.default_rng(5)
    T = rng.normal(size=(3, 4))
    op = cylindrify(T, 1)
    for _ in range(10):
        x = rng.normal(size=4)
        np.testing.assert_allclose(op(x).ravel(), T @ x, atol=1e-14)
        np.testing.assert_allclose(op(x, [1.0]), T @ x, atol=1e-14)


@settings(max_examples=100)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_cylindrify_norm_equality_and_submultiplicativity(dim_h, dim_i, dim_e, seed):
    rng = np.random.default_rng(seed)
    op = cylindrify(rng.normal(size=(dim_h, dim_i)), dim_e)
    upper = op.opnorm_upper()
    assert abs(op.opnorm_lower() - upper) <= 1e-9 * max(1.0, upper)
    for _ in range(8):
        f = rng.normal(size=(dim_i, dim_e))
        e = rng.normal(size=dim_e)
        assert np.linalg.norm(op(f, e)) <= upper * np.linalg.norm(f, 2) * np.linalg.norm(e) + 1e-9


def test_cylindrify_rejects_trivial_test_space():
    with pytest.raises(ValueError):
        cylindrify(np.eye(2), 0)


# -- Bochner quadrature -----------------------------------------------------------


def test_bochner_examples():
    v = np.array([1.0, -2.0])
    np.testing.assert_allclose(bochner_quadrature(np.tile(v, (5, 1)), 0.1), v * 0.5)
    alt = np.array([v, -v] * 3)
    assert not bochner_quadrature(alt, 0.1).any()
    n, dt = 10, 0.1
    assert bochner_quadrature(np.arange(n) * dt, dt) == pytest.approx(dt**2 * n * (n - 1) / 2)
    assert bochner_quadrature(np.zeros((0, 3)), 0.1).shape == (3,)
    with pytest.raises(ValueError):
        bochner_quadrature([1.0], 0.0)


@given(arrays(float, (6, 2), elements=finite), st.floats(1e-3, 1))
def test_bochner_contraction(values, dt):
    out = bochner_quadrature(values, dt)
    assert np.linalg.norm(out) <= dt * np.linalg.norm(values, axis=1).sum() + 1e-12
