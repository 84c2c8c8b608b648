from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cylhjm.evolution import CoefficientMap, euler_mild_solve
from cylhjm.measures import MaturityGrid, MeasureArray, SignedMeasure
from cylhjm.noise import sample_increments
from cylhjm.termstructure import (
    ExampleCoefficientSpec,
    HJMModel,
    Loading,
    TestFunction,
    VolTerm,
    _drift_gap,
    bank_account_closed,
    bank_account_discrete,
    bond_price,
    build_example_coefficients,
    discounted_prices,
    drift_condition_gap,
    energy_future,
    martingale_test,
    simulate,
)

from builders import curve, ho_lee_spec, state_dependent_spec
from oracles import bond_flat, closed_bank_one_path, euler_one_path, ho_lee_drift_density

H = 1 / 16
GRID = MaturityGrid(H, 48)


def coefficients_at_zero(spec, component="rates"):
    coeffs = build_example_coefficients(spec, component)
    drv = sample_increments(spec.d, 1, 1, seed=0, dt=H)
    path = euler_mild_solve(SignedMeasure.zero(spec.grid), CoefficientMap.zero(spec.grid, spec.d), drv)
    return coeffs.drift(path, 0), coeffs.vol(path, 0)


def static_model(x0, grid=GRID, d=1):
    spec = ExampleCoefficientSpec(grid, [], [[] for _ in range(d)])
    return HJMModel.from_spec(spec, x0, horizon=1.0)


# -- loadings and specs ----------------------------------------------------------


@given(
    st.floats(-2, 2), st.lists(st.floats(-10, 10), min_size=2, max_size=2), st.floats(0.1, 3),
    st.lists(st.floats(-100, 100), min_size=2, max_size=2), st.lists(st.floats(-100, 100), min_size=2, max_size=2),
)
def test_loading_bound_and_lipschitz(a, slopes, s, z1, z2):
    ld = Loading(a, tuple(slopes), s)
    v1, v2 = float(ld(np.array(z1))), float(ld(np.array(z2)))
    assert abs(v1) <= ld.bound + 1e-12
    assert abs(v1 - v2) <= ld.lipschitz * np.linalg.norm(np.subtract(z1, z2)) + 1e-9


def test_spec_validation():
    e = [TestFunction.indicator(GRID, 0, 1)]
    with pytest.raises(ValueError):
        ExampleCoefficientSpec(GRID, e, [[VolTerm(SignedMeasure.zero(MaturityGrid(0.5, 4)), Loading(1.0))]])
    with pytest.raises(ValueError):
        ExampleCoefficientSpec(GRID, e, [[VolTerm(SignedMeasure.zero(GRID), Loading(1.0, (1.0, 2.0)))]])
    with pytest.raises(ValueError):
        ExampleCoefficientSpec(GRID, [TestFunction(np.ones(3))], [])
    with pytest.raises(ValueError):
        build_example_coefficients(ho_lee_spec(GRID), "bogus")


# -- drift construction ---------------------------------------------------------


def test_ho_lee_drift():
    drift, vol = coefficients_at_zero(ho_lee_spec(GRID, sigma=0.3))
    np.testing.assert_allclose(drift.density, ho_lee_drift_density(GRID, 0.3), rtol=1e-14)
    assert drift.locations.size == 0


def test_zero_vol_zero_drift():
    drift, _ = coefficients_at_zero(ExampleCoefficientSpec(GRID, [], [[]]))
    assert not drift.density.any() and not drift.weights.any()


def test_single_atom_drift():
    sigma = 0.4
    spec = ExampleCoefficientSpec(GRID, [], [[VolTerm(SignedMeasure.atom(GRID, 1.0, sigma), Loading(1.0))]])
    drift, _ = coefficients_at_zero(spec)
    assert drift.measure().atoms == [(1.0, pytest.approx(sigma**2 / 2, rel=1e-15))]
    assert not drift.density.any()


def test_energy_drift_is_zero():
    drift, vol = coefficients_at_zero(state_dependent_spec(GRID, energy=True), "energy")
    assert not drift.density.any()
    assert vol.shape[-1] == 2


@pytest.mark.parametrize("atoms", [False, True])
def test_drift_condition_holds_along_paths(atoms):
    spec = state_dependent_spec(GRID, atoms=atoms)
    coeffs = build_example_coefficients(spec)
    path = euler_mild_solve(curve(GRID), coeffs, sample_increments(2, 16, 64, seed=4, dt=H))
    assert drift_condition_gap(coeffs, path) < 1e-10


def test_drift_gap_detects_injected_atom():
    spec = state_dependent_spec(GRID)
    drift, vol = coefficients_at_zero(spec)
    eps = 1e-6
    bad = drift + MeasureArray.from_measure(SignedMeasure.atom(GRID, 0.5, eps))
    assert _drift_gap(bad, vol) == pytest.approx(eps, rel=1e-6)
    zero = MeasureArray.zeros(GRID)
    assert _drift_gap(zero, MeasureArray.zeros(GRID, (2,))) == 0.0


def test_drift_matches_scalar_oracle():
    from oracles import scalar_coefficients

    spec = state_dependent_spec(GRID)
    x = curve(GRID)
    drift, vols = scalar_coefficients(spec, x)
    coeffs = build_example_coefficients(spec)
    path = euler_mild_solve(x, coeffs, sample_increments(2, 1, 1, seed=0, dt=H))
    got = coeffs.drift(path, 0).measure(0)
    for b in list(GRID.boundaries) + [0.3, 0.5]:
        half = 0.5 * sum(g.cdf(b) ** 2 for g in vols)
        assert got.cdf(b) == pytest.approx(half, abs=1e-15)
    # the per-factor scalar sum is exact on the grid, not at other factors' atoms
    for b in GRID.boundaries:
        assert got.cdf(b) == pytest.approx(drift.cdf(b), abs=1e-15)


# -- bonds ------------------------------------------------------------------------


def test_bond_examples():
    drv = sample_increments(1, 16, 4, seed=0, dt=H)
    zero = simulate(static_model(SignedMeasure.zero(GRID)), drv)[0]
    assert np.all(bond_price(zero, 5, 2.0) == 1.0)
    lam = 0.04
    flat = simulate(static_model(SignedMeasure.uniform(GRID, lam)), drv)[0]
    for T in (0.25, 1.0, 2.0):
        np.testing.assert_allclose(bond_price(flat, 0, T), bond_flat(lam, T), rtol=1e-14)
        np.testing.assert_allclose(bond_price(flat, 8, T + 0.5), bond_flat(lam, T), rtol=1e-14)
    assert np.all(bond_price(flat, 8, 0.5) == 1.0)
    with pytest.raises(ValueError):
        bond_price(flat, 8, 0.25)


def test_bond_jump_at_atom_maturity():
    tau, c = 1.25, 0.07
    x0 = SignedMeasure(GRID, [(tau, c)], 0.03)
    spec = ExampleCoefficientSpec(GRID, [], [[VolTerm(SignedMeasure.uniform(GRID, 0.01), Loading(1.0))]])
    rates = simulate(HJMModel.from_spec(spec, x0), sample_increments(1, 16, 8, seed=1, dt=H))[0]
    for j in range(0, 17, 4):
        x = tau - j * H
        for p in range(8):
            m = rates.measure(j, p)
            right = math.exp(-m.cdf(x))
            left = math.exp(-(m.cdf(x) - m.atom_at(x)))
            assert right / left == pytest.approx(math.exp(-c), rel=1e-14)


# -- energy futures ---------------------------------------------------------------


def test_energy_future_properties():
    spec = state_dependent_spec(GRID, energy=True)
    model = HJMModel.from_spec(spec, curve(GRID), SignedMeasure(GRID, [(1.5, 0.4)], 2.0))
    rates, energy = simulate(model, sample_increments(2, 16, 16, seed=2, dt=H))
    for j in (0, 7, 16):
        assert np.all(energy_future(energy, j, 1.0, 1.0) == 0)
        np.testing.assert_allclose(
            energy_future(energy, j, 0.5, 2.5),
            energy_future(energy, j, 0.5, 1.5) + energy_future(energy, j, 1.5, 2.5),
            atol=1e-13,
        )
    with pytest.raises(ValueError):
        energy_future(energy, 0, 2.0, 1.0)
    quiet = HJMModel.from_spec(ExampleCoefficientSpec(GRID, [], [[]]), curve(GRID), SignedMeasure.uniform(GRID, 2.0))
    still = simulate(quiet, sample_increments(1, 16, 4, seed=0, dt=H))[1]
    for j in range(17):
        assert np.all(energy_future(still, j, 0.5, 1.5) == 2.0)


# -- bank account -----------------------------------------------------------------


def test_bank_closed_examples():
    drv = sample_increments(1, 16, 4, seed=0, dt=H)
    lam = 0.05
    static = CoefficientMap.zero(GRID, 1)
    for j in (0, 5, 16):
        np.testing.assert_allclose(
            bank_account_closed(SignedMeasure.uniform(GRID, lam), static, drv, j), math.exp(lam * j * H), rtol=1e-14
        )
        assert np.all(bank_account_closed(SignedMeasure.zero(GRID), static, drv, j) == 1.0)
    tau, c = 0.5, 0.2
    x0 = SignedMeasure.atom(GRID, tau, c)
    b = bank_account_closed(x0, static, drv, [7, 8, 9])
    assert np.all(b[0] == 1.0)
    np.testing.assert_allclose(b[1:], math.exp(c), rtol=1e-15)


@pytest.mark.parametrize("seed", [0, 3])
def test_bank_closed_matches_oracle(seed):
    spec = state_dependent_spec(GRID)
    x0 = curve(GRID)
    drv = sample_increments(2, 8, 3, seed=seed, dt=H)
    got = bank_account_closed(x0, build_example_coefficients(spec), drv, list(range(9)))
    for p in range(3):
        dw = drv.increments[:, p, :]
        states = euler_one_path(x0, spec, dw, H)
        for j in range(9):
            ref = closed_bank_one_path(x0, spec, dw, H, j, states)
            assert math.log(got[j, p]) == pytest.approx(ref, abs=1e-14)


def test_bank_discrete_exact_for_zero_coefficients():
    x0 = curve(GRID)
    model = static_model(x0)
    rates = simulate(model, sample_increments(1, 16, 2, seed=0, dt=H))[0]
    for n in (1, 2, 4, 8, 16):
        np.testing.assert_allclose(bank_account_discrete(rates, 16, n), math.exp(x0.cdf(1.0)), rtol=1e-12)


def test_bank_discrete_single_roll_and_errors():
    spec = state_dependent_spec(GRID)
    rates = simulate(HJMModel.from_spec(spec, curve(GRID)), sample_increments(2, 16, 5, seed=0, dt=H))[0]
    np.testing.assert_allclose(bank_account_discrete(rates, 12, 1), 1 / bond_price(rates, 0, 12 * H), rtol=1e-14)
    with pytest.raises(ValueError):
        bank_account_discrete(rates, 12, 5)
    with pytest.raises(ValueError):
        bank_account_discrete(rates, 12, 0)


@pytest.mark.parametrize("atoms", [False, True])
def test_bank_finest_equals_closed(atoms):
    spec = state_dependent_spec(GRID, atoms=atoms)
    coeffs = build_example_coefficients(spec)
    x0 = curve(GRID)
    drv = sample_increments(2, 16, 32, seed=6, dt=H)
    rates = euler_mild_solve(x0, coeffs, drv)
    closed = bank_account_closed(x0, coeffs, drv, 16)
    assert np.abs(np.log(bank_account_discrete(rates, 16, 16)) - np.log(closed)).max() < 1e-10
    errs = [np.abs(np.log(bank_account_discrete(rates, 16, n)) - np.log(closed)).max() for n in (2, 4, 8, 16)]
    if not atoms:
        assert all(b <= a + 1e-12 for a, b in zip(errs, errs[1:]))


# -- discounted prices and martingales ---------------------------------------------


def test_linear_and_march_prices_agree():
    spec = ho_lee_spec(GRID, sigma=0.02, energy_sigma=0.2)
    x0 = curve(GRID)
    model = HJMModel.from_spec(spec, x0, SignedMeasure.uniform(GRID, 1.0), horizon=1.0)
    drv = sample_increments(1, 16, 50, seed=9, dt=H)
    mats, steps, buckets = [0.25, 0.5, 1.0, 2.0], [0, 4, 8, 16], [(0.5, 1.0), (1.0, 2.0)]
    a = discounted_prices(model, drv, mats, steps, buckets, method="linear")
    b = discounted_prices(model, drv, mats, steps, buckets, method="march")
    np.testing.assert_allclose(a.z, b.z, rtol=1e-13)
    np.testing.assert_allclose(a.energy, b.energy, atol=1e-13)
    np.testing.assert_allclose(a.log_bank, b.log_bank, atol=1e-14)


def test_discounted_bond_formula():
    """``-log Z(t, T) = X0(0, T] + sum F(0, T - t_{i+1}] dt + sum G(0, T - t_{i+1}] dW_i``."""
    spec = ExampleCoefficientSpec(
        GRID, [], [[VolTerm(SignedMeasure(GRID, [(0.5, 0.01)], 0.02), Loading(1.0))]]
    )
    x0 = curve(GRID)
    model = HJMModel.from_spec(spec, x0, horizon=1.0)
    drv = sample_increments(1, 16, 5, seed=2, dt=H)
    drift, vol = coefficients_at_zero(spec)
    f, g = drift.measure(), vol.measure(0)
    T = 1.5
    prices = discounted_prices(model, drv, [T], [4, 16], method="march")
    for row, j in enumerate(prices.steps):
        for p in range(5):
            expected = x0.cdf(T) + sum(
                f.cdf(T - (i + 1) * H) * H + g.cdf(T - (i + 1) * H) * drv.increments[i, p, 0] for i in range(j)
            )
            assert -math.log(prices.z[row, 0, p]) == pytest.approx(expected, abs=1e-13)


def test_state_dependent_prices_use_march():
    spec = state_dependent_spec(GRID, energy=True)
    model = HJMModel.from_spec(spec, curve(GRID), SignedMeasure.uniform(GRID, 1.0), horizon=1.0)
    drv = sample_increments(2, 16, 20, seed=1, dt=H)
    with pytest.raises(ValueError):
        discounted_prices(model, drv, [1.0], [8], method="linear")
    out = discounted_prices(model, drv, [0.5, 1.0], [0, 8, 16], [(1.0, 2.0)])
    rates = simulate(model, drv)[0]
    np.testing.assert_allclose(out.z[1, 1], bond_price(rates, 8, 1.0) / bank_account_closed(
        model.x0, model.coeffs, drv, 8), rtol=1e-13)
    # frozen after maturity 0.5
    np.testing.assert_allclose(out.z[2, 0], out.z[1, 0] * 0 + 1 / np.exp(out.log_bank[8]), rtol=1e-13)


def test_martingale_test_examples():
    flat = np.full((4, 10), 0.9)
    assert all(c.passed and c.mean_gap == 0.0 for c in martingale_test(flat))
    with pytest.raises(ValueError):
        martingale_test(np.arange(20.0).reshape(2, 10))
    shifted = np.vstack([np.full(100, 1.0), 1.5 + np.random.default_rng(0).normal(0, 0.01, 100)])
    assert not martingale_test(shifted)[0].passed


@settings(max_examples=5, deadline=None)
@given(st.integers(0, 2**31))
def test_ho_lee_discounted_bonds_are_martingales(seed):
    grid = MaturityGrid(1 / 64, 128)
    model = HJMModel.from_spec(ho_lee_spec(grid), SignedMeasure.uniform(grid, 0.03), horizon=1.0)
    drv = sample_increments(1, 64, 4000, seed=seed, dt=1 / 64)
    out = discounted_prices(model, drv, [0.25, 0.5, 0.75, 1.0], [0, 16, 32, 64])
    checks = [c for m in range(4) for c in martingale_test(out.z[:, m])]
    # four-sigma here so five random seeds do not flake
    assert all(c.mean_gap < 4 * c.stderr for c in checks)
