from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cylhjm.noise import (
    BLOCK,
    BrownianDriver,
    TimeGrid,
    dirac_convolution_identity_gap,
    ito_isometry_gap,
    ito_step_integral,
    sample_increments,
)


def test_seed_determinism():
    a = sample_increments(2, 8, 50, seed=7, dt=0.1)
    b = sample_increments(2, 8, 50, seed=7, dt=0.1)
    assert np.array_equal(a.increments, b.increments)
    c = sample_increments(2, 8, 50, seed=8, dt=0.1)
    assert not np.array_equal(a.increments, c.increments)


def test_worker_and_path_count_independence():
    many = sample_increments(3, 5, 3 * BLOCK + 17, seed=11, dt=0.25, workers=4)
    few = sample_increments(3, 5, 300, seed=11, dt=0.25, workers=1)
    assert np.array_equal(many.increments[:, :300], few.increments)
    assert np.array_equal(many.refine(workers=3).increments[:, :300], few.refine().increments)


def test_increment_statistics():
    dt = 0.01
    drv = sample_increments(1, 10, 10_000, seed=3, dt=dt)
    x = drv.increments.ravel()
    assert x.size == 100_000
    assert abs(x.mean()) < 4 * math.sqrt(dt / x.size)
    assert abs(x.var() / dt - 1) < 0.05


def test_coordinates_uncorrelated():
    drv = sample_increments(2, 50, 2000, seed=5, dt=1.0)
    x = drv.increments.reshape(-1, 2)
    assert abs(np.corrcoef(x.T)[0, 1]) < 4 / math.sqrt(x.shape[0])


def test_invalid_arguments():
    with pytest.raises(ValueError):
        sample_increments(0, 1, 1, seed=0)
    with pytest.raises(ValueError):
        sample_increments(1, 1, 1, seed=-1)
    with pytest.raises(ValueError):
        TimeGrid(0.0, 3)
    with pytest.raises(ValueError):
        BrownianDriver(TimeGrid(0.1, 3), np.zeros((2, 1, 1)))
    with pytest.raises(ValueError):
        BrownianDriver(TimeGrid(0.1, 1), np.zeros((1, 1, 1))).refine()


def test_time_grid_lookup():
    g = TimeGrid(0.25, 8)
    assert g.step_of(1.5) == 6
    with pytest.raises(ValueError):
        g.step_of(0.3)
    with pytest.raises(ValueError):
        g.step_of(2.25)


# -- Ito integral -----------------------------------------------------------------


def test_ito_trivial_integrands():
    drv = sample_increments(1, 6, 20, seed=1, dt=0.5)
    assert not ito_step_integral(np.zeros((6, 1, 1)), drv).any()
    np.testing.assert_allclose(
        ito_step_integral(np.ones((6, 1, 1)), drv)[:, 0], drv.path_values()[-1, :, 0], atol=1e-14
    )
    with pytest.raises(ValueError):
        ito_step_integral(np.ones((5, 1, 1)), drv)


@given(st.integers(0, 1000), st.floats(-3, 3), st.floats(-3, 3))
@settings(max_examples=25)
def test_ito_linearity(seed, a, b):
    rng = np.random.default_rng(seed)
    drv = sample_increments(2, 4, 7, seed=seed, dt=0.1)
    A = rng.normal(size=(4, 7, 3, 2))
    B = rng.normal(size=(4, 3, 2))
    lhs = ito_step_integral(a * A + b * B[:, None], drv)
    rhs = a * ito_step_integral(A, drv) + b * ito_step_integral(B, drv)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_refinement_invariance():
    drv = sample_increments(2, 8, 40, seed=9, dt=0.125)
    A = np.random.default_rng(0).normal(size=(8, 3, 2))
    fine = drv.refine()
    np.testing.assert_allclose(fine.increments[0::2] + fine.increments[1::2], drv.increments, atol=1e-15)
    np.testing.assert_allclose(
        ito_step_integral(np.repeat(A, 2, axis=0), fine), ito_step_integral(A, drv), atol=1e-13
    )


def test_refined_increments_have_half_variance():
    drv = sample_increments(1, 4, 20_000, seed=2, dt=1.0).refine()
    v = drv.increments.var(axis=1).ravel()
    assert np.all(np.abs(v / 0.5 - 1) < 0.05)
    # bridge halves are uncorrelated
    c = np.corrcoef(drv.increments[0, :, 0], drv.increments[1, :, 0])[0, 1]
    assert abs(c) < 4 / math.sqrt(20_000)


def test_isometry_trivial_cases():
    drv = sample_increments(1, 10, 100, seed=0, dt=0.1)
    assert ito_isometry_gap(np.zeros((10, 1, 1)), drv) == (0.0, 0.0, 0.0)
    gap = ito_isometry_gap(np.ones((10, 1, 1)), drv)
    assert gap.exact == pytest.approx(1.0)


def test_isometry_random_deterministic_integrand():
    rng = np.random.default_rng(42)
    A = rng.normal(size=(16, 2, 2))
    passes = 0
    for seed in range(20):
        gap = ito_isometry_gap(A, sample_increments(2, 16, 10_000, seed=seed, dt=1 / 16))
        assert gap.exact == pytest.approx((A**2).sum() / 16)
        passes += gap.passed()
    assert passes >= 18


def test_anticipating_integrand_breaks_isometry():
    dt = 1 / 16
    fails = 0
    for seed in range(10):
        drv = sample_increments(1, 16, 10_000, seed=seed, dt=dt)
        A = np.abs(drv.increments)[..., None] / math.sqrt(dt)  # depends on dW_j itself
        fails += not ito_isometry_gap(A, drv).passed()
    assert fails == 10


# -- delta convolution identity -----------------------------------------------------


def _sin2(t):
    f = lambda x: np.sin(np.pi * np.asarray(x) / t) ** 2  # noqa: E731
    fp = lambda x: np.pi / t * np.sin(2 * np.pi * np.asarray(x) / t)  # noqa: E731
    return f, fp


def test_dirac_trivial_cases():
    drv = sample_increments(1, 16, 8, seed=0, dt=1 / 16)
    zero = lambda x: 0.0 * np.asarray(x)  # noqa: E731
    assert dirac_convolution_identity_gap(zero, zero, 1.0, drv) == 0.0
    f, fp = _sin2(1.0)
    still = BrownianDriver(drv.grid, np.zeros_like(drv.increments))
    assert dirac_convolution_identity_gap(f, fp, 1.0, still) == 0.0


def test_dirac_errors():
    drv = sample_increments(1, 16, 8, seed=0, dt=1 / 16)
    with pytest.raises(ValueError):
        dirac_convolution_identity_gap(np.cos, np.sin, 1.0, drv)
    with pytest.raises(ValueError):
        dirac_convolution_identity_gap(*_sin2(1.0), 1.0, sample_increments(2, 16, 8, seed=0, dt=1 / 16))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_dirac_gap_halves(seed):
    f, fp = _sin2(1.0)
    drv = sample_increments(1, 16, 32, seed=seed, dt=1 / 16)
    gaps = []
    for _ in range(4):
        gaps.append(dirac_convolution_identity_gap(f, fp, 1.0, drv))
        drv = drv.refine()
    ratios = np.array(gaps[1:]) / np.array(gaps[:-1])
    assert np.all((ratios >= 0.3) & (ratios <= 0.7)), ratios
