"""Heath-Jarrow-Morton models driven by measure-valued forward rates.

The rates component ``X`` is parameterized by time-to-maturity and transported
by the left shift; the energy component ``Xe`` is parameterized by
time-of-maturity and does not move.  Bond prices are
``P(t, T) = exp(-X_t(0, T - t])`` and energy futures are ``Xe_t(T1, T2]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from .evolution import (
    CoefficientMap,
    MildPath,
    Step,
    _advance,
    _as_initial,
    march,
)
from .measures import MaturityGrid, MeasureArray, SignedMeasure, align
from .noise import BrownianDriver


# ---------------------------------------------------------------------------
# Example coefficients


@dataclass(frozen=True)
class Loading:
    """Bounded Lipschitz map ``z -> intercept + s * tanh(slopes . z / s)``.

    ``s`` is the saturation level; the map is bounded by ``|intercept| + s``
    and Lipschitz with constant ``|slopes|``.
    """

    intercept: float
    slopes: tuple[float, ...] = ()
    saturation: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "slopes", tuple(float(s) for s in self.slopes))
        if not self.saturation > 0:
            raise ValueError("saturation must be positive")

    @property
    def constant(self) -> bool:
        return not any(self.slopes)

    @property
    def bound(self) -> float:
        return abs(self.intercept) + (0.0 if self.constant else self.saturation)

    @property
    def lipschitz(self) -> float:
        return float(np.linalg.norm(self.slopes)) if self.slopes else 0.0

    def __call__(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if self.constant:
            return np.full(z.shape[:-1], float(self.intercept))
        s = self.saturation
        return self.intercept + s * np.tanh((z @ np.asarray(self.slopes)) / s)


@dataclass(frozen=True)
class VolTerm:
    base: SignedMeasure
    loading: Loading


@dataclass
class TestFunction:
    """Step function on the maturity cells, optionally with point values at atoms."""

    __test__ = False  # keep pytest from collecting this class

    cell_values: np.ndarray
    point_values: Mapping[float, float] | None = None

    @classmethod
    def indicator(cls, grid: MaturityGrid, a: float, b: float) -> "TestFunction":
        values = np.zeros(grid.n_cells)
        values[grid.cells(a) : grid.cells(b)] = 1.0
        return cls(values)

    @property
    def sup(self) -> float:
        vals = [np.abs(self.cell_values).max()]
        if self.point_values:
            vals.append(max(abs(v) for v in self.point_values.values()))
        return float(max(vals))


@dataclass
class ExampleCoefficientSpec:
    """Volatilities ``sum_t loading_t(X(e)) * base_t`` per factor.

    ``factors[k]`` lists the terms of rates factor ``k``; ``energy_factors``
    does the same for the energy component (``None`` means no energy noise).
    Loadings read the state functionals ``X_t(e_1), ..., X_t(e_n)`` of the
    rates component.
    """

    grid: MaturityGrid
    functionals: list[TestFunction]
    factors: list[list[VolTerm]]
    energy_factors: list[list[VolTerm]] | None = None

    def __post_init__(self):
        n = len(self.functionals)
        for e in self.functionals:
            if np.shape(e.cell_values) != (self.grid.n_cells,):
                raise ValueError("test function does not live on the maturity grid")
        for terms in list(self.factors) + list(self.energy_factors or []):
            for term in terms:
                if term.base.grid != self.grid:
                    raise ValueError("volatility base measure is not on the maturity grid")
                if term.loading.slopes and len(term.loading.slopes) != n:
                    raise ValueError(
                        f"loading has {len(term.loading.slopes)} slopes for {n} functionals"
                    )
        if self.energy_factors is not None and len(self.energy_factors) > len(self.factors):
            raise ValueError("energy component uses more factors than the rates component")

    @property
    def d(self) -> int:
        return len(self.factors)

    def refine(self, factor: int) -> "ExampleCoefficientSpec":
        def terms(ts):
            return [VolTerm(t.base.refine(factor), t.loading) for t in ts]

        fine = self.grid.refine(factor)
        return ExampleCoefficientSpec(
            fine,
            [TestFunction(np.repeat(e.cell_values, factor), e.point_values) for e in self.functionals],
            [terms(ts) for ts in self.factors],
            None if self.energy_factors is None else [terms(ts) for ts in self.energy_factors],
        )


def state_functionals(x: MeasureArray, functionals: Sequence[TestFunction]) -> np.ndarray:
    """``X(e_i)`` for every batch entry; shape ``x.shape + (n,)``."""
    if not functionals:
        return np.zeros(x.shape + (0,))
    return np.stack([x.pair(e.cell_values, e.point_values) for e in functionals], axis=-1)


class _VolModel:
    """Evaluates ``g(X_t(e))`` for one component with a one-slot memo."""

    def __init__(self, spec: ExampleCoefficientSpec, factors: list[list[VolTerm]], d: int):
        grid = spec.grid
        factors = list(factors) + [[] for _ in range(d - len(factors))]
        width = max([len(ts) for ts in factors] + [1])
        zero = VolTerm(SignedMeasure.zero(grid), Loading(0.0))
        padded = [ts + [zero] * (width - len(ts)) for ts in factors]
        flat = MeasureArray.stack([t.base for ts in padded for t in ts])
        self.locations = flat.locations
        self.weights = flat.weights.reshape(d, width, -1)
        self.density = flat.density.reshape(d, width, -1)
        self.loadings = [[t.loading for t in ts] for ts in padded]
        self.functionals = spec.functionals
        self.grid = grid
        self.d = d
        self.static = all(ld.constant for row in self.loadings for ld in row)
        self.atomless = self.locations.size == 0
        # |g(X) - g(Y)| <= sum_t Lip(loading_t) |base_t| max_i |e_i|_sup |X - Y|
        e_sup = max([e.sup for e in spec.functionals] + [0.0])
        self.lipschitz = e_sup * sum(t.loading.lipschitz * _tv(t.base) for ts in padded for t in ts)
        self._memo = None
        if self.static:
            self._fixed = self._from_z(np.zeros(len(spec.functionals)))

    def _from_z(self, z: np.ndarray):
        coef = np.stack(
            [np.stack([ld(z) for ld in row], axis=-1) for row in self.loadings], axis=-2
        )  # z.shape[:-1] + (d, width)
        weights = np.einsum("...dt,dtk->...dk", coef, self.weights)
        density = np.einsum("...dt,dtn->...dn", coef, self.density)
        vol = MeasureArray(self.grid, self.locations, weights, density)
        drift = vol.mul_distribution().sum(axis=-1)
        return vol, drift

    def __call__(self, path: MildPath, j: int):
        if self.static:
            return self._fixed
        state = path[j]
        memo = self._memo
        if memo is not None and memo[0] is state:
            return memo[1]
        out = self._from_z(state_functionals(state, self.functionals))
        self._memo = (state, out)
        return out


def _tv(mu: SignedMeasure) -> float:
    return float(np.abs(mu.weights).sum() + np.abs(mu.density).sum() * mu.grid.cell_width)


def build_example_coefficients(
    spec: ExampleCoefficientSpec, component: str = "rates"
) -> CoefficientMap:
    """Coefficients whose drift is ``sum_k G_k * G_k(0, .]`` (rates) or zero (energy).

    The product uses the midpoint distribution function, so the drift
    condition ``F(0, x] = 1/2 sum_k G_k(0, x]^2`` holds on the grid.
    """
    if component == "rates":
        model = _VolModel(spec, spec.factors, spec.d)
        return CoefficientMap(
            drift=lambda path, j: model(path, j)[1],
            vol=lambda path, j: model(path, j)[0],
            n_factors=spec.d,
            lipschitz_vol=model.lipschitz,
            state_independent=model.static,
            atomless=model.atomless,
        )
    if component == "energy":
        model = _VolModel(spec, spec.energy_factors or [], spec.d)
        zero = MeasureArray.zeros(spec.grid)
        return CoefficientMap(
            drift=lambda path, j: zero,
            vol=lambda path, j: model(path, j)[0],
            n_factors=spec.d,
            lipschitz_vol=model.lipschitz,
            state_independent=model.static,
            atomless=model.atomless,
        )
    raise ValueError(f"unknown component {component!r}")


# ---------------------------------------------------------------------------
# Drift condition


def _drift_gap(drift: MeasureArray, vol: MeasureArray) -> float:
    """Largest violation of ``F(0, x] = 1/2 sum_k G_k(0, x]^2`` on boundaries and atoms."""
    drift, vol = align([drift, vol])
    lhs = drift.cdf_boundaries()
    rhs = 0.5 * (vol.cdf_boundaries() ** 2).sum(axis=-2)
    gap = float(np.abs(lhs - rhs).max())
    if drift.locations.size:
        lhs = drift.cdf_at_atoms()
        rhs = 0.5 * (vol.cdf_at_atoms() ** 2).sum(axis=-2)
        gap = max(gap, float(np.abs(lhs - rhs).max()))
    return gap


def drift_condition_gap(coeffs: CoefficientMap, path: MildPath) -> float:
    """Max of :func:`_drift_gap` over the stored steps ``j < n_steps`` of ``path``."""
    gap = 0.0
    for j in path.stored_steps:
        if j < path.n_steps:
            gap = max(gap, _drift_gap(coeffs.drift(path, j), coeffs.vol(path, j)))
    return gap


# ---------------------------------------------------------------------------
# Prices


@dataclass
class HJMModel:
    grid: MaturityGrid
    x0: SignedMeasure
    coeffs: CoefficientMap
    x0_energy: SignedMeasure
    coeffs_energy: CoefficientMap
    horizon: float

    @classmethod
    def from_spec(
        cls,
        spec: ExampleCoefficientSpec,
        x0: SignedMeasure,
        x0_energy: SignedMeasure | None = None,
        horizon: float | None = None,
    ) -> "HJMModel":
        grid = spec.grid
        return cls(
            grid,
            x0,
            build_example_coefficients(spec, "rates"),
            x0_energy if x0_energy is not None else SignedMeasure.zero(grid),
            build_example_coefficients(spec, "energy"),
            grid.window if horizon is None else horizon,
        )


def simulate(
    model: HJMModel, driver: BrownianDriver, keep=None, observe=None
) -> tuple[MildPath, MildPath]:
    """Solve the rates (shift) and energy (identity) components on one driver.

    ``observe(j, x, xe)`` is called with both states at every step
    ``j = 0..n_steps``; combined with ``keep=()`` this streams the solution.
    """
    rates = MildPath(driver.grid, model.grid, driver.n_paths, keep)
    energy = MildPath(driver.grid, model.grid, driver.n_paths, keep)
    xe = _as_initial(model.x0_energy, driver.n_paths)
    energy._put(0, xe)
    for step in march(model.x0, model.coeffs, driver, rates):
        if observe is not None:
            observe(step.j, step.state, xe)
        e_step = Step(
            step.j,
            xe,
            model.coeffs_energy.drift(rates, step.j),
            model.coeffs_energy.vol(rates, step.j),
            step.dw,
        )
        xe = _advance(e_step, driver.dt, "identity")
        energy._put(step.j + 1, xe)
    if observe is not None:
        n = driver.grid.n_steps
        observe(n, rates[n], xe)
    return rates, energy


def bond_price(path: MildPath, j: int, T: float) -> np.ndarray:
    """``exp(-X_{t_j}(0, T - t_j])`` per path."""
    t = j * path.time_grid.dt
    if T < t - 1e-12:
        raise ValueError(f"maturity {T} lies before t = {t}")
    return np.exp(-path[j].interval(0.0, max(T - t, 0.0)))


def energy_future(path: MildPath, j: int, T1: float, T2: float) -> np.ndarray:
    """``Xe_{t_j}(T1, T2]`` per path."""
    if T1 > T2:
        raise ValueError(f"need T1 <= T2, got {T1} > {T2}")
    return path[j].interval(T1, T2)


class _ClosedFormBank:
    """Accumulates ``log B`` at every grid time from the coefficient increments."""

    def __init__(self, x0: MeasureArray, n_steps: int):
        grid = x0.grid
        if n_steps > grid.n_cells:
            raise ValueError("maturity window is shorter than the simulation horizon")
        self.n = n_steps
        self.log_b = np.ascontiguousarray(x0.cdf_boundaries()[..., : n_steps + 1].T)

    def add(self, step: Step, dt: float) -> None:
        # increment of step i enters B_{t_j} through (0, t_j - t_{i+1}] for j > i
        i = step.j
        m = self.n - i
        cum = step.increment(dt).cdf_boundaries()[..., :m]
        self.log_b[i + 1 :] += np.atleast_2d(cum).T


def bank_account_closed(
    x0,
    coeffs: CoefficientMap,
    driver: BrownianDriver,
    j,
    *,
    grid: MaturityGrid | None = None,
) -> np.ndarray:
    """``exp(X0(0, t] + sum F_i(0, t - t_{i+1}] dt + sum G_i(0, t - t_{i+1}] dW_i)``.

    ``j`` may be a single step (result shape ``(n_paths,)``) or a sequence of
    steps (result shape ``(len(j), n_paths)``).
    """
    x0a = _as_initial(x0, driver.n_paths)
    grid = grid or x0a.grid
    steps = np.atleast_1d(j)
    last = int(steps.max())
    bank = _ClosedFormBank(x0a, last)
    path = MildPath(driver.grid, grid, driver.n_paths, keep=())
    for step in march(x0a, coeffs, driver, path, stop=last):
        bank.add(step, driver.dt)
    out = np.exp(bank.log_b[steps])
    return out[0] if np.ndim(j) == 0 else out


def bank_account_discrete(path: MildPath, j: int, n: int) -> np.ndarray:
    """Roll-over account ``prod_i P(t_{i-1}, t_i)^-1`` over ``n`` equal sub-periods."""
    if n < 1 or j % n:
        raise ValueError(f"{n} sub-periods do not divide step {j}")
    stride = j // n
    tau = stride * path.time_grid.dt
    log_b = sum(path[i * stride].interval(0.0, tau) for i in range(n))
    return np.exp(np.broadcast_to(log_b, (path.n_paths,)))


@dataclass
class DiscountedPrices:
    """``Z(t, T) = P(t, T) / B_t`` sampled at grid steps, stopped at maturity.

    ``z[i, m, p]`` is the value at ``steps[i]`` for maturity ``maturities[m]``
    on path ``p``; after ``T`` the value is frozen at ``Z(T, T) = 1 / B_T``.
    ``energy[i, b, p]`` holds the energy futures ``Xe_t(T1, T2]`` for the
    buckets, undiscounted.
    """

    steps: np.ndarray
    maturities: np.ndarray
    z: np.ndarray
    buckets: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    energy: np.ndarray | None = None
    log_bank: np.ndarray | None = None


def discounted_prices(
    model: HJMModel,
    driver: BrownianDriver,
    maturities: Sequence[float],
    steps: Sequence[int],
    buckets: Sequence[tuple[float, float]] = (),
    method: str = "auto",
) -> DiscountedPrices:
    """Record discounted bonds and energy futures along the simulation.

    ``method="march"`` streams the recursion holding only the current state.
    ``method="linear"`` uses that, for state-independent coefficients, the
    solution is linear in the noise:

        log Z(t_j, T) = -X0(0, T] - sum_{i<j} (F(0, T - t_{i+1}] dt + G(0, T - t_{i+1}] dW_i),

    which needs only distribution functions at grid points.  ``"auto"``
    picks ``"linear"`` whenever it applies.
    """
    if method not in ("auto", "march", "linear"):
        raise ValueError(f"unknown method {method!r}")
    linear_ok = model.coeffs.state_independent and model.coeffs_energy.state_independent
    if method == "linear" and not linear_ok:
        raise ValueError("the linear method needs state-independent coefficients")
    if method != "march" and linear_ok:
        return _linear_prices(model, driver, maturities, steps, buckets)
    dt = driver.dt
    n = driver.grid.n_steps
    steps = np.array(sorted(set(int(s) for s in steps) | {0}))
    maturities = np.asarray(maturities, dtype=float)
    mat_steps = [driver.grid.step_of(T) if T <= driver.grid.horizon else None for T in maturities]
    wanted = set(steps.tolist()) | {s for s in mat_steps if s is not None}
    x0 = _as_initial(model.x0, driver.n_paths)
    bank = _ClosedFormBank(x0, n)
    z = np.full((steps.size, maturities.size, driver.n_paths), np.nan)
    at_maturity: dict[int, np.ndarray] = {}
    buckets = np.asarray(buckets, dtype=float).reshape(-1, 2)
    energy = np.zeros((steps.size, len(buckets), driver.n_paths))
    row = {s: i for i, s in enumerate(steps.tolist())}

    rates = MildPath(driver.grid, model.grid, driver.n_paths, keep=())
    xe = _as_initial(model.x0_energy, driver.n_paths)

    def record(j, x, xe):
        if j not in wanted:
            return
        t = j * dt
        for m, T in enumerate(maturities):
            if T >= t - 1e-12:
                val = np.exp(-x.interval(0.0, max(T - t, 0.0)) - bank.log_b[j])
                if mat_steps[m] == j:
                    at_maturity[m] = val
                if j in row:
                    z[row[j], m] = val
            elif j in row:
                z[row[j], m] = at_maturity[m]
        if j in row:
            for b, (t1, t2) in enumerate(buckets):
                energy[row[j], b] = xe.interval(t1, t2)

    last = int(steps.max())
    for step in march(x0, model.coeffs, driver, rates, stop=last):
        record(step.j, step.state, xe)
        bank.add(step, dt)
        e_step = Step(
            step.j, xe, model.coeffs_energy.drift(rates, step.j),
            model.coeffs_energy.vol(rates, step.j), step.dw,
        )
        xe = _advance(e_step, dt, "identity")
    record(last, rates[last], xe)
    return DiscountedPrices(steps, maturities, z, buckets, energy, bank.log_b)


def _grid_index(grid: MaturityGrid, x: float) -> int:
    return grid.cells(x)


def _linear_prices(model, driver, maturities, steps, buckets) -> DiscountedPrices:
    grid = model.grid
    dt = driver.dt
    n = driver.grid.n_steps
    if n > grid.n_cells:
        raise ValueError("maturity window is shorter than the simulation horizon")
    empty = MildPath(driver.grid, grid, driver.n_paths, keep=())
    f = model.coeffs.drift(empty, 0)
    g = model.coeffs.vol(empty, 0)
    if f.shape != () or g.shape != (driver.d,):
        raise ValueError("state-independent coefficients must not depend on the path")
    cx0 = MeasureArray.from_measure(model.x0).cdf_boundaries()
    cf = f.cdf_boundaries()
    cg = g.cdf_boundaries()  # (d, N + 1)
    dw = driver.increments  # (n, P, d)

    steps = np.array(sorted(set(int(s) for s in steps) | {0}))
    maturities = np.asarray(maturities, dtype=float)
    z = np.empty((steps.size, maturities.size, driver.n_paths))
    log_bank = np.empty((n + 1, driver.n_paths))
    for m, T in enumerate(maturities):
        k = _grid_index(grid, T)
        # column i holds the loading of dW_i on log Z(., T); zero once t_{i+1} > T
        idx = k - 1 - np.arange(n)
        live = idx >= 0
        load = np.where(live[:, None], cg[:, np.clip(idx, 0, None)].T, 0.0)  # (n, d)
        drift = np.where(live, cf[np.clip(idx, 0, None)], 0.0) * dt
        contrib = np.einsum("ipd,id->ip", dw, load) + drift[:, None]
        cum = np.zeros((n + 1, driver.n_paths))
        np.cumsum(contrib, axis=0, out=cum[1:])
        stop = np.minimum(steps, min(k, n))
        z[:, m] = np.exp(-cx0[k] - cum[stop])
    # log B_{t_j} = X0(0, t_j] + sum_{i<j} (F(0, t_j - t_{i+1}] dt + G(0, t_j - t_{i+1}] dW_i)
    for j in range(n + 1):
        idx = j - 1 - np.arange(j)
        log_bank[j] = cx0[j] + cf[idx].sum() * dt + np.einsum("ipd,di->p", dw[:j], cg[:, idx])

    buckets = np.asarray(buckets, dtype=float).reshape(-1, 2)
    energy = np.zeros((steps.size, len(buckets), driver.n_paths))
    if len(buckets):
        xe0 = MeasureArray.from_measure(model.x0_energy)
        ge = model.coeffs_energy.vol(empty, 0)
        w = driver.path_values()[steps]  # (S, P, d)
        for b, (t1, t2) in enumerate(buckets):
            energy[:, b] = xe0.interval(t1, t2) + w @ ge.interval(t1, t2)
    return DiscountedPrices(steps, maturities, z, buckets, energy, log_bank)


class MartingaleCheck(NamedTuple):
    index: int
    mean_gap: float
    stderr: float
    passed: bool


def martingale_test(series, checkpoints=None, n_sigma: float = 3.0) -> list[MartingaleCheck]:
    """Compare ``mean_paths Z(t)`` with the deterministic ``Z(0)``.

    ``series`` has shape ``(n_times, n_paths)``; row 0 is time zero.
    ``checkpoints`` are row indices (default: every later row).
    """
    z = np.asarray(series, dtype=float)
    z0 = z[0]
    if not np.allclose(z0, z0[0], rtol=0, atol=1e-14 * max(1.0, abs(z0[0]))):
        raise ValueError("the time-zero value must be deterministic")
    idx = range(1, z.shape[0]) if checkpoints is None else checkpoints
    n = z.shape[1]
    out = []
    for i in idx:
        gap = abs(float(z[i].mean()) - float(z0[0]))
        se = float(z[i].std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
        out.append(MartingaleCheck(int(i), gap, se, gap < n_sigma * se or gap == 0.0))
    return out
