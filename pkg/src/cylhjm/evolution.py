"""Mild solutions of measure-valued evolution equations on a time grid.

The forward-rate measure is advanced by the exponential-Euler recursion

    X[j+1] = S*_dt X[j] + F_j dt + sum_k G_j^(k) dW_j^(k),

with coefficients evaluated at the left endpoint ``t_j``.  Unrolled, this is
the discrete mild formula

    X[j] = S*_{t_j} X0 + sum_{i<j} S*_{t_j - t_{i+1}} (F_i dt + G_i dW_i),

so the increment of step ``i`` is transported from the right endpoint of its
step.  ``semigroup="identity"`` drops the transport (time-of-maturity models).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator, NamedTuple, Sequence

import numpy as np

from .integration import bochner_quadrature
from .measures import MaturityGrid, MeasureArray, SignedMeasure, align
from .noise import BrownianDriver, TimeGrid

SEMIGROUPS = ("shift", "identity")


class NumericalBlowupError(FloatingPointError):
    def __init__(self, step: int, path: int):
        super().__init__(f"non-finite state after step {step} on path {path}")
        self.step = step
        self.path = path


class MildPath:
    """Solution values ``X[j]`` as a :class:`MeasureArray` of shape ``(n_paths,)``.

    With ``keep=None`` every step is stored.  Otherwise only the listed steps
    and the most recent one are retained, which is enough for coefficient maps
    that look at the current state only.
    """

    def __init__(self, time_grid: TimeGrid, grid: MaturityGrid, n_paths: int, keep=None):
        self.time_grid = time_grid
        self.grid = grid
        self.n_paths = n_paths
        self.keep = None if keep is None else frozenset(int(j) for j in keep)
        self._steps: dict[int, MeasureArray] = {}
        self._latest: int | None = None

    def _put(self, j: int, x: MeasureArray) -> None:
        prev = self._latest
        if prev is not None and prev != j and self.keep is not None and prev not in self.keep:
            del self._steps[prev]
        self._steps[j] = x
        self._latest = j

    def __getitem__(self, j: int) -> MeasureArray:
        try:
            return self._steps[j]
        except KeyError:
            raise KeyError(f"step {j} is not stored in this path") from None

    def __contains__(self, j: int) -> bool:
        return j in self._steps

    @property
    def stored_steps(self) -> list[int]:
        return sorted(self._steps)

    @property
    def n_steps(self) -> int:
        return self.time_grid.n_steps

    def measure(self, j: int, path: int) -> SignedMeasure:
        return self[j].measure(path)

    def copy(self) -> "MildPath":
        out = MildPath(self.time_grid, self.grid, self.n_paths, self.keep)
        out._steps = dict(self._steps)
        out._latest = self._latest
        return out


@dataclass
class CoefficientMap:
    """Drift and volatility as functions of ``(path, step)``.

    ``drift(path, j)`` returns a :class:`MeasureArray` of shape ``(n_paths,)``
    or ``()``; ``vol(path, j)`` returns shape ``(n_paths, d)`` or ``(d,)``.
    Values at step ``j`` may only depend on ``path[i]`` for ``i <= j``, and the
    callables must be free of hidden mutable state.  Lipschitz constants are
    declared metadata used for diagnostics only.
    """

    drift: Callable[[MildPath, int], MeasureArray]
    vol: Callable[[MildPath, int], MeasureArray]
    n_factors: int
    lipschitz_drift: float = 0.0
    lipschitz_vol: float = 0.0
    state_independent: bool = False
    atomless: bool = field(default=False)

    @classmethod
    def constant(
        cls, drift: SignedMeasure, vols: Sequence[SignedMeasure]
    ) -> "CoefficientMap":
        f = MeasureArray.from_measure(drift)
        g = MeasureArray.stack(list(vols))
        atomless = f.locations.size == 0 and g.locations.size == 0
        return cls(
            lambda path, j: f,
            lambda path, j: g,
            n_factors=len(vols),
            state_independent=True,
            atomless=atomless,
        )

    @classmethod
    def zero(cls, grid: MaturityGrid, d: int) -> "CoefficientMap":
        z = SignedMeasure.zero(grid)
        return cls.constant(z, [z] * d)

    def with_drift_offset(self, offset: SignedMeasure) -> "CoefficientMap":
        """Same volatility, drift shifted by a fixed measure."""
        extra = MeasureArray.from_measure(offset)
        base = self.drift
        return CoefficientMap(
            lambda path, j: base(path, j) + extra,
            self.vol,
            self.n_factors,
            self.lipschitz_drift,
            self.lipschitz_vol,
            self.state_independent,
            self.atomless and extra.locations.size == 0,
        )


class Step(NamedTuple):
    j: int
    state: MeasureArray
    drift: MeasureArray
    vol: MeasureArray
    dw: np.ndarray

    def increment(self, dt: float) -> MeasureArray:
        """``F_j dt + G_j dW_j`` for every path."""
        return self.drift * dt + self.vol.contract(self.dw)


def _as_initial(x0, n_paths: int) -> MeasureArray:
    if isinstance(x0, SignedMeasure):
        x0 = MeasureArray.from_measure(x0)
    if x0.shape == ():
        return x0.broadcast_to((n_paths,))
    if x0.shape != (n_paths,):
        raise ValueError(f"per-path initial condition has shape {x0.shape}, expected ({n_paths},)")
    return x0


def _check_alignment(grid: MaturityGrid, driver: BrownianDriver, semigroup: str) -> None:
    if semigroup not in SEMIGROUPS:
        raise ValueError(f"unknown semigroup {semigroup!r}")
    if semigroup == "shift" and abs(driver.dt - grid.cell_width) > 1e-12 * grid.cell_width:
        raise ValueError(
            f"time step {driver.dt} must equal the maturity cell width {grid.cell_width}"
        )


def _advance(step: Step, dt: float, semigroup: str) -> MeasureArray:
    x = step.state.shift(dt) if semigroup == "shift" else step.state
    with np.errstate(over="ignore", invalid="ignore"):
        nxt = (x + step.increment(dt)).prune()
    if not (np.isfinite(nxt.density).all() and np.isfinite(nxt.weights).all()):
        bad = ~(np.isfinite(nxt.density).all(-1) & np.isfinite(nxt.weights).all(-1))
        raise NumericalBlowupError(step.j, int(np.flatnonzero(bad)[0]))
    return nxt


def march(
    x0,
    coeffs: CoefficientMap,
    driver: BrownianDriver,
    path: MildPath,
    *,
    semigroup: str = "shift",
    state: MildPath | None = None,
    start: int = 0,
    stop: int | None = None,
) -> Iterator[Step]:
    """Run the recursion, storing states in ``path`` and yielding each step.

    Coefficients are evaluated on ``state`` (default: the path being built).
    The final state ``X[stop]`` is stored but not yielded.
    """
    _check_alignment(path.grid, driver, semigroup)
    if coeffs.n_factors != driver.d:
        raise ValueError(f"coefficients have {coeffs.n_factors} factors, driver has {driver.d}")
    stop = driver.grid.n_steps if stop is None else stop
    x = _as_initial(x0, driver.n_paths)
    path._put(start, x)
    view = path if state is None else state
    for j in range(start, stop):
        step = Step(j, x, coeffs.drift(view, j), coeffs.vol(view, j), driver.increments[j])
        yield step
        x = _advance(step, driver.dt, semigroup)
        path._put(j + 1, x)


def euler_mild_solve(
    x0,
    coeffs: CoefficientMap,
    driver: BrownianDriver,
    *,
    grid: MaturityGrid | None = None,
    semigroup: str = "shift",
    keep=None,
    state: MildPath | None = None,
) -> MildPath:
    """Solve on the whole driver horizon and return the (possibly thinned) path."""
    grid = grid or _grid_of(x0)
    path = MildPath(driver.grid, grid, driver.n_paths, keep)
    for _ in march(x0, coeffs, driver, path, semigroup=semigroup, state=state):
        pass
    return path


def _grid_of(x0) -> MaturityGrid:
    return x0.grid


def mild_formula(
    x0,
    coeffs: CoefficientMap,
    path: MildPath,
    driver: BrownianDriver,
    j: int,
    semigroup: str = "shift",
) -> MeasureArray:
    """Direct evaluation of the discrete mild formula at step ``j``.

    Coefficients are evaluated on ``path`` (which must hold steps ``< j``); the
    drift convolution is a Bochner sum over the transported drifts.
    """
    dt = driver.dt
    shift = (lambda m, t: m.shift(t)) if semigroup == "shift" else (lambda m, t: m)
    out = shift(_as_initial(x0, driver.n_paths), j * dt)
    if j == 0:
        return out
    drifts = [shift(coeffs.drift(path, i).broadcast_to((driver.n_paths,)), (j - i - 1) * dt) for i in range(j)]
    drifts = align(drifts)
    locs = drifts[0].locations
    conv = MeasureArray(
        out.grid,
        locs,
        bochner_quadrature(np.stack([d.weights for d in drifts]), dt),
        bochner_quadrature(np.stack([d.density for d in drifts]), dt),
    )
    out = out + conv
    for i in range(j):
        noise = coeffs.vol(path, i).contract(driver.increments[i])
        out = out + shift(noise, (j - i - 1) * dt)
    return out


def path_distance(x: MildPath, y: MildPath) -> float:
    """Max over stored steps and cell boundaries ``c`` of the RMS gap of ``X(0, c]``."""
    if x.grid != y.grid or x.n_paths != y.n_paths or x.stored_steps != y.stored_steps:
        raise ValueError("paths have different grids, path counts or stored steps")
    worst = 0.0
    for j in x.stored_steps:
        diff = x[j].cdf_boundaries() - y[j].cdf_boundaries()
        diff = np.broadcast_to(diff, (x.n_paths, x.grid.n_cells + 1))
        worst = max(worst, float(np.sqrt((diff**2).mean(axis=0)).max()))
    return worst


# ---------------------------------------------------------------------------
# Picard iteration


@dataclass
class PicardWindow:
    start: int
    stop: int
    distances: list[float]
    ratios: list[float]
    iterations: int
    converged: bool


@dataclass
class PicardResult:
    path: MildPath
    windows: list[PicardWindow]

    @property
    def converged(self) -> bool:
        return all(w.converged for w in self.windows)

    @property
    def iterations(self) -> int:
        return max(w.iterations for w in self.windows)

    @property
    def ratios(self) -> list[float]:
        """``d(X^(k+1), X^(k)) / d(X^(k), X^(k-1))`` for ``k = 1, 2, ...``."""
        return [r for w in self.windows for r in w.ratios]

    @property
    def distances(self) -> list[float]:
        return [d for w in self.windows for d in w.distances]


def _full_path(driver: BrownianDriver, grid: MaturityGrid) -> MildPath:
    return MildPath(driver.grid, grid, driver.n_paths)


def mild_operator(
    prev: MildPath,
    coeffs: CoefficientMap,
    driver: BrownianDriver,
    start: int = 0,
    stop: int | None = None,
    semigroup: str = "shift",
) -> MildPath:
    """The fixed-point map: rebuild ``X`` on ``[start, stop]`` from ``prev``'s coefficients.

    Steps up to ``start`` and after ``stop`` are copied from ``prev``; the noise
    stays frozen.
    """
    stop = driver.grid.n_steps if stop is None else stop
    out = _full_path(driver, prev.grid)
    for j in range(start):
        out._put(j, prev[j])
    for _ in march(prev[start], coeffs, driver, out, semigroup=semigroup, state=prev, start=start, stop=stop):
        pass
    for j in range(stop + 1, driver.grid.n_steps + 1):
        out._put(j, prev[j])
    return out


def picard_iterate(
    x0,
    coeffs: CoefficientMap,
    driver: BrownianDriver,
    k_max: int = 20,
    tol: float = 1e-10,
    *,
    grid: MaturityGrid | None = None,
    semigroup: str = "shift",
    split: bool = True,
) -> PicardResult:
    """Picard iteration of the mild formula with frozen noise.

    Iteration starts from the path that is constant in time.  If a window fails
    to contract (a ratio ``>= 1``) or does not reach ``tol`` within ``k_max``
    iterations, it is split in half and the second half restarts from the
    terminal state of the first.
    """
    grid = grid or _grid_of(x0)
    n = driver.grid.n_steps
    current = _full_path(driver, grid)
    x = _as_initial(x0, driver.n_paths)
    for j in range(n + 1):
        current._put(j, x)
    pending = [(0, n)]
    windows: list[PicardWindow] = []
    while pending:
        j0, j1 = pending.pop(0)
        start = current.copy()
        for j in range(j0 + 1, n + 1):
            start._put(j, current[j0])
        result, report = _picard_window(start, coeffs, driver, j0, j1, k_max, tol, semigroup)
        contracting = all(r < 1 for r in report.ratios)
        if split and (not report.converged or not contracting) and j1 - j0 > 1:
            mid = (j0 + j1) // 2
            pending[:0] = [(j0, mid), (mid, j1)]
            continue
        windows.append(report)
        current = result
    return PicardResult(current, windows)


def _picard_window(prev, coeffs, driver, j0, j1, k_max, tol, semigroup):
    distances: list[float] = []
    ratios: list[float] = []
    converged = False
    iterations = k_max
    for k in range(1, k_max + 1):
        nxt = mild_operator(prev, coeffs, driver, j0, j1, semigroup)
        dist = path_distance(nxt, prev)
        distances.append(dist)
        prev = nxt
        if dist < tol:
            converged = True
            iterations = k - 1
            break
        if k >= 2:
            ratios.append(dist / distances[-2])
    return prev, PicardWindow(j0, j1, distances, ratios, iterations, converged)
