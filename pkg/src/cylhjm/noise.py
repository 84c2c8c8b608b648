"""Truncated cylindrical Brownian motion on a uniform time grid.

Paths are grouped in fixed blocks of ``BLOCK`` consecutive indices.  Block
``b`` owns the Philox stream keyed by ``(seed, b)`` and path ``p`` reads a
fixed slice of its block's stream, so a path's increments depend only on
``(seed, p)``: not on ``n_paths`` and not on how paths are split over
workers.  Brownian-bridge refinement draws its fill-in variates from the same
streams at a counter offset reserved for the refinement level.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

# Counter offset (in Philox blocks) separating refinement levels of one stream.
_LEVEL_STRIDE = 1 << 64


@dataclass(frozen=True)
class TimeGrid:
    dt: float
    n_steps: int

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.n_steps < 1:
            raise ValueError("n_steps must be at least 1")

    @property
    def horizon(self) -> float:
        return self.dt * self.n_steps

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt

    def step_of(self, t: float) -> int:
        j = round(t / self.dt)
        if abs(t - j * self.dt) > 1e-9 * self.dt or not 0 <= j <= self.n_steps:
            raise ValueError(f"time {t} is not on the grid (dt={self.dt}, n={self.n_steps})")
        return int(j)

    def refine(self, factor: int = 2) -> "TimeGrid":
        return TimeGrid(self.dt / factor, self.n_steps * factor)


BLOCK = 256


def _block_stream(seed: int, block: int, level: int = 0) -> np.random.Generator:
    bitgen = np.random.Philox(key=[seed, block])
    if level:
        bitgen = bitgen.advance(level * _LEVEL_STRIDE)
    return np.random.Generator(bitgen)


def _normals(seed: int, n_paths: int, shape: tuple, level: int, workers: int) -> np.ndarray:
    """Standard normals of shape ``shape[:1] + (n_paths,) + shape[1:]``."""
    n_blocks = -(-n_paths // BLOCK)

    def draw(block):
        return _block_stream(seed, block, level).standard_normal((BLOCK,) + shape)

    if workers <= 1:
        blocks = [draw(b) for b in range(n_blocks)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            blocks = list(pool.map(draw, range(n_blocks)))
    z = np.concatenate(blocks, axis=0)[:n_paths]
    return np.moveaxis(z, 0, 1)


class BrownianDriver:
    """Increments ``dW[j, path, k] ~ N(0, dt)`` of a ``d``-factor Brownian motion."""

    def __init__(self, grid: TimeGrid, increments, seed: int | None = None, level: int = 0):
        inc = np.asarray(increments, dtype=float)
        if inc.ndim != 3 or inc.shape[0] != grid.n_steps:
            raise ValueError(
                f"increments must have shape (n_steps={grid.n_steps}, n_paths, d), got {inc.shape}"
            )
        inc.setflags(write=False)
        self.grid = grid
        self.increments = inc
        self.seed = seed
        self.level = level

    @property
    def n_paths(self) -> int:
        return self.increments.shape[1]

    @property
    def d(self) -> int:
        return self.increments.shape[2]

    @property
    def dt(self) -> float:
        return self.grid.dt

    def path_values(self) -> np.ndarray:
        """``W`` at all grid times, shape ``(n_steps + 1, n_paths, d)``."""
        w = np.zeros((self.grid.n_steps + 1,) + self.increments.shape[1:])
        np.cumsum(self.increments, axis=0, out=w[1:])
        return w

    def refine(self, workers: int = 1) -> "BrownianDriver":
        """Halve ``dt`` by Brownian-bridge interpolation of every increment."""
        if self.seed is None:
            raise ValueError("refinement needs a seeded driver")
        n, p, d = self.increments.shape
        level = self.level + 1
        sd = math.sqrt(self.dt) / 2

        z = _normals(self.seed, p, (n, d), level, workers)
        first = self.increments / 2 + sd * z
        fine = np.empty((2 * n, p, d))
        fine[0::2] = first
        fine[1::2] = self.increments - first
        return BrownianDriver(self.grid.refine(2), fine, self.seed, level)

    def window(self, j0: int, j1: int) -> np.ndarray:
        return self.increments[j0:j1]


def sample_increments(
    d: int, n_steps: int, n_paths: int, seed: int, dt: float = 1.0, workers: int = 1
) -> BrownianDriver:
    """Draw a seeded driver; results do not depend on ``workers``."""
    if min(d, n_steps, n_paths) < 1:
        raise ValueError("d, n_steps and n_paths must all be at least 1")
    if seed < 0:
        raise ValueError("seed must be a nonnegative 64-bit integer")
    inc = _normals(seed, n_paths, (n_steps, d), 0, workers) * math.sqrt(dt)
    return BrownianDriver(TimeGrid(dt, n_steps), inc, seed)


def ito_step_integral(integrand, driver: BrownianDriver) -> np.ndarray:
    """``sum_j A_j dW_j`` per path for step integrands.

    ``integrand`` is either deterministic with shape ``(n_steps, m, d)`` or
    path-dependent with shape ``(n_steps, n_paths, m, d)``.  Predictability
    (``A_j`` known at ``t_j``) is the caller's responsibility.
    """
    a = np.asarray(integrand, dtype=float)
    n, p, d = driver.increments.shape
    if a.ndim == 3 and a.shape[0] == n and a.shape[2] == d:
        return np.einsum("jmd,jpd->pm", a, driver.increments)
    if a.ndim == 4 and a.shape[:2] == (n, p) and a.shape[3] == d:
        return np.einsum("jpmd,jpd->pm", a, driver.increments)
    raise ValueError(f"integrand shape {a.shape} does not match driver {(n, p, d)}")


class IsometryGap(NamedTuple):
    mc: float
    exact: float
    stderr: float

    @property
    def z(self) -> float:
        """Gap in standard-error units."""
        diff = abs(self.mc - self.exact)
        if self.stderr == 0:
            return 0.0 if diff == 0 else math.inf
        return diff / self.stderr

    def passed(self, n_sigma: float = 3.0) -> bool:
        return self.z < n_sigma


def ito_isometry_gap(integrand, driver: BrownianDriver) -> IsometryGap:
    """Monte Carlo ``E|int A dW|^2`` against ``sum_j ||A_j||_HS^2 dt``.

    For path-dependent integrands the right-hand side is averaged over paths.
    """
    a = np.asarray(integrand, dtype=float)
    sq = (ito_step_integral(a, driver) ** 2).sum(axis=1)
    p = sq.size
    hs = (a**2).sum(axis=(-2, -1))
    exact = float(hs.sum(axis=0).mean() * driver.dt) if a.ndim == 4 else float(hs.sum() * driver.dt)
    stderr = float(sq.std(ddof=1) / math.sqrt(p)) if p > 1 else 0.0
    return IsometryGap(float(sq.mean()), exact, stderr)


def dirac_convolution_identity_gap(
    f: Callable, fprime: Callable, t: float, driver: BrownianDriver
) -> float:
    """Largest pathwise gap between ``sum f(t-s) dW_s`` and ``sum f'(t-s) W_s ds``.

    ``f`` must vanish at ``0`` and ``t``; the gap then shrinks like ``dt``.
    """
    if driver.d != 1:
        raise ValueError("the identity is stated for scalar Brownian motion")
    if abs(f(0.0)) > 1e-12 or abs(f(t)) > 1e-12:
        raise ValueError("f must vanish at 0 and t")
    n = driver.grid.step_of(t)
    s = np.arange(n) * driver.dt
    dw = driver.increments[:n, :, 0]
    w = driver.path_values()[:n, :, 0]
    fv = np.asarray(f(t - s), dtype=float)
    fpv = np.asarray(fprime(t - s), dtype=float)
    stochastic = fv @ dw
    pathwise = (fpv * driver.dt) @ w
    return float(np.abs(stochastic - pathwise).max())
