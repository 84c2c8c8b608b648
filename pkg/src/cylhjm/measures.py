"""Finite signed measures on the positive half-line.

A measure is stored as a finite list of atoms plus a density that is constant
on the cells ``((k-1)h, kh]`` of a :class:`MaturityGrid`.  Measures are only
ever observed through half-open interval masses ``mu(a, b]``.

Two representations live here:

* :class:`SignedMeasure` -- a single normalized value (sorted atoms, zero
  weights dropped).  This is the type used in configs, reports and tests.
* :class:`MeasureArray` -- an array of measures sharing one grid and one atom
  location set, with weights and densities carrying arbitrary leading batch
  axes.  Simulation code works exclusively with this type.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

# Locations closer than LOC_RTOL * cell_width are considered equal.
LOC_RTOL = 1e-9


class GridMismatchError(ValueError):
    """Raised when measures on different maturity grids are combined."""


class AlignmentError(ValueError):
    """Raised when a shift or time is not a multiple of the cell width."""


@dataclass(frozen=True)
class MaturityGrid:
    """Uniform partition of ``(0, n_cells * cell_width]`` into half-open cells."""

    cell_width: float
    n_cells: int

    def __post_init__(self):
        if not (self.cell_width > 0 and math.isfinite(self.cell_width)):
            raise ValueError(f"cell_width must be positive, got {self.cell_width}")
        if int(self.n_cells) != self.n_cells or self.n_cells < 1:
            raise ValueError(f"n_cells must be a positive integer, got {self.n_cells}")
        object.__setattr__(self, "cell_width", float(self.cell_width))
        object.__setattr__(self, "n_cells", int(self.n_cells))

    @property
    def window(self) -> float:
        return self.cell_width * self.n_cells

    @property
    def tol(self) -> float:
        return LOC_RTOL * self.cell_width

    @property
    def boundaries(self) -> np.ndarray:
        return np.arange(self.n_cells + 1) * self.cell_width

    @property
    def midpoints(self) -> np.ndarray:
        return (np.arange(self.n_cells) + 0.5) * self.cell_width

    def is_aligned(self, x: float) -> bool:
        k = round(x / self.cell_width)
        return abs(x - k * self.cell_width) <= self.tol

    def cells(self, x: float) -> int:
        """Number of cells spanned by the cell-aligned length ``x``."""
        if not self.is_aligned(x):
            raise AlignmentError(
                f"{x!r} is not a multiple of the cell width {self.cell_width!r}"
            )
        return int(round(x / self.cell_width))

    def cell_of(self, x) -> np.ndarray:
        """Index of the half-open cell containing each location ``x > 0``."""
        k = np.ceil(np.asarray(x, dtype=float) / self.cell_width - LOC_RTOL) - 1
        return np.clip(k, 0, self.n_cells - 1).astype(np.intp)

    def refine(self, factor: int) -> "MaturityGrid":
        return MaturityGrid(self.cell_width / factor, self.n_cells * factor)

    def to_dict(self) -> dict:
        return {"cell_width": self.cell_width, "n_cells": self.n_cells}


def _check_same_grid(a: MaturityGrid, b: MaturityGrid) -> None:
    if a != b:
        raise GridMismatchError(f"incompatible grids {a} and {b}")


def _density_cdf(density: np.ndarray, grid: MaturityGrid, x: float) -> np.ndarray:
    """Integral of the cellwise density over ``(0, x]``; leading axes preserved."""
    h = grid.cell_width
    x = min(max(float(x), 0.0), grid.window)
    k = int(math.floor(x / h + LOC_RTOL))
    full = density[..., :k].sum(axis=-1) * h
    if k >= grid.n_cells:
        return full
    rest = x - k * h
    if rest <= grid.tol:
        return full
    return full + density[..., k] * rest


class SignedMeasure:
    """Finite signed measure with atoms and a piecewise-constant density.

    Atoms are normalized on construction: locations are sorted, coincident
    locations merged and zero weights removed.  All mass must lie inside the
    grid window.
    """

    __slots__ = ("grid", "locations", "weights", "density")

    def __init__(
        self,
        grid: MaturityGrid,
        atoms: Iterable[Sequence[float]] = (),
        density=None,
    ):
        self.grid = grid
        atoms = [(float(x), float(w)) for x, w in atoms]
        for x, w in atoms:
            if not (math.isfinite(x) and math.isfinite(w)):
                raise ValueError(f"non-finite atom ({x}, {w})")
            if x <= grid.tol or x > grid.window + grid.tol:
                raise ValueError(
                    f"atom location {x} outside the window (0, {grid.window}]"
                )
        locs, weights = _normalize_atoms(atoms, grid.tol)
        self.locations = locs
        self.weights = weights
        if density is None:
            dens = np.zeros(grid.n_cells)
        else:
            dens = np.array(np.broadcast_to(np.asarray(density, dtype=float), (grid.n_cells,)))
        if not np.all(np.isfinite(dens)):
            raise ValueError("density contains non-finite values")
        self.locations.setflags(write=False)
        self.weights.setflags(write=False)
        dens.setflags(write=False)
        self.density = dens

    # -- constructors -----------------------------------------------------

    @classmethod
    def zero(cls, grid: MaturityGrid) -> "SignedMeasure":
        return cls(grid)

    @classmethod
    def atom(cls, grid: MaturityGrid, location: float, weight: float) -> "SignedMeasure":
        return cls(grid, [(location, weight)])

    @classmethod
    def uniform(
        cls, grid: MaturityGrid, value: float, a: float = 0.0, b: float | None = None
    ) -> "SignedMeasure":
        """Constant density ``value`` on the cell-aligned interval ``(a, b]``."""
        b = grid.window if b is None else b
        lo, hi = grid.cells(a), grid.cells(b)
        dens = np.zeros(grid.n_cells)
        dens[lo:hi] = value
        return cls(grid, density=dens)

    @property
    def atoms(self) -> list[tuple[float, float]]:
        return list(zip(self.locations.tolist(), self.weights.tolist()))

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other: "SignedMeasure") -> "SignedMeasure":
        return linear_combine(1.0, self, 1.0, other)

    def __sub__(self, other: "SignedMeasure") -> "SignedMeasure":
        return linear_combine(1.0, self, -1.0, other)

    def __mul__(self, c: float) -> "SignedMeasure":
        return SignedMeasure(
            self.grid, zip(self.locations, self.weights * c), self.density * c
        )

    __rmul__ = __mul__

    def __neg__(self) -> "SignedMeasure":
        return self * -1.0

    def __eq__(self, other) -> bool:
        if not isinstance(other, SignedMeasure):
            return NotImplemented
        return (
            self.grid == other.grid
            and np.array_equal(self.locations, other.locations)
            and np.array_equal(self.weights, other.weights)
            and np.array_equal(self.density, other.density)
        )

    def __repr__(self) -> str:
        nz = int(np.count_nonzero(self.density))
        return (
            f"SignedMeasure(h={self.grid.cell_width:g}, n_cells={self.grid.n_cells}, "
            f"atoms={self.atoms}, nonzero_cells={nz})"
        )

    def is_zero(self) -> bool:
        return self.locations.size == 0 and not np.any(self.density)

    # -- evaluation -------------------------------------------------------

    def cdf(self, x: float) -> float:
        """``mu(0, x]``."""
        tol = self.grid.tol
        atoms = float(self.weights[self.locations <= x + tol].sum())
        return atoms + float(_density_cdf(self.density, self.grid, x))

    def eval_interval(self, a: float, b: float) -> float:
        return eval_interval(self, a, b)

    def atom_at(self, x: float) -> float:
        hit = np.abs(self.locations - x) <= self.grid.tol
        return float(self.weights[hit].sum())

    def refine(self, factor: int) -> "SignedMeasure":
        """Same measure on a grid with ``factor`` times finer cells."""
        return SignedMeasure(
            self.grid.refine(factor), self.atoms, np.repeat(self.density, factor)
        )

    # -- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "cell_width": self.grid.cell_width,
            "n_cells": self.grid.n_cells,
            "atoms": [[x, w] for x, w in self.atoms],
            "density": self.density.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Mapping, grid: MaturityGrid | None = None) -> "SignedMeasure":
        """Parse the JSON form.

        ``cell_width``/``n_cells`` may be omitted when ``grid`` is given, and
        ``density`` may be a scalar (constant on the whole window).
        """
        if "cell_width" in data or "n_cells" in data:
            own = MaturityGrid(data["cell_width"], data["n_cells"])
            if grid is not None:
                _check_same_grid(own, grid)
            grid = own
        if grid is None:
            raise ValueError("measure without grid information")
        density = data.get("density", 0.0)
        if not np.isscalar(density) and len(density) != grid.n_cells:
            raise ValueError(
                f"density has {len(density)} cells, grid has {grid.n_cells}"
            )
        return cls(grid, data.get("atoms", ()), density)


def _normalize_atoms(atoms, tol) -> tuple[np.ndarray, np.ndarray]:
    atoms = sorted(atoms)
    locs: list[float] = []
    weights: list[float] = []
    for x, w in atoms:
        if locs and x - locs[-1] <= tol:
            weights[-1] += w
        else:
            locs.append(x)
            weights.append(w)
    keep = [i for i, w in enumerate(weights) if w != 0.0]
    return (
        np.array([locs[i] for i in keep], dtype=float),
        np.array([weights[i] for i in keep], dtype=float),
    )


# ---------------------------------------------------------------------------
# Operations on single measures


def eval_interval(mu: SignedMeasure, a: float, b: float) -> float:
    """Mass of the half-open interval ``(a, b]``, truncated to the window."""
    if a < 0 or b < a:
        raise ValueError(f"need 0 <= a <= b, got a={a}, b={b}")
    grid = mu.grid
    tol = grid.tol
    inside = (mu.locations > a + tol) & (mu.locations <= b + tol)
    atoms = float(mu.weights[inside].sum())
    dens = _density_cdf(mu.density, grid, b) - _density_cdf(mu.density, grid, a)
    return atoms + float(dens)


def linear_combine(
    alpha: float, mu: SignedMeasure, beta: float, nu: SignedMeasure
) -> SignedMeasure:
    """``alpha * mu + beta * nu``."""
    _check_same_grid(mu.grid, nu.grid)
    atoms = [(x, alpha * w) for x, w in mu.atoms] + [(x, beta * w) for x, w in nu.atoms]
    return SignedMeasure(mu.grid, atoms, alpha * mu.density + beta * nu.density)


def shift_adjoint(mu: SignedMeasure, t: float) -> SignedMeasure:
    """Left shift by ``t``: the result assigns ``mu(a + t, b + t]`` to ``(a, b]``.

    Mass that crosses zero is discarded.  ``t`` must be cell-aligned.
    """
    if t < 0:
        raise ValueError(f"shift must be nonnegative, got {t}")
    grid = mu.grid
    m = grid.cells(t)
    if m == 0:
        return mu
    dens = np.zeros(grid.n_cells)
    if m < grid.n_cells:
        dens[: grid.n_cells - m] = mu.density[m:]
    atoms = [(x - t, w) for x, w in mu.atoms if x - t > grid.tol]
    return SignedMeasure(grid, atoms, dens)


def total_variation(mu: SignedMeasure) -> float:
    return float(np.abs(mu.weights).sum() + np.abs(mu.density).sum() * mu.grid.cell_width)


def distribution_mid(mu: SignedMeasure, y: float) -> float:
    """Midpoint value ``(mu(0, y-] + mu(0, y]) / 2`` of the distribution function."""
    return mu.cdf(y) - 0.5 * mu.atom_at(y)


def mul_distribution(mu: SignedMeasure) -> SignedMeasure:
    """The product ``nu = mu * F`` of ``mu`` with its distribution function ``F``.

    Atoms use the midpoint value of ``F``; on density pieces ``F`` is affine,
    so every piece integrates in closed form.  Inside a cell ``nu`` keeps a
    single density value, taken from the piece after the last interior atom,
    and the mass of earlier pieces that this density misses is moved onto the
    atom closing each piece.  Hence ``nu(0, x] = F(x)^2 / 2`` at every cell
    boundary and every atom, and atoms on cell boundaries (or in cells without
    density) keep the plain midpoint weight ``w * F_mid(x)``.
    """
    grid = mu.grid
    h = grid.cell_width
    tol = grid.tol
    cells = grid.cell_of(mu.locations) if mu.locations.size else np.array([], dtype=int)
    out_atoms = []
    rho = np.zeros(grid.n_cells)
    running = 0.0
    a = 0
    for k in range(grid.n_cells):
        m = mu.density[k]
        pos = k * h
        pieces = []  # (length, exact mass, atom index or None) per density piece
        boundary = None
        while a < len(cells) and cells[a] == k:
            x, w = mu.locations[a], mu.weights[a]
            seg = max(x - pos, 0.0)
            mass = m * (running * seg + 0.5 * m * seg * seg)
            running += m * seg
            pos = max(x, pos)
            mid = w * (running + 0.5 * w)
            running += w
            if (k + 1) * h - x <= tol:
                boundary = (x, mid, seg, mass)
            else:
                pieces.append([seg, mass, x, mid])
            a += 1
        if boundary is None:
            seg = (k + 1) * h - pos
            mass = m * (running * seg + 0.5 * m * seg * seg)
            running += m * seg
            last = (seg, mass)
        else:
            last = (boundary[2], boundary[3])
        rho[k] = last[1] / last[0] if last[0] > 0 else m * running
        for seg, mass, x, mid in pieces:
            out_atoms.append((x, mid + mass - rho[k] * seg))
        if boundary is not None:
            out_atoms.append((boundary[0], boundary[1]))
    return SignedMeasure(grid, out_atoms, rho)


def pair_with_function(
    mu: SignedMeasure,
    cell_values,
    point_values: Mapping[float, float] | None = None,
) -> float:
    """``integral f dmu`` for a step function ``f``.

    ``cell_values[k]`` is the value of ``f`` on cell ``k``.  Values at atom
    locations come from ``point_values`` when given (every atom must be
    covered); otherwise the value of the containing cell is used.
    """
    values = np.asarray(cell_values, dtype=float)
    if values.shape != (mu.grid.n_cells,):
        raise ValueError(f"expected {mu.grid.n_cells} cell values, got {values.shape}")
    at_atoms = _point_values(mu.grid, mu.locations, values, point_values)
    h = mu.grid.cell_width
    return float(at_atoms @ mu.weights + values @ mu.density * h)


def _point_values(grid, locations, values, point_values) -> np.ndarray:
    if point_values is None:
        return values[grid.cell_of(locations)] if locations.size else np.zeros(0)
    keys = np.array([float(k) for k in point_values], dtype=float)
    vals = np.array([float(v) for v in point_values.values()], dtype=float)
    out = np.empty(locations.size)
    for i, x in enumerate(locations):
        hit = np.flatnonzero(np.abs(keys - x) <= grid.tol)
        if hit.size == 0:
            raise KeyError(f"no point value for the atom at {x}")
        out[i] = vals[hit[0]]
    return out


# ---------------------------------------------------------------------------
# Batched measures


def _union_locations(a: np.ndarray, b: np.ndarray, tol: float):
    """Union of two sorted location sets and the index maps into it."""
    if a.size == b.size and np.allclose(a, b, rtol=0, atol=tol):
        return a, np.arange(a.size), np.arange(b.size)
    merged = np.concatenate([a, b])
    order = np.argsort(merged, kind="stable")
    srt = merged[order]
    new_group = np.ones(srt.size, dtype=bool)
    new_group[1:] = np.diff(srt) > tol
    group = np.cumsum(new_group) - 1
    union = srt[new_group]
    where = np.empty(merged.size, dtype=np.intp)
    where[order] = group
    return union, where[: a.size], where[a.size :]


class MeasureArray:
    """An array of signed measures on a common grid.

    ``weights`` has shape ``shape + (K,)`` for the shared sorted atom locations
    ``locations`` (length ``K``), and ``density`` has shape
    ``shape + (n_cells,)``.  Arithmetic broadcasts over ``shape`` like numpy.
    """

    __slots__ = ("grid", "locations", "weights", "density")

    def __init__(self, grid: MaturityGrid, locations, weights, density):
        self.grid = grid
        self.locations = np.asarray(locations, dtype=float)
        self.weights = np.asarray(weights, dtype=float)
        self.density = np.asarray(density, dtype=float)
        if self.weights.shape[-1:] != self.locations.shape:
            raise ValueError("weights do not match atom locations")
        if self.density.shape[-1] != grid.n_cells:
            raise ValueError("density does not match the grid")

    @classmethod
    def zeros(cls, grid: MaturityGrid, shape=()) -> "MeasureArray":
        shape = tuple(np.atleast_1d(shape)) if shape != () else ()
        return cls(grid, np.zeros(0), np.zeros(shape + (0,)), np.zeros(shape + (grid.n_cells,)))

    @classmethod
    def from_measure(cls, mu: SignedMeasure) -> "MeasureArray":
        return cls(mu.grid, mu.locations.copy(), mu.weights.copy(), mu.density.copy())

    @classmethod
    def stack(cls, measures: Sequence[SignedMeasure]) -> "MeasureArray":
        """Stack measures along a new leading axis."""
        if not measures:
            raise ValueError("nothing to stack")
        grid = measures[0].grid
        for mu in measures:
            _check_same_grid(grid, mu.grid)
        locs = np.zeros(0)
        for mu in measures:
            locs, _, _ = _union_locations(locs, mu.locations, grid.tol)
        weights = np.zeros((len(measures), locs.size))
        for i, mu in enumerate(measures):
            _, _, idx = _union_locations(locs, mu.locations, grid.tol)
            np.add.at(weights[i], idx, mu.weights)
        density = np.stack([mu.density for mu in measures])
        return cls(grid, locs, weights, density)

    @property
    def shape(self) -> tuple:
        return self.density.shape[:-1]

    def __getitem__(self, idx) -> "MeasureArray":
        if not isinstance(idx, tuple):
            idx = (idx,)
        idx = idx + (slice(None),)
        return MeasureArray(self.grid, self.locations, self.weights[idx], self.density[idx])

    def measure(self, *idx) -> SignedMeasure:
        """Extract a single normalized :class:`SignedMeasure`."""
        sub = self[idx] if idx else self
        if sub.shape != ():
            raise ValueError(f"index selects shape {sub.shape}, not a single measure")
        return SignedMeasure(self.grid, zip(sub.locations, sub.weights), sub.density)

    def broadcast_to(self, shape) -> "MeasureArray":
        shape = tuple(shape)
        return MeasureArray(
            self.grid,
            self.locations,
            np.broadcast_to(self.weights, shape + self.locations.shape).copy(),
            np.broadcast_to(self.density, shape + (self.grid.n_cells,)).copy(),
        )

    def with_locations(self, locations: np.ndarray) -> "MeasureArray":
        """Re-express on a superset of the current atom locations."""
        _, _, idx = _union_locations(locations, self.locations, self.grid.tol)
        if idx.size and idx.max() >= locations.size:
            raise ValueError("target locations are not a superset")
        weights = np.zeros(self.shape + (locations.size,))
        weights[..., idx] = self.weights
        return MeasureArray(self.grid, locations, weights, self.density)

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other: "MeasureArray") -> "MeasureArray":
        if not isinstance(other, MeasureArray):
            return NotImplemented
        _check_same_grid(self.grid, other.grid)
        locs, ia, ib = _union_locations(self.locations, other.locations, self.grid.tol)
        shape = np.broadcast_shapes(self.shape, other.shape)
        weights = np.zeros(shape + (locs.size,))
        weights[..., ia] += self.weights
        weights[..., ib] += other.weights
        return MeasureArray(self.grid, locs, weights, self.density + other.density)

    def __neg__(self) -> "MeasureArray":
        return MeasureArray(self.grid, self.locations, -self.weights, -self.density)

    def __sub__(self, other: "MeasureArray") -> "MeasureArray":
        return self + (-other)

    def __mul__(self, c) -> "MeasureArray":
        """Scale by a scalar or by an array broadcasting against ``shape``."""
        c = np.asarray(c, dtype=float)
        return MeasureArray(
            self.grid, self.locations, self.weights * c[..., None], self.density * c[..., None]
        )

    __rmul__ = __mul__

    def sum(self, axis=-1) -> "MeasureArray":
        """Sum over a batch axis (the trailing batch axis by default)."""
        ndim = len(self.shape)
        axis = axis % ndim if ndim else 0
        return MeasureArray(
            self.grid,
            self.locations,
            self.weights.sum(axis=axis),
            self.density.sum(axis=axis),
        )

    def contract(self, coeffs: np.ndarray) -> "MeasureArray":
        """Contract the trailing batch axis against ``coeffs[..., k]``."""
        coeffs = np.asarray(coeffs, dtype=float)
        weights = np.einsum("...kn,...k->...n", self.weights, coeffs)
        density = np.einsum("...kn,...k->...n", self.density, coeffs)
        return MeasureArray(self.grid, self.locations, weights, density)

    def shift(self, t: float) -> "MeasureArray":
        """Batched :func:`shift_adjoint`."""
        grid = self.grid
        m = grid.cells(t)
        if m == 0:
            return self
        density = np.zeros_like(self.density)
        if m < grid.n_cells:
            density[..., : grid.n_cells - m] = self.density[..., m:]
        locs = self.locations - t
        keep = locs > grid.tol
        return MeasureArray(grid, locs[keep], self.weights[..., keep], density)

    def prune(self) -> "MeasureArray":
        """Drop atom locations whose weight is zero in every batch entry."""
        if not self.locations.size:
            return self
        live = np.any(self.weights != 0.0, axis=tuple(range(self.weights.ndim - 1)))
        if live.all():
            return self
        return MeasureArray(self.grid, self.locations[live], self.weights[..., live], self.density)

    # -- evaluation -------------------------------------------------------

    def _atom_cells(self) -> np.ndarray:
        return self.grid.cell_of(self.locations)

    def _atom_indicator(self) -> np.ndarray:
        ind = np.zeros((self.locations.size, self.grid.n_cells))
        ind[np.arange(self.locations.size), self._atom_cells()] = 1.0
        return ind

    def cell_masses(self) -> np.ndarray:
        """Mass of every grid cell, atoms included; shape ``shape + (n_cells,)``."""
        masses = self.density * self.grid.cell_width
        if self.locations.size:
            masses = masses + self.weights @ self._atom_indicator()
        return masses

    def cdf_boundaries(self) -> np.ndarray:
        """``mu(0, k h]`` for ``k = 0..n_cells``; shape ``shape + (n_cells + 1,)``."""
        cm = self.cell_masses()
        out = np.zeros(self.shape + (self.grid.n_cells + 1,))
        np.cumsum(cm, axis=-1, out=out[..., 1:])
        return out

    def cdf(self, x: float) -> np.ndarray:
        """``mu(0, x]`` for every batch entry."""
        tol = self.grid.tol
        atoms = self.weights[..., self.locations <= x + tol].sum(axis=-1)
        return atoms + _density_cdf(self.density, self.grid, x)

    def cdf_at_atoms(self) -> np.ndarray:
        """``mu(0, x]`` at each shared atom location; shape ``shape + (K,)``."""
        if not self.locations.size:
            return np.zeros(self.shape + (0,))
        h = self.grid.cell_width
        cells = self._atom_cells()
        dcdf = np.zeros(self.shape + (self.grid.n_cells + 1,))
        np.cumsum(self.density * h, axis=-1, out=dcdf[..., 1:])
        dens_part = dcdf[..., cells] + self.density[..., cells] * (self.locations - cells * h)
        return dens_part + np.cumsum(self.weights, axis=-1)

    def interval(self, a: float, b: float) -> np.ndarray:
        if a < 0 or b < a:
            raise ValueError(f"need 0 <= a <= b, got a={a}, b={b}")
        return self.cdf(b) - self.cdf(a)

    def total_variation(self) -> np.ndarray:
        return np.abs(self.weights).sum(-1) + np.abs(self.density).sum(-1) * self.grid.cell_width

    def pair(self, cell_values, point_values: Mapping[float, float] | None = None) -> np.ndarray:
        """Batched :func:`pair_with_function`."""
        values = np.asarray(cell_values, dtype=float)
        if values.shape[-1] != self.grid.n_cells:
            raise ValueError(f"expected {self.grid.n_cells} cell values")
        at_atoms = _point_values(self.grid, self.locations, values, point_values)
        return self.weights @ at_atoms + self.density @ values * self.grid.cell_width

    def mul_distribution(self) -> "MeasureArray":
        """Batched :func:`mul_distribution` in telescoped form.

        With ``C = mu(0, .]``, the density on cell ``k`` is
        ``(C(b-)^2 - C(p)^2) / (2 (b - p))`` where ``b`` is the right boundary
        and ``p`` the last interior atom location (or the left boundary).  Each
        atom then receives whatever makes ``nu(0, x] = C(x)^2 / 2`` exact there.

        Atom locations are shared by the whole batch, so every entry is split
        at every location, including those where its own weight is zero.  That
        makes the identity exact at all shared locations, which is what a sum
        over factors needs; a single entry may therefore differ from the
        scalar product strictly inside a cell.
        """
        grid = self.grid
        h = grid.cell_width
        cb = self.cdf_boundaries()
        start_x = np.arange(grid.n_cells) * h
        start_c = cb[..., :-1].copy()
        end_c = cb[..., 1:].copy()
        weights = np.zeros_like(self.weights)
        locs = self.locations
        if locs.size:
            cells = self._atom_cells()
            w = self.weights
            c_at = self.cdf_at_atoms()
            boundary = np.abs((cells + 1) * h - locs) <= grid.tol
            if boundary.any():
                end_c[..., cells[boundary]] -= w[..., boundary]
            inner = np.flatnonzero(~boundary)
            if inner.size:
                ci = cells[inner]
                last = inner[np.append(ci[1:] != ci[:-1], True)]
                start_x[cells[last]] = locs[last]
                start_c[..., cells[last]] = c_at[..., last]
            # previous checkpoint of every atom: preceding atom in its cell or the cell start
            same = np.zeros(locs.size, dtype=bool)
            same[1:] = cells[1:] == cells[:-1]
            prev_x = np.where(same, np.roll(locs, 1), cells * h)
            prev_c = np.where(same, np.roll(c_at, 1, axis=-1), cb[..., cells])
        rho = 0.5 * (end_c**2 - start_c**2) / ((np.arange(grid.n_cells) + 1) * h - start_x)
        if locs.size:
            weights = 0.5 * (c_at**2 - prev_c**2) - rho[..., cells] * (locs - prev_x)
        return MeasureArray(grid, locs, weights, rho)

    def refine(self, factor: int) -> "MeasureArray":
        return MeasureArray(
            self.grid.refine(factor),
            self.locations,
            self.weights,
            np.repeat(self.density, factor, axis=-1),
        )


def align(arrays: Sequence[MeasureArray]) -> list[MeasureArray]:
    """Re-express measure arrays on the union of their atom locations."""
    if not arrays:
        return []
    grid = arrays[0].grid
    locs = np.zeros(0)
    for arr in arrays:
        _check_same_grid(grid, arr.grid)
        locs, _, _ = _union_locations(locs, arr.locations, grid.tol)
    return [arr.with_locations(locs) for arr in arrays]
