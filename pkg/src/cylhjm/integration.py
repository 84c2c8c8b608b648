"""Elementary vector integration on finite spaces and its cylindrification.

Everything is finite-dimensional and Euclidean: a vector measure on a finite
partition is an array of cell values, a bilinear pairing ``F x G -> H`` is a
coefficient tensor, and operator norms are spectral norms.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

MAX_EXACT_CELLS = 24


@dataclass(frozen=True)
class FiniteSpace:
    """A finite set partitioned into ``n_cells`` atoms of its algebra."""

    n_cells: int

    def __post_init__(self):
        if self.n_cells < 1:
            raise ValueError("a finite space needs at least one cell")


@dataclass(frozen=True)
class BilinearPairing:
    """Bilinear map ``F x G -> H`` with ``p(f, g)_h = sum C[i, j, h] f_i g_j``."""

    coeffs: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=float)
        if c.ndim != 3:
            raise ValueError("pairing coefficients must have shape (dim_F, dim_G, dim_H)")
        object.__setattr__(self, "coeffs", c)

    @classmethod
    def multiplication(cls) -> "BilinearPairing":
        return cls(np.ones((1, 1, 1)))

    @classmethod
    def scalar_action(cls, dim: int) -> "BilinearPairing":
        """``R x R^dim -> R^dim``, scalar times vector."""
        return cls(np.eye(dim)[None, :, :])

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.coeffs.shape

    def __call__(self, f, g) -> np.ndarray:
        return np.einsum("...i,...j,ijh->...h", f, g, self.coeffs)

    def left_operator(self, g) -> np.ndarray:
        """Matrix of ``f -> p(f, g)``, shape ``(dim_H, dim_F)``."""
        return np.einsum("j,ijh->hi", np.asarray(g, dtype=float), self.coeffs)


@dataclass(frozen=True)
class FiniteVectorMeasure:
    space: FiniteSpace
    values: np.ndarray  # (n_cells, dim_G)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.shape[0] != self.space.n_cells:
            raise ValueError("one value per cell expected")
        object.__setattr__(self, "values", v)

    def __call__(self, cells) -> np.ndarray:
        """Value on the union of the given cells."""
        return self.values[list(cells)].sum(axis=0)

    def restrict(self, cells) -> "FiniteVectorMeasure":
        mask = np.zeros(self.space.n_cells, dtype=bool)
        mask[list(cells)] = True
        return FiniteVectorMeasure(self.space, self.values * mask[:, None])

    def __add__(self, other: "FiniteVectorMeasure") -> "FiniteVectorMeasure":
        if self.space != other.space:
            raise ValueError("measures live on different spaces")
        return FiniteVectorMeasure(self.space, self.values + other.values)


@dataclass(frozen=True)
class ElementaryFunction:
    space: FiniteSpace
    values: np.ndarray  # (n_cells, dim_F)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.shape[0] != self.space.n_cells:
            raise ValueError("one value per cell expected")
        object.__setattr__(self, "values", v)

    def sup_norm(self) -> float:
        return float(np.linalg.norm(self.values, axis=1).max())


def elementary_integral(
    f: ElementaryFunction, mu: FiniteVectorMeasure, pairing: BilinearPairing
) -> np.ndarray:
    """``sum_k p(f_k, mu_k)``."""
    if f.space != mu.space:
        raise ValueError("integrand and measure live on different spaces")
    dim_f, dim_g, _ = pairing.dims
    if f.values.shape[1] != dim_f or mu.values.shape[1] != dim_g:
        raise ValueError(
            f"pairing expects dims ({dim_f}, {dim_g}), got "
            f"({f.values.shape[1]}, {mu.values.shape[1]})"
        )
    return pairing(f.values, mu.values).sum(axis=0)


class SemivariationBracket(NamedTuple):
    lower: float
    upper: float


def semivariation(
    mu: FiniteVectorMeasure,
    pairing: BilinearPairing,
    mode: str = "exact",
    *,
    n_samples: int = 64,
    seed: int = 0,
):
    """Operator norm of ``f -> int f mu`` over the sup-norm unit ball.

    ``mode="exact"`` needs scalar integrands and returns a float by enumerating
    sign patterns.  ``mode="sampled"`` returns a :class:`SemivariationBracket`
    whose lower end comes from random starts refined by coordinate ascent and
    whose upper end is ``sum_k ||p(., mu_k)||``.
    """
    if mode == "exact":
        return semivariation_witness(mu, pairing)[0]
    if mode != "sampled":
        raise ValueError(f"unknown mode {mode!r}")
    ops = [pairing.left_operator(g) for g in mu.values]  # (dim_H, dim_F) each
    upper = float(sum(np.linalg.norm(op, 2) for op in ops))
    rng = np.random.default_rng(seed)
    dim_f = pairing.dims[0]
    best = 0.0
    for _ in range(n_samples):
        f = rng.normal(size=(len(ops), dim_f))
        f /= np.maximum(np.linalg.norm(f, axis=1, keepdims=True), 1e-300)
        total = sum(op @ fk for op, fk in zip(ops, f))
        for _sweep in range(50):
            before = np.linalg.norm(total)
            for k, op in enumerate(ops):
                # Convexity: moving f_k to the gradient direction never decreases the norm.
                direction = op.T @ total
                nd = np.linalg.norm(direction)
                if nd == 0:
                    continue
                total = total - op @ f[k]
                f[k] = direction / nd
                total = total + op @ f[k]
            if np.linalg.norm(total) <= before * (1 + 1e-12):
                break
        best = max(best, float(np.linalg.norm(total)))
    return SemivariationBracket(best, upper)


def semivariation_witness(
    mu: FiniteVectorMeasure, pairing: BilinearPairing
) -> tuple[float, np.ndarray]:
    """Exact scalar semivariation and a maximizing sign pattern."""
    if pairing.dims[0] != 1:
        raise ValueError("exact semivariation requires scalar integrands (dim_F = 1)")
    n = mu.space.n_cells
    if n > MAX_EXACT_CELLS:
        raise ValueError(f"exact enumeration limited to {MAX_EXACT_CELLS} cells, got {n}")
    # Row k is p(1, mu_k); the objective is even in the sign vector, so fix eps_0 = +1.
    rows = np.stack([pairing.left_operator(g)[:, 0] for g in mu.values])
    best, best_signs = -1.0, None
    chunk = 1 << min(n - 1, 16)
    rest = n - 1
    for start in range(0, 1 << rest, chunk):
        codes = np.arange(start, min(start + chunk, 1 << rest))
        bits = (codes[:, None] >> np.arange(rest)) & 1
        signs = np.concatenate([np.ones((codes.size, 1)), 1 - 2 * bits], axis=1)
        norms = np.linalg.norm(signs @ rows, axis=1)
        i = int(np.argmax(norms))
        if norms[i] > best:
            best, best_signs = float(norms[i]), signs[i]
    return best, best_signs


def semivariation_brute(mu: FiniteVectorMeasure, pairing: BilinearPairing) -> float:
    """Plain enumeration over all ``2**n`` sign patterns (reference path)."""
    n = mu.space.n_cells
    best = 0.0
    for eps in itertools.product((-1.0, 1.0), repeat=n):
        f = ElementaryFunction(mu.space, np.array(eps))
        best = max(best, float(np.linalg.norm(elementary_integral(f, mu, pairing))))
    return best


class CylindricalIntegral:
    """Elementwise application ``f -> (e -> T(f e))`` of a linear map ``T``.

    Integrands ``f`` in ``L(E, I)`` are ``(dim_I, dim_E)`` matrices, so the
    cylindrified integral of ``f`` is the ``(dim_H, dim_E)`` matrix ``T @ f``.
    """

    def __init__(self, T, dim_e: int):
        if dim_e < 1:
            raise ValueError("the test space must be non-trivial")
        self.T = np.atleast_2d(np.asarray(T, dtype=float))
        self.dim_e = int(dim_e)

    @property
    def dim_i(self) -> int:
        return self.T.shape[1]

    def __call__(self, f, e=None) -> np.ndarray:
        f = np.asarray(f, dtype=float).reshape(self.dim_i, self.dim_e)
        if e is None:
            return self.T @ f
        return self.T @ (f @ np.asarray(e, dtype=float))

    def opnorm_upper(self) -> float:
        return float(np.linalg.norm(self.T, 2))

    def witness(self) -> np.ndarray:
        """Rank-one integrand ``g e*`` with ``g`` the top right singular vector."""
        _, _, vt = np.linalg.svd(self.T)
        e = np.zeros(self.dim_e)
        e[0] = 1.0
        return np.outer(vt[0], e)

    def opnorm_lower(self) -> float:
        f = self.witness()
        return float(np.linalg.norm(self(f), 2) / np.linalg.norm(f, 2))


def cylindrify(T, dim_e: int) -> CylindricalIntegral:
    return CylindricalIntegral(T, dim_e)


def bochner_quadrature(values, dt: float) -> np.ndarray:
    """Left-endpoint quadrature ``sum_j values[j] * dt`` on a uniform grid."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    values = np.asarray(values, dtype=float)
    if values.shape[0] == 0:
        return np.zeros(values.shape[1:])
    return values.sum(axis=0) * dt
