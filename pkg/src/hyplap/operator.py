"""Matrix-free discrete Laplace-Beltrami operators.

Every operator is a five-point (2D) or seven-point (3D) stencil whose
coefficients depend only on the vertical index, so they are stored as per-row
vectors: one coefficient shared by the horizontal neighbours, one for the
neighbour above, one for the neighbour below and one for the centre.  Values
outside the index box are zero.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .grid import Grid, GridFunction, GridSpec, GridVariant, make_grid, rho

__all__ = [
    "DiscreteLaplacian",
    "ShiftedOperator",
    "assemble_shifted",
    "poincare_constant",
]


def poincare_constant(variant, h: float = None) -> float:
    """Sharp discrete Poincare constant of the planar operators.

    ``1/4`` for the uniform grid and ``2e^h / ((e^h+1)(1+e^{h/2})^2)`` for the
    tailored grid.
    """
    variant = GridVariant.parse(variant)
    if variant is GridVariant.UNIFORM_2D:
        return 0.25
    if variant is GridVariant.TAILORED_2D:
        if h is None or not h > 0:
            raise ValueError("the tailored constant needs h > 0")
        eh = math.exp(h)
        return 2.0 * eh / ((eh + 1.0) * (1.0 + math.exp(h / 2.0)) ** 2)
    raise ValueError("no Poincare constant is available for the 3D operator")


def _shift(U: np.ndarray, axis: int, step: int) -> np.ndarray:
    """``out[n] = U[n + step]`` along ``axis`` with zero fill."""
    out = np.zeros_like(U)
    src = [slice(None)] * U.ndim
    dst = [slice(None)] * U.ndim
    if step > 0:
        src[axis] = slice(step, None)
        dst[axis] = slice(None, -step)
    else:
        src[axis] = slice(None, step)
        dst[axis] = slice(-step, None)
    out[tuple(dst)] = U[tuple(src)]
    return out


def _diffs(U: np.ndarray, axis: int) -> np.ndarray:
    """All forward differences along ``axis`` of the zero-padded array."""
    pad = [(0, 0)] * U.ndim
    pad[axis] = (1, 1)
    return np.diff(np.pad(U, pad), axis=axis)


class DiscreteLaplacian:
    """Discrete Laplace-Beltrami operator attached to one grid.

    Parameters
    ----------
    grid : Grid or GridSpec
        The grid; its variant selects the stencil.

    Attributes
    ----------
    horizontal, north, south, center : ndarray
        Per-row stencil coefficients, indexed by the vertical array axis.
    """

    def __init__(self, grid):
        if isinstance(grid, GridSpec):
            grid = make_grid(grid)
        self.grid: Grid = grid
        self.spec: GridSpec = grid.spec
        self.variant = grid.variant
        self.dim = grid.dim
        h = self.spec.h
        n = grid.row_weights.size
        if self.variant is GridVariant.UNIFORM_2D:
            c = grid.j.astype(float) ** 2 - 0.25
            self.horizontal = c
            self.north = c.copy()
            self.south = c.copy()
            self.center = -4.0 * c
        elif self.variant is GridVariant.TAILORED_2D:
            r2 = rho(h) ** 2
            eh = math.exp(h)
            self.horizontal = np.exp(2.0 * grid.j * h) / r2
            self.north = np.full(n, 2.0 / (eh + 1.0) / r2)
            self.south = np.full(n, 2.0 * eh / (eh + 1.0) / r2)
            self.center = -2.0 * self.horizontal - 2.0 / r2
        else:
            r2 = rho(h) ** 2
            eh = math.exp(h)
            e2h = math.exp(2.0 * h)
            self.horizontal = np.exp(2.0 * grid.k * h) / r2
            # these reduce to e^{-h}/rho^2 and e^{h}/rho^2
            self.north = np.full(n, (2.0 / (eh + 1.0) - r2 / (e2h - 1.0)) / r2)
            self.south = np.full(n, (2.0 * eh / (eh + 1.0) + r2 * e2h / (e2h - 1.0)) / r2)
            self.center = -4.0 * self.horizontal - (2.0 + r2) / r2

    def __repr__(self):
        return f"DiscreteLaplacian({self.grid!r})"

    def _col(self, a):
        return a.reshape((-1,) + (1,) * (self.dim - 1))

    def _check(self, v: GridFunction):
        if v.grid.spec.key != self.spec.key:
            raise ValueError("grid function does not belong to this operator's grid")

    def apply_array(self, U: np.ndarray) -> np.ndarray:
        """Apply the stencil to a raw grid-shaped array."""
        out = self._col(self.center) * U
        hor = self._col(self.horizontal)
        for axis in range(1, self.dim):
            out[(slice(None),) * axis + (slice(1, None),)] += (hor * U)[(slice(None),) * axis + (slice(None, -1),)]
            out[(slice(None),) * axis + (slice(None, -1),)] += (hor * U)[(slice(None),) * axis + (slice(1, None),)]
        out[:-1] += self._col(self.north[:-1]) * U[1:]
        out[1:] += self._col(self.south[1:]) * U[:-1]
        return out

    def apply(self, v: GridFunction) -> GridFunction:
        self._check(v)
        return GridFunction(self.grid, self.apply_array(v.values))

    __call__ = apply

    def energy(self, v: GridFunction) -> float:
        """``-<Δ_h v, v>`` evaluated as a sum of weighted squared differences.

        Differences across the box boundary are taken against the zero
        extension, so the identity holds for every grid function.
        """
        self._check(v)
        U = v.values
        h = self.spec.h
        if self.variant is GridVariant.UNIFORM_2D:
            return float(np.sum(_diffs(U, 1) ** 2) + np.sum(_diffs(U, 0) ** 2))
        if self.variant is GridVariant.TAILORED_2D:
            j = self.grid.j
            hor = np.exp(j * h) @ np.sum(_diffs(U, 1) ** 2, axis=1)
            # vertical edge from row j to j+1, rows -M-1 .. M
            edges = np.arange(j[0] - 1, j[-1] + 1)
            ver = np.exp(-edges * h) @ np.sum(_diffs(U, 0) ** 2, axis=1)
            return float(hor + 2.0 / (math.exp(h) + 1.0) * ver)
        k = self.grid.k
        hor = np.sum(_diffs(U, 2) ** 2) + np.sum(_diffs(U, 1) ** 2)
        edges = np.arange(k[0] - 1, k[-1] + 1)
        ver = np.exp(-2.0 * edges * h) @ np.sum(_diffs(U, 0) ** 2, axis=(1, 2))
        return float(math.sinh(h) * (hor + math.exp(-h) * ver))

    def poincare_constant(self) -> float:
        return poincare_constant(self.variant, self.spec.h)


@dataclass(frozen=True)
class ShiftedOperator:
    """The map ``v -> alpha v - beta Δ_h v``."""

    laplacian: DiscreteLaplacian
    alpha: float = 1.0
    beta: float = 0.0

    @property
    def grid(self) -> Grid:
        return self.laplacian.grid

    def apply_array(self, U: np.ndarray) -> np.ndarray:
        if self.beta == 0.0:
            return self.alpha * U
        return self.alpha * U - self.beta * self.laplacian.apply_array(U)

    def apply(self, v: GridFunction) -> GridFunction:
        self.laplacian._check(v)
        return GridFunction(v.grid, self.apply_array(v.values))

    __call__ = apply


def assemble_shifted(L: DiscreteLaplacian, tau: float, theta: float) -> ShiftedOperator:
    """Implicit part ``id - tau theta Δ_h`` of the theta-scheme."""
    if tau < 0:
        raise ValueError(f"tau must be non-negative, got {tau}")
    if not 0.5 <= theta <= 1.0:
        raise ValueError("theta must be in [0.5, 1]")
    return ShiftedOperator(L, 1.0, tau * theta)
