"""Finite-difference grids on the truncated half-plane / half-space.

Two planar grids are supported, the Euclidean-uniform one with nodes
``(i h, j h)`` and the geometry-tailored one with nodes ``(i rho(h), e^{jh})``,
plus the tailored grid of the half-space with nodes
``(i rho(h), j rho(h), e^{kh})``.  Grid functions are dense arrays over the
rectangular index box, stored row-major with the vertical index first:
shape ``(n_j, n_i)`` in 2D and ``(n_k, n_j, n_i)`` in 3D.  Values outside the
box are zero (homogeneous Dirichlet extension).
"""
from __future__ import annotations

import contextlib
import contextvars
import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from functools import cached_property, lru_cache
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "GridVariant",
    "GridSpec",
    "IndexBox",
    "Cell",
    "Grid",
    "GridFunction",
    "rho",
    "make_grid",
    "mass_center",
    "inner_product",
    "norm",
    "project",
    "xi_points",
    "sample",
    "sample_at_xi",
    "sample_at_nodes",
    "write_grid_csv",
    "read_grid_csv",
    "parallel_reduction",
    "worker_count",
]


class GridVariant(str, Enum):
    UNIFORM_2D = "uniform2d"
    TAILORED_2D = "tailored2d"
    TAILORED_3D = "tailored3d"

    @property
    def dim(self) -> int:
        return 3 if self is GridVariant.TAILORED_3D else 2

    @classmethod
    def parse(cls, label) -> "GridVariant":
        """Accept an enum member, its value, or the Laplacian number 1/2."""
        if isinstance(label, cls):
            return label
        aliases = {"1": cls.UNIFORM_2D, "2": cls.TAILORED_2D, "3d": cls.TAILORED_3D}
        key = str(label).strip().lower()
        if key in aliases:
            return aliases[key]
        return cls(key)


def rho(h: float) -> float:
    """Horizontal spacing ``2 sinh(h/2)`` of the tailored grids."""
    if not h > 0:
        raise ValueError(f"h must be positive, got {h}")
    return 2.0 * math.sinh(h / 2.0)


def _floor(x: float) -> int:
    # D = zeta * h**-gamma is often an integer multiple of h in exact arithmetic
    r = round(x)
    if abs(x - r) <= 1e-9 * max(1.0, abs(x)):
        return int(r)
    return math.floor(x)


@dataclass(frozen=True)
class IndexBox:
    """Inclusive integer ranges of the truncated grid."""

    i_range: tuple
    j_range: tuple
    k_range: Optional[tuple] = None

    @property
    def ranges(self) -> tuple:
        """Ranges in array-axis order (vertical first)."""
        if self.k_range is None:
            return (self.j_range, self.i_range)
        return (self.k_range, self.j_range, self.i_range)

    @property
    def shape(self) -> tuple:
        return tuple(hi - lo + 1 for lo, hi in self.ranges)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    def contains(self, *idx) -> bool:
        """``contains(i, j)`` or ``contains(i, j, k)``."""
        rngs = (self.i_range, self.j_range) + (() if self.k_range is None else (self.k_range,))
        if len(idx) != len(rngs):
            raise ValueError("wrong number of indices")
        return all(lo <= n <= hi for n, (lo, hi) in zip(idx, rngs))

    def offset(self, *idx) -> tuple:
        """Array position of the index tuple ``(i, j[, k])``."""
        if self.k_range is None:
            i, j = idx
            return (j - self.j_range[0], i - self.i_range[0])
        i, j, k = idx
        return (k - self.k_range[0], j - self.j_range[0], i - self.i_range[0])


@dataclass(frozen=True)
class GridSpec:
    """Grid variant, step ``h`` and truncation size ``D``.

    Use :meth:`truncated` to derive ``D = zeta * h**-gamma``; ``D`` is kept as
    the unrounded real.
    """

    variant: GridVariant
    h: float
    D: float
    gamma: Optional[float] = None
    zeta: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "variant", GridVariant.parse(self.variant))
        if not self.h > 0:
            raise ValueError(f"h must be positive, got {self.h}")
        if not self.h < 0.5:
            raise ValueError(f"h must be smaller than 1/2, got {self.h}")
        if not self.D > 2:
            raise ValueError(f"D must exceed 2, got {self.D}")
        box = self.index_box
        if min(box.shape) < 1:
            raise ValueError(f"empty index range for {self}")

    @classmethod
    def truncated(cls, variant, h: float, zeta: float = 6.0, gamma: float = 1.0 / 6.0) -> "GridSpec":
        if not gamma > 0:
            raise ValueError("gamma must be positive")
        if not zeta > 0:
            raise ValueError("zeta must be positive")
        return cls(variant, h, zeta * h ** (-gamma), gamma=gamma, zeta=zeta)

    @property
    def key(self) -> tuple:
        return (self.variant, self.h, self.D)

    @cached_property
    def index_box(self) -> IndexBox:
        h, D = self.h, self.D
        if self.variant is GridVariant.UNIFORM_2D:
            N = _floor(D / h)
            M = _floor((D - 1.0 / D) / h) + 1
            return IndexBox((-N, N), (1, M))
        r = rho(h)
        N = _floor(D / r)
        M = _floor(math.log(D) / h)
        if self.variant is GridVariant.TAILORED_2D:
            return IndexBox((-N, N), (-M, M))
        return IndexBox((-N, N), (-N, N), (-M, M))

    @property
    def node_count(self) -> int:
        return self.index_box.size


@dataclass(frozen=True)
class Cell:
    """One finite-difference cell: index, Euclidean bounds and hyperbolic area."""

    index: tuple
    bounds: tuple
    hyperbolic_area: float


class Grid:
    """Coordinates, cell weights and mass-center points of a truncated grid.

    Per-axis arrays are one-dimensional and ordered like the coordinates
    (``x[0]`` runs over ``i``, ``x[1]`` over ``j``, ...).  Cell weights only
    depend on the vertical index and are stored per row.
    """

    def __init__(self, spec: GridSpec):
        self.spec = spec
        self.box = spec.index_box
        self.variant = spec.variant
        self.dim = spec.variant.dim
        h = spec.h
        i = np.arange(self.box.i_range[0], self.box.i_range[1] + 1)
        j = np.arange(self.box.j_range[0], self.box.j_range[1] + 1)
        self.i = i
        self.j = j
        if self.variant is GridVariant.UNIFORM_2D:
            jf = j.astype(float)
            self.x = (i * h, jf * h)
            self.row_weights = 1.0 / (jf**2 - 0.25)
            self.xi = (i * h, h * (jf**2 - 0.25) * np.log((jf + 0.5) / (jf - 0.5)))
            self.vertical = j
        elif self.variant is GridVariant.TAILORED_2D:
            r = rho(h)
            self.x = (i * r, np.exp(j * h))
            self.row_weights = r**2 * np.exp(-j * h)
            self.xi = (i * r, (h / r) * np.exp(j * h))
            self.vertical = j
        else:
            r = rho(h)
            k = np.arange(self.box.k_range[0], self.box.k_range[1] + 1)
            self.k = k
            self.x = (i * r, j * r, np.exp(k * h))
            self.row_weights = r**2 * np.exp(-2.0 * k * h) * math.sinh(h)
            self.xi = (i * r, j * r, np.exp(k * h) / math.cosh(h / 2.0))
            self.vertical = k

    def __repr__(self):
        return f"Grid({self.variant.value}, h={self.spec.h:g}, D={self.spec.D:g}, shape={self.shape})"

    @property
    def shape(self) -> tuple:
        return self.box.shape

    @property
    def size(self) -> int:
        return self.box.size

    @property
    def weights(self) -> np.ndarray:
        """Cell weights broadcastable against grid arrays."""
        return self.row_weights.reshape((-1,) + (1,) * (self.dim - 1))

    def _mesh(self, axes) -> tuple:
        if self.dim == 2:
            X1, X2 = np.meshgrid(axes[0], axes[1])
            return X1, X2
        X3, X2, X1 = np.meshgrid(axes[2], axes[1], axes[0], indexing="ij")
        return X1, X2, X3

    def node_mesh(self) -> tuple:
        """Full coordinate arrays of the nodes, ``(X1, X2[, X3])``."""
        return self._mesh(self.x)

    def xi_mesh(self) -> tuple:
        """Full coordinate arrays of the cell mass centers."""
        return self._mesh(self.xi)

    def cell(self, *idx) -> Cell:
        """Cell around node ``(i, j)`` or ``(i, j, k)``; need not be inside the box."""
        h = self.spec.h
        if self.variant is GridVariant.UNIFORM_2D:
            i, j = idx
            if j < 1:
                raise ValueError("uniform grid rows start at j = 1")
            bounds = ((i * h - h / 2, i * h + h / 2), (j * h - h / 2, j * h + h / 2))
            return Cell(idx, bounds, 1.0 / (j * j - 0.25))
        r = rho(h)
        if self.variant is GridVariant.TAILORED_2D:
            i, j = idx
            bounds = (((i - 0.5) * r, (i + 0.5) * r), (math.exp(j * h - h / 2), math.exp(j * h + h / 2)))
            return Cell(idx, bounds, r**2 * math.exp(-j * h))
        i, j, k = idx
        bounds = (
            ((i - 0.5) * r, (i + 0.5) * r),
            ((j - 0.5) * r, (j + 0.5) * r),
            (math.exp(k * h - h / 2), math.exp(k * h + h / 2)),
        )
        return Cell(idx, bounds, r**2 * math.exp(-2 * k * h) * math.sinh(h))

    def xi_point(self, *idx) -> tuple:
        """Mass center of a single cell."""
        return mass_center(self.variant, self.spec.h, *idx)

    def zeros(self) -> "GridFunction":
        return GridFunction(self, np.zeros(self.shape))

    def function(self, values) -> "GridFunction":
        return GridFunction(self, values)


def mass_center(variant, h: float, *idx) -> tuple:
    """Hyperbolic mass center of the cell around node ``(i, j[, k])``.

    Valid for any ``h > 0``; no truncation is involved.
    """
    variant = GridVariant.parse(variant)
    if variant is GridVariant.UNIFORM_2D:
        i, j = idx
        if j < 1:
            raise ValueError("uniform grid rows start at j = 1")
        return (i * h, h * (j * j - 0.25) * math.log((j + 0.5) / (j - 0.5)))
    r = rho(h)
    if variant is GridVariant.TAILORED_2D:
        i, j = idx
        return (i * r, (h / r) * math.exp(j * h))
    i, j, k = idx
    return (i * r, j * r, math.exp(k * h) / math.cosh(h / 2))


@lru_cache(maxsize=32)
def make_grid(spec: GridSpec) -> Grid:
    """Build (and cache) the grid described by ``spec``."""
    return Grid(spec)


# --- reductions ---------------------------------------------------------------

_PARALLEL_REDUCE = contextvars.ContextVar("hyplap_parallel_reduce", default=False)


def worker_count() -> int:
    """Worker cap from ``HYPLAP_THREADS``, else the hardware default."""
    env = os.environ.get("HYPLAP_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ValueError(f"HYPLAP_THREADS must be an integer, got {env!r}") from None
        return max(1, n)
    return os.cpu_count() or 1


@contextlib.contextmanager
def parallel_reduction(enabled: bool = True):
    """Reduce inner products over row blocks in worker threads.

    The default sequential reduction is bitwise reproducible; the parallel
    one is reproducible for a fixed worker count.
    """
    token = _PARALLEL_REDUCE.set(enabled)
    try:
        yield
    finally:
        _PARALLEL_REDUCE.reset(token)


def weighted_dot(a: np.ndarray, b: np.ndarray, row_weights: np.ndarray) -> float:
    """``sum_w w * a * b`` with the weight indexed by the leading axis."""
    n = a.shape[0]
    a2 = a.reshape(n, -1)
    b2 = b.reshape(n, -1)
    workers = worker_count() if _PARALLEL_REDUCE.get() else 1
    if workers <= 1 or n < 2 * workers:
        return float(np.dot(row_weights, np.einsum("ij,ij->i", a2, b2)))
    bounds = np.linspace(0, n, workers + 1).astype(int)

    def part(lo_hi):
        lo, hi = lo_hi
        return float(np.dot(row_weights[lo:hi], np.einsum("ij,ij->i", a2[lo:hi], b2[lo:hi])))

    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(part, zip(bounds[:-1], bounds[1:])))
    return math.fsum(parts)


# --- grid functions -----------------------------------------------------------

@dataclass
class GridFunction:
    """Values over the index box of ``grid``, with the weighted l2 structure."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.grid.shape:
            raise ValueError(f"values have shape {self.values.shape}, grid expects {self.grid.shape}")

    @property
    def spec(self) -> GridSpec:
        return self.grid.spec

    def at(self, *idx) -> float:
        """Value at ``(i, j[, k])``; zero outside the index box."""
        if not self.grid.box.contains(*idx):
            return 0.0
        return float(self.values[self.grid.box.offset(*idx)])

    def norm(self) -> float:
        return norm(self)

    def copy(self) -> "GridFunction":
        return GridFunction(self.grid, self.values.copy())

    def _check(self, other):
        if isinstance(other, GridFunction):
            _require_same_grid(self, other)
            return other.values
        return other

    def __add__(self, other):
        return GridFunction(self.grid, self.values + self._check(other))

    def __sub__(self, other):
        return GridFunction(self.grid, self.values - self._check(other))

    def __mul__(self, scalar):
        return GridFunction(self.grid, self.values * scalar)

    __rmul__ = __mul__

    def __neg__(self):
        return GridFunction(self.grid, -self.values)


def _require_same_grid(u: GridFunction, v: GridFunction):
    if u.grid.spec.key != v.grid.spec.key:
        raise ValueError("grid functions live on different grids")


def inner_product(u: GridFunction, v: GridFunction) -> float:
    """Weighted l2 inner product ``sum |C_ij|_g u_ij v_ij``."""
    _require_same_grid(u, v)
    return weighted_dot(u.values, v.values, u.grid.row_weights)


def norm(u: GridFunction) -> float:
    return math.sqrt(max(inner_product(u, u), 0.0))


# --- transfer between continuous functions and the grid ----------------------

def project(v: Callable, grid: Grid, order: int = 4) -> GridFunction:
    """Cell averages of ``v`` against the hyperbolic measure.

    Tensor Gauss-Legendre quadrature with ``order`` points per axis.  On the
    tailored grids the vertical integral is taken in the logarithmic variable
    ``x_n = e^s``, where the cell is an interval of length ``h``.  The
    quadrature sum is divided by the same rule applied to the measure, so
    constants are reproduced exactly even on the lowest uniform rows, where
    ``1/x2^2`` varies by a factor of 9 across the cell.
    """
    s, wq = np.polynomial.legendre.leggauss(order)
    h = grid.spec.h
    acc = np.zeros(grid.shape)
    mass = np.zeros(grid.shape[0])
    if grid.variant is GridVariant.UNIFORM_2D:
        half = h / 2.0
        for b in range(order):
            x2 = grid.x[1] + half * s[b]
            mass += wq[b] / x2**2
            for a in range(order):
                X1, X2 = np.meshgrid(grid.x[0] + half * s[a], x2)
                acc += wq[a] * wq[b] * v(X1, X2) / X2**2
        mass *= 2.0
    elif grid.variant is GridVariant.TAILORED_2D:
        r = rho(h)
        for b in range(order):
            x2 = np.exp(grid.j * h + 0.5 * h * s[b])
            mass += wq[b] / x2
            for a in range(order):
                X1, X2 = np.meshgrid(grid.x[0] + 0.5 * r * s[a], x2)
                acc += wq[a] * wq[b] * v(X1, X2) / X2
        mass *= 2.0
    else:
        r = rho(h)
        for c in range(order):
            x3 = np.exp(grid.k * h + 0.5 * h * s[c])
            mass += wq[c] / x3**2
            for a in range(order):
                for b in range(order):
                    X3, X2, X1 = np.meshgrid(x3, grid.x[1] + 0.5 * r * s[b], grid.x[0] + 0.5 * r * s[a], indexing="ij")
                    acc += wq[a] * wq[b] * wq[c] * v(X1, X2, X3) / X3**2
        mass *= 4.0
    acc /= mass.reshape((-1,) + (1,) * (grid.dim - 1))
    if not np.all(np.isfinite(acc)):
        raise ValueError("projection produced non-finite cell averages")
    return GridFunction(grid, acc)


def xi_points(grid: Grid) -> tuple:
    """Per-axis coordinates of the cell mass centers."""
    return grid.xi


def sample(v: Callable, grid: Grid, at: str = "xi") -> GridFunction:
    """Evaluate ``v`` at every cell mass center (``at="xi"``) or node (``"node"``)."""
    if at == "xi":
        pts = grid.xi_mesh()
    elif at == "node":
        pts = grid.node_mesh()
    else:
        raise ValueError(f"unknown sampling location {at!r}")
    return GridFunction(grid, np.broadcast_to(v(*pts), grid.shape).astype(float))


def sample_at_xi(v: Callable, grid: Grid) -> GridFunction:
    return sample(v, grid, "xi")


def sample_at_nodes(v: Callable, grid: Grid) -> GridFunction:
    return sample(v, grid, "node")


# --- CSV dump -----------------------------------------------------------------

def _csv_columns(dim: int) -> list:
    if dim == 2:
        return ["i", "j", "x1", "x2", "weight", "xi1", "xi2"]
    return ["i", "j", "k", "x1", "x2", "x3", "weight", "xi1", "xi2", "xi3"]


def write_grid_csv(path, grid: Grid, values: Optional[np.ndarray] = None,
                   value_name: str = "value", extra: Optional[dict] = None) -> Path:
    """Write one row per node: indices, coordinates, weight, mass center.

    ``values`` (a grid-shaped array) adds a column named ``value_name``;
    ``extra`` maps further column names to grid-shaped arrays.  Floats are
    written with ``%.17g`` so the file round-trips exactly.
    """
    path = Path(path)
    cols = _csv_columns(grid.dim)
    data = {}
    if grid.dim == 2:
        J, I = np.meshgrid(grid.j, grid.i, indexing="ij")
        data["i"], data["j"] = I, J
    else:
        K, J, I = np.meshgrid(grid.k, grid.j, grid.i, indexing="ij")
        data["i"], data["j"], data["k"] = I, J, K
    nodes = grid.node_mesh()
    xis = grid.xi_mesh()
    for n in range(grid.dim):
        data[f"x{n + 1}"] = nodes[n]
        data[f"xi{n + 1}"] = xis[n]
    data["weight"] = np.broadcast_to(grid.weights, grid.shape)
    columns = {}
    if values is not None:
        columns[value_name] = values
    if extra:
        columns.update(extra)
    for name, arr in columns.items():
        cols.append(name)
        data[name] = np.asarray(arr)
    flat = [np.asarray(data[c]).reshape(-1) for c in cols]
    int_cols = {"i", "j", "k"}
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in zip(*flat):
            w.writerow([str(int(x)) if c in int_cols else "%.17g" % x for c, x in zip(cols, row)])
    return path


def read_grid_csv(path) -> dict:
    """Read a file written by :func:`write_grid_csv` into column arrays."""
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    out = {}
    for n, name in enumerate(header):
        col = [r[n] for r in rows]
        out[name] = np.array(col, dtype=int if name in ("i", "j", "k") else float)
    return out


def columns_to_grid_array(grid: Grid, column: Sequence[float]) -> np.ndarray:
    """Reshape a CSV column (row-major node order) back into a grid array."""
    return np.asarray(column, dtype=float).reshape(grid.shape)
