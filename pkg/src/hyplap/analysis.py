"""Error metrics, convergence studies and Poincare-ratio experiments."""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .geometry import benchmark_2d, benchmark_3d, continuous_laplacian_2d
from .grid import Grid, GridFunction, GridSpec, GridVariant, make_grid, norm, project, rho, sample
from .operator import DiscreteLaplacian, poincare_constant
from .solver import ThetaSchemeConfig, run_theta_scheme, solve_stationary_3d

__all__ = [
    "ErrorReport",
    "EOCTable",
    "DegenerateReference",
    "ZeroFunction",
    "MinimizerSequence",
    "l2_error",
    "normalized_relative_error",
    "write_nre_csv",
    "estimate_memory_bytes",
    "run_benchmark",
    "convergence_study",
    "stationary_3d_error",
    "stationary_3d_study",
    "consistency_error",
    "poincare_ratio",
    "first_functional",
    "minimizer_first",
    "minimizer_second",
    "sequence_ratio",
]

BYTES_PER_VALUE = 8
# U, rhs, x, r, z, p, Ap, source profile, transform workspace and factors
THETA_LIVE_VECTORS = 12
STATIONARY_LIVE_VECTORS = 10


class DegenerateReference(ValueError):
    """The reference function vanishes on the whole grid."""


class ZeroFunction(ValueError):
    """A Poincare ratio was requested for the zero function."""


def estimate_memory_bytes(node_count: int, live_vectors: int = THETA_LIVE_VECTORS) -> int:
    """Deterministic working-set estimate: nodes x live arrays x 8 bytes."""
    return int(node_count) * int(live_vectors) * BYTES_PER_VALUE


@dataclass
class ErrorReport:
    variant: str
    h: float
    D: float
    theta: Optional[float]
    l2_error: float
    node_count: int
    wall_time_s: float
    peak_mem_estimate_bytes: int

    def __post_init__(self):
        if not self.l2_error >= 0:
            raise ValueError("l2_error must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EOCTable:
    """Errors of a refinement study, sorted by decreasing ``h``.

    ``eoc[n] = log2(E(h_n) / E(h_{n+1}))`` for consecutive halvings.
    """

    reports: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        hs = [r.h for r in self.reports]
        if any(a <= b for a, b in zip(hs, hs[1:])):
            raise ValueError("reports must be sorted by strictly decreasing h")

    @property
    def h(self) -> list:
        return [r.h for r in self.reports]

    @property
    def errors(self) -> list:
        return [r.l2_error for r in self.reports]

    @property
    def eoc(self) -> list:
        out = []
        for a, b in zip(self.reports, self.reports[1:]):
            if not math.isclose(a.h / b.h, 2.0, rel_tol=1e-9):
                raise ValueError("EOC is only defined for consecutive halvings")
            out.append(math.log2(a.l2_error / b.l2_error) if b.l2_error > 0 else math.inf)
        return out

    def rows(self) -> list:
        eoc = [None] + self.eoc
        return [dict(r.to_dict(), eoc=e) for r, e in zip(self.reports, eoc)]

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["variant", "theta", "h", "D", "nodes", "error", "eoc", "wall_time_s"])
            for row in self.rows():
                w.writerow([
                    row["variant"],
                    "" if row["theta"] is None else "%.6e" % row["theta"],
                    "%.6e" % row["h"],
                    "%.6e" % row["D"],
                    row["node_count"],
                    "%.6e" % row["l2_error"],
                    "" if row["eoc"] is None else "%.6e" % row["eoc"],
                    "%.6e" % row["wall_time_s"],
                ])
        return path

    def to_json(self) -> dict:
        return {"config": self.config, "rows": self.rows()}

    def format(self) -> str:
        """Human-readable table with ``%.4e`` floats."""
        lines = [f"{'h':>12} {'nodes':>9} {'error':>12} {'eoc':>8} {'time[s]':>10}"]
        for row in self.rows():
            eoc = "" if row["eoc"] is None else "%.4f" % row["eoc"]
            lines.append(
                f"{'%.4e' % row['h']:>12} {row['node_count']:>9d} {'%.4e' % row['l2_error']:>12} "
                f"{eoc:>8} {'%.4e' % row['wall_time_s']:>10}"
            )
        return "\n".join(lines)


# --- error metrics ------------------------------------------------------------

def _reference_values(reference: Callable, grid: Grid, t: Optional[float], at: str) -> GridFunction:
    if t is None:
        return sample(reference, grid, at)
    return sample(lambda *x: reference(t, *x), grid, at)


def l2_error(U: GridFunction, reference: Callable, t: Optional[float] = None, at: str = "xi") -> float:
    """``||U - reference(t, .)||`` with the reference sampled at the mass centers.

    ``t=None`` treats ``reference`` as time independent.
    """
    return norm(U - _reference_values(reference, U.grid, t, at))


def _cell_edges(grid: Grid) -> tuple:
    h = grid.spec.h
    if grid.variant is GridVariant.UNIFORM_2D:
        e1 = np.append(grid.i - 0.5, grid.i[-1] + 0.5) * h
        e2 = np.append(grid.j - 0.5, grid.j[-1] + 0.5) * h
        return (e1, e2)
    r = rho(h)
    e1 = np.append(grid.i - 0.5, grid.i[-1] + 0.5) * r
    if grid.variant is GridVariant.TAILORED_2D:
        return (e1, np.exp(np.append(grid.j - 0.5, grid.j[-1] + 0.5) * h))
    e2 = np.append(grid.j - 0.5, grid.j[-1] + 0.5) * r
    return (e1, e2, np.exp(np.append(grid.k - 0.5, grid.k[-1] + 0.5) * h))


def _reference_peak(reference: Callable, grid: Grid, t: Optional[float]) -> float:
    ev = reference if t is None else (lambda *x: reference(t, *x))
    peak = float(np.max(np.abs(ev(*grid.xi_mesh()))))
    edges = _cell_edges(grid)
    if grid.dim == 2:
        corners = np.meshgrid(*edges)
    else:
        X3, X2, X1 = np.meshgrid(edges[2], edges[1], edges[0], indexing="ij")
        corners = (X1, X2, X3)
    return max(peak, float(np.max(np.abs(ev(*corners)))))


def normalized_relative_error(U: GridFunction, reference: Callable, t: Optional[float] = None,
                              peak: Optional[float] = None, at: str = "xi") -> GridFunction:
    """Pointwise ``|U - reference(t, xi)| / max |reference(t, .)|``.

    The maximum is ``peak`` when given (closed form), else the largest value
    over all mass centers and cell corners.
    """
    diff = np.abs(U.values - _reference_values(reference, U.grid, t, at).values)
    if peak is None:
        peak = _reference_peak(reference, U.grid, t)
    if not peak > 0:
        raise DegenerateReference("reference vanishes on the truncated domain")
    return GridFunction(U.grid, diff / peak)


def write_nre_csv(path, nre: GridFunction) -> Path:
    """One row ``i,j,x1,x2,nre`` per node (2D grids)."""
    grid = nre.grid
    if grid.dim != 2:
        raise ValueError("NRE export is defined for planar grids")
    path = Path(path)
    X1, X2 = grid.node_mesh()
    J, I = np.meshgrid(grid.j, grid.i, indexing="ij")
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "j", "x1", "x2", "nre"])
        for row in zip(I.ravel(), J.ravel(), X1.ravel(), X2.ravel(), nre.values.ravel()):
            w.writerow([int(row[0]), int(row[1])] + ["%.17g" % x for x in row[2:]])
    return path


# --- studies ------------------------------------------------------------------

def run_benchmark(variant, h: float, theta: float = 0.5, zeta: float = 6.0, gamma: float = 1.0 / 6.0,
                  T: float = 1.0, *, problem=None, sample_at: str = "xi", exact_final_time: bool = False,
                  tol: float = 1e-11, max_iter: Optional[int] = None, preconditioner="fast") -> tuple:
    """Run the 2D benchmark once; returns ``(U, ErrorReport)``."""
    problem = problem or benchmark_2d()
    spec = GridSpec.truncated(variant, h, zeta=zeta, gamma=gamma)
    cfg = ThetaSchemeConfig(theta=theta, T=T, linear_tol=tol, max_iter=max_iter,
                            exact_final_time=exact_final_time, preconditioner=preconditioner)
    res = run_theta_scheme(spec, cfg, problem, sample_at=sample_at, full_output=True)
    err = l2_error(res.solution, problem.exact_solution, res.final_time, at=sample_at)
    rep = ErrorReport(spec.variant.value, h, spec.D, theta, err, spec.node_count, res.wall_time_s,
                      estimate_memory_bytes(spec.node_count))
    return res.solution, rep


def _check_halvings(h_list: Sequence[float]):
    if len(h_list) == 0:
        raise ValueError("h_list is empty")
    for a, b in zip(h_list, h_list[1:]):
        if not math.isclose(a / b, 2.0, rel_tol=1e-9):
            raise ValueError("h_list must decrease by factors of 2")


def convergence_study(variant, theta: float, h_list: Sequence[float], zeta: float = 6.0,
                      gamma: float = 1.0 / 6.0, T: float = 1.0, **kwargs) -> EOCTable:
    """Benchmark errors and EOCs over ``h_list`` (halvings, coarsest first)."""
    _check_halvings(h_list)
    reports = [run_benchmark(variant, h, theta, zeta, gamma, T, **kwargs)[1] for h in h_list]
    cfg = {"variant": GridVariant.parse(variant).value, "theta": theta, "h_list": list(h_list),
           "zeta": zeta, "gamma": gamma, "T": T}
    cfg.update({k: v for k, v in kwargs.items() if isinstance(v, (int, float, str, bool))})
    return EOCTable(reports, cfg)


def stationary_3d_error(h: float, zeta: float = 2.0, gamma: float = 1.0 / 6.0, *, tol: float = 1e-11,
                        max_iter: Optional[int] = None, preconditioner="fast") -> tuple:
    """Invert the 3D operator on the sampled analytic Laplacian of the 3D benchmark.

    Returns ``(x, ErrorReport)``; the error compares ``x`` with the exact
    solution at the cell mass centers.
    """
    problem = benchmark_3d()
    spec = GridSpec.truncated(GridVariant.TAILORED_3D, h, zeta=zeta, gamma=gamma)
    grid = make_grid(spec)
    t0 = time.perf_counter()
    rhs = sample(problem.laplacian, grid)
    x = solve_stationary_3d(spec, rhs, tol=tol, max_iter=max_iter, preconditioner=preconditioner)
    wall = time.perf_counter() - t0
    err = l2_error(x, problem.exact_solution)
    return x, ErrorReport(spec.variant.value, h, spec.D, None, err, spec.node_count, wall,
                          estimate_memory_bytes(spec.node_count, STATIONARY_LIVE_VECTORS))


def stationary_3d_study(h_list: Sequence[float], zeta: float = 2.0, gamma: float = 1.0 / 6.0, **kwargs) -> EOCTable:
    _check_halvings(h_list)
    reports = [stationary_3d_error(h, zeta, gamma, **kwargs)[1] for h in h_list]
    return EOCTable(reports, {"variant": "tailored3d", "h_list": list(h_list), "zeta": zeta, "gamma": gamma})


def consistency_error(variant, h: float, zeta: float = 6.0, gamma: float = 1.0 / 6.0, order: int = 4) -> float:
    """``||Δ_h Π_h u0 - Π_h Δ_g u0||`` for the benchmark initial datum."""
    problem = benchmark_2d()
    spec = GridSpec.truncated(variant, h, zeta=zeta, gamma=gamma)
    grid = make_grid(spec)
    L = DiscreteLaplacian(grid)
    pu = project(problem.initial_datum, grid, order)
    plap = project(lambda a, b: continuous_laplacian_2d(problem.field, a, b), grid, order)
    return norm(L.apply(pu) - plap)


# --- Poincare experiments -----------------------------------------------------

def poincare_ratio(L: DiscreteLaplacian, v: GridFunction) -> float:
    """``energy(v) / ||v||^2``; bounded below by the Poincare constant."""
    nv2 = norm(v) ** 2
    if nv2 == 0.0:
        raise ZeroFunction("the Poincare ratio is undefined for v = 0")
    return L.energy(v) / nv2


def _padded_sq_diffs(a: np.ndarray) -> np.ndarray:
    return np.diff(np.concatenate(([0.0], a, [0.0]))) ** 2


def first_functional(w: np.ndarray) -> float:
    """One-dimensional quotient ``sum (w_j - w_{j-1})^2 / sum w_j^2 / (j^2 - 1/4)``.

    ``w[0]`` is the value at ``j = 1`` and ``w_0 = 0``.
    """
    w = np.asarray(w, dtype=float)
    j = np.arange(1, w.size + 1, dtype=float)
    den = np.sum(w**2 / (j**2 - 0.25))
    if den == 0.0:
        raise ZeroFunction("w vanishes identically")
    return float(np.sum(_padded_sq_diffs(w)) / den)


@dataclass(frozen=True)
class MinimizerSequence:
    """Separable field ``v_{i,j} = a_i b_j`` on the unbounded index lattice.

    ``a_i = 1 - |i|/m`` for ``|i| <= m``.  On the tailored lattice ``b_j``
    grows like ``e^{jh/2}``, so ``j_profile`` stores the scaled profile
    ``c_j = e^{-jh/2} b_j`` to keep every sum finite; on the uniform lattice
    ``j_profile`` is ``b_j`` itself.  ``m = None`` stands for the limit
    ``m -> infinity``, in which the horizontal part of the quotient vanishes.
    """

    variant: GridVariant
    h: Optional[float]
    m: Optional[int]
    n: int
    j_index: np.ndarray
    j_profile: np.ndarray

    @property
    def i_index(self) -> np.ndarray:
        return np.arange(-self.m, self.m + 1)

    @property
    def i_profile(self) -> np.ndarray:
        return 1.0 - np.abs(self.i_index) / self.m

    def b(self) -> np.ndarray:
        """Unscaled vertical profile ``b_j``."""
        if self.variant is GridVariant.UNIFORM_2D:
            return self.j_profile
        return self.j_profile * np.exp(self.j_index * self.h / 2.0)

    def values(self) -> np.ndarray:
        """Array of shape ``(len(j_index), 2m+1)``."""
        if self.m is None:
            raise ValueError("no finite representation for m = None")
        return np.outer(self.b(), self.i_profile)

    def _log_parts(self) -> tuple:
        """Logs of the vertical factors of horizontal energy, vertical energy and mass."""
        c = self.j_profile
        j = self.j_index.astype(float)
        if self.variant is GridVariant.UNIFORM_2D:
            return (math.log(np.sum(c**2)), math.log(np.sum(_padded_sq_diffs(c))),
                    math.log(np.sum(c**2 / (j**2 - 0.25))))
        h = self.h
        # e^{jh} b_j^2 = e^{2jh} c_j^2
        hor = float(np.logaddexp.reduce(2.0 * j * h + np.log(np.maximum(c**2, np.finfo(float).tiny))))
        # e^{-jh}(b_{j+1} - b_j)^2 = (e^{h/2} c_{j+1} - c_j)^2 on the edge (j, j+1)
        cp = np.concatenate(([0.0], c, [0.0]))
        ver = 2.0 / (math.exp(h) + 1.0) * np.sum((math.exp(h / 2.0) * cp[1:] - cp[:-1]) ** 2)
        mass = rho(h) ** 2 * np.sum(c**2)
        return hor, math.log(ver), math.log(mass)

    def ratio(self) -> float:
        """Poincare quotient ``energy / ||v||^2`` evaluated in separable form.

        Returns ``inf`` when the horizontal part exceeds the float range.
        """
        log_hor, log_ver, log_mass = self._log_parts()
        vertical = math.exp(log_ver - log_mass)
        if self.m is None:
            return vertical
        a = self.i_profile
        log_h = log_hor + math.log(np.sum(_padded_sq_diffs(a))) - math.log(np.sum(a**2)) - log_mass
        if log_h > 700.0:
            return math.inf
        return math.exp(log_h) + vertical

    def embed(self, grid: Grid) -> GridFunction:
        """Place the sequence on a grid whose box contains its support."""
        if grid.variant is not self.variant:
            raise ValueError("grid variant does not match the sequence")
        vals = self.values()
        out = np.zeros(grid.shape)
        i0, j0 = self.i_index[0], self.j_index[0]
        if not (grid.box.contains(i0, j0) and grid.box.contains(self.m, int(self.j_index[-1]))):
            raise ValueError("grid box does not contain the sequence support")
        r0, c0 = grid.box.offset(i0, j0)
        out[r0:r0 + vals.shape[0], c0:c0 + vals.shape[1]] = vals
        return GridFunction(grid, out)


def _check_mn(m, n):
    if m is not None and m < 2:
        raise ValueError("m must be at least 2")
    if n < 2:
        raise ValueError("n must be at least 2")


def minimizer_first(m: Optional[int], n: int) -> MinimizerSequence:
    """``(1 - |i|/m) w^n_j`` with the logarithmic cutoff profile ``w^n``.

    ``w^n_j = sqrt(j)`` for ``j < n``, ``sqrt(j)(2 log n - log j)/log n`` for
    ``n <= j <= n^2`` and zero beyond.
    """
    _check_mn(m, n)
    j = np.arange(1, n * n + 1)
    jf = j.astype(float)
    w = np.where(j < n, np.sqrt(jf), np.sqrt(jf) * (2.0 * math.log(n) - np.log(jf)) / math.log(n))
    w[-1] = 0.0
    return MinimizerSequence(GridVariant.UNIFORM_2D, None, m, n, j, w)


def minimizer_second(m: Optional[int], n: int, h: float) -> MinimizerSequence:
    """``(1 - |i|/m) e^{jh/2}`` for ``|j| <= n``."""
    _check_mn(m, n)
    if not h > 0:
        raise ValueError("h must be positive")
    j = np.arange(-n, n + 1)
    return MinimizerSequence(GridVariant.TAILORED_2D, h, m, n, j, np.ones(j.size))


def sequence_ratio(seq: MinimizerSequence) -> float:
    return seq.ratio()


def poincare_sweep(variant, h: Optional[float], pairs: Sequence[tuple]) -> dict:
    """Quotients of the minimizer family over ``(m, n)`` pairs against the constant."""
    variant = GridVariant.parse(variant)
    const = poincare_constant(variant, h)
    rows = []
    for m, n in pairs:
        seq = minimizer_first(m, n) if variant is GridVariant.UNIFORM_2D else minimizer_second(m, n, h)
        r = seq.ratio()
        rows.append({"m": m, "n": n, "ratio": r, "gap": r - const, "relative_gap": (r - const) / const})
    return {"variant": variant.value, "h": h, "constant": const, "rows": rows}
