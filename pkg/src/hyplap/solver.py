"""Linear solves and the theta-scheme time integrator.

Implicit systems ``(alpha I - beta Δ_h) x = b`` are solved by conjugate
gradients in the grid's weighted inner product.  The default preconditioner is
the exact inverse obtained by fast diagonalization: an orthonormal sine
transform (DST-I) diagonalizes the horizontal second difference, which leaves
one tridiagonal system per horizontal mode in the vertical direction.  CG then
converges in one or two iterations and the residual is always rechecked
against the matrix-free operator.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np
import scipy.fft

from .grid import Grid, GridFunction, GridSpec, GridVariant, make_grid, sample, weighted_dot, write_grid_csv
from .operator import DiscreteLaplacian, ShiftedOperator, assemble_shifted

__all__ = [
    "NotConverged",
    "LinearSolveReport",
    "FastDiagonalizationSolver",
    "linear_solve",
    "ThetaSchemeConfig",
    "ThetaStepper",
    "ThetaRunResult",
    "theta_step",
    "run_theta_scheme",
    "solve_stationary_3d",
    "write_checkpoint",
]

log = logging.getLogger(__name__)


class NotConverged(RuntimeError):
    """Raised when an iterative solve exhausts its iteration budget."""

    def __init__(self, iterations: int, residual: float, message: str = ""):
        self.iterations = iterations
        self.residual = residual
        super().__init__(message or f"no convergence after {iterations} iterations (relative residual {residual:.3e})")


@dataclass(frozen=True)
class LinearSolveReport:
    iterations: int
    final_relative_residual: float


class FastDiagonalizationSolver:
    """Exact direct solver for ``(alpha I - beta Δ_h) x = b``.

    Parameters
    ----------
    laplacian : DiscreteLaplacian
    alpha, beta : float
        Shift parameters; the system must be nonsingular.

    Notes
    -----
    With ``S`` the orthonormal DST-I along a horizontal axis of length ``n``,
    ``S T S = diag(-4 sin^2(p pi / (2(n+1))))`` for the zero-Dirichlet second
    difference ``T``.  The Thomas elimination factors are computed once.
    """

    def __init__(self, laplacian: DiscreteLaplacian, alpha: float, beta: float):
        self.laplacian = laplacian
        self.alpha = float(alpha)
        self.beta = float(beta)
        L = laplacian
        dim = L.dim
        shape = L.grid.shape
        lam = [self._eigs(n) for n in shape[1:]]
        if dim == 2:
            mode = lam[0][None, :]
        else:
            mode = (lam[0][:, None] + lam[1][None, :])[None]
        col = (-1,) + (1,) * (dim - 1)
        # stencil centre once the horizontal -2 parts are absorbed into the eigenvalues
        vc = (L.center + 2.0 * (dim - 1) * L.horizontal).reshape(col)
        diag = self.alpha - self.beta * (L.horizontal.reshape(col) * mode + vc)
        self._upper = -self.beta * L.north
        self._lower = -self.beta * L.south
        m = shape[0]
        dinv = np.empty(diag.shape)
        cp = np.empty(diag.shape)
        dinv[0] = 1.0 / diag[0]
        cp[0] = self._upper[0] * dinv[0]
        for r in range(1, m):
            dinv[r] = 1.0 / (diag[r] - self._lower[r] * cp[r - 1])
            cp[r] = self._upper[r] * dinv[r]
        if not np.all(np.isfinite(dinv)):
            raise ZeroDivisionError("shifted operator is singular")
        self._dinv = dinv
        self._cp = cp
        self._axes = tuple(range(1, dim))

    @staticmethod
    def _eigs(n: int) -> np.ndarray:
        p = np.arange(1, n + 1)
        return -4.0 * np.sin(p * np.pi / (2.0 * (n + 1))) ** 2

    def solve_array(self, b: np.ndarray) -> np.ndarray:
        bh = scipy.fft.dstn(b, type=1, axes=self._axes, norm="ortho")
        dinv, cp, lower = self._dinv, self._cp, self._lower
        y = np.empty_like(bh)
        y[0] = bh[0] * dinv[0]
        for r in range(1, y.shape[0]):
            y[r] = (bh[r] - lower[r] * y[r - 1]) * dinv[r]
        for r in range(y.shape[0] - 2, -1, -1):
            y[r] -= cp[r] * y[r + 1]
        return scipy.fft.idstn(y, type=1, axes=self._axes, norm="ortho")

    def solve(self, b: GridFunction) -> GridFunction:
        return GridFunction(b.grid, self.solve_array(b.values))

    __call__ = solve_array


def _fast_preconditioner(A: ShiftedOperator) -> Callable:
    return FastDiagonalizationSolver(A.laplacian, A.alpha, A.beta).solve_array


def linear_solve(
    A: ShiftedOperator,
    b: GridFunction,
    tol: float = 1e-11,
    max_iter: Optional[int] = None,
    x0: Optional[GridFunction] = None,
    preconditioner: Union[str, None, Callable] = "fast",
) -> tuple:
    """Preconditioned conjugate gradients in the weighted inner product.

    Parameters
    ----------
    A : ShiftedOperator
        Self-adjoint positive definite with respect to the grid inner product.
    b : GridFunction
    tol : float
        Target for ``||b - A x|| / ||b||`` in the weighted norm.
    max_iter : int, optional
        Defaults to ``20 * sqrt(n)``.
    x0 : GridFunction, optional
    preconditioner : {"fast", None} or callable
        ``"fast"`` uses :class:`FastDiagonalizationSolver`, ``None`` runs plain
        CG, and a callable maps a residual array to a preconditioned array.

    Returns
    -------
    x : GridFunction
    report : LinearSolveReport
        The reported residual is recomputed from ``b - A x`` at exit.

    Raises
    ------
    NotConverged
    """
    grid = b.grid
    w = grid.row_weights
    if max_iter is None:
        max_iter = int(20 * math.sqrt(grid.size))

    def dot(u, v):
        return weighted_dot(u, v, w)

    bv = b.values
    bnorm = math.sqrt(dot(bv, bv))
    if bnorm == 0.0:
        return GridFunction(grid, np.zeros(grid.shape)), LinearSolveReport(0, 0.0)
    if preconditioner == "fast":
        prec = _fast_preconditioner(A)
    elif preconditioner is None:
        prec = None
    elif callable(preconditioner):
        prec = preconditioner
    else:
        raise ValueError(f"unknown preconditioner {preconditioner!r}")

    x = np.zeros(grid.shape) if x0 is None else x0.values.copy()
    r = bv - A.apply_array(x)
    rel = math.sqrt(dot(r, r)) / bnorm
    it = 0
    while rel > tol:
        if it >= max_iter:
            raise NotConverged(it, rel)
        # (re)start the Krylov recurrence from the true residual
        z = prec(r) if prec else r
        p = z.copy()
        rz = dot(r, z)
        while it < max_iter:
            Ap = A.apply_array(p)
            pAp = dot(p, Ap)
            if pAp <= 0.0:
                raise NotConverged(it, rel, "operator is not positive definite")
            step = rz / pAp
            x += step * p
            r -= step * Ap
            it += 1
            if math.sqrt(dot(r, r)) / bnorm <= tol:
                break
            z = prec(r) if prec else r
            rz_new = dot(r, z)
            p = z + (rz_new / rz) * p
            rz = rz_new
        r = bv - A.apply_array(x)
        rel = math.sqrt(dot(r, r)) / bnorm
    return GridFunction(grid, x), LinearSolveReport(it, rel)


# --- theta scheme -------------------------------------------------------------

@dataclass(frozen=True)
class ThetaSchemeConfig:
    """Parameters of the theta-scheme.

    ``tau`` defaults to ``h`` for Crank-Nicolson and ``h^2`` otherwise; resolve
    it with :meth:`time_step`.  Without ``exact_final_time`` the scheme takes
    the largest number of whole steps ``k`` with ``k tau <= T``; with it, a
    final shortened step lands exactly on ``T``.
    """

    theta: float = 0.5
    T: float = 1.0
    tau: Optional[float] = None
    linear_tol: float = 1e-11
    max_iter: Optional[int] = None
    exact_final_time: bool = False
    preconditioner: Union[str, None, Callable] = "fast"

    def __post_init__(self):
        if not 0.5 <= self.theta <= 1.0:
            raise ValueError("theta must be in [0.5, 1]")
        if not self.T > 0:
            raise ValueError(f"T must be positive, got {self.T}")
        if self.tau is not None and not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if not self.linear_tol > 0:
            raise ValueError("linear_tol must be positive")
        if self.max_iter is not None and self.max_iter < 1:
            raise ValueError("max_iter must be a positive integer")

    def time_step(self, h: float) -> float:
        if self.tau is not None:
            return self.tau
        return h if self.theta == 0.5 else h * h

    def schedule(self, h: float) -> list:
        """Step sizes from ``t = 0`` up to the final time."""
        tau = self.time_step(h)
        ratio = self.T / tau
        n = int(math.floor(ratio + 1e-9 * max(1.0, ratio)))
        steps = [tau] * n
        rest = self.T - n * tau
        if self.exact_final_time and rest > 1e-12 * self.T:
            steps.append(rest)
        return steps


class ThetaStepper:
    """Advance grid functions by one theta-scheme step.

    Solvers for each distinct step size are built lazily and cached.
    """

    def __init__(self, L: DiscreteLaplacian, cfg: ThetaSchemeConfig):
        self.L = L
        self.cfg = cfg
        self._ops = {}
        self.last_report: Optional[LinearSolveReport] = None

    def _operator(self, tau: float):
        if tau not in self._ops:
            A = assemble_shifted(self.L, tau, self.cfg.theta)
            prec = self.cfg.preconditioner
            if prec == "fast":
                prec = _fast_preconditioner(A)
            self._ops[tau] = (A, prec)
        return self._ops[tau]

    def step(self, U: GridFunction, t: float, tau: float, f_values: Optional[np.ndarray] = None) -> GridFunction:
        """One step from time ``t``; ``f_values`` is the source at ``t + theta tau``."""
        if not np.all(np.isfinite(U.values)):
            raise ValueError("U contains non-finite values")
        theta = self.cfg.theta
        A, prec = self._operator(tau)
        rhs = U.values.copy()
        if theta < 1.0:
            rhs += tau * (1.0 - theta) * self.L.apply_array(U.values)
        if f_values is not None:
            rhs += tau * f_values
        x, rep = linear_solve(
            A, GridFunction(U.grid, rhs), tol=self.cfg.linear_tol, max_iter=self.cfg.max_iter,
            x0=None, preconditioner=prec,
        )
        self.last_report = rep
        return x


def theta_step(U: GridFunction, k: int, cfg: ThetaSchemeConfig, L: DiscreteLaplacian,
               f_sampler: Optional[Callable] = None) -> GridFunction:
    """Step ``k -> k+1`` of the theta-scheme with the uniform step of ``cfg``.

    ``f_sampler(t)`` returns the source as a grid-shaped array at time ``t``;
    it is called at ``(k + theta) tau``.
    """
    tau = cfg.time_step(L.spec.h)
    f_values = None if f_sampler is None else np.asarray(f_sampler((k + cfg.theta) * tau))
    return ThetaStepper(L, cfg).step(U, k * tau, tau, f_values)


@dataclass
class ThetaRunResult:
    solution: GridFunction
    steps: int
    final_time: float
    wall_time_s: float
    max_iterations: int
    max_residual: float
    history: list = field(default_factory=list)


def _source_sampler(grid: Grid, problem, source, at: str) -> Optional[Callable]:
    factors = getattr(problem, "source_factors", None) if problem is not None else None
    if factors is not None:
        time_factor, profile = factors
        prof = sample(profile, grid, at).values
        return lambda t: time_factor(t) * prof
    if source is None:
        return None
    pts = grid.xi_mesh() if at == "xi" else grid.node_mesh()
    return lambda t: np.broadcast_to(source(t, *pts), grid.shape)


def run_theta_scheme(
    spec: GridSpec,
    cfg: ThetaSchemeConfig,
    problem=None,
    *,
    initial_datum: Optional[Callable] = None,
    source: Optional[Callable] = None,
    sample_at: str = "xi",
    callback: Optional[Callable] = None,
    checkpoint_every: Optional[int] = None,
    checkpoint_dir=None,
    full_output: bool = False,
):
    """Integrate the heat equation with source from ``t = 0`` to ``cfg.T``.

    Parameters
    ----------
    spec : GridSpec
    cfg : ThetaSchemeConfig
    problem : BenchmarkProblem, optional
        Supplies the initial datum and source; overridden by the explicit
        ``initial_datum`` / ``source`` arguments.  ``source=None`` without a
        problem means ``f = 0``.
    sample_at : {"xi", "node"}
        Where the initial datum and source are sampled.
    callback : callable, optional
        Called as ``callback(k, t, U)`` after initialization (``k = 0``) and
        after every step.
    checkpoint_every, checkpoint_dir
        Write a checkpoint every that many steps into the directory.
    full_output : bool
        Return a :class:`ThetaRunResult` instead of the bare solution.

    Notes
    -----
    The second-order error bound assumes a source with ``∂_t f``, ``∂²_t f``
    and ``∂_t Δ_g f`` continuous in time with values in L².  The benchmark
    satisfies this; for other sources it is the caller's responsibility.
    """
    grid = make_grid(spec)
    L = DiscreteLaplacian(grid)
    if initial_datum is None:
        if problem is None:
            raise ValueError("need an initial datum or a problem")
        initial_datum = problem.initial_datum
    if source is None and problem is not None and getattr(problem, "source_factors", None) is None:
        source = problem.source
    f_sampler = _source_sampler(grid, problem if source is None else None, source, sample_at)
    U = sample(lambda *x: initial_datum(*x), grid, sample_at)
    stepper = ThetaStepper(L, cfg)
    t = 0.0
    max_it, max_res = 0, 0.0
    history = []
    if callback:
        callback(0, t, U)
    t0 = time.perf_counter()
    for k, tau in enumerate(cfg.schedule(spec.h)):
        fv = None if f_sampler is None else f_sampler(t + cfg.theta * tau)
        U = stepper.step(U, t, tau, fv)
        t += tau
        rep = stepper.last_report
        max_it = max(max_it, rep.iterations)
        max_res = max(max_res, rep.final_relative_residual)
        if full_output:
            history.append(rep)
        if callback:
            callback(k + 1, t, U)
        if checkpoint_every and checkpoint_dir and (k + 1) % checkpoint_every == 0:
            write_checkpoint(Path(checkpoint_dir) / f"checkpoint_{k + 1:06d}", U, k + 1, t, rep.final_relative_residual)
    wall = time.perf_counter() - t0
    log.debug("theta-scheme %s h=%g theta=%g: %d steps in %.2fs", spec.variant.value, spec.h, cfg.theta, len(history), wall)
    if not full_output:
        return U
    return ThetaRunResult(U, len(cfg.schedule(spec.h)), t, wall, max_it, max_res, history)


def solve_stationary_3d(
    spec: GridSpec,
    rhs: GridFunction,
    tol: float = 1e-11,
    max_iter: Optional[int] = None,
    preconditioner: Union[str, None, Callable] = "fast",
    full_output: bool = False,
):
    """Solve ``Δ_h x = rhs`` with homogeneous Dirichlet data.

    The operator is negative definite, so CG runs on ``-Δ_h x = -rhs``.
    """
    if rhs.grid.spec.key != spec.key:
        raise ValueError("rhs does not live on the given grid")
    if spec.variant is not GridVariant.TAILORED_3D:
        raise ValueError("3D supports variant 2 only")
    L = DiscreteLaplacian(rhs.grid)
    A = ShiftedOperator(L, 0.0, 1.0)
    x, rep = linear_solve(A, -rhs, tol=tol, max_iter=max_iter, preconditioner=preconditioner)
    return (x, rep) if full_output else x


def write_checkpoint(prefix, U: GridFunction, step: int, time_: float, residual: float) -> tuple:
    """Write ``<prefix>.csv`` (grid columns plus ``value``) and ``<prefix>.json``."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    csv_path = write_grid_csv(prefix.with_suffix(".csv"), U.grid, U.values)
    json_path = prefix.with_suffix(".json")
    json_path.write_text(json.dumps({"step": int(step), "time": float(time_), "residual": float(residual)}))
    return csv_path, json_path
