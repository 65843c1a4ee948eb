"""Half-space geometry of the hyperbolic plane and space, and the benchmark problems.

Everything here is closed form; the discrete modules use these functions as
ground truth.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

__all__ = [
    "Point2",
    "Point3",
    "SmoothField2",
    "SmoothField3",
    "BenchmarkProblem",
    "StationaryProblem3D",
    "hyperbolic_distance",
    "continuous_laplacian_2d",
    "continuous_laplacian_3d",
    "constant_field_2d",
    "linear_field_2d",
    "constant_field_3d",
    "linear_field_3d",
    "gaussian_field_2d",
    "gaussian_field_3d",
    "benchmark_2d",
    "benchmark_3d",
]


@dataclass(frozen=True)
class Point2:
    """A point of the upper half-plane."""

    x1: float
    x2: float

    def __post_init__(self):
        if not self.x2 > 0:
            raise ValueError(f"x2 must be positive in the half-plane model, got {self.x2}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.x2], dtype=float)


@dataclass(frozen=True)
class Point3:
    """A point of the upper half-space."""

    x1: float
    x2: float
    x3: float

    def __post_init__(self):
        if not self.x3 > 0:
            raise ValueError(f"x3 must be positive in the half-space model, got {self.x3}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.x2, self.x3], dtype=float)


def _coords(p) -> np.ndarray:
    if isinstance(p, (Point2, Point3)):
        return p.as_array()
    return np.asarray(p, dtype=float)


def hyperbolic_distance(p, q):
    """Hyperbolic distance between two points of the half-space model.

    Accepts :class:`Point2`/:class:`Point3` instances or arrays whose last axis
    holds the coordinates (the last coordinate is the height).  Uses the
    half-angle form ``2 asinh(|p - q| / (2 sqrt(p_n q_n)))``, which equals
    ``acosh(1 + |p - q|^2 / (2 p_n q_n))`` but keeps full precision for nearby
    points.
    """
    a = _coords(p)
    b = _coords(q)
    if a.shape[-1] != b.shape[-1]:
        raise ValueError("points must have the same dimension")
    an = a[..., -1]
    bn = b[..., -1]
    if np.any(an <= 0) or np.any(bn <= 0):
        raise ValueError("hyperbolic distance is only defined for points with positive height")
    chord = np.sqrt(np.sum((a - b) ** 2, axis=-1))
    d = 2.0 * np.arcsinh(chord / (2.0 * np.sqrt(an * bn)))
    return float(d) if np.ndim(d) == 0 else d


# --- smooth fields with analytic second derivatives -------------------------

@dataclass(frozen=True)
class SmoothField2:
    """A scalar field on the half-plane with closed-form second partials."""

    value: Callable
    d11: Callable
    d22: Callable


@dataclass(frozen=True)
class SmoothField3:
    """A scalar field on the half-space with closed-form partials.

    ``d3`` (first derivative in the height) enters the drift term of the
    three-dimensional Laplace-Beltrami operator.
    """

    value: Callable
    d11: Callable
    d22: Callable
    d33: Callable
    d3: Callable


def continuous_laplacian_2d(v: SmoothField2, x1, x2):
    """Laplace-Beltrami operator ``x2^2 (v_11 + v_22)`` evaluated analytically."""
    x2 = np.asarray(x2, dtype=float)
    return x2**2 * (v.d11(x1, x2) + v.d22(x1, x2))


def continuous_laplacian_3d(v: SmoothField3, x1, x2, x3):
    """Laplace-Beltrami operator ``x3^2 Δ_e v - x3 v_3`` evaluated analytically."""
    x3 = np.asarray(x3, dtype=float)
    lap_e = v.d11(x1, x2, x3) + v.d22(x1, x2, x3) + v.d33(x1, x2, x3)
    return x3**2 * lap_e - x3 * v.d3(x1, x2, x3)


def _zeros_like(*xs):
    return np.zeros(np.broadcast(*[np.asarray(x, dtype=float) for x in xs]).shape)


def constant_field_2d(c: float = 1.0) -> SmoothField2:
    return SmoothField2(
        value=lambda x1, x2: c + _zeros_like(x1, x2),
        d11=lambda x1, x2: _zeros_like(x1, x2),
        d22=lambda x1, x2: _zeros_like(x1, x2),
    )


def linear_field_2d(a1: float = 1.0, a2: float = 0.0) -> SmoothField2:
    return SmoothField2(
        value=lambda x1, x2: a1 * np.asarray(x1, dtype=float) + a2 * np.asarray(x2, dtype=float),
        d11=lambda x1, x2: _zeros_like(x1, x2),
        d22=lambda x1, x2: _zeros_like(x1, x2),
    )


def constant_field_3d(c: float = 1.0) -> SmoothField3:
    z = lambda x1, x2, x3: _zeros_like(x1, x2, x3)  # noqa: E731
    return SmoothField3(value=lambda x1, x2, x3: c + _zeros_like(x1, x2, x3), d11=z, d22=z, d33=z, d3=z)


def linear_field_3d(a1: float = 1.0) -> SmoothField3:
    z = lambda x1, x2, x3: _zeros_like(x1, x2, x3)  # noqa: E731
    return SmoothField3(
        value=lambda x1, x2, x3: a1 * np.asarray(x1, dtype=float) + _zeros_like(x1, x2, x3),
        d11=z, d22=z, d33=z, d3=z,
    )


def _gauss(x1, x2):
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    return np.exp(-x1**2 - x2**2 - x2**-2)


def gaussian_field_2d() -> SmoothField2:
    """``exp(-x1^2 - x2^2 - x2^-2)``, the benchmark initial datum."""

    def d11(x1, x2):
        x1 = np.asarray(x1, dtype=float)
        return (4.0 * x1**2 - 2.0) * _gauss(x1, x2)

    def d22(x1, x2):
        x2 = np.asarray(x2, dtype=float)
        g2 = -2.0 * x2 + 2.0 * x2**-3
        return (g2**2 - 2.0 - 6.0 * x2**-4) * _gauss(x1, x2)

    return SmoothField2(value=_gauss, d11=d11, d22=d22)


def _gauss3(x1, x2, x3):
    x1, x2, x3 = (np.asarray(x, dtype=float) for x in (x1, x2, x3))
    return np.exp(-x1**2 - x2**2 - x3**2 - x3**-2)


def gaussian_field_3d() -> SmoothField3:
    """``exp(-x1^2 - x2^2 - x3^2 - x3^-2)``, the stationary 3D benchmark."""

    def d11(x1, x2, x3):
        return (4.0 * np.asarray(x1, dtype=float) ** 2 - 2.0) * _gauss3(x1, x2, x3)

    def d22(x1, x2, x3):
        return (4.0 * np.asarray(x2, dtype=float) ** 2 - 2.0) * _gauss3(x1, x2, x3)

    def d3(x1, x2, x3):
        x3 = np.asarray(x3, dtype=float)
        return (-2.0 * x3 + 2.0 * x3**-3) * _gauss3(x1, x2, x3)

    def d33(x1, x2, x3):
        x3 = np.asarray(x3, dtype=float)
        g3 = -2.0 * x3 + 2.0 * x3**-3
        return (g3**2 - 2.0 - 6.0 * x3**-4) * _gauss3(x1, x2, x3)

    return SmoothField3(value=_gauss3, d11=d11, d22=d22, d33=d33, d3=d3)


# --- benchmark problems -------------------------------------------------------

@dataclass(frozen=True)
class BenchmarkProblem:
    """Heat problem ``u_t = Δ_g u + f`` with known exact solution.

    ``source_factors``, when present, writes the source as
    ``time_factor(t) * space_factor(x1, x2)`` so time steppers can sample the
    spatial part once.  ``peak`` returns ``max |u(t, .)|`` over the truncated
    domain of size ``D`` when it is known in closed form.
    """

    exact_solution: Callable
    source: Callable
    initial_datum: Callable
    time_derivative: Optional[Callable] = None
    field: Optional[SmoothField2] = None
    source_factors: Optional[tuple] = None
    peak: Optional[Callable] = None

    def laplacian(self, t, x1, x2):
        """Analytic ``Δ_g u(t, .)``; needs ``field`` (the spatial profile at t=0)."""
        if self.field is None:
            raise ValueError("problem has no analytic field attached")
        return np.exp(-t) * continuous_laplacian_2d(self.field, x1, x2)

    def residual(self, t, x1, x2):
        """``u_t - Δ_g u - f`` at the given points; zero for a consistent problem."""
        if self.time_derivative is None:
            raise ValueError("problem has no time derivative attached")
        return self.time_derivative(t, x1, x2) - self.laplacian(t, x1, x2) - self.source(t, x1, x2)


def _benchmark_source_profile(x1, x2):
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    bracket = (
        2.0 * x2**2 * (2.0 * x1**2 - 1.0)
        + 2.0 * (2.0 * x2**8 - x2**6 - 4.0 * x2**4 - 3.0 * x2**2 + 2.0) / x2**4
        + 1.0
    )
    return -_gauss(x1, x2) * bracket


def benchmark_2d() -> BenchmarkProblem:
    """Exact solution ``exp(-t - x1^2 - x2^2 - x2^-2)`` with its matching source."""

    def exact(t, x1, x2):
        return np.exp(-t) * _gauss(x1, x2)

    def source(t, x1, x2):
        return np.exp(-t) * _benchmark_source_profile(x1, x2)

    def dt(t, x1, x2):
        return -exact(t, x1, x2)

    def peak(t, D=None):
        # maximiser is (0, 1), inside every truncated domain with D > 1
        return float(np.exp(-t - 2.0))

    return BenchmarkProblem(
        exact_solution=exact,
        source=source,
        initial_datum=_gauss,
        time_derivative=dt,
        field=gaussian_field_2d(),
        source_factors=(lambda t: np.exp(-t), _benchmark_source_profile),
        peak=peak,
    )


@dataclass(frozen=True)
class StationaryProblem3D:
    """Stationary problem: exact solution and its Laplace-Beltrami image."""

    exact_solution: Callable
    laplacian: Callable
    field: SmoothField3


def benchmark_3d() -> StationaryProblem3D:
    """``v = exp(-x1^2 - x2^2 - x3^2 - x3^-2)`` with ``Δ_g v`` in closed form.

    Expanding ``x3^2 Δ_e v - x3 v_3`` gives

        Δ_g v = v * [x3^2 (4 x1^2 + 4 x2^2 - 4) + x3^2 (g^2 - 2 - 6 x3^-4) - x3 g],

    with ``g = -2 x3 + 2 x3^-3``.
    """
    field = gaussian_field_3d()

    def lap(x1, x2, x3):
        return continuous_laplacian_3d(field, x1, x2, x3)

    return StationaryProblem3D(exact_solution=field.value, laplacian=lap, field=field)
