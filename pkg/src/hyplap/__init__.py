"""Finite-difference heat solvers on the hyperbolic half-plane and half-space."""
from .geometry import Point2, Point3, benchmark_2d, benchmark_3d, hyperbolic_distance
from .grid import GridFunction, GridSpec, GridVariant, inner_product, make_grid, norm, rho
from .operator import DiscreteLaplacian, assemble_shifted, poincare_constant
from .solver import NotConverged, ThetaSchemeConfig, linear_solve, run_theta_scheme, solve_stationary_3d
from .analysis import EOCTable, ErrorReport, convergence_study, run_benchmark

__version__ = "0.1.0"
