import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from hyplap.geometry import Point2, benchmark_2d, hyperbolic_distance
from hyplap.grid import (
    GridFunction,
    GridSpec,
    GridVariant,
    inner_product,
    make_grid,
    mass_center,
    norm,
    parallel_reduction,
    project,
    read_grid_csv,
    rho,
    sample,
    sample_at_nodes,
    sample_at_xi,
    worker_count,
    write_grid_csv,
)

U2, T2, T3 = GridVariant.UNIFORM_2D, GridVariant.TAILORED_2D, GridVariant.TAILORED_3D


def small(variant, h=0.125, D=3.0):
    return make_grid(GridSpec(variant, h, D))


class TestRho:
    def test_values(self):
        assert rho(1.0) == pytest.approx(1.04219061, abs=1e-8)
        assert rho(1 / 16) == pytest.approx(0.06251018, abs=1e-8)

    def test_small_h_limit(self):
        assert rho(1e-6) / 1e-6 == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize("h", [0.0, -1.0])
    def test_domain(self, h):
        with pytest.raises(ValueError):
            rho(h)


class TestSpec:
    @pytest.mark.parametrize("h,D", [(0.5, 5.0), (0.0, 5.0), (0.1, 2.0), (0.1, 1.5)])
    def test_rejects(self, h, D):
        with pytest.raises(ValueError):
            GridSpec(T2, h, D)

    def test_parse_variant(self):
        assert GridVariant.parse(1) is U2
        assert GridVariant.parse("2") is T2
        assert GridVariant.parse("tailored3d") is T3
        with pytest.raises(ValueError):
            GridVariant.parse("hexagonal")

    def test_truncated_keeps_real_D(self):
        s = GridSpec.truncated(T2, 1 / 16)
        assert s.D == pytest.approx(6 * 16 ** (1 / 6), rel=1e-15)
        assert s.D == pytest.approx(9.52441, abs=1e-5)

    @pytest.mark.parametrize("h,count", [(1 / 16, 22265), (1 / 32, 103435), (1 / 64, 489665)])
    def test_tailored_counts(self, h, count):
        assert GridSpec.truncated(T2, h).node_count == count

    @pytest.mark.parametrize("h,count", [(1 / 16, 46360), (1 / 32, 233585), (1 / 64, 1174268)])
    def test_uniform_counts(self, h, count):
        n = GridSpec.truncated(U2, h).node_count
        assert abs(n - count) / count <= 0.02

    def test_uniform_index_box(self):
        box = GridSpec.truncated(U2, 1 / 16).index_box
        assert box.i_range == (-152, 152)
        assert box.j_range == (1, 151)

    def test_nodes_inside_truncated_domain(self):
        for v in (U2, T2):
            g = make_grid(GridSpec.truncated(v, 1 / 16))
            D = g.spec.D
            assert np.all(np.abs(g.x[0]) <= D)
            assert g.x[1].max() <= D
            if v is T2:
                assert g.x[1].min() >= 1 / D


class TestGrid:
    def test_uniform_first_node(self):
        g = small(U2)
        X1, X2 = g.node_mesh()
        r, c = g.box.offset(0, 1)
        assert (X1[r, c], X2[r, c]) == (0.0, 0.125)

    def test_weights(self):
        g = small(U2)
        np.testing.assert_array_equal(g.row_weights, 1 / (g.j**2 - 0.25))
        t = small(T2)
        np.testing.assert_array_equal(t.row_weights, rho(0.125) ** 2 * np.exp(-t.j * 0.125))
        for grid in (g, t, small(T3)):
            assert np.all(grid.row_weights > 0)

    @pytest.mark.parametrize("variant", [U2, T2, T3])
    def test_cell_area_is_hyperbolic_measure(self, variant):
        g = small(variant)
        for idx in [(0, 1), (3, 2), (-2, 5)] if variant is U2 else [(0, 0), (1, -3), (-4, 2)]:
            if variant is T3:
                idx = idx + (idx[1],)
            cell = g.cell(*idx)
            lo, hi = cell.bounds[-1]
            width = np.prod([b - a for a, b in cell.bounds[:-1]])
            p = 2 if variant is not T3 else 3
            vertical = integrate.quad(lambda x: x**-p, lo, hi, epsabs=0, epsrel=1e-13)[0]
            assert width * vertical == pytest.approx(cell.hyperbolic_area, rel=1e-12)

    def test_mass_center_examples(self):
        assert mass_center(U2, 1.0, 0, 1) == pytest.approx((0.0, 0.75 * math.log(3)), rel=1e-15)
        assert mass_center(U2, 1.0, 0, 1)[1] == pytest.approx(0.823959, abs=1e-6)
        assert mass_center(T2, 1 / 16, 0, 0)[1] == pytest.approx(0.9998372, abs=1e-7)

    @pytest.mark.parametrize("variant", [U2, T2, T3])
    def test_mass_center_property(self, variant, rng):
        h = 0.2
        for _ in range(100):
            if variant is U2:
                idx = (int(rng.integers(-20, 20)), int(rng.integers(1, 40)))
            elif variant is T2:
                idx = (int(rng.integers(-20, 20)), int(rng.integers(-15, 15)))
            else:
                idx = (int(rng.integers(-20, 20)), int(rng.integers(-20, 20)), int(rng.integers(-15, 15)))
            xi = mass_center(variant, h, *idx)
            g = make_grid(GridSpec(variant, h, 4.0))
            cell = g.cell(*idx)
            lo, hi = cell.bounds[-1]
            p = 3 if variant is T3 else 2
            assert lo < xi[-1] < hi
            moment = integrate.quad(lambda x: x ** (1 - p), lo, hi, epsabs=0, epsrel=1e-13)[0]
            mass = integrate.quad(lambda x: x**-p, lo, hi, epsabs=0, epsrel=1e-13)[0]
            assert abs(moment - xi[-1] * mass) <= 1e-12 * moment
            for n in range(len(idx) - 1):
                a, b = cell.bounds[n]
                assert xi[n] == pytest.approx((a + b) / 2, abs=1e-14)

    def test_tailored_vertical_spacing(self):
        g = make_grid(GridSpec.truncated(T2, 1 / 16))
        for a, b in zip(g.x[1][:-1], g.x[1][1:]):
            assert hyperbolic_distance(Point2(0.3, a), Point2(0.3, b)) == pytest.approx(1 / 16, abs=1e-12)


class TestGridFunction:
    def test_inner_product_examples(self):
        g = small(U2)
        e = g.zeros()
        e.values[g.box.offset(0, 1)] = 1.0
        assert inner_product(e, e) == pytest.approx(4 / 3, rel=1e-15)
        assert inner_product(g.zeros(), e) == 0.0
        t = small(T2)
        e = t.zeros()
        e.values[t.box.offset(0, 0)] = 1.0
        assert inner_product(e, e) == pytest.approx(rho(0.125) ** 2, rel=1e-15)

    def test_spec_mismatch(self):
        with pytest.raises(ValueError):
            inner_product(small(T2).zeros(), small(T2, D=4.0).zeros())
        with pytest.raises(ValueError):
            GridFunction(small(T2), np.zeros((2, 2)))

    def test_zero_extension(self):
        g = small(T2)
        v = g.function(np.ones(g.shape))
        assert v.at(0, 0) == 1.0
        assert v.at(10**6, 0) == 0.0
        assert v.at(0, g.box.j_range[1] + 1) == 0.0

    @settings(max_examples=30, deadline=None)
    @given(st.sampled_from([U2, T2, T3]), st.integers(0, 2**31), st.floats(-3, 3), st.floats(-3, 3))
    def test_bilinear_symmetric(self, variant, seed, a, b):
        g = small(variant)
        r = np.random.default_rng(seed)
        u, v, w = (g.function(r.standard_normal(g.shape)) for _ in range(3))
        assert inner_product(u, v) == pytest.approx(inner_product(v, u), rel=1e-13)
        lhs = inner_product(a * u + b * w, v)
        rhs = a * inner_product(u, v) + b * inner_product(w, v)
        assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-10 * norm(u) * norm(v) + 1e-10 * norm(w) * norm(v))
        assert norm(u) >= 0

    def test_parallel_reduction(self, rng, monkeypatch):
        monkeypatch.setenv("HYPLAP_THREADS", "4")
        assert worker_count() == 4
        g = make_grid(GridSpec.truncated(T2, 1 / 16))
        u = g.function(rng.standard_normal(g.shape))
        seq = inner_product(u, u)
        with parallel_reduction():
            par = inner_product(u, u)
            again = inner_product(u, u)
        assert par == pytest.approx(seq, rel=1e-13)
        assert par == again

    def test_bad_thread_env(self, monkeypatch):
        monkeypatch.setenv("HYPLAP_THREADS", "many")
        with pytest.raises(ValueError):
            worker_count()


class TestProjection:
    @pytest.mark.parametrize("variant", [U2, T2, T3])
    def test_constant(self, variant):
        g = small(variant)
        np.testing.assert_allclose(project(lambda *x: 2.5 + 0 * x[0], g).values, 2.5, rtol=1e-14)

    def test_linear_x1_uniform(self):
        g = small(U2)
        p = project(lambda x1, x2: x1, g)
        expected = np.broadcast_to(g.x[0], g.shape)
        np.testing.assert_allclose(p.values, expected, atol=1e-14)
        np.testing.assert_allclose(sample_at_xi(lambda x1, x2: x1, g).values, p.values, atol=1e-14)

    @staticmethod
    def _quadrature_gap(variant, h):
        g = make_grid(GridSpec.truncated(variant, h))
        u0 = benchmark_2d().initial_datum
        coarse = project(u0, g).values
        fine = project(u0, g, order=16).values
        return np.max(np.abs(coarse - fine)) / np.max(np.abs(fine))

    def test_against_refined_quadrature_tailored(self):
        assert self._quadrature_gap(T2, 1 / 16) <= 1e-12

    @pytest.mark.xfail(strict=True, reason="4-point rule on the uniform grid gives 1.2e-10 at h=1/16")
    def test_against_refined_quadrature_uniform(self):
        assert self._quadrature_gap(U2, 1 / 16) <= 1e-12

    def test_uniform_quadrature_order(self):
        gaps = [self._quadrature_gap(U2, h) for h in (1 / 16, 1 / 32)]
        assert gaps[1] <= 1e-12
        assert gaps[0] / gaps[1] > 2**7

    def test_nonfinite(self):
        g = small(U2)
        with np.errstate(divide="ignore", invalid="ignore"), pytest.raises(ValueError):
            project(lambda x1, x2: 1.0 / (x1 - x1), g)

    @pytest.mark.parametrize("variant", [U2, T2])
    def test_contractive(self, variant, rng):
        g = make_grid(GridSpec(variant, 0.25, 4.0))
        for _ in range(50):
            c1 = rng.uniform(-2, 2)
            c2 = float(np.exp(rng.uniform(-0.5, 0.8)))
            rad = rng.uniform(0.3, 0.8) * c2

            def bump(x1, x2, c1=c1, c2=c2, rad=rad):
                r2 = ((x1 - c1) ** 2 + (x2 - c2) ** 2) / rad**2
                out = np.zeros(np.broadcast(x1, x2).shape)
                inside = r2 < 1
                out[inside] = np.exp(-1 / (1 - r2[inside]))
                return out

            def integrand(x2, x1):
                return float(bump(np.array(x1), np.array(x2))) ** 2 / x2**2

            l2sq = integrate.dblquad(integrand, c1 - rad, c1 + rad, c2 - rad, c2 + rad, epsabs=1e-13, epsrel=1e-8)[0]
            assert norm(project(bump, g)) <= math.sqrt(l2sq) + 1e-10

    @pytest.mark.parametrize("variant", [U2, T2])
    def test_sampling_gap_second_order(self, variant):
        u0 = benchmark_2d().initial_datum
        gaps = []
        for h in (1 / 16, 1 / 32):
            g = make_grid(GridSpec.truncated(variant, h))
            gaps.append(norm(project(u0, g) - sample_at_xi(u0, g)))
        assert 4 * 0.85 <= gaps[0] / gaps[1] <= 4 * 1.15

    def test_sample_locations(self):
        g = small(T2)
        X1, X2 = g.node_mesh()
        np.testing.assert_array_equal(sample_at_nodes(lambda a, b: b, g).values, X2)
        with pytest.raises(ValueError):
            sample(lambda a, b: a, g, "corner")


class TestCSV:
    @pytest.mark.parametrize("variant", [U2, T2, T3])
    def test_round_trip(self, variant, tmp_path, rng):
        g = small(variant, h=0.25, D=2.5)
        vals = rng.standard_normal(g.shape)
        path = write_grid_csv(tmp_path / "grid.csv", g, vals)
        data = read_grid_csv(path)
        header = path.read_text().splitlines()[0]
        if variant is not T3:
            assert header == "i,j,x1,x2,weight,xi1,xi2,value"
        np.testing.assert_array_equal(data["value"].reshape(g.shape), vals)
        np.testing.assert_array_equal(data["weight"].reshape(g.shape), np.broadcast_to(g.weights, g.shape))
        np.testing.assert_array_equal(data["xi2"].reshape(g.shape), g.xi_mesh()[1])
        assert data["i"].dtype.kind == "i"

    def test_header_without_values(self, tmp_path):
        path = write_grid_csv(tmp_path / "g.csv", small(U2))
        assert path.read_text().splitlines()[0] == "i,j,x1,x2,weight,xi1,xi2"
