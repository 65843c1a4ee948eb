import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hyplap.analysis import consistency_error
from hyplap.grid import GridSpec, GridVariant, inner_product, make_grid, norm, rho
from hyplap.operator import DiscreteLaplacian, ShiftedOperator, assemble_shifted, poincare_constant

U2, T2, T3 = GridVariant.UNIFORM_2D, GridVariant.TAILORED_2D, GridVariant.TAILORED_3D
VARIANTS = [U2, T2, T3]


def operator(variant, h=0.125, D=3.0):
    return DiscreteLaplacian(make_grid(GridSpec(variant, h, D)))


def interior(grid, rng, width=1):
    """Random grid function vanishing on the outermost ``width`` layers."""
    vals = rng.standard_normal(grid.shape)
    mask = np.zeros(grid.shape, dtype=bool)
    mask[(slice(width, -width),) * grid.dim] = True
    return grid.function(np.where(mask, vals, 0.0))


class TestApply:
    @pytest.mark.parametrize("variant", VARIANTS)
    def test_zero(self, variant):
        L = operator(variant)
        assert np.all(L.apply(L.grid.zeros()).values == 0.0)

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_constants_annihilated_inside(self, variant):
        L = operator(variant)
        out = L.apply(L.grid.function(np.ones(L.grid.shape))).values
        inner = out[(slice(1, -1),) * L.dim]
        assert np.max(np.abs(inner)) <= 1e-12 * np.max(np.abs(L.horizontal))

    def test_uniform_bottom_row(self):
        L = operator(U2)
        out = L.apply(L.grid.function(np.ones(L.grid.shape)))
        assert out.at(0, 1) == pytest.approx(-0.75, abs=1e-15)

    def test_tailored_stencil_by_hand(self, rng):
        h = 0.125
        L = operator(T2, h)
        v = L.grid.function(rng.standard_normal(L.grid.shape))
        out = L.apply(v)
        i, j = 2, -3
        r2 = rho(h) ** 2
        e = math.exp(h)
        expected = (
            math.exp(2 * j * h) * (v.at(i + 1, j) + v.at(i - 1, j) - 2 * v.at(i, j))
            + 2 / (e + 1) * v.at(i, j + 1)
            + 2 * e / (e + 1) * v.at(i, j - 1)
            - 2 * v.at(i, j)
        ) / r2
        assert out.at(i, j) == pytest.approx(expected, rel=1e-13)

    def test_3d_vertical_coefficients(self):
        h = 0.125
        L = operator(T3, h)
        np.testing.assert_allclose(L.north, math.exp(-h) / rho(h) ** 2, rtol=1e-13)
        np.testing.assert_allclose(L.south, math.exp(h) / rho(h) ** 2, rtol=1e-13)

    def test_spec_mismatch(self):
        with pytest.raises(ValueError):
            operator(T2).apply(make_grid(GridSpec(T2, 0.125, 3.5)).zeros())


class TestSymmetry:
    @pytest.mark.parametrize("variant", VARIANTS)
    def test_self_adjoint(self, variant, rng):
        L = operator(variant)
        for _ in range(100):
            u = L.grid.function(rng.standard_normal(L.grid.shape))
            v = L.grid.function(rng.standard_normal(L.grid.shape))
            gap = inner_product(L.apply(u), v) - inner_product(u, L.apply(v))
            assert abs(gap) <= 1e-12 * norm(u) * norm(v)

    @settings(max_examples=25, deadline=None)
    @given(st.sampled_from(VARIANTS), st.integers(0, 2**32 - 1))
    def test_dissipative(self, variant, seed):
        L = operator(variant)
        v = L.grid.function(np.random.default_rng(seed).standard_normal(L.grid.shape))
        assert inner_product(L.apply(v), v) <= 0.0


class TestEnergy:
    def test_examples(self):
        L = operator(U2)
        assert L.energy(L.grid.zeros()) == 0.0
        e = L.grid.zeros()
        e.values[L.grid.box.offset(0, 5)] = 1.0
        assert L.energy(e) == 4.0

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_summation_by_parts(self, variant, rng):
        L = operator(variant)
        for _ in range(100):
            v = interior(L.grid, rng)
            assert abs(inner_product(L.apply(v), v) + L.energy(v)) <= 1e-12 * norm(v) ** 2

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_identity_without_interior_support(self, variant, rng):
        # zero extension makes the identity hold for every box function
        L = operator(variant)
        v = L.grid.function(rng.standard_normal(L.grid.shape))
        assert L.energy(v) == pytest.approx(-inner_product(L.apply(v), v), rel=1e-12)


class TestPoincare:
    def test_constants(self):
        assert poincare_constant(U2) == 0.25
        assert poincare_constant(T2, 0.1) == pytest.approx(0.249534, abs=5e-6)
        assert poincare_constant(T2, 1e-8) == pytest.approx(0.25, abs=1e-12)
        hs = [0.4, 0.2, 0.1, 0.05]
        vals = [poincare_constant(T2, h) for h in hs]
        assert all(a < b < 0.25 for a, b in zip(vals, vals[1:]))
        assert operator(T2, 0.1).poincare_constant() == poincare_constant(T2, 0.1)
        with pytest.raises(ValueError):
            poincare_constant(T3, 0.1)

    @pytest.mark.parametrize("variant", [U2, T2])
    def test_lower_bound(self, variant, rng):
        L = operator(variant, 0.25, 3.0)
        C = L.poincare_constant()
        for _ in range(1000):
            v = interior(L.grid, rng)
            assert L.energy(v) - C * norm(v) ** 2 >= -1e-12 * norm(v) ** 2


class TestShifted:
    def test_identity(self, rng):
        L = operator(T2)
        A = assemble_shifted(L, 0.0, 0.5)
        v = L.grid.function(rng.standard_normal(L.grid.shape))
        np.testing.assert_array_equal(A.apply(v).values, v.values)
        assert np.all(assemble_shifted(L, 0.1, 1.0).apply(L.grid.zeros()).values == 0)

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_coercive(self, variant, rng):
        L = operator(variant)
        A = assemble_shifted(L, 0.01, 0.5)
        for _ in range(20):
            v = L.grid.function(rng.standard_normal(L.grid.shape))
            assert inner_product(A.apply(v), v) >= norm(v) ** 2 * (1 - 1e-14)

    def test_validation(self):
        L = operator(T2)
        with pytest.raises(ValueError, match=r"theta must be in \[0.5, 1\]"):
            assemble_shifted(L, 0.1, 0.3)
        with pytest.raises(ValueError):
            assemble_shifted(L, -0.1, 0.5)
        assert isinstance(assemble_shifted(L, 0.1, 0.5), ShiftedOperator)


@pytest.mark.parametrize("variant", [U2, T2])
def test_consistency_second_order(variant):
    errs = [consistency_error(variant, h) for h in (1 / 16, 1 / 32, 1 / 64)]
    for a, b in zip(errs, errs[1:]):
        assert 4 * 0.85 <= a / b <= 4 * 1.15
