import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from frozen import BUMP_INTEGRAL_R1, BUMP_KERNEL_C2, POLY_KERNEL_C2
from weakdarboux.errors import GridError, InversionError, SweepError
from weakdarboux.fields import (Bump, ComplexField, Grid2D, Mollifier, ScalarField, SweepPlan, gradient_array,
                                hessian_arrays, invert_map, mollify, pair_quadrature, richardson_extrapolate,
                                sample_field, stencil_gradient)


def test_sample_field_values():
    g = Grid2D((0.0, 0.0), (1.0, 1.0), (9, 9))
    f = sample_field("x*x+y*y", g)
    assert f.values[1, 2] == 5.0
    assert np.array_equal(sample_field("0", g).values, np.zeros(g.dims))
    assert np.allclose(sample_field("sin(x)^2+cos(x)^2", g).values, 1.0, atol=1e-15, rtol=0)


def test_grid_rejects_bad_spacing():
    with pytest.raises(GridError):
        Grid2D((0, 0), (0.0, 1.0), (9, 9))
    with pytest.raises(GridError):
        Grid2D((0, 0), (1.0, 1.0), (4, 9))


def test_differences_exact_on_low_degree(square):
    X, Y = square.mesh()
    gx, gy = gradient_array(0.3 * X - 1.7 * Y, square)
    assert np.allclose(gx, 0.3, atol=1e-12) and np.allclose(gy, -1.7, atol=1e-12)
    fxx, fxy, fyy = hessian_arrays(0.3 * X - 1.7 * Y, square)
    assert np.abs(fxx).max() < 1e-9 and np.abs(fxy).max() < 1e-9 and np.abs(fyy).max() < 1e-9
    fxx, _, _ = hessian_arrays(X**2 / 2, square)
    assert np.allclose(fxx, 1.0, atol=1e-9)


def test_gradient_second_order():
    errs = []
    for n in (65, 129):
        g = Grid2D.from_bounds(-1, 1, -1, 1, n)
        X, Y = g.mesh()
        gx, _ = gradient_array(np.sin(X) * np.cos(Y), g)
        errs.append(np.abs(gx - np.cos(X) * np.cos(Y)).max())
    assert 3.5 < errs[0] / errs[1] < 4.5


def test_mollify_reproduces_constants_and_linears(square):
    m = Mollifier(0.1)
    X, Y = square.mesh()
    c = mollify(ScalarField(square, np.full(square.dims, 2.5)), m)
    assert np.allclose(c.values, 2.5, atol=1e-13)
    lin = mollify(ScalarField(square, 0.7 * X), m)
    Xe, _ = lin.grid.mesh()
    assert np.allclose(lin.values, 0.7 * Xe, atol=1e-13)


@pytest.mark.parametrize("profile, c2", [("bump", BUMP_KERNEL_C2), ("poly", POLY_KERNEL_C2)])
def test_mollified_quadratic_shift(profile, c2):
    eps = 0.15
    m = Mollifier(eps, profile)
    g = Grid2D.from_bounds(-1, 1, -1, 1, 257)  # eps / h ≈ 19
    X, _ = g.mesh()
    q = mollify(ScalarField(g, X**2), m)
    Xe, _ = q.grid.mesh()
    shift = q.values - Xe**2
    assert np.allclose(shift, shift.mean(), atol=1e-13)
    # discrete kernel moment against the continuous oracle
    assert shift.mean() == pytest.approx(c2 * eps**2, rel=1e-5)


def test_derivative_kernels_commute_with_differences(square):
    X, Y = square.mesh()
    f = ScalarField(square, X**3 - 2 * X * Y**2 + Y)
    fx, fyy = mollify(f, Mollifier(0.12), [(1, 0), (0, 2)])
    Xe, Ye = fx.grid.mesh()
    c2 = Mollifier(0.12).second_moment(square)
    # (f_ε)_x = 3(x² + c2ε²) − 2(y² + c2ε²) for the cubic; (f_ε)_yy = −4x
    assert np.allclose(fx.values, 3 * (Xe**2 + c2) - 2 * (Ye**2 + c2), atol=1e-9)
    assert np.allclose(fyy.values, -4 * Xe, atol=1e-8)


def test_stencil_gradient_summation_by_parts(square, rng):
    a = np.zeros(square.dims)
    b = np.zeros(square.dims)
    a[10:-10, 10:-10] = rng.normal(size=(109, 109))
    b[10:-10, 10:-10] = rng.normal(size=(109, 109))
    ax, _ = stencil_gradient(a, square)
    bx, _ = stencil_gradient(b, square)
    assert np.sum(ax * b) == pytest.approx(-np.sum(a * bx), rel=1e-12, abs=1e-9)


def test_mollifier_rejects_unresolved_radius(square):
    with pytest.raises(SweepError):
        SweepPlan((0.05, 0.03, 0.02, 0.01)).validate(square)
    with pytest.raises(SweepError):
        Mollifier(-1.0)


def test_bump_values_and_integral():
    b = Bump((0.0, 0.0), 1.0)
    assert b.values(np.array(0.0), np.array(0.0)) == 1.0
    assert b.values(np.array(1.0), np.array(0.0)) == 0.0
    assert b.values(np.array(1.3), np.array(0.2)) == 0.0
    g = Grid2D.from_bounds(-1.2, 1.2, -1.2, 1.2, 481)
    one = ScalarField(g, np.ones(g.dims))
    assert pair_quadrature(one, b.sample(g)) == pytest.approx(BUMP_INTEGRAL_R1, rel=1e-8)


def test_pairing_of_unit_mass_bump(square):
    r = 0.4
    b = Bump((0.125, -0.25), r)  # centre on a node so the discrete sum is symmetric
    phi = b.sample(square)
    phi = phi.with_values(phi.values / (BUMP_INTEGRAL_R1 * r * r))
    one = ScalarField(square, np.ones(square.dims))
    assert pair_quadrature(one, phi) == pytest.approx(1.0, rel=1e-6)
    X, Y = square.mesh()
    odd = ScalarField(square, (X - 0.125) ** 3 + np.sin(Y + 0.25))
    assert abs(pair_quadrature(odd, phi)) < 1e-12
    assert pair_quadrature(ScalarField(square, np.zeros(square.dims)), phi) == 0.0


def test_bump_outside_grid_raises(square):
    with pytest.raises(GridError):
        Bump((0.9, 0.0), 0.3).sample(square)


def test_invert_linear_maps(rng):
    g = Grid2D.from_bounds(-1, 1, -1, 1, 33)
    X, Y = g.mesh()
    q = rng.uniform(-0.8, 0.8, 20) + 1j * rng.uniform(-0.8, 0.8, 20)
    ident = ComplexField(g, X + 1j * Y)
    assert np.abs(invert_map(ident, q) - q).max() < 1e-12
    double = ComplexField(g, 2 * (X + 1j * Y))
    assert np.abs(invert_map(double, q) - q / 2).max() < 1e-12


def test_invert_round_trip(rng):
    g = Grid2D.from_bounds(-1, 1, -1, 1, 129)
    X, Y = g.mesh()
    psi = ComplexField(g, X + 0.1 * np.sin(Y) + 1j * (Y + 0.1 * np.sin(X)))
    from weakdarboux.fields import MapInterpolant

    mi = MapInterpolant(psi)
    p = rng.uniform(-0.7, 0.7, 50) + 1j * rng.uniform(-0.7, 0.7, 50)
    q = mi(p.real, p.imag)
    x, y = mi.invert(q)
    assert np.abs(mi(x, y) - q).max() < 1e-10
    with pytest.raises(InversionError):
        mi.invert(np.array([5.0 + 5.0j]))


def test_extrapolation_constant_sweep():
    ex = richardson_extrapolate([(0.4, 2.0), (0.2, 2.0), (0.1, 2.0), (0.05, 2.0)])
    assert ex.limit == 2.0 and "rate-indeterminate" in ex.warnings


def test_extrapolation_linear_model():
    ex = richardson_extrapolate([(e, 1.5 + e) for e in (0.4, 0.2, 0.1, 0.05)])
    assert ex.limit == pytest.approx(1.5, abs=1e-9)
    assert ex.rate == pytest.approx(1.0, abs=1e-6)


def test_extrapolation_recovers_slow_rate():
    eps = (0.2, 0.1, 0.05, 0.025)
    ex = richardson_extrapolate([(e, -0.3 + 3 * e**0.4) for e in eps])
    assert ex.limit == pytest.approx(-0.3, abs=1e-6)
    assert ex.rate == pytest.approx(0.4, abs=1e-4)


@settings(max_examples=40, deadline=None)
@given(st.floats(-5, 5), st.floats(0.1, 5), st.floats(0.5, 3.0))
def test_extrapolation_exact_power_models(L, A, r):
    eps = (0.16, 0.08, 0.04, 0.02, 0.01)
    ex = richardson_extrapolate([(e, L + A * e**r) for e in eps])
    assert ex.limit == pytest.approx(L, abs=1e-6 * (1 + abs(L) + A))
