import json

import numpy as np
import pytest

import frozen
from weakdarboux.corpus import get_case, lacunary_field
from weakdarboux.errors import MarginViolation, SweepError
from weakdarboux.fields import Bump, Grid2D, ScalarField, SweepPlan, pair_quadrature, sample_field, stencil_gradient
from weakdarboux.flatten import default_battery
from weakdarboux.geometry import MetricField
from weakdarboux.weakprod import (DarbouxWeight, DistributionValue, PairingConfig, build_divergence_potential,
                                  classical_darboux_residual, clamped_weight, pair_derivative_product,
                                  pair_hessian_form, product_rule_gap, weak_darboux_residual)


@pytest.fixture(scope="module")
def g256():
    return Grid2D.from_bounds(-1, 1, -1, 1, 257)


@pytest.fixture(scope="module")
def unit512():
    return Grid2D.from_bounds(0, 1, 0, 1, 513)


def _cfg(grid, **kw):
    return PairingConfig(SweepPlan.geometric(grid, **kw))


def test_smooth_product_matches_quadrature(g256):
    phi = Bump((0.05, 0.1), 0.5).sample(g256)
    f, w = sample_field("sin(2*x + y)", g256), sample_field("cos(x - y)", g256)
    v = pair_derivative_product(f, w, phi, _cfg(g256))
    assert v.limit == pytest.approx(frozen.SMOOTH_PRODUCT, rel=1e-6)
    assert v.sweep[0][0] > v.sweep[-1][0]


def test_constant_partner_is_integration_by_parts(g256):
    phi = Bump((0.1, 0.05), 0.5).sample(g256)
    px, py = stencil_gradient(phi.values, g256)
    f = sample_field("sin(3*x)*cos(2*y) + x^2", g256)
    one = sample_field("1", g256)
    vx, vy = pair_derivative_product(f, one, phi, _cfg(g256), index=[0, 1])
    # every sweep value equals -∫ f_ε ∂φ exactly, so only the ε -> 0 fit separates the sides
    for v, p in ((vx, px), (vy, py)):
        assert abs(v.limit - product_rule_gap(f, one, ScalarField(g256, p), 0)) <= 2 * v.fit_residual + 1e-14


def test_lacunary_square_oracle(unit512):
    f = lacunary_field(0.6, 3, 5, 1, unit512, order=0)
    phi = Bump((0.5, 0.5), 0.3).sample(unit512)
    px, _ = stencil_gradient(phi.values, unit512)
    cfg = PairingConfig(SweepPlan.geometric(unit512, 16, 4, 6))
    v = pair_derivative_product(f, f, phi, cfg)
    oracle = 0.5 * product_rule_gap(f, f, ScalarField(unit512, px), 0)
    assert abs(v.limit - oracle) <= 2 * v.fit_residual + 1e-14


def test_product_rule_identity_rough(unit512):
    f = lacunary_field(0.6, 3, 5, 1, unit512, order=0)
    w = lacunary_field(0.6, 3, 5, 2, unit512, order=0)
    phi = Bump((0.5, 0.5), 0.3).sample(unit512)
    px, _ = stencil_gradient(phi.values, unit512)
    cfg = PairingConfig(SweepPlan.geometric(unit512, 16, 4, 6))
    a = pair_derivative_product(f, w, phi, cfg)
    b = pair_derivative_product(w, f, phi, cfg)
    gap = a.limit + b.limit - product_rule_gap(f, w, ScalarField(unit512, px), 0)
    assert abs(gap) <= 2 * (a.fit_residual + b.fit_residual)


def test_linearity_in_phi(g256):
    f, w = sample_field("sin(2*x + y)", g256), sample_field("cos(x - y)", g256)
    p1, p2 = Bump((0.1, 0.0), 0.4).sample(g256), Bump((-0.2, 0.1), 0.3).sample(g256)
    cfg = _cfg(g256)
    a = pair_derivative_product(f, w, p1, cfg)
    b = pair_derivative_product(f, w, p2, cfg)
    c = pair_derivative_product(f, w, ScalarField(g256, 2.5 * p1.values + p2.values), cfg)
    assert c.limit == pytest.approx(2.5 * a.limit + b.limit, abs=2 * (a.fit_residual + b.fit_residual + c.fit_residual) + 1e-12)


def test_sweep_rejects_collar_support(square):
    phi = Bump((0.6, 0.0), 0.3).sample(square)  # inside the grid, but within 16h of the edge
    f = sample_field("x", square)
    with pytest.raises(SweepError):
        pair_derivative_product(f, f, phi, _cfg(square))


def test_distribution_value_json_round_trip():
    v = DistributionValue.from_sweep([(0.1, 1.01), (0.07, 1.005), (0.05, 1.0025), (0.035, 1.00125)])
    d = json.loads(json.dumps(v.to_dict()))
    assert set(d) == {"limit", "rate", "fit_residual", "sweep", "warnings"}
    assert DistributionValue.from_dict(d) == v


@pytest.mark.parametrize("b, want", [("1", lambda y1, y2: y1), ("y2", lambda y1, y2: y1 * y2)])
def test_divergence_potential_closed_forms(b, want, rng):
    pot = build_divergence_potential(b)
    x1, x2, y1, y2 = rng.uniform(-0.7, 0.7, (4, 50))
    B1, B2 = pot(x1, x2, y1, y2)
    assert np.allclose(B1, want(y1, y2), atol=1e-14)
    assert np.all(B2 == 0)


def test_divergence_potential_darboux_weight(rng):
    pot = build_divergence_potential("(1 - y1^2 - y2^2)^(-3/2)")
    r = 0.9 * np.sqrt(rng.uniform(0, 1, 100))
    a = rng.uniform(0, 2 * np.pi, 100)
    x1, x2 = rng.uniform(-1, 1, (2, 100))
    assert pot.div_check(x1, x2, r * np.cos(a), r * np.sin(a)) < 1e-8


def test_hessian_form_linear_u(square):
    u = sample_field("0.3*x - 0.2*y + 1", square)
    phi = Bump((0.0, 0.0), 0.5).sample(square)
    v = pair_hessian_form(u, "1 + y1^2", phi, _cfg(square))
    assert abs(v.path_a.limit) < 1e-12 and abs(v.path_b.limit) < 1e-12


def test_hessian_form_smooth_oracle(g256):
    u = sample_field("0.3*sin(x)*cos(y) + 0.25*x^2", g256)
    phi = Bump((0.05, 0.1), 0.5).sample(g256)
    v = pair_hessian_form(u, "1", phi, _cfg(g256))
    assert v.path_a.limit == pytest.approx(frozen.HESSIAN_FORM_SMOOTH, rel=1e-5)
    assert v.path_b.limit == pytest.approx(frozen.HESSIAN_FORM_SMOOTH, rel=1e-4)


def test_hessian_form_lacunary_paths_agree(unit512):
    u = lacunary_field(0.6, 3, 5, 7, unit512, order=1)
    u = ScalarField(unit512, 0.3 * u.values)
    phi = Bump((0.5, 0.5), 0.3).sample(unit512)
    g = MetricField.euclidean(unit512)
    cfg = PairingConfig(SweepPlan.geometric(unit512, 16, 4, 6))
    v = pair_hessian_form(u, DarbouxWeight(g), phi, cfg)
    assert v.discrepancy <= 2 * (v.path_a.fit_residual + v.path_b.fit_residual)


def test_clamped_weight_bounded():
    t = np.linspace(0, 3, 400)
    w = clamped_weight(t, 1.5, 0.05)
    assert np.all(np.isfinite(w)) and w.max() <= (0.025) ** -1.5 + 1e-9
    assert np.allclose(clamped_weight(t[t < 0.9], 1.5, 0.05), (1 - t[t < 0.9]) ** -1.5)


def test_weak_darboux_linear_u(square):
    g = MetricField.euclidean(square)
    res = weak_darboux_residual(g, sample_field("0.4*x + 0.3*y", square), Bump((0, 0), 0.5).sample(square), _cfg(square))
    assert abs(res.lhs.limit) < 1e-12 and abs(res.rhs.limit) < 1e-12 and abs(res.residual) < 1e-12


@pytest.mark.parametrize("n", [129, 257])
def test_weak_darboux_nonsolution(n):
    grid = Grid2D.from_bounds(-1, 1, -1, 1, n)
    g = MetricField.euclidean(grid)
    u = sample_field("0.3*(x^2 + y^2)/2", grid)
    res = weak_darboux_residual(g, u, Bump((0.1, -0.05), 0.5).sample(grid), _cfg(grid))
    assert res.residual == pytest.approx(frozen.NONSOLUTION_RESIDUAL, rel=1e-6)


def test_weak_darboux_sphere_cap_refines():
    case = get_case("sphere_cap")
    bump = default_battery(case.grid(64), count=1)[0]
    out = []
    for n in (64, 128):
        grid = case.grid(n)
        g, u = case.metric_field(grid), case.u_field(grid)
        res = weak_darboux_residual(g, u, bump.sample(grid), _cfg(grid))
        out.append(abs(res.residual) / res.rhs.sweep_norm())
    assert out[1] < 1e-3 and out[1] < out[0]


def test_weak_darboux_margin_violation(square):
    g = MetricField.euclidean(square)
    with pytest.raises(MarginViolation) as info:
        weak_darboux_residual(g, sample_field("0.95*x", square), Bump((0, 0), 0.5).sample(square), _cfg(square))
    assert info.value.location is not None


def test_classical_residual_examples(square):
    g = MetricField.euclidean(square)
    assert np.abs(classical_darboux_residual(g, sample_field("0.2*x - 0.5*y", square)).values).max() < 1e-12
    r = classical_darboux_residual(g, sample_field("(x^2 + y^2)/2", square)).values
    assert np.allclose(r[2:-2, 2:-2], 1.0, atol=1e-9)


def test_classical_residual_sphere_cap_second_order():
    case = get_case("sphere_cap")
    errs = []
    for n in (64, 128):
        grid = case.grid(n)
        errs.append(np.abs(classical_darboux_residual(case.metric_field(grid), case.u_field(grid)).values).max())
    assert errs[0] / errs[1] > 3.0
