import numpy as np
import pytest

import frozen
from weakdarboux.beltrami import build_chart
from weakdarboux.corpus import get_case
from weakdarboux.errors import HypothesisViolation, NotFlatError
from weakdarboux.fields import Bump, ComplexField, Grid2D, ScalarField, sample_field, trapezoid_weights
from weakdarboux.flatten import (ImmersionField, curvature_battery, curvature_chart_independence, darboux_from_immersion,
                                 default_battery, distributional_curvature, flatten_metric, harmonic_conjugate,
                                 holomorphic_primitive, immersion_from_darboux, procrustes, verify_immersion)
from weakdarboux.geometry import MetricField, perturbed_metric


def _rect(n, bounds=(-1, 1, -1, 1)):
    return Grid2D.from_bounds(*bounds, n)


def _aligned(imm, oracle):
    return procrustes(imm.points(), np.stack([c.values.ravel() for c in oracle], axis=-1))[2]


# harmonic conjugates and primitives


@pytest.mark.parametrize("sigma, conj", [("x", "y"), ("x^2 - y^2", "2*x*y")])
def test_harmonic_conjugate_closed_forms(sigma, conj):
    g = _rect(65)
    s, diag = harmonic_conjugate(sample_field(sigma, g), base=(0.0, 0.0))
    want = sample_field(conj, g).values
    assert np.abs(s.values - want).max() < 1e-12
    assert diag["loop_defect"] < 1e-12


def test_harmonic_conjugate_cubic_second_order():
    errs = []
    for n in (33, 65):
        g = _rect(n, (1.0, 2.0, 0.5, 1.5))
        s, _ = harmonic_conjugate(sample_field("x^3 - 3*x*y^2", g), base=(1.5, 1.0))
        want = sample_field("3*x^2*y - y^3", g).values.copy()
        want -= want[n // 2, n // 2]
        errs.append(np.abs(s.values - want).max())
    assert errs[1] < 2e-6 * 9.0 and errs[0] / errs[1] > 3.5  # |Im z³| <= 9 here


def test_harmonic_conjugate_tree_method_agrees():
    g = _rect(65, (1.0, 2.0, 0.5, 1.5))
    sig = sample_field("x^3 - 3*x*y^2", g)
    a, _ = harmonic_conjugate(sig, base=(1.5, 1.0), method="tree")
    b, _ = harmonic_conjugate(sig, base=(1.5, 1.0))
    # both are O(h²); only the error distribution differs
    assert np.abs(a.values - b.values).max() < 1e-5 * np.abs(b.values).max()


def test_harmonic_gate_rejects_curved():
    with pytest.raises(NotFlatError):
        harmonic_conjugate(sample_field("x^2 + y^2", _rect(65)))


def test_primitive_of_zero():
    g = _rect(33)
    X, Y = g.mesh()
    F, diag = holomorphic_primitive(ComplexField(g, np.zeros(g.dims, complex)), base=(0.25, -0.5))
    assert np.abs(F.values - ((X + 1j * Y) - (0.25 - 0.5j))).max() < 1e-13


def test_primitive_of_z():
    errs = []
    for n in (33, 65):
        g = _rect(n)
        X, Y = g.mesh()
        z = X + 1j * Y
        F, _ = holomorphic_primitive(ComplexField(g, z), base=(0.0, 0.0))
        errs.append(np.abs(F.values - (np.exp(z) - 1)).max())
    assert errs[1] < 1e-6 and errs[0] / errs[1] > 3.5


def test_primitive_derivative_random_polynomial(rng):
    errs = []
    c = rng.normal(scale=0.3, size=4) + 1j * rng.normal(scale=0.3, size=4)
    for n in (65, 129):
        g = _rect(n)
        X, Y = g.mesh()
        z = X + 1j * Y
        f = np.polyval(c, z)
        F, _ = holomorphic_primitive(ComplexField(g, f))
        dF = (F.values[2:, 1:-1] - F.values[:-2, 1:-1]) / (2 * g.hx)
        errs.append(np.abs(dF - np.exp(f[1:-1, 1:-1])).max())
    assert errs[0] / errs[1] > 3.5


def test_primitive_rejects_nonholomorphic():
    g = _rect(33)
    X, Y = g.mesh()
    with pytest.raises(NotFlatError):
        holomorphic_primitive(ComplexField(g, X - 1j * Y))


# alignment and verification


def test_procrustes_recovers_rigid_motion(rng):
    A = rng.normal(size=(50, 3))
    t = np.array([0.3, -1.0, 2.0])
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    R = q * np.sign(np.linalg.det(q))
    Rh, th, dev = procrustes(A, A @ R.T + t)
    assert dev < 1e-12 and np.allclose(Rh, R) and np.allclose(th, t)


def test_verify_identity_and_scaled_plane(square):
    X, Y = square.mesh()
    g = MetricField.euclidean(square)
    ident = ImmersionField(square, [ScalarField(square, X), ScalarField(square, Y), ScalarField(square, 0 * X)])
    rep, _ = verify_immersion(ident, g)
    assert rep["max"] < 1e-13 and rep["pass"]
    scaled = ImmersionField(square, [ScalarField(square, 2 * X), ScalarField(square, Y), ScalarField(square, 0 * X)])
    rep, field = verify_immersion(scaled, g)
    assert rep["max"] == pytest.approx(3.0, abs=1e-12) and not rep["pass"]


def test_verify_sphere_cap_second_order():
    case = get_case("sphere_cap")
    errs = []
    for n in (64, 128):
        grid = case.grid(n)
        r = ImmersionField(grid, case.immersion_fields(grid))
        errs.append(verify_immersion(r, case.metric_field(grid))[0]["max"])
    assert errs[0] / errs[1] > 3.5


# distributional curvature


def test_curvature_euclidean_is_zero(square):
    chart = build_chart(MetricField.euclidean(square))
    assert abs(distributional_curvature(Bump((0.1, 0.0), 0.4), chart).limit) < 1e-12


def test_curvature_flat_in_disguise():
    case = get_case("pullback_flat")
    chart = build_chart(case.metric_field(case.grid(128)))
    flat, rows = curvature_battery(chart)
    assert flat and len(rows) == 5


def test_curvature_sphere_matches_classical():
    case = get_case("sphere_cap")
    chart = build_chart(case.metric_field(case.grid(128)))
    dv = distributional_curvature(Bump((0.7, 0.5), 0.3), chart)
    # the pairing carries a factor 2 relative to ∫ φ K dV
    assert dv.limit / frozen.SPHERE_AREA_PAIRING == pytest.approx(2.0, rel=1e-3)


def test_chart_independence_identical_and_flat(square):
    h = MetricField.euclidean(square)
    c1 = build_chart(h)
    rep = curvature_chart_independence(Bump((0.0, 0.1), 0.4), [c1, c1])
    assert rep["max_difference"] == 0
    c2 = build_chart(h, pad_fraction=0.75, collar_fraction=0.3)
    rep = curvature_chart_independence(Bump((0.0, 0.1), 0.4), [c1, c2])
    assert all(abs(v.limit) < 1e-12 for v in rep["values"])


def test_chart_independence_sphere_cap():
    case = get_case("sphere_cap")
    h = case.metric_field(case.grid(128))
    charts = [build_chart(h), build_chart(h, pad_fraction=0.75, collar_fraction=0.3)]
    for b in default_battery(h.grid, 3):
        rep = curvature_chart_independence(b, charts)
        assert rep["max_difference"] <= rep["tolerance"]


def test_dirichlet_pairing_conformal_invariance():
    # ∫∇(φ∘f)·∇(w∘f) = ∫∇φ·∇w for holomorphic f(z) = z + 0.1 z²
    src = _rect(401, (-0.6, 0.6, -0.6, 0.6))
    X, Y = src.mesh()
    z = X + 1j * Y
    fz = z + 0.1 * z * z
    d = 1 + 0.2 * z
    p, w = Bump((0.05, 0.0), 0.35), Bump((-0.05, 0.05), 0.3)

    def pulled_grad(b):
        gx, gy = b.gradient(fz.real, fz.imag)
        # ∇(b∘f) = Df^T ∇b with Df = [[Re d, −Im d], [Im d, Re d]]
        return d.real * gx + d.imag * gy, -d.imag * gx + d.real * gy

    a1, a2 = pulled_grad(p)
    b1, b2 = pulled_grad(w)
    lhs = np.sum((a1 * b1 + a2 * b2) * trapezoid_weights(src))
    img = _rect(401, (-0.7, 0.7, -0.7, 0.7))
    U, V = img.mesh()
    g1, g2 = p.gradient(U, V)
    k1, k2 = w.gradient(U, V)
    rhs = np.sum((g1 * k1 + g2 * k2) * trapezoid_weights(img))
    assert lhs == pytest.approx(rhs, rel=1e-6)


# pipelines


def test_flatten_euclidean():
    g = _rect(257)
    imm = flatten_metric(MetricField.euclidean(g), check_battery=False)
    assert imm.pullback_residual["max"] < 1e-8


def test_flatten_pullback_flat_aligns():
    case = get_case("pullback_flat")
    devs = []
    for n in (64, 128):
        grid = case.grid(n)
        imm = flatten_metric(case.metric_field(grid))
        devs.append(_aligned(imm, case.flat_map_fields(grid)))
    assert devs[1] < devs[0] and devs[1] < 1e-3


def test_flatten_tilted_cylinder_refines():
    case = get_case("tilted_cylinder")
    res = []
    for n in (128, 192):
        grid = case.grid(n)
        h = perturbed_metric(case.metric_field(grid), case.u_field(grid))
        res.append(flatten_metric(h).pullback_residual["relative"])
    assert res[0] / res[1] > 2.0


def test_flatten_rejects_sphere():
    case = get_case("sphere_cap")
    with pytest.raises(NotFlatError):
        flatten_metric(case.metric_field(case.grid(64)))


def test_immersion_linear_u():
    case = get_case("euclidean_linear_u")
    grid = case.grid(128)
    r = immersion_from_darboux(case.metric_field(grid), case.u_field(grid))
    assert r.pullback_residual["max"] < 1e-8
    phi = ImmersionField(grid, r.components[:2])
    pb = phi.pullback()
    assert np.allclose(pb.E[2:-2, 2:-2], 0.75, atol=1e-8) and np.allclose(pb.G[2:-2, 2:-2], 1.0, atol=1e-8)


def test_immersion_sphere_cap_matches_embedding():
    case = get_case("sphere_cap")
    devs = []
    for n in (64, 128):
        grid = case.grid(n)
        r = immersion_from_darboux(case.metric_field(grid), case.u_field(grid))
        devs.append(_aligned(r, case.immersion_fields(grid)))
    assert devs[1] < devs[0] / 2


def test_immersion_rejects_nonsolution():
    case = get_case("paraboloid_nonsolution")
    grid = case.grid(96)
    with pytest.raises(HypothesisViolation) as info:
        immersion_from_darboux(case.metric_field(grid), case.u_field(grid))
    assert info.value.code == "not-darboux"


def test_darboux_from_flat_plane():
    case = get_case("euclidean")
    grid = case.grid(96)
    rep = darboux_from_immersion(ImmersionField(grid, case.immersion_fields(grid)), (0, 0, 1), case.metric_field(grid))
    assert np.abs(rep["u"].values).max() == 0
    assert rep["max_weak_relative"] == 0 and rep["max_curvature_relative"] < 1e-6


def test_darboux_from_sphere_cap_refines():
    case = get_case("sphere_cap")
    out = []
    for n in (64, 128):
        grid = case.grid(n)
        r = ImmersionField(grid, case.immersion_fields(grid))
        out.append(darboux_from_immersion(r, case.direction, case.metric_field(grid)))
    assert out[1]["max_weak_relative"] < out[0]["max_weak_relative"]
    assert out[1]["max_curvature_relative"] < out[0]["max_curvature_relative"]
    assert out[1]["max_weak_relative"] < 1e-3


def test_darboux_from_non_immersion():
    case = get_case("sphere_cap")
    grid = case.grid(64)
    X, Y = grid.mesh()
    r = ImmersionField(grid, [ScalarField(grid, 2 * X), ScalarField(grid, Y), ScalarField(grid, 0 * X)])
    with pytest.raises(HypothesisViolation) as info:
        darboux_from_immersion(r, (0, 0, 1), case.metric_field(grid))
    assert info.value.code == "not-immersion"


def test_round_trip():
    case = get_case("tilted_cylinder")
    grid = case.grid(128)
    g = case.metric_field(grid)
    rep = darboux_from_immersion(ImmersionField(grid, case.immersion_fields(grid)), case.direction, g,
                                 margin=case.margin)
    r = immersion_from_darboux(g, rep["u"], margin=case.margin)
    assert verify_immersion(r, g)[0]["pass"]
