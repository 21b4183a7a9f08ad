"""Distributional pairings of Hölder-rough data.

Every pairing is computed the same way: mollify the rough inputs at a
decreasing list of radii ε, integrate the resulting smooth expression
against the test function, and extrapolate ε → 0.  Derivatives of mollified
fields are taken by convolving with differentiated kernels, so ``∂_i(f_ε)``
is the exact derivative of the smoothed grid function.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np
from scipy.interpolate import RectBivariateSpline

from . import exprlang
from .errors import MarginViolation, SweepError
from .fields import (Grid2D, ScalarField, SweepPlan, gradient_array, gradient_high_order, hessian_arrays, mollify,
                     richardson_extrapolate, stencil_gradient, support_touches_boundary,
                     trapezoid_weights)
from .geometry import MetricField, christoffel, covariant_hessian, gaussian_curvature_classical


@dataclass
class DistributionValue:
    """Extrapolated limit of a distributional pairing with its ε-sweep evidence."""

    limit: float
    rate: float
    sweep: list
    fit_residual: float
    warnings: list = field(default_factory=list)

    @classmethod
    def from_sweep(cls, sweep, plan=None):
        sweep = sorted(((float(e), float(v)) for e, v in sweep), key=lambda t: -t[0])
        ex = richardson_extrapolate(sweep, plan)
        return cls(ex.limit, ex.rate, sweep, ex.fit_residual, list(ex.warnings))

    def sweep_norm(self):
        return max(abs(v) for _, v in self.sweep)

    def to_dict(self):
        return {"limit": self.limit, "rate": self.rate, "fit_residual": self.fit_residual,
                "sweep": [[e, v] for e, v in self.sweep], "warnings": list(self.warnings)}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["limit"]), float(d["rate"]), [tuple(p) for p in d["sweep"]],
                   float(d["fit_residual"]), list(d.get("warnings", [])))


def combine(values, coeffs, plan=None) -> DistributionValue:
    """Linear combination of pairings sharing one sweep, re-extrapolated."""
    eps = [e for e, _ in values[0].sweep]
    for v in values[1:]:
        if not np.allclose([e for e, _ in v.sweep], eps):
            raise SweepError("cannot combine pairings computed on different sweeps")
    total = np.zeros(len(eps))
    for v, c in zip(values, coeffs):
        total += c * np.array([x for _, x in v.sweep])
    return DistributionValue.from_sweep(list(zip(eps, total)), plan)


@dataclass(frozen=True)
class PairingConfig:
    """Sweep plan plus pairing options.

    ``path`` selects how Hessian-determinant forms are evaluated:
    ``"mollify-u"``, ``"divergence-potential"`` or ``"both"``.
    ``margin`` is the δ of the hypothesis ``|du|_g <= 1 - 2δ``.
    """

    plan: SweepPlan
    quad_tol: float = 1e-10
    path: str = "both"
    margin: float = 0.05

    def __post_init__(self):
        if self.path not in ("mollify-u", "divergence-potential", "both"):
            raise ValueError(f"unknown evaluation path {self.path!r}")
        if not 0 < self.margin < 0.5:
            raise ValueError("margin must lie in (0, 1/2)")


def _prepare(grid, cfg, phi):
    cfg.plan.validate(grid)
    mols = cfg.plan.mollifiers()
    inner = mols[0].eroded_grid(grid)
    i0, j0 = inner.offset_in(grid)
    outside = phi.values.copy()
    outside[i0 : i0 + inner.dims[0], j0 : j0 + inner.dims[1]] = 0
    if np.any(outside != 0) or support_touches_boundary(phi.crop(inner).values):
        raise SweepError("test function support reaches into the mollification collar")
    return mols


def _pairing_sum(grid, integrand):
    return float(np.sum(integrand * trapezoid_weights(grid)))


# ---------------------------------------------------------------------------
# derivative times function


def pair_derivative_product(f: ScalarField, w: ScalarField, phi: ScalarField, cfg: PairingConfig, index=0):
    """``∂_i f · w [φ]`` as the ε → 0 limit of ``∫ ∂_i(f_ε) w_ε φ dx``.

    ``index`` is 0 (x) or 1 (y), or a sequence of them; a sequence returns a
    list of :class:`DistributionValue`.
    """
    grid = f.grid
    if not (grid.same_as(w.grid) and grid.same_as(phi.grid)):
        raise SweepError("pairing inputs must share a grid")
    indices = [index] if np.ndim(index) == 0 else list(index)
    mols = _prepare(grid, cfg, phi)
    sweeps = {i: [] for i in indices}
    for m in mols:
        orders = [(1, 0) if i == 0 else (0, 1) for i in indices]
        dfs = mollify(f, m, orders)
        w_eps = mollify(w, m)
        ph = phi.crop(w_eps.grid).values
        for i, df in zip(indices, dfs):
            sweeps[i].append((m.epsilon, _pairing_sum(df.grid, df.values * w_eps.values * ph)))
    out = [DistributionValue.from_sweep(sweeps[i], cfg.plan) for i in indices]
    return out[0] if np.ndim(index) == 0 else out


def pair_plain(f: ScalarField, w: ScalarField, phi: ScalarField, cfg: PairingConfig) -> DistributionValue:
    """``∫ f_ε w_ε φ`` swept over ε (no derivative; the limit is the plain integral)."""
    mols = _prepare(f.grid, cfg, phi)
    sweep = []
    for m in mols:
        fe, we = mollify(f, m), mollify(w, m)
        sweep.append((m.epsilon, _pairing_sum(fe.grid, fe.values * we.values * phi.crop(fe.grid).values)))
    return DistributionValue.from_sweep(sweep, cfg.plan)


# ---------------------------------------------------------------------------
# 2-forms b(x, ∇u) d∂1u ∧ d∂2u


def clamped_weight(t, power, margin):
    """``(1 − t)^(−power)`` for ``t <= 1 − margin``, smoothly saturated beyond.

    Past the threshold ``t`` is replaced by a C^2 saturating ramp that never
    exceeds ``1 − margin/2``, so the weight stays bounded.
    """
    t = np.asarray(t, dtype=float)
    t0 = 1.0 - margin
    wdt = 0.5 * margin
    s = np.where(t <= t0, t, t0 + wdt * np.tanh((t - t0) / wdt))
    return (1.0 - s) ** (-power)


class ExprWeight:
    """Weight ``b(x1, x2, y1, y2)`` given as an expression string or tree."""

    variables = ("x1", "x2", "y1", "y2")

    def __init__(self, expr):
        self.expr = exprlang.parse(expr, self.variables) if isinstance(expr, str) else expr

    def __call__(self, x1, x2, y1, y2):
        x1, x2, y1, y2 = np.broadcast_arrays(x1, x2, y1, y2)
        return np.asarray(exprlang.evaluate(self.expr, x1=x1, x2=x2, y1=y1, y2=y2), dtype=float)


class DarbouxWeight:
    """``b(x, y) = det g(x)^{-1} b̃(g^ij(x) y_i y_j)`` with ``b̃(t) = (1 − t)^{-3/2}`` clamped near 1.

    The x-dependence is interpolated from the sampled metric.
    """

    def __init__(self, g: MetricField, power=1.5, margin=0.05):
        self.power = power
        self.margin = margin
        grid = g.grid
        gi11, gi12, gi22 = g.inverse()
        self._splines = [RectBivariateSpline(grid.x, grid.y, a, kx=3, ky=3, s=0)
                         for a in (gi11, gi12, gi22, 1.0 / g.det())]

    def __call__(self, x1, x2, y1, y2):
        x1, x2, y1, y2 = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (x1, x2, y1, y2)))
        return self.at(x1, x2)(y1, y2)

    def at(self, x1, x2):
        """``y ↦ b(x, y)`` with the metric evaluated once at ``x``."""
        gi11, gi12, gi22, idet = (s.ev(x1, x2) for s in self._splines)

        def b(y1, y2):
            t = gi11 * y1 * y1 + 2 * gi12 * y1 * y2 + gi22 * y2 * y2
            return idet * clamped_weight(t, self.power, self.margin)

        return b


@lru_cache(maxsize=8)
def _gauss_nodes(n):
    s, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (s + 1.0), 0.5 * w


class DivergencePotential:
    """``B = (∫_0^{y1} b(x, t, y2) dt, 0)`` so that ``div_y B = b``.

    The inner integral uses cached Gauss–Legendre nodes on ``[0, y1]``.
    """

    def __init__(self, b: Callable, nodes=48, x_step=1e-5):
        self.b = b
        self.nodes = nodes
        self.x_step = x_step

    def B1(self, x1, x2, y1, y2):
        s, w = _gauss_nodes(self.nodes)
        x1, x2, y1, y2 = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (x1, x2, y1, y2)))
        acc = np.zeros(x1.shape)
        if hasattr(self.b, "at"):
            bx = self.b.at(x1, x2)
        else:
            def bx(t1, t2):
                return self.b(x1, x2, t1, t2)
        for sk, wk in zip(s, w):
            acc += wk * bx(y1 * sk, y2)
        return y1 * acc

    def __call__(self, x1, x2, y1, y2):
        B1 = self.B1(x1, x2, y1, y2)
        return B1, np.zeros_like(B1)

    def dB1_dx(self, i, x1, x2, y1, y2):
        """Partial derivative in ``x_i`` at fixed ``y`` (fourth order central difference)."""
        d = self.x_step
        x1 = np.asarray(x1, dtype=float)
        x2 = np.asarray(x2, dtype=float)

        def at(k):
            return self.B1(x1 + k * d, x2, y1, y2) if i == 0 else self.B1(x1, x2 + k * d, y1, y2)

        return (8 * (at(1) - at(-1)) - (at(2) - at(-2))) / (12 * d)

    def div_check(self, x1, x2, y1, y2, step=1e-3):
        """Max ``|∂_{y1} B1 − b|`` by Richardson-extrapolated central differences."""
        def cd(hh):
            return (self.B1(x1, x2, y1 + hh, y2) - self.B1(x1, x2, y1 - hh, y2)) / (2 * hh)

        d1, d2, d3 = cd(step), cd(step / 2), cd(step / 4)
        r1 = (4 * d2 - d1) / 3
        r2 = (4 * d3 - d2) / 3
        deriv = (16 * r2 - r1) / 15
        return float(np.max(np.abs(deriv - self.b(x1, x2, y1, y2))))


def build_divergence_potential(b, nodes=48) -> DivergencePotential:
    """Vector potential of a weight ``b(x, y)`` (callable, expression string or tree)."""
    if isinstance(b, (str, exprlang.Expr)):
        b = ExprWeight(b)
    return DivergencePotential(b, nodes=nodes)


@dataclass
class HessianFormValue:
    path_a: DistributionValue | None
    path_b: DistributionValue | None

    @property
    def discrepancy(self):
        if self.path_a is None or self.path_b is None:
            return float("nan")
        return abs(self.path_a.limit - self.path_b.limit)

    def to_dict(self):
        return {"path_a": None if self.path_a is None else self.path_a.to_dict(),
                "path_b": None if self.path_b is None else self.path_b.to_dict(),
                "discrepancy": self.discrepancy}


def _as_weight(b):
    if isinstance(b, (str, exprlang.Expr)):
        return ExprWeight(b)
    return b


def pair_hessian_form(u: ScalarField, b, phi: ScalarField, cfg: PairingConfig, phi_grad=None) -> HessianFormValue:
    """``b(x, ∇u) d∂1u ∧ d∂2u [φ]`` for ``u`` in C^{1,θ}.

    Path A mollifies ``u`` and integrates ``b(x, ∇u_ε) det D²u_ε φ``.  Path B
    writes the form as ``dβ − b_i2 dx^i ∧ d∂2u`` with ``β = B1(x, ∇u) d∂2u`` and
    evaluates each piece as a derivative-times-function pairing::

        −∫ B1 ∂2(∂2u) ∂1φ + ∫ B1 ∂1(∂2u) ∂2φ − ∫ φ ∂x1B1 ∂2(∂2u) + ∫ φ ∂x2B1 ∂1(∂2u)
    """
    b = _as_weight(b)
    grid = u.grid
    path_a = path_b = None
    if cfg.path in ("mollify-u", "both"):
        mols = _prepare(grid, cfg, phi)
        sweep = []
        for m in mols:
            ux, uy, uxx, uxy, uyy = mollify(u, m, [(1, 0), (0, 1), (2, 0), (1, 1), (0, 2)])
            eg = ux.grid
            X1, X2 = eg.mesh()
            integrand = b(X1, X2, ux.values, uy.values) * (uxx.values * uyy.values - uxy.values**2)
            sweep.append((m.epsilon, _pairing_sum(eg, integrand * phi.crop(eg).values)))
        path_a = DistributionValue.from_sweep(sweep, cfg.plan)
    if cfg.path in ("divergence-potential", "both"):
        pot = build_divergence_potential(b) if not isinstance(b, DivergencePotential) else b
        # high order: the rough top frequencies of u are close to the grid scale
        u1, u2 = gradient_high_order(u.values, grid)
        X1, X2 = grid.mesh()
        f = ScalarField(grid, u2)
        B1 = ScalarField(grid, pot.B1(X1, X2, u1, u2))
        Bx1 = ScalarField(grid, pot.dB1_dx(0, X1, X2, u1, u2))
        Bx2 = ScalarField(grid, pot.dB1_dx(1, X1, X2, u1, u2))
        if phi_grad is None:
            p1, p2 = stencil_gradient(phi.values, grid)
            phi_grad = (ScalarField(grid, p1), ScalarField(grid, p2))
        terms = [
            pair_derivative_product(f, B1, phi_grad[0], cfg, index=1),
            pair_derivative_product(f, B1, phi_grad[1], cfg, index=0),
            pair_derivative_product(f, Bx1, phi, cfg, index=1),
            pair_derivative_product(f, Bx2, phi, cfg, index=0),
        ]
        path_b = combine(terms, [-1.0, 1.0, -1.0, 1.0], cfg.plan)
    return HessianFormValue(path_a, path_b)


# ---------------------------------------------------------------------------
# Darboux residuals


@dataclass
class DarbouxResidual:
    lhs: DistributionValue
    rhs: DistributionValue

    @property
    def residual(self):
        return self.lhs.limit - self.rhs.limit

    @property
    def uncertainty(self):
        return self.lhs.fit_residual + self.rhs.fit_residual

    def to_dict(self):
        return {"lhs": self.lhs.to_dict(), "rhs": self.rhs.to_dict(), "residual": self.residual,
                "uncertainty": self.uncertainty}


def check_darboux_margin(g: MetricField, u: ScalarField, margin):
    ux, uy = gradient_array(u.values, u.grid)
    gi11, gi12, gi22 = g.inverse()
    n2 = gi11 * ux * ux + 2 * gi12 * ux * uy + gi22 * uy * uy
    bound = (1.0 - 2.0 * margin) ** 2
    k = np.unravel_index(int(np.argmax(n2)), n2.shape)
    if n2[k] > bound:
        raise MarginViolation(
            f"|du|_g^2 = {n2[k]:.6g} exceeds (1-2δ)^2 = {bound:.6g} at node {tuple(int(v) for v in k)}",
            location=g.grid.coords(int(k[0]), int(k[1])))
    return n2


def weak_darboux_residual(g: MetricField, u: ScalarField, phi: ScalarField, cfg: PairingConfig) -> DarbouxResidual:
    """Both sides of the weak Darboux equation paired with ``φ``.

    ``lhs = det(∇²_g u) (1 − |du|²_g)^{-3/2} dV_g [φ]`` and
    ``rhs = K_g (1 − |du|²_g)^{-1/2} dV_g [φ]``, each as an ε-sweep over
    mollifications of ``u`` (the metric is smooth and is not mollified).
    """
    g.check_spd()
    grid = g.grid
    if not grid.same_as(u.grid):
        raise SweepError("metric and u must share a grid")
    check_darboux_margin(g, u, cfg.margin)
    mols = _prepare(grid, cfg, phi)
    gamma = christoffel(g)
    K = gaussian_curvature_classical(g).values
    detg = g.det()
    lhs, rhs = [], []
    for m in mols:
        ux, uy, uxx, uxy, uyy = mollify(u, m, [(1, 0), (0, 1), (2, 0), (1, 1), (0, 2)])
        eg = ux.grid
        i0, j0 = eg.offset_in(grid)
        sl = (slice(i0, i0 + eg.dims[0]), slice(j0, j0 + eg.dims[1]))
        gc = g.crop(eg)
        gam = type(gamma)(eg, {k: v[sl] for k, v in gamma.slots.items()})
        H11, H12, H22 = covariant_hessian(gam, ux.values, uy.values, uxx.values, uxy.values, uyy.values)
        gi11, gi12, gi22 = gc.inverse()
        n2 = gi11 * ux.values**2 + 2 * gi12 * ux.values * uy.values + gi22 * uy.values**2
        sq = np.sqrt(detg[sl])
        ph = phi.crop(eg).values
        lhs_int = (H11 * H22 - H12**2) / detg[sl] * clamped_weight(n2, 1.5, cfg.margin) * sq
        rhs_int = K[sl] * clamped_weight(n2, 0.5, cfg.margin) * sq
        lhs.append((m.epsilon, _pairing_sum(eg, lhs_int * ph)))
        rhs.append((m.epsilon, _pairing_sum(eg, rhs_int * ph)))
    return DarbouxResidual(DistributionValue.from_sweep(lhs, cfg.plan), DistributionValue.from_sweep(rhs, cfg.plan))


def classical_darboux_residual(g: MetricField, u: ScalarField) -> ScalarField:
    """Pointwise ``det ∇²_g u − K_g (1 − |du|²_g)``."""
    g.check_spd()
    gamma = christoffel(g)
    grid = u.grid
    ux, uy = gradient_array(u.values, grid)
    uxx, uxy, uyy = hessian_arrays(u.values, grid)
    H11, H12, H22 = covariant_hessian(gamma, ux, uy, uxx, uxy, uyy)
    gi11, gi12, gi22 = g.inverse()
    n2 = gi11 * ux * ux + 2 * gi12 * ux * uy + gi22 * uy * uy
    K = gaussian_curvature_classical(g).values
    return ScalarField(grid, (H11 * H22 - H12**2) / g.det() - K * (1.0 - n2))


def product_rule_gap(f: ScalarField, w: ScalarField, phi_grad: ScalarField, index: int):
    """Plain quadrature of ``−∫ f w ∂_iφ`` (the oracle side of the product rule)."""
    return -_pairing_sum(f.grid, f.values * w.values * phi_grad.values)


def threshold_table(theta_pairs, lam, terms_list, grid: Grid2D, phi: ScalarField, cfg: PairingConfig, seed=0):
    """Sweep magnitudes for paired lacunary fields as the top frequency grows.

    Returns rows ``(θ1, θ2, K, max |sweep value|)``; bounded rows for
    ``θ1 + θ2 > 1`` and growing rows below are the expected picture.  This is
    reported, never asserted.
    """
    from .corpus import lacunary_field

    rows = []
    for t1, t2 in theta_pairs:
        for K in terms_list:
            f = lacunary_field(t1, lam, K, seed, grid, order=0)
            w = lacunary_field(t2, lam, K, seed + 1, grid, order=0)
            dv = pair_derivative_product(f, w, phi, cfg, index=0)
            rows.append((t1, t2, K, dv.sweep_norm()))
    return rows
