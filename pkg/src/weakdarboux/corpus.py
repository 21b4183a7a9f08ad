"""Closed-form test cases and rough field generators.

Every case is given by expression strings in ``x, y`` so metrics, functions
and immersion oracles can be sampled exactly on any grid and differentiated
symbolically for the load-time self-check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import exprlang
from .errors import ConfigError, GridError
from .fields import Grid2D, ScalarField
from .geometry import MetricField


def _num(v):
    return repr(float(v))


@dataclass(frozen=True)
class CaseSpec:
    """A named test case.

    ``metric`` is an ``(E, F, G)`` triple of expressions.  ``immersion`` is an
    optional closed-form map into R^3 whose pullback is the metric, and
    ``direction`` the unit vector ``e`` with ``u = r·e`` when ``u`` comes from
    that immersion.  ``flat_map`` is the 2D oracle of the flattening of
    ``h = g − du²`` (the projection of ``r`` orthogonal to ``e``).
    """

    name: str
    domain: tuple
    metric: tuple
    u: str | None = None
    immersion: tuple | None = None
    direction: tuple | None = None
    flat_map: tuple | None = None
    flat: bool = False
    darboux_solution: bool = False
    margin: float = 0.05
    description: str = ""

    def grid(self, n, ny=None, margin=2) -> Grid2D:
        xmin, xmax, ymin, ymax = self.domain
        return Grid2D.from_bounds(xmin, xmax, ymin, ymax, n, ny, margin)

    def metric_field(self, grid) -> MetricField:
        return MetricField(grid, *(_sample(e, grid) for e in self.metric))

    def u_field(self, grid) -> ScalarField:
        if self.u is None:
            raise ConfigError(f"case {self.name!r} declares no function u")
        return ScalarField(grid, _sample(self.u, grid))

    def immersion_fields(self, grid):
        if self.immersion is None:
            raise ConfigError(f"case {self.name!r} has no immersion oracle")
        return [ScalarField(grid, _sample(e, grid)) for e in self.immersion]

    def flat_map_fields(self, grid):
        if self.flat_map is None:
            raise ConfigError(f"case {self.name!r} has no flattening oracle")
        return [ScalarField(grid, _sample(e, grid)) for e in self.flat_map]

    def exact_pullback(self, exprs, grid) -> MetricField:
        """Pullback metric of a closed-form map using symbolic derivatives."""
        derivs = []
        for e in exprs:
            ast = exprlang.parse(e)
            derivs.append(tuple(_sample_ast(exprlang.differentiate(ast, v), grid) for v in ("x", "y")))
        comps = [ScalarField(grid, _sample(e, grid)) for e in exprs]
        return MetricField.pullback(grid, comps, derivs)

    def self_check(self, n=48, tol=1e-10):
        """Validate SPD, the immersion oracle and the margin flag; returns a dict of measured defects."""
        grid = self.grid(n)
        g = self.metric_field(grid).check_spd()
        out = {"name": self.name}
        if self.immersion is not None:
            pb = self.exact_pullback(self.immersion, grid)
            d = max(np.abs(pb.E - g.E).max(), np.abs(pb.F - g.F).max(), np.abs(pb.G - g.G).max())
            out["immersion_defect"] = float(d)
            if d > tol:
                raise ConfigError(f"case {self.name!r}: immersion oracle does not pull back to the metric ({d:.3g})")
        if self.u is not None:
            ast = exprlang.parse(self.u)
            ux = _sample_ast(exprlang.differentiate(ast, "x"), grid)
            uy = _sample_ast(exprlang.differentiate(ast, "y"), grid)
            gi11, gi12, gi22 = g.inverse()
            n2 = gi11 * ux * ux + 2 * gi12 * ux * uy + gi22 * uy * uy
            out["max_du_sq"] = float(n2.max())
            if self.darboux_solution and n2.max() > (1 - 2 * self.margin) ** 2:
                raise ConfigError(f"case {self.name!r}: |du|_g^2 = {n2.max():.4g} violates the declared margin")
            if self.flat_map is not None:
                pb = self.exact_pullback(self.flat_map, grid)
                d = max(np.abs(pb.E - (g.E - ux * ux)).max(), np.abs(pb.F - (g.F - ux * uy)).max(),
                        np.abs(pb.G - (g.G - uy * uy)).max())
                out["flat_map_defect"] = float(d)
                if d > tol:
                    raise ConfigError(f"case {self.name!r}: flattening oracle does not pull back to g - du^2 ({d:.3g})")
        return out

    def to_dict(self):
        return {"name": self.name, "domain": list(self.domain), "metric": list(self.metric), "u": self.u,
                "immersion": None if self.immersion is None else list(self.immersion),
                "direction": None if self.direction is None else list(self.direction),
                "flat": self.flat, "darboux_solution": self.darboux_solution, "margin": self.margin,
                "description": self.description}


@lru_cache(maxsize=256)
def _parsed(src):
    return exprlang.parse(src)


def _sample(src, grid):
    return _sample_ast(_parsed(src), grid)


def _sample_ast(ast, grid):
    X, Y = grid.mesh()
    v = exprlang.evaluate(ast, x=X, y=Y)
    return np.broadcast_to(np.asarray(v, dtype=float), grid.dims).copy()


def _dot_expr(vec_exprs, e):
    return " + ".join(f"({_num(c)})*({s})" for c, s in zip(e, vec_exprs) if c != 0) or "0"


def _frame(e):
    """Orthonormal ``a, b`` with ``(a, b, e)`` positively oriented."""
    e = np.asarray(e, dtype=float)
    t = np.array([1.0, 0.0, 0.0]) if abs(e[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    a = t - (t @ e) * e
    a /= np.linalg.norm(a)
    return a, np.cross(e, a)


def _embedded_case(name, domain, immersion, e, margin, description, metric=None):
    e = np.asarray(e, dtype=float)
    e = e / np.linalg.norm(e)
    a, b = _frame(e)
    return CaseSpec(name=name, domain=domain, metric=metric or _pullback_exprs(immersion), u=_dot_expr(immersion, e),
                    immersion=tuple(immersion), direction=tuple(float(v) for v in e),
                    flat_map=(_dot_expr(immersion, a), _dot_expr(immersion, b)), flat=False,
                    darboux_solution=True, margin=margin, description=description)


def _pullback_exprs(immersion):
    """Symbolic first fundamental form of a closed-form immersion."""
    asts = [exprlang.parse(s) for s in immersion]
    dx = [exprlang.differentiate(a, "x") for a in asts]
    dy = [exprlang.differentiate(a, "y") for a in asts]

    def dot(p, q):
        terms = [exprlang.mul(a, b) for a, b in zip(p, q)]
        acc = terms[0]
        for t in terms[1:]:
            acc = exprlang.add(acc, t)
        return exprlang.to_string(acc)

    return dot(dx, dx), dot(dx, dy), dot(dy, dy)


def _catalog():
    s, c = math.sin(0.5), math.cos(0.5)
    rho0, th0 = 0.7, 0.5
    e_sphere = (math.sin(rho0) * math.cos(th0), math.sin(rho0) * math.sin(th0), math.cos(rho0))
    sphere = ("sin(x)*cos(y)", "sin(x)*sin(y)", "cos(x)")
    cases = [
        CaseSpec("euclidean", (0.0, 1.0, 0.0, 1.0), ("1", "0", "1"), u="0", immersion=("x", "y", "0"),
                 direction=(0.0, 0.0, 1.0), flat_map=("x", "y"), flat=True, darboux_solution=True,
                 description="flat unit square"),
        CaseSpec("euclidean_linear_u", (0.0, 1.0, 0.0, 1.0), ("1", "0", "1"), u="0.5*x",
                 immersion=(_num(math.sqrt(0.75)) + "*x", "y", "0.5*x"), direction=(0.0, 0.0, 1.0),
                 flat_map=(_num(math.sqrt(0.75)) + "*x", "y"), flat=True, darboux_solution=True,
                 description="flat metric with a linear Darboux function (tilted plane)"),
        CaseSpec("pullback_flat", (0.0, 1.0, 0.0, 1.0), ("1", "0.2*cos(y)", "1 + 0.04*cos(y)^2"), u="0",
                 immersion=("x + 0.2*sin(y)", "y", "0"), direction=(0.0, 0.0, 1.0),
                 flat_map=("x + 0.2*sin(y)", "y"), flat=True, darboux_solution=True,
                 description="Euclidean metric pulled back by (x + 0.2 sin y, y)"),
        _embedded_case("sphere_cap", (0.2, 1.2, 0.0, 1.0), sphere, e_sphere, 0.05,
                       "unit sphere in geodesic polar coordinates, u = r.e with e toward the patch centre",
                       metric=("1", "0", "sin(x)^2")),
        _embedded_case("tilted_cylinder", (0.3, math.pi - 0.3, 0.0, 1.0), ("cos(x)", "sin(x)", "y"), (0.0, s, c),
                       0.004, "unit cylinder, u = r.e with e tilted by 0.5 from the axis",
                       metric=("1", "0", "1")),
        _embedded_case("graph_surface", (-1.0, 1.0, -1.0, 1.0), ("x", "y", "0.3*sin(x)*sin(y)"), (0.0, 0.0, 1.0),
                       0.05, "graph of w = 0.3 sin x sin y; u = w"),
        CaseSpec("paraboloid_nonsolution", (-1.0, 1.0, -1.0, 1.0), ("1", "0", "1"), u="0.3*(x^2 + y^2)/2",
                 flat=True, darboux_solution=False, description="Euclidean metric with u = 0.3|x|^2/2 (not a solution)"),
        CaseSpec("conformal_bump", (-1.0, 1.0, -1.0, 1.0),
                 ("exp(0.4*exp(-(x^2 + y^2)))", "0", "exp(0.4*exp(-(x^2 + y^2)))"),
                 description="conformally flat metric exp(2s)|dx|^2 with s = 0.2 exp(-|x|^2), curved"),
        CaseSpec("conformal_constant", (0.0, 1.0, 0.0, 1.0), (_num(math.exp(0.6)), "0", _num(math.exp(0.6))),
                 immersion=(_num(math.exp(0.3)) + "*x", _num(math.exp(0.3)) + "*y", "0"), flat=True,
                 description="constant multiple exp(2c) of the Euclidean metric, c = 0.3"),
    ]
    return {c.name: c for c in cases}


_CATALOG = None
_CHECKED = {}


def catalog():
    global _CATALOG
    if _CATALOG is None:
        _CATALOG = _catalog()
    return _CATALOG


def list_cases():
    return sorted(catalog())


def get_case(name: str, check=True) -> CaseSpec:
    """Look up a case by name (hyphens and underscores are interchangeable).

    The case is self-checked on first use.
    """
    key = name.replace("-", "_")
    cases = catalog()
    if key not in cases:
        raise ConfigError(f"unknown case {name!r}; known cases: {', '.join(sorted(cases))}")
    case = cases[key]
    if check and key not in _CHECKED:
        _CHECKED[key] = case.self_check()
    return case


# ---------------------------------------------------------------------------
# rough fields


def lacunary_field(theta, lam, K, seed, grid: Grid2D, order=1) -> ScalarField:
    """Lacunary sum ``Σ_k λ^{−k(order+θ)} sin(λ^k ⟨b_k, x⟩ + c_k)``.

    With ``order=1`` the field is C^{1,θ}; with ``order=0`` it is C^{0,θ}.
    Directions ``b_k`` (unit) and phases ``c_k`` are drawn from ``seed``.

    Raises
    ------
    GridError
        If the top frequency ``λ^K`` is not resolved (``λ^K h >= π``).
    """
    if not 0 < theta < 1:
        raise ValueError("Hölder exponent must lie in (0, 1)")
    if int(lam) != lam or lam < 2:
        raise ValueError("lacunary base must be an integer >= 2")
    h = max(grid.spacing)
    if K > 0 and lam**K * h >= math.pi:
        raise GridError(f"frequency {lam}^{K} exceeds the grid Nyquist limit; refine the grid")
    rng = np.random.default_rng(seed)
    X, Y = grid.mesh()
    out = np.zeros(grid.dims)
    for k in range(1, K + 1):
        ang = rng.uniform(0, 2 * np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        freq = float(lam) ** k
        out += freq ** (-(order + theta)) * np.sin(freq * (math.cos(ang) * X + math.sin(ang) * Y) + phase)
    return ScalarField(grid, out)


def lacunary_terms(theta, lam, K, seed, order=1):
    """``(amplitude, frequency, direction angle, phase)`` per term, as drawn by :func:`lacunary_field`."""
    rng = np.random.default_rng(seed)
    out = []
    for k in range(1, K + 1):
        ang = rng.uniform(0, 2 * np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        freq = float(lam) ** k
        out.append((freq ** (-(order + theta)), freq, ang, phase))
    return out
