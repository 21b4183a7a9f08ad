"""Distributional curvature, flatness and isometric immersions.

The curvature of a metric with conformal chart ``(ψ, σ)`` is paired with a
test function through ``2 ∫ ∇(φ∘ψ⁻¹) · ∇σ``, which only needs first
derivatives of ``σ``.  A flat metric has harmonic ``σ``; completing it to
``f = σ + iσ*`` and integrating ``F' = e^f`` gives the flat immersion
``F∘ψ``.  Adding a Darboux function ``u`` as third component gives an
isometric immersion of ``g = h + du²``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import RectBivariateSpline
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.linalg import spsolve
from scipy.sparse.csgraph import dijkstra

from .beltrami import ConformalChart, build_chart
from .errors import GridError, NotFlatError, SweepError
from .fields import (Bump, ComplexField, Grid2D, ScalarField, SweepPlan, gradient_array, gradient_high_order,
                     hessian_arrays, mollify, stencil_gradient, trapezoid_weights)
from .geometry import MetricField, check_margin, perturbed_metric
from .weakprod import DistributionValue, PairingConfig, weak_darboux_residual

HARMONIC_TOL = 1e-2
CURVATURE_TOL = 1e-3
LOOP_TOL = 1e-6


@dataclass(eq=False)
class ImmersionField:
    """Sampled map into R^2 or R^3 with its pullback residual against a target metric."""

    grid: Grid2D
    components: list
    pullback_residual: dict = field(default_factory=dict)
    details: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.components) not in (2, 3):
            raise ValueError("an immersion has 2 or 3 components")
        for c in self.components:
            if not c.grid.same_as(self.grid):
                raise GridError("immersion components must share the grid")

    def points(self):
        return np.stack([c.values.ravel() for c in self.components], axis=-1)

    def pullback(self, exact=None) -> MetricField:
        return MetricField.pullback(self.grid, self.components, exact)


# ---------------------------------------------------------------------------
# test functions through a chart


def _as_bump(phi):
    if isinstance(phi, Bump):
        return phi
    raise TypeError("expected a Bump test function")


def pushforward_test_function(phi: Bump, chart: ConformalChart):
    """Values and gradient of ``φ∘ψ⁻¹`` on the chart's image grid.

    The gradient is the eighth order stencil gradient of the nodal values,
    the discrete adjoint of the kernel derivatives applied to ``σ``.  (The
    exact chain-rule gradient is more accurate pointwise but breaks the
    discrete integration by parts when ``φ∘ψ⁻¹`` is steep on the image grid.)
    """
    phi = _as_bump(phi)
    phi.check_inside(chart.metric.grid)
    px, py = chart.preimage
    vals = phi.values(px, py)
    wx, wy = stencil_gradient(vals, chart.image_grid)
    support = vals != 0
    if np.any(support & ~chart.mask):
        raise GridError("test function support escapes the chart image")
    return vals, wx, wy


def image_sweep_plan(chart: ConformalChart, largest_cells=16.0, smallest_cells=4.0, count=5, **kw) -> SweepPlan:
    return SweepPlan.geometric(chart.image_grid, largest_cells, smallest_cells, count, **kw)


def distributional_curvature(phi: Bump, chart: ConformalChart, cfg: PairingConfig | None = None) -> DistributionValue:
    """``K_h dV_h[φ]`` as the ε → 0 limit of ``2 ∫ ∇(φ∘ψ⁻¹) · ∇σ_ε dw``.

    ``σ_ε`` is the mollification of ``σ`` on the image grid; ``cfg.plan``
    radii are in image coordinates (by default 16 to 4 image cells).
    """
    plan = cfg.plan if cfg is not None else image_sweep_plan(chart)
    img = chart.image_grid
    plan.validate(img)
    vals, wx, wy = pushforward_test_function(phi, chart)
    sweep = []
    for m in plan.mollifiers():
        sx, sy = mollify(chart.sigma, m, [(1, 0), (0, 1)])
        eg = sx.grid
        i0, j0 = eg.offset_in(img)
        sl = (slice(i0, i0 + eg.dims[0]), slice(j0, j0 + eg.dims[1]))
        outside = vals.copy()
        outside[sl] = 0
        if np.any(outside != 0):
            raise SweepError("test function support reaches into the mollification collar of the image grid")
        integrand = wx[sl] * sx.values + wy[sl] * sy.values
        sweep.append((m.epsilon, 2.0 * float(np.sum(integrand * trapezoid_weights(eg)))))
    return DistributionValue.from_sweep(sweep, plan)


def curvature_scale(phi: Bump, chart: ConformalChart) -> float:
    """``2 ∫ |∇(φ∘ψ⁻¹)| |∇σ|``: the natural size of the pairing, for relative tolerances.

    Floored at ``1e-9 · 2 ∫ |∇(φ∘ψ⁻¹)| / L`` (``L`` the image diagonal) so a
    flat metric, whose ``σ`` is roundoff, keeps a meaningful scale.
    """
    vals, wx, wy = pushforward_test_function(phi, chart)
    img = chart.image_grid
    sx, sy = gradient_array(chart.sigma.values, img)
    wts = trapezoid_weights(img)
    gnorm = np.hypot(wx, wy)
    xmin, xmax, ymin, ymax = img.bounds
    floor = 1e-9 * 2.0 * float(np.sum(gnorm * wts)) / math.hypot(xmax - xmin, ymax - ymin)
    return max(2.0 * float(np.sum(gnorm * np.hypot(sx, sy) * wts)), floor)


def classical_curvature_pairing(phi: Bump, h: MetricField, K: ScalarField) -> float:
    """``∫ φ K_h dV_h`` by quadrature on the metric grid."""
    X, Y = h.grid.mesh()
    return float(np.sum(phi.values(X, Y) * K.values * np.sqrt(h.det()) * trapezoid_weights(h.grid)))


def curvature_chart_independence(phi: Bump, charts, cfg: PairingConfig | None = None):
    """Pairwise differences of the curvature pairing across charts.

    Returns a dict with the values, the max pairwise difference and the
    matching tolerance ``2 × (fit_residual_a + fit_residual_b)``.
    """
    if len(charts) < 2:
        raise ValueError("need at least two charts")
    vals = [distributional_curvature(phi, c, cfg) for c in charts]
    worst, tol = None, None
    for a in range(len(vals)):
        for b in range(a + 1, len(vals)):
            d = abs(vals[a].limit - vals[b].limit)
            t = 2.0 * (vals[a].fit_residual + vals[b].fit_residual)
            if worst is None or d - t > worst - tol:
                worst, tol = d, t
    return {"values": vals, "max_difference": worst, "tolerance": tol}


def default_battery(grid: Grid2D, count=5, inset_cells=20):
    """Bumps at distinct centres and radii inside the rectangle shrunk by ``inset_cells`` cells.

    The inset keeps every support clear of the largest default mollification
    radius (16 cells) plus the grid margin.
    """
    xmin, xmax, ymin, ymax = grid.bounds
    d = inset_cells * max(grid.spacing)
    xmin, xmax, ymin, ymax = xmin + d, xmax - d, ymin + d, ymax - d
    if xmax <= xmin or ymax <= ymin:
        raise GridError("grid too coarse for the default bump battery")
    w, hgt = xmax - xmin, ymax - ymin
    # every disk below stays inside the shrunk rectangle: offset 0.13 + radius 0.36 < 0.5
    r0 = 0.4 * min(w, hgt)
    spots = [(0.5, 0.5, 0.9), (0.4, 0.42, 0.7), (0.6, 0.58, 0.75), (0.42, 0.6, 0.65), (0.58, 0.4, 0.8),
             (0.5, 0.37, 0.6), (0.5, 0.63, 0.6)]
    out = []
    for a, b, c in spots[:count]:
        cx, cy = xmin + a * w, ymin + b * hgt
        r = c * r0
        r = min(r, cx - xmin, xmax - cx, cy - ymin, ymax - cy) * 0.999
        out.append(Bump((cx, cy), r))
    return out


# ---------------------------------------------------------------------------
# path integration


def _tree(mask, base):
    """Shortest-path tree over grid edges, preferring edges inside ``mask``."""
    nx, ny = mask.shape
    idx = np.arange(nx * ny).reshape(nx, ny)
    rows, cols, wts = [], [], []
    for a, b in ((idx[:-1, :], idx[1:, :]), (idx[:, :-1], idx[:, 1:])):
        inside = mask.ravel()[a.ravel()] & mask.ravel()[b.ravel()]
        w = np.where(inside, 1.0, 1e3)
        rows += [a.ravel(), b.ravel()]
        cols += [b.ravel(), a.ravel()]
        wts += [w, w]
    A = coo_matrix((np.concatenate(wts), (np.concatenate(rows), np.concatenate(cols))), shape=(nx * ny, nx * ny)).tocsr()
    dist, pred = dijkstra(A, directed=False, indices=int(idx[base]), return_predecessors=True)
    order = np.argsort(dist, kind="stable")
    return order, pred


def _edge_integrals(form, grid):
    """Integrals of a 1-form ``a dx + b dy`` over the grid edges.

    ``form = ((a, ∂_x a), (b, ∂_y b))``.  Trapezoid rule with the
    Euler–Maclaurin end correction, fourth order per unit length.
    """
    (ax, dax), (ay, day) = form
    hx, hy = grid.hx, grid.hy
    ex = 0.5 * hx * (ax[1:, :] + ax[:-1, :]) - hx**2 / 12.0 * (dax[1:, :] - dax[:-1, :])
    ey = 0.5 * hy * (ay[:, 1:] + ay[:, :-1]) - hy**2 / 12.0 * (day[:, 1:] - day[:, :-1])
    return ex, ey


def _gradient_ho(values, grid):
    # path integrals along different branches must agree to high order,
    # otherwise the integrated field is rough at the grid scale
    return gradient_high_order(values, grid)


def _integrate_tree(ex, ey, mask, base):
    nx, ny = mask.shape
    order, pred = _tree(mask, base)
    out = np.zeros(nx * ny, dtype=ex.dtype)
    ex_f = ex.ravel()
    ey_f = ey.ravel()
    for n in order:
        p = pred[n]
        if p < 0:
            continue
        i, j = divmod(int(n), ny)
        pi_, pj = divmod(int(p), ny)
        if pi_ != i:
            k = min(i, pi_)
            v = ex_f[k * ny + j]
            out[n] = out[p] + (v if i > pi_ else -v)
        else:
            k = min(j, pj)
            v = ey_f[i * (ny - 1) + k]
            out[n] = out[p] + (v if j > pj else -v)
    return out.reshape(nx, ny)


def _integrate_lsq(ex, ey, mask, base):
    """Node values whose differences best match the edge integrals, least squares.

    This averages over all grid paths inside the component of ``mask``
    holding ``base`` rather than trusting one tree; when loops close it
    agrees with :func:`_integrate_tree`.  Remaining nodes are reached along
    the tree from there.
    """
    nx, ny = mask.shape
    lab, _ = ndimage.label(mask)
    comp = lab == lab[base]
    ids = -np.ones(nx * ny, dtype=int)
    ids[comp.ravel()] = np.arange(int(comp.sum()))
    idx = np.arange(nx * ny).reshape(nx, ny)
    rows, cols, vals, rhs = [], [], [], []
    m = 0
    for a, b, e in ((idx[:-1, :], idx[1:, :], ex), (idx[:, :-1], idx[:, 1:], ey)):
        a, b, e = a.ravel(), b.ravel(), e.ravel()
        keep = (ids[a] >= 0) & (ids[b] >= 0)
        a, b, e = ids[a[keep]], ids[b[keep]], e[keep]
        r = m + np.arange(a.size)
        rows += [r, r]
        cols += [a, b]
        vals += [-np.ones(a.size), np.ones(a.size)]
        rhs.append(e)
        m += a.size
    D = coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                   shape=(m, int(comp.sum()))).tocsr()
    A = (D.T @ D).tolil()
    k = int(ids[idx[base]])
    A[k, k] += 1.0
    A = A.tocsc()
    rhs = D.T @ np.concatenate(rhs)
    sol = spsolve(A, rhs.real) + (1j * spsolve(A, rhs.imag) if np.iscomplexobj(rhs) else 0.0)
    sol = sol - sol[k]

    out = np.zeros(nx * ny, dtype=np.result_type(ex, ey))
    out[comp.ravel()] = sol
    order, pred = _tree(mask, base)
    ex_f, ey_f = ex.ravel(), ey.ravel()
    fixed = comp.ravel()
    for n in order:
        p = pred[n]
        if p < 0 or fixed[n]:
            continue
        i, j = divmod(int(n), ny)
        pi_, pj = divmod(int(p), ny)
        if pi_ != i:
            v = ex_f[min(i, pi_) * ny + j]
            out[n] = out[p] + (v if i > pi_ else -v)
        else:
            v = ey_f[i * (ny - 1) + min(j, pj)]
            out[n] = out[p] + (v if j > pj else -v)
    return out.reshape(nx, ny)


def _integrate(ex, ey, mask, base, method):
    if method == "tree":
        return _integrate_tree(ex, ey, mask, base)
    if method == "lsq":
        return _integrate_lsq(ex, ey, mask, base)
    raise ValueError(f"unknown integration method {method!r}")


def loop_defect(ex, ey, mask, block=8):
    """Max circulation around ``block``-cell squares fully inside ``mask``."""
    nx, ny = mask.shape
    worst = 0.0
    for i in range(0, nx - block, block):
        for j in range(0, ny - block, block):
            if not mask[i : i + block + 1, j : j + block + 1].all():
                continue
            c = (ex[i : i + block, j].sum() + ey[i + block, j : j + block].sum()
                 - ex[i : i + block, j + block].sum() - ey[i, j : j + block].sum())
            worst = max(worst, float(abs(c)))
    return worst


def _base_node(mask):
    nx, ny = mask.shape
    ii, jj = np.nonzero(mask)
    if ii.size == 0:
        return nx // 2, ny // 2
    k = int(np.argmin((ii - nx / 2) ** 2 + (jj - ny / 2) ** 2))
    return int(ii[k]), int(jj[k])


def harmonic_defect(sigma: ScalarField, mask=None, erode=2):
    """Relative discrete Laplacian ``max |Δσ| / (max |D²σ| + L^{-2})`` over the eroded mask.

    ``|D²σ|`` is the Frobenius norm of the Hessian and ``L`` the grid
    diagonal.  The ratio is O(h²) for harmonic ``σ`` and O(1) for a curved
    metric, whatever the units of the image.
    """
    grid = sigma.grid
    fxx, fxy, fyy = hessian_arrays(sigma.values, grid)
    lap = fxx + fyy
    m = np.ones(grid.dims, dtype=bool) if mask is None else mask.copy()
    for _ in range(erode):
        m[1:-1, 1:-1] = m[1:-1, 1:-1] & m[:-2, 1:-1] & m[2:, 1:-1] & m[1:-1, :-2] & m[1:-1, 2:]
        m[[0, -1], :] = False
        m[:, [0, -1]] = False
    if not m.any():
        raise GridError("no interior nodes left for the harmonicity check")
    xmin, xmax, ymin, ymax = grid.bounds
    L = math.hypot(xmax - xmin, ymax - ymin)
    hess = np.sqrt(fxx**2 + 2 * fxy**2 + fyy**2)
    return float(np.abs(lap[m]).max() / (hess[m].max() + L**-2))


def harmonic_conjugate(sigma: ScalarField, base=None, mask=None, harmonic_tol=HARMONIC_TOL, loop_tol=None,
                       method="lsq"):
    """Harmonic conjugate ``σ*`` with ``σ*(base) = 0``.

    Integrates ``−σ_y dx + σ_x dy`` over grid edges: ``method="lsq"`` fits
    nodal values to all edge integrals of the mask component holding the
    base (least squares), ``"tree"`` sums along a spanning tree.  Nodes off
    that component are reached along the tree in both cases.
    Returns ``(σ*, diagnostics)``.

    Raises
    ------
    NotFlatError
        If ``σ`` fails the discrete harmonicity check or loops do not close.
    """
    grid = sigma.grid
    m = np.ones(grid.dims, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    hd = harmonic_defect(sigma, m)
    if hd > harmonic_tol:
        raise NotFlatError(f"conformal factor is not harmonic (defect {hd:.3g} > {harmonic_tol:.3g})")
    s = sigma.values
    sx, sy = _gradient_ho(s, grid)
    sxy = _gradient_ho(sy, grid)[0]
    # 1-form a dx + b dy with a = −σ_y, b = σ_x; ∂_x a = −σ_xy, ∂_y b = σ_xy
    ex, ey = _edge_integrals(((-sy, -sxy), (sx, sxy)), grid)
    b = _base_node(m) if base is None else _nearest_index(grid, base)
    conj = _integrate(ex, ey, m, b, method)
    ld = loop_defect(ex, ey, m)
    diag = {"harmonic_defect": hd, "loop_defect": ld, "base": grid.coords(*b)}
    if loop_tol is not None and ld > loop_tol:
        raise NotFlatError(f"harmonic conjugate is path dependent (loop defect {ld:.3g})")
    return ScalarField(grid, conj), diag


def _nearest_index(grid, point):
    i = int(round((point[0] - grid.origin[0]) / grid.hx))
    j = int(round((point[1] - grid.origin[1]) / grid.hy))
    if not (0 <= i < grid.dims[0] and 0 <= j < grid.dims[1]):
        raise GridError("base point is off the grid", location=tuple(point))
    return i, j


def cauchy_riemann_residual(f: ComplexField, mask=None):
    """``max |∂_z̄ f| / max(max |∂_z f|, 1/L)`` by central differences.

    ``L`` is the grid diagonal; the floor keeps a constant ``f`` (pure
    roundoff in both derivatives) from reading as non-holomorphic.
    """
    g = f.grid
    ux, uy = gradient_array(f.values.real, g)
    vx, vy = gradient_array(f.values.imag, g)
    dbar = 0.5 * np.hypot(ux - vy, uy + vx)
    dz = 0.5 * np.hypot(ux + vy, vx - uy)
    sl = (slice(2, -2), slice(2, -2))
    m = np.ones(g.dims, dtype=bool) if mask is None else mask
    mm = m[sl]
    if not mm.any():
        return 0.0
    xmin, xmax, ymin, ymax = g.bounds
    return float(dbar[sl][mm].max() / max(dz[sl][mm].max(), 1.0 / math.hypot(xmax - xmin, ymax - ymin)))


def holomorphic_primitive(f: ComplexField, base=None, mask=None, cr_tol=1e-2, loop_tol=None, method="lsq"):
    """``F`` with ``F' = e^f`` and ``F(base) = 0``, by line integration along grid edges.

    ``method`` is as in :func:`harmonic_conjugate`.  Returns ``(F, diagnostics)``.
    """
    grid = f.grid
    m = np.ones(grid.dims, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    cr = cauchy_riemann_residual(f, m)
    if cr > cr_tol:
        raise NotFlatError(f"exponent is not holomorphic (Cauchy-Riemann residual {cr:.3g})")
    ef = np.exp(f.values)
    gr, gi = _gradient_ho(f.values.real, grid), _gradient_ho(f.values.imag, grid)
    fx, fy = gr[0] + 1j * gi[0], gr[1] + 1j * gi[1]
    # along x edges dz = dx, along y edges dz = i dy
    ex, ey = _edge_integrals(((ef, ef * fx), (1j * ef, 1j * ef * fy)), grid)
    b = _base_node(m) if base is None else _nearest_index(grid, base)
    F = _integrate(ex, ey, m, b, method)
    ld = loop_defect(ex, ey, m)
    if loop_tol is not None and ld > loop_tol:
        raise NotFlatError(f"primitive is path dependent (loop defect {ld:.3g})")
    return ComplexField(grid, F), {"cr_residual": cr, "loop_defect": ld, "base": grid.coords(*b)}


# ---------------------------------------------------------------------------
# rigid alignment and verification


def procrustes(A, B):
    """Rotation ``R`` (det +1) and translation ``t`` minimising ``|A R^T + t − B|``.

    ``A`` and ``B`` are ``(N, d)`` point arrays.  Returns ``(R, t, max_deviation)``.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    ca, cb = A.mean(axis=0), B.mean(axis=0)
    H = (A - ca).T @ (B - cb)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    D = np.eye(A.shape[1])
    D[-1, -1] = d
    R = Vt.T @ D @ U.T
    t = cb - ca @ R.T
    dev = float(np.linalg.norm(A @ R.T + t - B, axis=1).max())
    return R, t, dev


def verify_immersion(r: ImmersionField, g: MetricField, tol=5e-3, interior=2):
    """Entrywise ``|Dr^T Dr − g|`` by central differences; max and mean over interior nodes.

    ``max``/``mean`` are absolute; ``relative`` divides by ``max |g|``.
    """
    if not r.grid.same_as(g.grid):
        raise GridError("immersion and metric must share a grid")
    pb = r.pullback()
    d = np.maximum(np.maximum(np.abs(pb.E - g.E), np.abs(pb.F - g.F)), np.abs(pb.G - g.G))
    sl = (slice(interior, -interior), slice(interior, -interior)) if interior else (slice(None), slice(None))
    scale = max(np.abs(g.E[sl]).max(), np.abs(g.F[sl]).max(), np.abs(g.G[sl]).max())
    rep = {"max": float(d[sl].max()), "mean": float(d[sl].mean()), "relative": float(d[sl].max() / scale)}
    rep["pass"] = bool(rep["relative"] <= tol)
    return rep, ScalarField(g.grid, d)


# ---------------------------------------------------------------------------
# pipelines


def curvature_battery(chart: ConformalChart, battery=None, cfg: PairingConfig | None = None, tol=CURVATURE_TOL):
    """Curvature pairings on a bump battery; flat when every ``|limit| <= tol · scale``."""
    bumps = default_battery(chart.metric.grid) if battery is None else battery
    out = []
    flat = True
    for b in bumps:
        dv = distributional_curvature(b, chart, cfg)
        scale = curvature_scale(b, chart)
        ok = abs(dv.limit) <= tol * max(scale, 1e-300) + 2 * dv.fit_residual
        flat &= ok
        out.append({"center": list(b.center), "radius": b.radius, "value": dv.to_dict(), "scale": scale,
                    "flat": bool(ok)})
    return flat, out


def flatten_metric(h: MetricField, battery=None, cfg: PairingConfig | None = None, harmonic_tol=HARMONIC_TOL,
                   curvature_tol=CURVATURE_TOL, chart=None, chart_kw=None, check_battery=True) -> ImmersionField:
    """Flat isometric immersion ``φ = F∘ψ`` of a metric with vanishing curvature.

    Raises :class:`NotFlatError` at the harmonicity gate or when a battery
    pairing is not zero within tolerance.
    """
    h.check_spd()
    if chart is None:
        chart = build_chart(h, **(chart_kw or {}))
    img = chart.image_grid
    hd = harmonic_defect(chart.sigma, chart.mask)
    if hd > harmonic_tol:
        raise NotFlatError(f"conformal factor is not harmonic (defect {hd:.3g} > {harmonic_tol:.3g}); metric is not flat")
    battery_report = []
    if check_battery:
        flat, battery_report = curvature_battery(chart, battery, cfg, curvature_tol)
        if not flat:
            raise NotFlatError("distributional curvature does not vanish on the bump battery")
    conj, cdiag = harmonic_conjugate(chart.sigma, mask=chart.mask, harmonic_tol=harmonic_tol)
    f = ComplexField(img, chart.sigma.values + 1j * conj.values)
    F, fdiag = holomorphic_primitive(f, mask=chart.mask)
    sre = RectBivariateSpline(img.x, img.y, F.values.real, kx=3, ky=3, s=0)
    sim = RectBivariateSpline(img.x, img.y, F.values.imag, kx=3, ky=3, s=0)
    w = chart.psi.values
    V = h.grid
    comps = [ScalarField(V, sre.ev(w.real, w.imag)), ScalarField(V, sim.ev(w.real, w.imag))]
    imm = ImmersionField(V, comps)
    rep, _ = verify_immersion(imm, h)
    imm.pullback_residual = rep
    imm.details = {"chart_quality": chart.quality, "harmonic_defect": hd, "loop_defect": cdiag["loop_defect"],
                   "primitive_loop_defect": fdiag["loop_defect"], "cr_residual": fdiag["cr_residual"],
                   "curvature_battery": battery_report, "chart": chart}
    return imm


def immersion_from_darboux(g: MetricField, u: ScalarField, margin=0.05, battery=None, cfg: PairingConfig | None = None,
                           darboux_tol=1e-3, check_weak=True, chart_kw=None, check_battery=True) -> ImmersionField:
    """``r = (φ, u)`` with ``φ`` a flat immersion of ``h = g − du²``.

    With ``check_weak`` the weak Darboux residual is first required to be
    below ``darboux_tol`` relative to the size of its right hand side on
    each battery bump.
    """
    g.check_spd()
    check_margin(g, u, 1.0 - 2.0 * margin)
    weak = []
    if check_weak:
        pc = cfg if cfg is not None else PairingConfig(SweepPlan.geometric(g.grid), margin=margin)
        bumps = default_battery(g.grid) if battery is None else battery
        for b in bumps:
            res = weak_darboux_residual(g, u, b.sample(g.grid), pc)
            scale = darboux_scale(res, b, g)
            ok = abs(res.residual) <= darboux_tol * scale + 2 * res.uncertainty
            weak.append({"center": list(b.center), "radius": b.radius, "residual": res.residual,
                         "scale": scale, "ok": bool(ok)})
            if not ok:
                from .errors import HypothesisViolation

                raise HypothesisViolation(
                    f"u is not a weak Darboux solution: residual {res.residual:.3g} on bump at {b.center}",
                    location=tuple(b.center), code="not-darboux")
    h = perturbed_metric(g, u)
    phi = flatten_metric(h, chart_kw=chart_kw, check_battery=check_battery)
    r = ImmersionField(g.grid, phi.components + [u])
    rep, _ = verify_immersion(r, g)
    r.pullback_residual = rep
    r.details = dict(phi.details)
    r.details["flat_pullback_residual"] = phi.pullback_residual
    r.details["weak_darboux"] = weak
    return r


def darboux_scale(res, bump: Bump, g: MetricField):
    """Size used for relative weak-Darboux tolerances: the sweep magnitudes, floored at ``1e-9 ∫|φ| dV_g``."""
    X, Y = g.grid.mesh()
    vol = float(np.sum(np.abs(bump.values(X, Y)) * np.sqrt(g.det()) * trapezoid_weights(g.grid)))
    return max(res.rhs.sweep_norm(), res.lhs.sweep_norm(), 1e-9 * vol)


def darboux_from_immersion(r: ImmersionField, e, g: MetricField, cfg: PairingConfig | None = None, battery=None,
                           margin=0.05, immersion_tol=5e-3, chart_kw=None):
    """Extract ``u = r·e`` and test both sides of the theorem on a battery.

    Runs the weak Darboux residual for ``(g, u)`` and, independently, the
    distributional curvature of ``h = g − du²``.  Both should vanish.
    """
    if len(r.components) != 3:
        raise ValueError("need a map into R^3")
    e = np.asarray(e, dtype=float)
    e = e / np.linalg.norm(e)
    ver, _ = verify_immersion(r, g, immersion_tol)
    if not ver["pass"]:
        from .errors import HypothesisViolation

        raise HypothesisViolation(f"input is not an isometric immersion of g (relative defect {ver['relative']:.3g})",
                                  code="not-immersion")
    u = ScalarField(r.grid, sum(ek * c.values for ek, c in zip(e, r.components)))
    check_margin(g, u, 1.0 - 2.0 * margin)
    pc = cfg if cfg is not None else PairingConfig(SweepPlan.geometric(g.grid), margin=margin)
    bumps = default_battery(g.grid) if battery is None else battery
    weak = []
    for b in bumps:
        res = weak_darboux_residual(g, u, b.sample(g.grid), pc)
        weak.append({"center": list(b.center), "radius": b.radius, "residual": res.residual,
                     "relative": abs(res.residual) / darboux_scale(res, b, g), "lhs": res.lhs.to_dict(),
                     "rhs": res.rhs.to_dict()})
    h = perturbed_metric(g, u)
    chart = build_chart(h, **(chart_kw or {}))
    curv = []
    for b in bumps:
        dv = distributional_curvature(b, chart)
        curv.append({"center": list(b.center), "radius": b.radius, "value": dv.to_dict(),
                     "relative": abs(dv.limit) / max(curvature_scale(b, chart), 1e-300)})
    return {"u": u, "immersion_check": ver, "weak_darboux": weak, "curvature": curv,
            "max_weak_relative": max(w["relative"] for w in weak),
            "max_curvature_relative": max(c["relative"] for c in curv)}
