"""Isothermal coordinates through the Beltrami equation.

A metric ``h`` is extended to a padded rectangle, its Beltrami coefficient is
cut off smoothly in the collar, and ``ψ_z̄ = μ ψ_z`` is solved by Neumann
iteration with spectral (periodic) Beurling and Cauchy transforms.  The
chart's conformal factor ``σ`` is then resampled onto a regular grid over the
image ``ψ(V)``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import fft as sfft
from scipy.interpolate import RectBivariateSpline, make_interp_spline

from .errors import ChartError, GridError, InversionError
from .fields import ComplexField, Grid2D, MapInterpolant, ScalarField
from .geometry import MetricField

PAD_FRACTION = 0.5
CHART_TOL = 5e-3


def beltrami_coefficient(h: MetricField) -> ComplexField:
    """``μ = (E − G + 2iF) / (E + G + 2 sqrt(EG − F²))``; ``|μ| < 1`` when ``h`` is SPD."""
    h.check_spd()
    mu = (h.E - h.G + 2j * h.F) / (h.E + h.G + 2.0 * np.sqrt(h.det()))
    return ComplexField(h.grid, mu)


def _smoothstep(t):
    """C-infinity step: 0 for t <= 0, 1 for t >= 1."""
    t = np.clip(t, 0.0, 1.0)
    a = np.where(t > 0, np.exp(-1.0 / np.where(t > 0, t, 1.0)), 0.0)
    b = np.where(t < 1, np.exp(-1.0 / np.where(t < 1, 1.0 - t, 1.0)), 0.0)
    return a / (a + b)


@dataclass(frozen=True, eq=False)
class BeltramiField:
    """Cut-off Beltrami coefficient on the padded rectangle.

    ``inner`` is the index window ``(i0, j0, nx, ny)`` of the original grid.
    """

    grid: Grid2D
    mu: ComplexField
    k: float
    inner: tuple
    cutoff: np.ndarray = field(repr=False, default=None)
    trace: np.ndarray = field(repr=False, default=None)

    @property
    def inner_grid(self) -> Grid2D:
        i0, j0, nx, ny = self.inner
        return self.grid.subgrid(i0, j0, nx, ny)


def _pad_counts(n, h, pad_len):
    p = int(math.ceil(pad_len / h))
    total = sfft.next_fast_len(n + 2 * p)
    lo = (total - n) // 2
    return lo, total - n - lo


_REFLECT_S = np.array([0.125, 0.25, 0.5, 1.0])
_REFLECT_C = np.linalg.solve(np.vander(-_REFLECT_S, 4, increasing=True).T, np.ones(4))


def _extend_axis(a, lo, hi, step, axis, reach):
    """Extend ``a`` by ``lo``/``hi`` nodes along ``axis`` with a C^3 reflection.

    ``f(b + t) = sum_j c_j f(b - s_j t)`` matches three derivatives at the
    edge ``b``; beyond ``reach`` the extension is held constant.
    """
    a = np.moveaxis(a, axis, 0)
    n = a.shape[0]
    L = (n - 1) * step
    spl = make_interp_spline(np.arange(n) * step, a, k=3, axis=0)
    s = _REFLECT_S * min(1.0, L / max(reach, 1e-300))
    t_hi = np.minimum(np.arange(1, hi + 1) * step, reach)
    t_lo = np.minimum(np.arange(1, lo + 1) * step, reach)
    right = sum(c * spl(L - sj * t_hi) for c, sj in zip(_REFLECT_C, s))
    left = sum(c * spl(sj * t_lo) for c, sj in zip(_REFLECT_C, s))[::-1]
    return np.moveaxis(np.concatenate([left, a, right], axis=0), 0, axis)


def _extend(a, pads, spacing, reach):
    (lx, rx), (ly, ry) = pads
    out = _extend_axis(a, lx, rx, spacing[0], 0, reach[0])
    return _extend_axis(out, ly, ry, spacing[1], 1, reach[1])


def extend_and_cutoff(h: MetricField, pad_fraction=PAD_FRACTION, collar_fraction=0.5, extension="smooth") -> BeltramiField:
    """Extend ``h`` to a padded rectangle and cut ``μ`` off in the collar.

    The pad on each side is ``pad_fraction`` of the domain diagonal.  The
    cutoff equals 1 on the original rectangle and decays smoothly to 0 over
    ``collar_fraction`` of the pad.  ``extension="smooth"`` continues the
    metric entries with a C^3 reflection across the boundary (falling back to
    constants if that loses positive definiteness where the cutoff is
    active); ``"edge"`` uses constants throughout.
    """
    g = h.grid
    xmin, xmax, ymin, ymax = g.bounds
    diam = math.hypot(xmax - xmin, ymax - ymin)
    (lx, rx), (ly, ry) = _pad_counts(g.dims[0], g.hx, pad_fraction * diam), _pad_counts(g.dims[1], g.hy, pad_fraction * diam)
    ext = Grid2D((xmin - lx * g.hx, ymin - ly * g.hy), g.spacing, (g.dims[0] + lx + rx, g.dims[1] + ly + ry), g.margin)
    pads = ((lx, rx), (ly, ry))
    X, Y = ext.mesh()
    wx = collar_fraction * min(lx, rx) * g.hx
    wy = collar_fraction * min(ly, ry) * g.hy
    dx = np.maximum(np.maximum(xmin - X, X - xmax), 0.0)
    dy = np.maximum(np.maximum(ymin - Y, Y - ymax), 0.0)
    eta = (1.0 - _smoothstep(dx / wx)) * (1.0 - _smoothstep(dy / wy))
    he = None
    if extension == "smooth":
        E, F, G = (_extend(a, pads, g.spacing, (wx, wy)) for a in (h.E, h.F, h.G))
        active = eta > 0
        if np.all((E[active] > 0) & (E[active] * G[active] - F[active] ** 2 > 0)):
            # outside the collar only finiteness matters
            bad = ~((E > 0) & (E * G - F * F > 0))
            E, F, G = np.where(bad, 1.0, E), np.where(bad, 0.0, F), np.where(bad, 1.0, G)
            he = MetricField(ext, E, F, G)
        else:
            warnings.warn("smooth extension of the metric is not positive definite; using constant extension",
                          RuntimeWarning, stacklevel=2)
    elif extension != "edge":
        raise ValueError(f"unknown extension {extension!r}")
    if he is None:
        he = MetricField(ext, *(np.pad(a, pads, mode="edge") for a in (h.E, h.F, h.G)))
    mu = eta * beltrami_coefficient(he).values
    return BeltramiField(ext, ComplexField(ext, mu), float(np.abs(mu).max()), (lx, ly, g.dims[0], g.dims[1]), eta,
                         he.trace())


# ---------------------------------------------------------------------------
# periodic transforms


def _wavenumbers(grid: Grid2D):
    kx = 2 * np.pi * sfft.fftfreq(grid.dims[0], grid.hx)
    ky = 2 * np.pi * sfft.fftfreq(grid.dims[1], grid.hy)
    return np.meshgrid(kx, ky, indexing="ij")


def _support_warning(values, layers=2, tol=1e-14):
    v = np.abs(values)
    edge = max(v[:layers].max(), v[-layers:].max(), v[:, :layers].max(), v[:, -layers:].max())
    if edge > tol * max(v.max(), 1e-300):
        warnings.warn("transform input does not vanish near the pad boundary; periodisation leaks", RuntimeWarning,
                      stacklevel=3)


class SpectralOps:
    """Beurling and Cauchy transforms on the periodic box of ``grid``."""

    def __init__(self, grid: Grid2D):
        self.grid = grid
        KX, KY = _wavenumbers(grid)
        xi = KX + 1j * KY
        nz = xi != 0
        self.beurling_symbol = np.where(nz, np.conj(xi) / np.where(nz, xi, 1.0), 0.0)
        dbar = 0.5j * xi  # symbol of ∂/∂z̄
        self.cauchy_symbol = np.where(nz, 1.0 / np.where(nz, dbar, 1.0), 0.0)
        self.d_symbol = 0.5j * np.conj(xi)  # symbol of ∂/∂z

    def beurling(self, w):
        return sfft.ifft2(self.beurling_symbol * sfft.fft2(w))

    def cauchy(self, w):
        return sfft.ifft2(self.cauchy_symbol * sfft.fft2(w))

    def dz(self, w):
        return sfft.ifft2(self.d_symbol * sfft.fft2(w))


def beurling_transform(w: ComplexField) -> ComplexField:
    """Multiplier ``conj(ξ)/ξ`` on the periodic extension; zero mode mapped to zero."""
    _support_warning(w.values)
    return ComplexField(w.grid, SpectralOps(w.grid).beurling(w.values))


def cauchy_transform(w: ComplexField) -> ComplexField:
    """Periodic inverse of ``∂/∂z̄`` on the mean-free part of ``w``."""
    return ComplexField(w.grid, SpectralOps(w.grid).cauchy(w.values))


@dataclass(eq=False)
class PrincipalSolution:
    psi: ComplexField
    psi_z: np.ndarray
    psi_zbar: np.ndarray
    history: list
    iterations: int

    @property
    def jacobian(self):
        return np.abs(self.psi_z) ** 2 - np.abs(self.psi_zbar) ** 2

    def contraction_ratio(self, skip=2):
        """Geometric mean of successive update ratios (tail of the history)."""
        h = np.array([v for v in self.history if v > 0])
        if len(h) < skip + 3:
            return 0.0
        r = h[skip + 1 :] / h[skip:-1]
        # stop at the noise floor
        good = h[skip + 1 :] > 1e3 * np.finfo(float).eps * h[0]
        r = r[good] if good.any() else r
        return float(np.exp(np.mean(np.log(r))))


def solve_principal(mu: BeltramiField, tol=1e-12, max_iter=1000) -> PrincipalSolution:
    """Normalised solution ``ψ = z + m z̄ + C(ω − m)`` with ``ω = ψ_z̄``.

    ``ω`` solves ``ω = μ (1 + Sω)`` by Neumann iteration from 0.  On the
    periodic box the mean ``m`` of ``ω`` cannot be produced by ``C``; the
    linear term ``m z̄`` supplies it, so ``ψ_z̄ = ω`` and ``ψ_z = 1 + Sω``
    hold exactly.
    """
    if mu.k >= 1.0 - 1e-12:
        raise ChartError(f"Beltrami coefficient has sup norm {mu.k:.6g} >= 1; iteration cannot contract")
    grid = mu.grid
    ops = SpectralOps(grid)
    m_ = mu.mu.values
    _support_warning(m_)
    w = np.zeros_like(m_)
    hist = []
    norm = math.sqrt(grid.hx * grid.hy)
    it = 0
    for it in range(1, max_iter + 1):
        w_new = m_ * (1.0 + ops.beurling(w))
        d = float(np.linalg.norm(w_new - w)) * norm
        hist.append(d)
        w = w_new
        if d <= tol * max(1.0, float(np.linalg.norm(w)) * norm):
            break
        if it > 10 and hist[-1] > hist[-2] > hist[-3]:
            raise ChartError("Neumann iteration is not contracting")
    else:
        raise ChartError(f"Neumann iteration did not converge in {max_iter} steps (last update {hist[-1]:.3g})")
    X, Y = grid.mesh()
    z = X + 1j * Y
    mean = w.mean()
    psi = z + mean * np.conj(z) + ops.cauchy(w - mean)
    psi_z = 1.0 + ops.beurling(w)
    sol = PrincipalSolution(ComplexField(grid, psi), psi_z, w, hist, it)
    J = sol.jacobian
    bad = J <= 0
    if bad.any():
        i, j = (int(v) for v in np.argwhere(bad)[0])
        raise ChartError(f"Jacobian is not positive at node ({i}, {j})", location=grid.coords(i, j))
    return sol


# ---------------------------------------------------------------------------
# charts


@dataclass(eq=False)
class ConformalChart:
    """Conformal chart ``ψ: V → ψ(V)`` with factor ``σ`` on a regular image grid.

    ``psi`` and ``jacobian`` live on the metric's grid ``V``.  ``sigma`` is
    sampled on ``image_grid``; ``mask`` marks image nodes whose preimage lies
    in ``V``.  ``inverse(w)`` maps image points back to ``V`` coordinates.
    """

    metric: MetricField
    psi: ComplexField
    jacobian: ScalarField
    sigma: ScalarField
    mask: np.ndarray
    quality: dict
    _interp: MapInterpolant = field(repr=False, default=None)
    preimage: tuple = field(repr=False, default=None)
    solution: PrincipalSolution | None = field(repr=False, default=None)
    beltrami: BeltramiField | None = field(repr=False, default=None)

    @property
    def image_grid(self) -> Grid2D:
        return self.sigma.grid

    def forward(self, x, y):
        return self._interp(x, y)

    def inverse(self, w, tol=1e-10):
        """Preimages (as complex ``x + iy``) of image points ``w``."""
        q = np.asarray(w, dtype=complex)
        x, y = self._interp.invert(q.ravel(), tol=tol)
        return (x + 1j * y).reshape(q.shape)

    def inner_image_rect(self, margin_cells=0):
        """Largest axis-aligned rectangle of image nodes fully inside the mask."""
        return _largest_box(self.mask, margin_cells)


def _largest_box(mask, shrink):
    ii = np.where(mask.any(axis=1))[0]
    if ii.size == 0:
        return None
    ci, cj = np.array(mask.shape) // 2
    i0, i1, j0, j1 = ci, ci, cj, cj
    grown = True
    while grown:
        grown = False
        for side in range(4):
            a, b, c, d = i0, i1, j0, j1
            if side == 0:
                a -= 1
            elif side == 1:
                b += 1
            elif side == 2:
                c -= 1
            else:
                d += 1
            if a < 0 or c < 0 or b >= mask.shape[0] or d >= mask.shape[1]:
                continue
            if mask[a : b + 1, c : d + 1].all():
                i0, i1, j0, j1 = a, b, c, d
                grown = True
    return i0 + shrink, i1 - shrink, j0 + shrink, j1 - shrink


def _dpsi_frobenius(psi_z, psi_zbar):
    return 2.0 * (np.abs(psi_z) ** 2 + np.abs(psi_zbar) ** 2)


def conformality_residual(h: MetricField, psi: ComplexField, sigma_at_psi, interior=2):
    """Relative ``max |e^{2σ∘ψ} Dψ^T Dψ − h| / max |h|`` with finite-difference ``Dψ``."""
    g = h.grid
    ux, uy = np.gradient(psi.values.real, g.hx, g.hy, edge_order=2)
    vx, vy = np.gradient(psi.values.imag, g.hx, g.hy, edge_order=2)
    s = np.exp(2.0 * sigma_at_psi)
    dE = s * (ux * ux + vx * vx) - h.E
    dF = s * (ux * uy + vx * vy) - h.F
    dG = s * (uy * uy + vy * vy) - h.G
    sl = (slice(interior, -interior), slice(interior, -interior))
    err = max(np.abs(dE[sl]).max(), np.abs(dF[sl]).max(), np.abs(dG[sl]).max())
    scale = max(np.abs(h.E[sl]).max(), np.abs(h.F[sl]).max(), np.abs(h.G[sl]).max())
    return float(err / scale)


def build_chart(h: MetricField, pad_fraction=PAD_FRACTION, collar_fraction=0.5, image_nodes=None,
                tol=1e-12, chart_tol=CHART_TOL, image_margin=4, extension="smooth") -> ConformalChart:
    """Conformal chart for ``h`` on its rectangle.

    Parameters
    ----------
    h : MetricField
    pad_fraction, collar_fraction : float
        Geometry of the padded rectangle and the cutoff collar.
    image_nodes : int or tuple, optional
        Node counts of the σ grid; defaults to the metric grid dims.
    chart_tol : float
        Upper bound for the relative conformality residual.

    Raises
    ------
    ChartError
        On a nonpositive Jacobian, a failed inversion, or a residual above
        ``chart_tol``.
    """
    h.check_spd()
    bf = extend_and_cutoff(h, pad_fraction, collar_fraction, extension)
    sol = solve_principal(bf, tol=tol)
    i0, j0, nx, ny = bf.inner
    sl = (slice(i0, i0 + nx), slice(j0, j0 + ny))
    V = h.grid
    psi_V = ComplexField(V, sol.psi.values[sl])
    jac = ScalarField(V, sol.jacobian[sl])
    # σ∘ψ on V from the spectral derivatives
    sig_V = 0.5 * np.log(h.trace() / _dpsi_frobenius(sol.psi_z[sl], sol.psi_zbar[sl]))

    interp = MapInterpolant(sol.psi)
    # regular image grid over the bounding box of ψ(V)
    re, im = psi_V.values.real, psi_V.values.imag
    bx = (re.min(), re.max())
    by = (im.min(), im.max())
    ex, ey = bx[1] - bx[0], by[1] - by[0]
    if image_nodes is None:
        # square cells; the shorter side gets as many nodes as the metric grid, capped at 4x its node count
        n0 = min(V.dims) - 1 - 2 * image_margin
        step = max(min(ex, ey) / n0, math.sqrt(ex * ey / (4.0 * V.dims[0] * V.dims[1])))
        hx_i = hy_i = step
        n = (int(math.ceil(ex / step)) + 1 + 2 * image_margin, int(math.ceil(ey / step)) + 1 + 2 * image_margin)
    else:
        n = (image_nodes, image_nodes) if np.ndim(image_nodes) == 0 else tuple(image_nodes)
        hx_i = ex / (n[0] - 1 - 2 * image_margin)
        hy_i = ey / (n[1] - 1 - 2 * image_margin)
    img = Grid2D((bx[0] - image_margin * hx_i, by[0] - image_margin * hy_i), (hx_i, hy_i), n, V.margin)
    WX, WY = img.mesh()
    try:
        px, py = interp.invert((WX + 1j * WY).ravel())
    except InversionError as exc:
        raise ChartError(f"could not invert the chart on its image grid: {exc}", location=exc.location) from exc
    px = px.reshape(n)
    py = py.reshape(n)
    xmin, xmax, ymin, ymax = V.bounds
    mask = (px >= xmin) & (px <= xmax) & (py >= ymin) & (py <= ymax)

    eg = bf.grid
    tr_ext = bf.trace
    dpsi = _dpsi_frobenius(sol.psi_z, sol.psi_zbar)
    s_tr = RectBivariateSpline(eg.x, eg.y, tr_ext, kx=3, ky=3, s=0)
    s_dp = RectBivariateSpline(eg.x, eg.y, dpsi, kx=3, ky=3, s=0)
    sigma_img = 0.5 * np.log(s_tr.ev(px, py) / s_dp.ev(px, py))
    sigma = ScalarField(img, sigma_img)

    # residual uses FD derivatives of ψ and σ interpolated back from the image grid
    s_sig = RectBivariateSpline(img.x, img.y, sigma_img, kx=3, ky=3, s=0)
    sig_back = s_sig.ev(re, im)
    resid = conformality_residual(h, psi_V, sig_back)
    self_resid = conformality_residual(h, psi_V, sig_V)
    quality = {
        "residual": resid,
        "residual_direct": self_resid,
        "k": bf.k,
        "iterations": sol.iterations,
        "contraction_ratio": sol.contraction_ratio(),
        "min_jacobian": float(jac.values.min()),
        "sigma_interp_error": float(np.abs(sig_back - sig_V)[2:-2, 2:-2].max()),
    }
    chart = ConformalChart(h, psi_V, jac, sigma, mask, quality, interp, (px, py), sol, bf)
    if not resid <= chart_tol:
        raise ChartError(f"conformality residual {resid:.3g} exceeds chart tolerance {chart_tol:.3g}")
    return chart


# ---------------------------------------------------------------------------
# transitions


def _derivatives_at(chart: ConformalChart, px, py):
    """``(ψ_z, ψ_z̄)`` at source points, spline interpolation of the spectral derivatives."""
    eg = chart.beltrami.grid
    out = []
    for arr in (chart.solution.psi_z, chart.solution.psi_zbar):
        vals = np.asarray(arr)
        re = RectBivariateSpline(eg.x, eg.y, vals.real, kx=3, ky=3, s=0).ev(px, py)
        im = RectBivariateSpline(eg.x, eg.y, vals.imag, kx=3, ky=3, s=0).ev(px, py)
        out.append(re + 1j * im)
    return out


def chart_transition_check(c1: ConformalChart, c2: ConformalChart, overlap, n=64):
    """Check ``σ2 = σ1∘f + ln|f'|`` with ``f = ψ1∘ψ2⁻¹`` at sample points.

    ``overlap`` is a rectangle ``(xmin, xmax, ymin, ymax)`` in the common
    source coordinates, sampled on an ``n × n`` grid ``p``.  With
    ``a_k = ∂_z ψ_k`` and ``b_k = ∂_z̄ ψ_k`` at ``p``::

        f_w = (a1 ā2 − b1 b̄2) / J2,   f_w̄ = (b1 a2 − a1 b2) / J2

    Returns a dict with the relative Cauchy–Riemann residual ``max |f_w̄|/|f_w|``,
    the max transition defect and the sample count.
    """
    xmin, xmax, ymin, ymax = overlap
    if not (xmax > xmin and ymax > ymin):
        raise GridError("overlap rectangle is empty")
    for c in (c1, c2):
        bx0, bx1, by0, by1 = c.metric.grid.bounds
        if xmin < bx0 or xmax > bx1 or ymin < by0 or ymax > by1:
            raise GridError("overlap leaves the domain of a chart")
    xs = np.linspace(xmin, xmax, n)
    ys = np.linspace(ymin, ymax, n)
    PX, PY = np.meshgrid(xs, ys, indexing="ij")
    w1 = c1.forward(PX, PY)
    w2 = c2.forward(PX, PY)
    a1, b1 = _derivatives_at(c1, PX, PY)
    a2, b2 = _derivatives_at(c2, PX, PY)
    J2 = np.abs(a2) ** 2 - np.abs(b2) ** 2
    fw = (a1 * np.conj(a2) - b1 * np.conj(b2)) / J2
    fwb = (b1 * a2 - a1 * b2) / J2
    s1 = RectBivariateSpline(c1.image_grid.x, c1.image_grid.y, c1.sigma.values, kx=3, ky=3, s=0)
    s2 = RectBivariateSpline(c2.image_grid.x, c2.image_grid.y, c2.sigma.values, kx=3, ky=3, s=0)
    defect = s2.ev(w2.real, w2.imag) - s1.ev(w1.real, w1.imag) - np.log(np.abs(fw))
    return {
        "cr_residual": float((np.abs(fwb) / np.abs(fw)).max()),
        "defect": float(np.abs(defect).max()),
        "samples": int(defect.size),
    }
