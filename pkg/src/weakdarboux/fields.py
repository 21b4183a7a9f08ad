"""Grid-sampled fields and the numerical substrate shared by every module.

Fields live on rectangular tensor grids.  Arrays are indexed ``values[i, j]``
with ``x = origin[0] + i*hx`` and ``y = origin[1] + j*hy``.

The pieces here are deliberately small: finite differences, mollification
by a compactly supported radial kernel, trapezoidal pairing, off-node
interpolation with Newton inversion of planar maps, and the ε-sweep
extrapolator that turns a sequence of mollified pairings into a limit.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage, optimize, signal
from scipy.interpolate import RectBivariateSpline
from scipy.spatial import cKDTree

from .errors import GridError, InversionError, SweepError

MIN_NODES = 8


# ---------------------------------------------------------------------------
# grids and fields


@dataclass(frozen=True)
class Grid2D:
    """Rectangular tensor grid.

    Parameters
    ----------
    origin : (float, float)
        Coordinates of node ``[0, 0]``.
    spacing : (float, float)
        ``(hx, hy)``, both positive.
    dims : (int, int)
        ``(nx, ny)``, both at least 8.
    margin : int
        Number of ghost layers excluded by :meth:`interior`.
    """

    origin: tuple
    spacing: tuple
    dims: tuple
    margin: int = 2

    def __post_init__(self):
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))
        object.__setattr__(self, "spacing", (float(self.spacing[0]), float(self.spacing[1])))
        object.__setattr__(self, "dims", (int(self.dims[0]), int(self.dims[1])))
        hx, hy = self.spacing
        if not (hx > 0 and hy > 0):
            raise GridError(f"grid spacing must be positive, got {self.spacing}")
        if min(self.dims) < MIN_NODES:
            raise GridError(f"grid needs at least {MIN_NODES} nodes per axis, got {self.dims}")
        if self.margin < 0:
            raise GridError("margin must be nonnegative")

    @classmethod
    def from_bounds(cls, xmin, xmax, ymin, ymax, nx, ny=None, margin=2):
        """Grid with ``nx * ny`` nodes whose corner nodes sit on the bounds."""
        ny = nx if ny is None else ny
        return cls((xmin, ymin), ((xmax - xmin) / (nx - 1), (ymax - ymin) / (ny - 1)), (nx, ny), margin)

    @property
    def hx(self):
        return self.spacing[0]

    @property
    def hy(self):
        return self.spacing[1]

    @property
    def shape(self):
        return self.dims

    @property
    def x(self):
        return self.origin[0] + self.hx * np.arange(self.dims[0])

    @property
    def y(self):
        return self.origin[1] + self.hy * np.arange(self.dims[1])

    @property
    def bounds(self):
        """``(xmin, xmax, ymin, ymax)`` of the covered rectangle."""
        x0, y0 = self.origin
        return (x0, x0 + (self.dims[0] - 1) * self.hx, y0, y0 + (self.dims[1] - 1) * self.hy)

    def mesh(self):
        return np.meshgrid(self.x, self.y, indexing="ij")

    def coords(self, i, j):
        return (self.origin[0] + i * self.hx, self.origin[1] + j * self.hy)

    def interior(self, margin=None):
        """Boolean mask of nodes at least ``margin`` layers away from the edge."""
        m = self.margin if margin is None else margin
        mask = np.zeros(self.dims, dtype=bool)
        mask[m : self.dims[0] - m, m : self.dims[1] - m] = True
        return mask

    def subgrid(self, i0, j0, nx, ny, margin=None):
        if i0 < 0 or j0 < 0 or i0 + nx > self.dims[0] or j0 + ny > self.dims[1]:
            raise GridError("subgrid exceeds parent grid")
        return Grid2D(self.coords(i0, j0), self.spacing, (nx, ny), self.margin if margin is None else margin)

    def offset_in(self, parent: "Grid2D"):
        """Index offset ``(i0, j0)`` of this grid inside ``parent``.

        Raises :class:`GridError` if the grids are not aligned.
        """
        if not np.allclose(self.spacing, parent.spacing, rtol=1e-10, atol=0):
            raise GridError("grids have different spacing")
        fi = (self.origin[0] - parent.origin[0]) / self.hx
        fj = (self.origin[1] - parent.origin[1]) / self.hy
        i0, j0 = int(round(fi)), int(round(fj))
        if abs(fi - i0) > 1e-6 or abs(fj - j0) > 1e-6:
            raise GridError("grids are not node aligned")
        if i0 < 0 or j0 < 0 or i0 + self.dims[0] > parent.dims[0] or j0 + self.dims[1] > parent.dims[1]:
            raise GridError("grid is not contained in parent")
        return i0, j0

    def same_as(self, other: "Grid2D"):
        return self.dims == other.dims and np.allclose(self.origin, other.origin, rtol=0, atol=1e-9 * max(self.spacing)) \
            and np.allclose(self.spacing, other.spacing, rtol=1e-12, atol=0)

    def to_dict(self):
        return {"origin": list(self.origin), "spacing": list(self.spacing), "dims": list(self.dims),
                "margin": self.margin}


def _check_finite(values, what):
    if not np.all(np.isfinite(values)):
        bad = np.argwhere(~np.isfinite(values))[0]
        raise GridError(f"{what} has non-finite value at node {tuple(int(b) for b in bad)}",
                        location=tuple(int(b) for b in bad))


@dataclass(frozen=True, eq=False)
class ScalarField:
    grid: Grid2D
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != self.grid.dims:
            raise GridError(f"values shape {v.shape} does not match grid dims {self.grid.dims}")
        _check_finite(v, "scalar field")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def crop(self, grid: Grid2D) -> "ScalarField":
        i0, j0 = grid.offset_in(self.grid)
        return ScalarField(grid, self.values[i0 : i0 + grid.dims[0], j0 : j0 + grid.dims[1]])

    def with_values(self, values) -> "ScalarField":
        return ScalarField(self.grid, values)

    def __add__(self, other):
        if isinstance(other, ScalarField):
            return ScalarField(self.grid, self.values + other.values)
        return ScalarField(self.grid, self.values + other)

    def __mul__(self, a):
        if isinstance(a, ScalarField):
            return ScalarField(self.grid, self.values * a.values)
        return ScalarField(self.grid, self.values * a)

    __rmul__ = __mul__

    def __neg__(self):
        return ScalarField(self.grid, -self.values)

    def __sub__(self, other):
        return self + (-other)


@dataclass(frozen=True, eq=False)
class ComplexField:
    grid: Grid2D
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=complex)
        if v.shape != self.grid.dims:
            raise GridError(f"values shape {v.shape} does not match grid dims {self.grid.dims}")
        _check_finite(v, "complex field")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def real(self):
        return ScalarField(self.grid, self.values.real)

    @property
    def imag(self):
        return ScalarField(self.grid, self.values.imag)

    def crop(self, grid: Grid2D) -> "ComplexField":
        i0, j0 = grid.offset_in(self.grid)
        return ComplexField(grid, self.values[i0 : i0 + grid.dims[0], j0 : j0 + grid.dims[1]])


@dataclass(frozen=True, eq=False)
class VectorField2:
    grid: Grid2D
    values: np.ndarray  # (nx, ny, 2)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != self.grid.dims + (2,):
            raise GridError(f"vector field shape {v.shape} does not match grid {self.grid.dims}")
        _check_finite(v, "vector field")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def component(self, k) -> ScalarField:
        return ScalarField(self.grid, self.values[..., k])


@dataclass(frozen=True, eq=False)
class SymmetricMatrixField:
    """Pointwise symmetric 2x2 matrices; symmetry is structural."""

    grid: Grid2D
    xx: np.ndarray
    xy: np.ndarray
    yy: np.ndarray

    def entry(self, i, j):
        if i == j:
            return self.xx if i == 0 else self.yy
        return self.xy

    def det(self):
        return self.xx * self.yy - self.xy**2


# ---------------------------------------------------------------------------
# sampling and finite differences


def sample_field(expr, grid: Grid2D) -> ScalarField:
    """Evaluate an expression (string or parsed tree) at every node."""
    from . import exprlang

    if isinstance(expr, str):
        expr = exprlang.parse(expr)
    return exprlang.eval_grid(expr, grid)


def gradient_array(values, grid: Grid2D):
    """Second order gradient: centered inside, one sided at the edges."""
    gx, gy = np.gradient(values, grid.hx, grid.hy, edge_order=2)
    return gx, gy


def hessian_arrays(values, grid: Grid2D):
    """Second order Hessian ``(fxx, fxy, fyy)``.

    Interior nodes use the compact centered stencils (exact on cubics in each
    variable, and on ``x*y`` terms); the outermost layer uses four point one
    sided stencils for the pure derivatives and the one sided gradient of the
    gradient for the mixed one.
    """
    hx, hy = grid.hx, grid.hy
    gx, gy = np.gradient(values, hx, hy, edge_order=2)
    fxx = np.gradient(gx, hx, axis=0, edge_order=2)
    fyy = np.gradient(gy, hy, axis=1, edge_order=2)
    fxy = 0.5 * (np.gradient(gx, hy, axis=1, edge_order=2) + np.gradient(gy, hx, axis=0, edge_order=2))
    f = values
    fxx[1:-1, :] = (f[2:, :] - 2 * f[1:-1, :] + f[:-2, :]) / hx**2
    fyy[:, 1:-1] = (f[:, 2:] - 2 * f[:, 1:-1] + f[:, :-2]) / hy**2
    fxy[1:-1, 1:-1] = (f[2:, 2:] - f[2:, :-2] - f[:-2, 2:] + f[:-2, :-2]) / (4 * hx * hy)
    fxx[0, :] = (2 * f[0, :] - 5 * f[1, :] + 4 * f[2, :] - f[3, :]) / hx**2
    fxx[-1, :] = (2 * f[-1, :] - 5 * f[-2, :] + 4 * f[-3, :] - f[-4, :]) / hx**2
    fyy[:, 0] = (2 * f[:, 0] - 5 * f[:, 1] + 4 * f[:, 2] - f[:, 3]) / hy**2
    fyy[:, -1] = (2 * f[:, -1] - 5 * f[:, -2] + 4 * f[:, -3] - f[:, -4]) / hy**2
    return fxx, fxy, fyy


def fd_derivatives(f: ScalarField):
    """Centered second order gradient and Hessian of a sampled scalar.

    Returns
    -------
    grad : VectorField2
    hess : SymmetricMatrixField
        Symmetric by construction (a single mixed entry is stored).

    Interior values are the ones to trust; the outer layer is one sided.
    """
    g = f.grid
    if min(g.dims) < 5:
        raise GridError("grid too small for second order differences")
    gx, gy = gradient_array(f.values, g)
    fxx, fxy, fyy = hessian_arrays(f.values, g)
    return VectorField2(g, np.stack([gx, gy], axis=-1)), SymmetricMatrixField(g, fxx, fxy, fyy)


def laplacian_array(values, grid: Grid2D):
    fxx, _, fyy = hessian_arrays(values, grid)
    return fxx + fyy


# ---------------------------------------------------------------------------
# mollification


def _bump_profile(q, order):
    """Radial bump ``exp(-1/(1-q))`` with ``q = |x|^2/eps^2`` and its q-derivatives."""
    inside = q < 1.0
    qq = np.where(inside, q, 0.0)
    one = 1.0 - qq
    p = np.where(inside, np.exp(-1.0 / one), 0.0)
    if order == 0:
        return p
    d1 = np.where(inside, -p / one**2, 0.0)
    if order == 1:
        return p, d1
    d2 = np.where(inside, p * (1.0 / one**4 - 2.0 / one**3), 0.0)
    return p, d1, d2


def _poly_profile(q, order):
    """Polynomial kernel ``(1-q)^4``; C^3, used as the second admissible kernel."""
    one = np.clip(1.0 - q, 0.0, None)
    p = one**4
    if order == 0:
        return p
    d1 = -4.0 * one**3
    if order == 1:
        return p, d1
    return p, d1, 12.0 * one**2


PROFILES = {"bump": _bump_profile, "poly": _poly_profile}


FD_HALO = 4
# centred eighth order stencils for first and second derivatives
_FD = {
    1: np.array([1 / 280, -4 / 105, 1 / 5, -4 / 5, 0.0, 4 / 5, -1 / 5, 4 / 105, -1 / 280]),
    2: np.array([-1 / 560, 8 / 315, -1 / 5, 8 / 5, -205 / 72, 8 / 5, -1 / 5, 8 / 315, -1 / 560]),
}


@dataclass(frozen=True)
class Mollifier:
    """Radially symmetric, unit mass smoothing kernel supported in ``|x| < epsilon``.

    ``profile`` is ``"bump"`` (the standard C-infinity bump) or ``"poly"``.
    The discrete kernel is renormalised to unit mass on the grid, so constants
    are reproduced exactly and odd moments vanish by symmetry of the stencil.
    """

    epsilon: float
    profile: str = "bump"

    def __post_init__(self):
        if not self.epsilon > 0:
            raise SweepError("mollifier epsilon must be positive")
        if self.profile not in PROFILES:
            raise SweepError(f"unknown kernel profile {self.profile!r}")

    def stencil_radius(self, grid: Grid2D):
        """Half widths of the discrete kernels, including the difference halo."""
        return (int(math.floor(self.epsilon / grid.hx)) + FD_HALO,
                int(math.floor(self.epsilon / grid.hy)) + FD_HALO)

    def base_kernel(self, grid: Grid2D):
        """Unit mass sampled kernel (times the cell area), zero in the halo."""
        ra, rb = self.stencil_radius(grid)
        a = np.arange(-ra, ra + 1) * grid.hx
        b = np.arange(-rb, rb + 1) * grid.hy
        X, Y = np.meshgrid(a, b, indexing="ij")
        p = PROFILES[self.profile](np.minimum((X * X + Y * Y) / self.epsilon**2, 1.0), 0)
        return p / p.sum()

    def kernels(self, grid: Grid2D, derivatives=((0, 0),)):
        """Discrete kernels (already multiplied by the cell area) for each derivative order.

        ``derivatives`` is a sequence of ``(dx, dy)`` orders with total order
        <= 2.  Derivative kernels are centred eighth order differences of the
        base kernel, so convolving with them is exactly a discrete derivative
        of the smoothed field: they annihilate constants along every grid
        line, differentiate polynomials of degree <= 8 exactly and obey
        summation by parts.
        """
        k0 = self.base_kernel(grid)
        out = []
        for dx, dy in derivatives:
            if dx + dy > 2 or min(dx, dy) < 0:
                raise ValueError(f"unsupported derivative order {(dx, dy)}")
            k = k0
            if dx:
                k = ndimage.correlate1d(k, _FD[dx] / grid.hx**dx, axis=0, mode="constant")
            if dy:
                k = ndimage.correlate1d(k, _FD[dy] / grid.hy**dy, axis=1, mode="constant")
            out.append(k)
        return out

    def second_moment(self, grid: Grid2D):
        """Discrete ``sum K(y) y_1^2`` of the normalised kernel."""
        (k,) = self.kernels(grid)
        ra, _ = self.stencil_radius(grid)
        a = np.arange(-ra, ra + 1) * grid.hx
        return float((k * a[:, None] ** 2).sum())

    def eroded_grid(self, grid: Grid2D) -> Grid2D:
        ra, rb = self.stencil_radius(grid)
        return grid.subgrid(ra, rb, grid.dims[0] - 2 * ra, grid.dims[1] - 2 * rb)

    def check(self, grid: Grid2D):
        hmax = max(grid.spacing)
        if self.epsilon < 2 * hmax:
            raise SweepError(f"epsilon={self.epsilon:g} is too small for grid spacing {hmax:g} (need >= 2h)")
        xmin, xmax, ymin, ymax = grid.bounds
        if self.epsilon > 0.5 * min(xmax - xmin, ymax - ymin):
            raise SweepError(f"epsilon={self.epsilon:g} exceeds half the domain width")


def stencil_gradient(values, grid: Grid2D):
    """Gradient with the centred eighth order stencil used by the derivative kernels.

    Values beyond the grid are taken as zero, so this is meant for test
    functions that vanish near the boundary.  Paired with kernel derivatives
    it satisfies discrete summation by parts exactly.
    """
    gx = ndimage.correlate1d(values, _FD[1] / grid.hx, axis=0, mode="constant")
    gy = ndimage.correlate1d(values, _FD[1] / grid.hy, axis=1, mode="constant")
    return gx, gy


def gradient_high_order(values, grid: Grid2D, layers=4):
    """Eighth order centred gradient, second order one sided in the outer ``layers``."""
    gx, gy = stencil_gradient(values, grid)
    lx, ly = gradient_array(values, grid)
    gx[:layers], gx[-layers:] = lx[:layers], lx[-layers:]
    gy[:, :layers], gy[:, -layers:] = ly[:, :layers], ly[:, -layers:]
    return gx, gy


def mollify(f: ScalarField, m: Mollifier, derivatives=None):
    """Convolve ``f`` with the kernel; the result lives on the eroded grid.

    With ``derivatives`` (a list of ``(dx, dy)`` orders) the matching
    derivatives of the smoothed function are returned instead, computed by
    convolving with differentiated kernels.
    """
    g = f.grid
    m.check(g)
    out_grid = m.eroded_grid(g)
    orders = [(0, 0)] if derivatives is None else list(derivatives)
    kernels = m.kernels(g, orders)
    res = [ScalarField(out_grid, signal.fftconvolve(f.values, k, mode="valid")) for k in kernels]
    return res[0] if derivatives is None else res


def mollify_same(f: ScalarField, m: Mollifier) -> ScalarField:
    """Mollify and keep the input grid by constant (edge) extension."""
    g = f.grid
    m.check(g)
    ra, rb = m.stencil_radius(g)
    (k,) = m.kernels(g)
    padded = np.pad(f.values, ((ra, ra), (rb, rb)), mode="edge")
    return ScalarField(g, signal.fftconvolve(padded, k, mode="valid"))


@dataclass(frozen=True)
class SweepPlan:
    """Decreasing list of mollification radii for an ε-sweep.

    ``extrapolation_order`` is the number of power terms ``ε^r, ε^{2r}, ...``
    in the extrapolation model.  ``rate`` fixes ``r`` (useful for smooth
    inputs, where ``r = 2``); by default it is fitted.
    """

    epsilons: tuple
    extrapolation_order: int = 1
    profile: str = "bump"
    rate: float | None = None

    def __post_init__(self):
        eps = tuple(float(e) for e in self.epsilons)
        object.__setattr__(self, "epsilons", eps)
        if len(eps) < 4:
            raise SweepError("a sweep needs at least 4 epsilons")
        if any(e <= 0 for e in eps) or any(b >= a for a, b in zip(eps, eps[1:])):
            raise SweepError("sweep epsilons must be positive and strictly decreasing")
        if self.extrapolation_order < 1 or len(eps) < self.extrapolation_order + 3:
            raise SweepError("not enough sweep points for the requested extrapolation order")

    @classmethod
    def geometric(cls, grid: Grid2D, largest_cells=16.0, smallest_cells=4.0, count=5, **kw):
        """Geometric sweep from ``largest_cells*h`` down to ``smallest_cells*h``."""
        h = max(grid.spacing)
        eps = np.geomspace(largest_cells * h, smallest_cells * h, count)
        return cls(tuple(eps), **kw)

    def validate(self, grid: Grid2D):
        hmax = max(grid.spacing)
        if self.epsilons[-1] <= 2 * hmax:
            raise SweepError(
                f"smallest epsilon {self.epsilons[-1]:g} is not resolvable on spacing {hmax:g}")

    def mollifiers(self):
        return [Mollifier(e, self.profile) for e in self.epsilons]


# ---------------------------------------------------------------------------
# quadrature


def trapezoid_weights(grid: Grid2D):
    wx = np.full(grid.dims[0], grid.hx)
    wx[[0, -1]] *= 0.5
    wy = np.full(grid.dims[1], grid.hy)
    wy[[0, -1]] *= 0.5
    return np.outer(wx, wy)


def pair_quadrature(f: ScalarField, phi: ScalarField) -> float:
    """Tensor trapezoidal rule for ``∫ f φ dx``.

    Exact for integrands that are bilinear on each cell.  Since ``φ`` must
    vanish on the outer layer the end weights never matter, and for smooth
    compactly supported integrands the rule converges spectrally.
    """
    if not f.grid.same_as(phi.grid):
        raise GridError("pairing requires a shared grid")
    if support_touches_boundary(phi.values):
        raise GridError("test function support touches the grid boundary")
    return float(np.sum(f.values * phi.values * trapezoid_weights(f.grid)))


def support_touches_boundary(values, layers=1):
    v = values
    edge = np.concatenate([v[:layers].ravel(), v[-layers:].ravel(), v[:, :layers].ravel(), v[:, -layers:].ravel()])
    return bool(np.any(edge != 0))


# ---------------------------------------------------------------------------
# test functions


@dataclass(frozen=True)
class Bump:
    """``exp(1 - 1/(1 - |x-c|^2/r^2))`` inside the disk, zero outside."""

    center: tuple
    radius: float

    def _q(self, X, Y):
        cx, cy = self.center
        return ((X - cx) ** 2 + (Y - cy) ** 2) / self.radius**2

    def values(self, X, Y):
        return math.e * _bump_profile(self._q(X, Y), 0)

    def gradient(self, X, Y):
        _, d1 = _bump_profile(self._q(X, Y), 1)
        cx, cy = self.center
        s = 2.0 * math.e / self.radius**2
        return d1 * s * (X - cx), d1 * s * (Y - cy)

    def check_inside(self, grid: Grid2D):
        xmin, xmax, ymin, ymax = grid.bounds
        pad_x, pad_y = grid.margin * grid.hx, grid.margin * grid.hy
        cx, cy = self.center
        r = self.radius
        if not (cx - r > xmin + pad_x and cx + r < xmax - pad_x and cy - r > ymin + pad_y and cy + r < ymax - pad_y):
            raise GridError(f"bump disk (center={self.center}, r={r}) is not strictly interior", location=self.center)

    def sample(self, grid: Grid2D) -> ScalarField:
        self.check_inside(grid)
        X, Y = grid.mesh()
        return ScalarField(grid, self.values(X, Y))

    def sample_gradient(self, grid: Grid2D):
        X, Y = grid.mesh()
        gx, gy = self.gradient(X, Y)
        return ScalarField(grid, gx), ScalarField(grid, gy)


def make_bump(center, radius, grid: Grid2D) -> ScalarField:
    """Smooth compactly supported bump equal to 1 at ``center``."""
    return Bump(tuple(center), float(radius)).sample(grid)


# ---------------------------------------------------------------------------
# interpolation and map inversion

NEWTON_MAX_ITER = 30
NEWTON_TOL = 1e-10


class MapInterpolant:
    """Bicubic spline interpolant of a complex valued map on a grid.

    Used both for off-node evaluation of ``ψ`` and for Newton inversion.
    """

    def __init__(self, psi: ComplexField):
        self.field = psi
        g = psi.grid
        self.grid = g
        self._re = RectBivariateSpline(g.x, g.y, psi.values.real, kx=3, ky=3, s=0)
        self._im = RectBivariateSpline(g.x, g.y, psi.values.imag, kx=3, ky=3, s=0)
        self._tree = None

    def __call__(self, x, y):
        return self._re.ev(x, y) + 1j * self._im.ev(x, y)

    def jacobian(self, x, y):
        """Real Jacobian entries ``(u_x, u_y, v_x, v_y)`` of ``ψ = u + i v``."""
        return (self._re.ev(x, y, dx=1), self._re.ev(x, y, dy=1),
                self._im.ev(x, y, dx=1), self._im.ev(x, y, dy=1))

    def _nearest(self, q):
        if self._tree is None:
            v = self.field.values.ravel()
            self._tree = cKDTree(np.column_stack([v.real, v.imag]))
        _, idx = self._tree.query(np.column_stack([q.real, q.imag]))
        i, j = np.unravel_index(idx, self.grid.dims)
        return self.grid.origin[0] + i * self.grid.hx, self.grid.origin[1] + j * self.grid.hy

    def invert(self, query, tol=NEWTON_TOL, max_iter=NEWTON_MAX_ITER, x0=None):
        """Preimages of ``query`` (complex array) by damped Newton iteration.

        Starts from the nearest-node preimage unless ``x0`` is given.
        Raises :class:`InversionError` for queries outside the image or when
        Newton does not converge.
        """
        q = np.atleast_1d(np.asarray(query, dtype=complex)).ravel()
        if x0 is None:
            x, y = self._nearest(q)
        else:
            x, y = (np.array(v, dtype=float).ravel() for v in x0)
        x = np.array(x, dtype=float)
        y = np.array(y, dtype=float)
        xmin, xmax, ymin, ymax = self.grid.bounds
        scale = np.maximum(1.0, np.abs(q))
        active = np.ones(q.shape, dtype=bool)
        res = np.abs(self(x, y) - q)
        for _ in range(max_iter):
            active = res > tol * scale
            if not active.any():
                break
            xa, ya = x[active], y[active]
            r = self(xa, ya) - q[active]
            ux, uy, vx, vy = self.jacobian(xa, ya)
            det = ux * vy - uy * vx
            det = np.where(np.abs(det) < 1e-300, 1e-300, det)
            dx = (vy * r.real - uy * r.imag) / det
            dy = (-vx * r.real + ux * r.imag) / det
            xn = np.clip(xa - dx, xmin, xmax)
            yn = np.clip(ya - dy, ymin, ymax)
            x[active], y[active] = xn, yn
            res[active] = np.abs(self(xn, yn) - q[active])
        bad = res > tol * scale
        if bad.any():
            k = int(np.argmax(np.where(bad, res, -1)))
            on_edge = (x[k] in (xmin, xmax)) or (y[k] in (ymin, ymax))
            msg = "query outside the image of the map" if on_edge else "Newton inversion did not converge"
            raise InversionError(f"{msg} (query {q[k]:.6g}, residual {res[k]:.3g})",
                                 location=(float(q[k].real), float(q[k].imag)))
        return x, y


def invert_map(psi: ComplexField, query, tol=NEWTON_TOL):
    """Preimage ``x`` with ``|ψ(x) - query| <= tol``; ``query`` is a complex number or array.

    Returns complex ``x + i y`` (array for array input).
    """
    x, y = MapInterpolant(psi).invert(query, tol=tol)
    out = x + 1j * y
    return complex(out[0]) if np.ndim(query) == 0 else out.reshape(np.shape(query))


def spline_eval(field: ScalarField, x, y, dx=0, dy=0):
    """Bicubic spline evaluation of a scalar field at scattered points."""
    g = field.grid
    s = RectBivariateSpline(g.x, g.y, field.values, kx=3, ky=3, s=0)
    return s.ev(x, y, dx=dx, dy=dy)


# ---------------------------------------------------------------------------
# extrapolation


@dataclass
class Extrapolation:
    limit: float
    rate: float
    fit_residual: float
    coefficients: list = field(default_factory=list)
    warnings: list = field(default_factory=list)


def _power_design(eps, r, order):
    cols = [np.ones_like(eps)] + [eps ** (k * r) for k in range(1, order + 1)]
    return np.column_stack(cols)


def _fit(eps, vals, order, rate_bounds, fixed_rate=None):
    """Variable projection fit of ``L + sum_k A_k eps^(k r)``."""
    escale = eps.max()
    e = eps / escale
    if fixed_rate is not None:
        rate_bounds = (fixed_rate, fixed_rate)

    def sse(r):
        A = _power_design(e, r, order)
        coef, *_ = np.linalg.lstsq(A, vals, rcond=None)
        return float(np.sum((A @ coef - vals) ** 2))

    if fixed_rate is not None:
        r = float(fixed_rate)
    else:
        grid_r = np.linspace(rate_bounds[0], rate_bounds[1], 200)
        scores = np.array([sse(r) for r in grid_r])
        k = int(np.argmin(scores))
        lo = grid_r[max(k - 1, 0)]
        hi = grid_r[min(k + 1, len(grid_r) - 1)]
        best = optimize.minimize_scalar(sse, bounds=(lo, hi), method="bounded",
                                        options={"xatol": 1e-12, "maxiter": 500})
        r = float(best.x) if best.fun <= scores[k] else float(grid_r[k])
    A = _power_design(e, r, order)
    coef, *_ = np.linalg.lstsq(A, vals, rcond=None)
    resid = A @ coef - vals
    cond = np.linalg.cond(A)
    # rescale amplitudes back to physical epsilon units
    amps = [float(c / escale ** (j * r)) for j, c in enumerate(coef[1:], start=1)]
    return float(coef[0]), r, amps, resid, cond


def richardson_extrapolate(sweep: Sequence, plan: SweepPlan | None = None, rate_bounds=(0.05, 6.0)) -> Extrapolation:
    """Fit ``value(ε) = L + A ε^r`` by least squares and return the limit ``L``.

    Parameters
    ----------
    sweep : sequence of (ε, value)
        At least four points.
    plan : SweepPlan, optional
        Supplies the number of power terms.

    Returns
    -------
    Extrapolation
        ``fit_residual`` is the larger of the RMS fit residual and the shift of
        the limit when the coarsest point is dropped; it is the uncertainty
        callers compare against.  When the rate sits at its lower bound the
        gap between the limit and the last sweep value is included.
        Constant sweeps return the last value with ``rate = 0`` and a
        ``rate-indeterminate`` warning; ill-conditioned fits fall back to the
        last value with an ``ill-conditioned`` warning.
    """
    pts = sorted(((float(e), float(v)) for e, v in sweep), key=lambda t: -t[0])
    if len(pts) < 4:
        raise SweepError("extrapolation needs at least 4 sweep points")
    eps = np.array([p[0] for p in pts])
    vals = np.array([p[1] for p in pts])
    if np.any(np.diff(eps) >= 0):
        raise SweepError("sweep epsilons must be distinct")
    order = plan.extrapolation_order if plan is not None else 1
    fixed = plan.rate if plan is not None else None
    scale = max(np.max(np.abs(vals)), 1e-300)
    spread = np.ptp(vals)
    if spread <= 64 * np.finfo(float).eps * scale or spread == 0.0:
        return Extrapolation(float(vals[-1]), 0.0, float(spread), [], ["rate-indeterminate"])

    L, r, amps, resid, cond = _fit(eps, vals, order, rate_bounds, fixed)
    warn = []
    if not np.isfinite(L) or cond > 1e12:
        warnings.warn("ill-conditioned extrapolation; falling back to the smallest-epsilon value", RuntimeWarning)
        return Extrapolation(float(vals[-1]), 0.0, float(np.abs(vals[-1] - vals[-2])), [], ["ill-conditioned"])
    if fixed is None and (r <= rate_bounds[0] + 1e-6 or r >= rate_bounds[1] - 1e-6):
        warn.append("rate-at-bound")
    rms = float(np.sqrt(np.mean(resid**2)))
    if "rate-at-bound" in warn and r < 1.0:
        # a nearly flat rate makes the limit unidentifiable; own up to the extrapolation gap
        rms = max(rms, abs(L - float(vals[-1])))
    stability = 0.0
    if len(eps) - 1 >= order + 2:
        L2, *_ = _fit(eps[1:], vals[1:], order, rate_bounds, fixed)
        stability = abs(L2 - L) if np.isfinite(L2) else abs(vals[-1] - L)
    return Extrapolation(L, r, max(rms, stability), amps, warn)
