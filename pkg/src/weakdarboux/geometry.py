"""Classical Riemannian operations on grid-sampled 2D metrics.

Metrics are stored as the three first-fundamental-form entries
``E = g11, F = g12, G = g22``.  All derivatives are second order finite
differences from :mod:`weakdarboux.fields`, so every quantity here is
``O(h^2)`` accurate on the interior for smooth inputs.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import MarginViolation, SPDError
from .fields import Grid2D, ScalarField, gradient_array, hessian_arrays


class RoughInputWarning(UserWarning):
    """Classical curvature requested for data that does not look C^2."""


@dataclass(frozen=True, eq=False)
class MetricField:
    grid: Grid2D
    E: np.ndarray
    F: np.ndarray
    G: np.ndarray

    def __post_init__(self):
        for name in ("E", "F", "G"):
            v = getattr(self, name)
            if isinstance(v, ScalarField):
                v = v.values
            v = np.asarray(v, dtype=float)
            if v.shape == ():
                v = np.full(self.grid.dims, float(v))
            if v.shape != self.grid.dims:
                raise ValueError(f"metric entry {name} has shape {v.shape}, grid is {self.grid.dims}")
            v.setflags(write=False)
            object.__setattr__(self, name, v)

    @classmethod
    def euclidean(cls, grid):
        return cls(grid, 1.0, 0.0, 1.0)

    @classmethod
    def from_exprs(cls, grid, E, F, G):
        from .fields import sample_field

        return cls(grid, *(sample_field(s, grid).values for s in (E, F, G)))

    @classmethod
    def pullback(cls, grid, components, derivatives=None):
        """Metric ``Dr^T Dr`` of a sampled map ``r`` (list of ScalarFields).

        ``derivatives`` may supply exact ``(r_x, r_y)`` arrays per component.
        """
        E = np.zeros(grid.dims)
        F = np.zeros(grid.dims)
        G = np.zeros(grid.dims)
        for k, c in enumerate(components):
            rx, ry = derivatives[k] if derivatives is not None else gradient_array(c.values, grid)
            E += rx * rx
            F += rx * ry
            G += ry * ry
        return cls(grid, E, F, G)

    def field(self, name) -> ScalarField:
        return ScalarField(self.grid, getattr(self, name))

    def det(self):
        return self.E * self.G - self.F**2

    def trace(self):
        return self.E + self.G

    def inverse(self):
        """``(g^11, g^12, g^22)``."""
        d = self.det()
        return self.G / d, -self.F / d, self.E / d

    def crop(self, grid: Grid2D) -> "MetricField":
        i0, j0 = grid.offset_in(self.grid)
        sl = (slice(i0, i0 + grid.dims[0]), slice(j0, j0 + grid.dims[1]))
        return MetricField(grid, self.E[sl], self.F[sl], self.G[sl])

    def check_spd(self):
        """Raise :class:`SPDError` at the first node where the metric is not positive definite."""
        d = self.det()
        bad = ~((self.E > 0) & (self.G > 0) & (d > 0))
        if bad.any():
            i, j = (int(v) for v in np.argwhere(bad)[0])
            raise SPDError(f"metric is not positive definite at node ({i}, {j}), det={d[i, j]:.3g}",
                           location=self.grid.coords(i, j))
        return self


@dataclass(frozen=True, eq=False)
class ChristoffelField:
    """Christoffel symbols, six independent slots (symmetric lower indices)."""

    grid: Grid2D
    slots: dict  # keys (k, i, j) with i <= j, 0-based

    def __call__(self, k, i, j):
        return self.slots[(k, min(i, j), max(i, j))]


def christoffel(g: MetricField) -> ChristoffelField:
    """``Γ^k_ij = ½ g^kl (∂_i g_jl + ∂_j g_il − ∂_l g_ij)`` by finite differences."""
    g.check_spd()
    grid = g.grid
    comp = [[g.E, g.F], [g.F, g.G]]
    dcomp = {}
    for a in range(2):
        for b in range(a, 2):
            dx, dy = gradient_array(comp[a][b], grid)
            dcomp[(a, b)] = (dx, dy)
            dcomp[(b, a)] = (dx, dy)
    gi11, gi12, gi22 = g.inverse()
    ginv = [[gi11, gi12], [gi12, gi22]]

    def dg(l, i, j):  # ∂_l g_ij
        return dcomp[(i, j)][l]

    # first kind Γ_lij = ½(∂_i g_jl + ∂_j g_il − ∂_l g_ij)
    slots = {}
    for i in range(2):
        for j in range(i, 2):
            first = [0.5 * (dg(i, j, l) + dg(j, i, l) - dg(l, i, j)) for l in range(2)]
            for k in range(2):
                slots[(k, i, j)] = ginv[k][0] * first[0] + ginv[k][1] * first[1]
    return ChristoffelField(grid, slots)


def grad_norm_sq(g: MetricField, u: ScalarField) -> ScalarField:
    """``|du|_g^2 = g^ij ∂_i u ∂_j u``."""
    g.check_spd()
    ux, uy = gradient_array(u.values, u.grid)
    return ScalarField(u.grid, _norm_sq(g, ux, uy))


def _norm_sq(g, ux, uy):
    gi11, gi12, gi22 = g.inverse()
    return gi11 * ux * ux + 2 * gi12 * ux * uy + gi22 * uy * uy


def covariant_hessian(gamma: ChristoffelField, ux, uy, uxx, uxy, uyy):
    """Entries ``∂²_ij u − Γ^k_ij ∂_k u`` of ``∇du``."""
    H11 = uxx - gamma(0, 0, 0) * ux - gamma(1, 0, 0) * uy
    H12 = uxy - gamma(0, 0, 1) * ux - gamma(1, 0, 1) * uy
    H22 = uyy - gamma(0, 1, 1) * ux - gamma(1, 1, 1) * uy
    return H11, H12, H22


def hessian_det(g: MetricField, gamma: ChristoffelField, u: ScalarField) -> ScalarField:
    """``det ∇²_g u = det(∂²_ij u − Γ^k_ij ∂_k u) / det g``."""
    g.check_spd()
    ux, uy = gradient_array(u.values, u.grid)
    uxx, uxy, uyy = hessian_arrays(u.values, u.grid)
    H11, H12, H22 = covariant_hessian(gamma, ux, uy, uxx, uxy, uyy)
    return ScalarField(u.grid, (H11 * H22 - H12**2) / g.det())


def brioschi(E, F, G, Eu, Ev, Fu, Fv, Gu, Gv, Evv, Fuv, Guu):
    """Brioschi formula for Gaussian curvature from E, F, G and their derivatives."""
    a11 = -0.5 * Evv + Fuv - 0.5 * Guu
    a12 = 0.5 * Eu
    a13 = Fu - 0.5 * Ev
    a21 = Fv - 0.5 * Gu
    a31 = 0.5 * Gv
    det1 = (a11 * (E * G - F * F) - a12 * (a21 * G - F * a31) + a13 * (a21 * F - E * a31))
    b12 = 0.5 * Ev
    b13 = 0.5 * Gu
    det2 = (-b12 * (b12 * G - F * b13) + b13 * (b12 * F - E * b13))
    return (det1 - det2) / (E * G - F * F) ** 2


def _roughness(values, grid):
    """Relative mismatch of second differences at steps h and 2h (large for non-C^2 data)."""
    f = values
    if min(f.shape) < 9:
        return 0.0
    d1 = (f[2:, :] - 2 * f[1:-1, :] + f[:-2, :])[1:-1, 2:-2] / grid.hx**2
    d2 = (f[4:, :] - 2 * f[2:-2, :] + f[:-4, :])[:, 2:-2] / (2 * grid.hx) ** 2
    diff = np.abs(d1 - d2).max()
    # floor keeps linear-in-x data (zero second differences) from reading as rough
    L = grid.hx * (f.shape[0] - 1)
    scale = np.abs(d1).max() + np.abs(d2).max() + 1e-6 * (np.abs(f).max() + 1.0) / L**2
    return float(diff / scale)


def gaussian_curvature_classical(g: MetricField, rough_threshold=0.2) -> ScalarField:
    """Gaussian curvature by the Brioschi formula.

    Data whose second differences disagree strongly between steps ``h`` and
    ``2h`` is flagged with a :class:`RoughInputWarning`; the value is still
    returned.
    """
    g.check_spd()
    grid = g.grid
    Eu, Ev = gradient_array(g.E, grid)
    Fu, Fv = gradient_array(g.F, grid)
    Gu, Gv = gradient_array(g.G, grid)
    _, _, Evv = hessian_arrays(g.E, grid)
    _, Fuv, _ = hessian_arrays(g.F, grid)
    Guu, _, _ = hessian_arrays(g.G, grid)
    if max(_roughness(v, grid) for v in (g.E, g.F, g.G)) > rough_threshold:
        warnings.warn("metric looks rougher than C^2; classical curvature is not meaningful here",
                      RoughInputWarning, stacklevel=2)
    K = brioschi(g.E, g.F, g.G, Eu, Ev, Fu, Fv, Gu, Gv, Evv, Fuv, Guu)
    return ScalarField(grid, K)


def check_margin(g: MetricField, u: ScalarField, bound=1.0, what="|du|_g"):
    """Raise :class:`MarginViolation` where ``|du|_g >= bound``; returns ``|du|_g^2``."""
    n2 = grad_norm_sq(g, u).values
    k = int(np.argmax(n2))
    i, j = np.unravel_index(k, n2.shape)
    worst = float(np.sqrt(n2[i, j]))
    if worst >= bound:
        raise MarginViolation(
            f"{what} reaches {worst:.6g} >= {bound:.6g} at node ({i}, {j})",
            location=g.grid.coords(int(i), int(j)))
    return n2


def perturbed_metric(g: MetricField, u: ScalarField) -> MetricField:
    """``h = g − du ⊗ du``; requires ``|du|_g < 1`` everywhere."""
    g.check_spd()
    check_margin(g, u)
    ux, uy = gradient_array(u.values, u.grid)
    return MetricField(g.grid, g.E - ux * ux, g.F - ux * uy, g.G - uy * uy)


def curvature_perturbed(g: MetricField, u: ScalarField, K_g: ScalarField | None = None) -> ScalarField:
    """Curvature of ``h = g − du²`` from data of ``g`` and ``u``::

        K_h = (K_g − det(∇du) / ((1 − |du|²) det g)) / (1 − |du|²)
    """
    n2 = check_margin(g, u)
    gamma = christoffel(g)
    ux, uy = gradient_array(u.values, u.grid)
    uxx, uxy, uyy = hessian_arrays(u.values, u.grid)
    H11, H12, H22 = covariant_hessian(gamma, ux, uy, uxx, uxy, uyy)
    detH = H11 * H22 - H12**2
    Kg = gaussian_curvature_classical(g).values if K_g is None else K_g.values
    one = 1.0 - n2
    return ScalarField(g.grid, (Kg - detH / (one * g.det())) / one)
