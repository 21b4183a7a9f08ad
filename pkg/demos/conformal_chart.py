"""
Isothermal coordinates and curvature as a distribution
======================================================

Build a conformal chart (psi, sigma) for a curved metric, check that two
charts built with different cutoffs agree, and compare the Dirichlet-form
curvature pairing with the classical integral of K.
"""

import numpy as np

from weakdarboux import build_chart, get_case
from weakdarboux.beltrami import chart_transition_check
from weakdarboux.flatten import classical_curvature_pairing, default_battery, distributional_curvature
from weakdarboux.geometry import gaussian_curvature_classical

case = get_case("sphere_cap")
h = case.metric_field(case.grid(128))

chart = build_chart(h)
q = chart.quality
print(f"k = {q['k']:.3f}, {q['iterations']} Neumann steps, contraction {q['contraction_ratio']:.3f}")
print(f"conformality residual {q['residual']:.2e}, sigma in [{chart.sigma.values[chart.mask].min():.3f}, "
      f"{chart.sigma.values[chart.mask].max():.3f}]")

# a second chart from a different pad and cutoff collar
other = build_chart(h, pad_fraction=0.75, collar_fraction=0.3)
x0, x1, y0, y1 = h.grid.bounds
rep = chart_transition_check(chart, other, (x0 + 0.05, x1 - 0.05, y0 + 0.05, y1 - 0.05))
print(f"transition: CR residual {rep['cr_residual']:.2e}, defect {rep['defect']:.2e}")

# the pairing is twice the classical integral of K dV
K = gaussian_curvature_classical(h)
for bump in default_battery(h.grid, 3):
    a = distributional_curvature(bump, chart).limit
    b = distributional_curvature(bump, other).limit
    c = classical_curvature_pairing(bump, h, K)
    print(f"chart 1 {a:.8f}  chart 2 {b:.8f}  classical {c:.8f}  ratio {a / c:.5f}")
