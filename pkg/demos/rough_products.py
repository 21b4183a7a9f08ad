"""
Products of rough functions
===========================

For Holder fields f, w of exponent theta the product (d_i f) w is only a
distribution, but it is well defined when 2 theta > 1.  We compute it as an
eps -> 0 limit and check it against identities that hold for rough inputs.
"""

import numpy as np

from weakdarboux import PairingConfig, SweepPlan, lacunary_field
from weakdarboux.fields import Bump, Grid2D, ScalarField, stencil_gradient
from weakdarboux.weakprod import pair_derivative_product, product_rule_gap, threshold_table

grid = Grid2D.from_bounds(0, 1, 0, 1, 513)
f = lacunary_field(0.6, 3, 5, 1, grid, order=0)
w = lacunary_field(0.6, 3, 5, 2, grid, order=0)
phi = Bump((0.5, 0.5), 0.3).sample(grid)
phi_x = ScalarField(grid, stencil_gradient(phi.values, grid)[0])
cfg = PairingConfig(SweepPlan.geometric(grid, 16, 4, 6))

a = pair_derivative_product(f, w, phi, cfg)
b = pair_derivative_product(w, f, phi, cfg)
print("sweep of (d_x f) w [phi]:")
for eps, v in a.sweep:
    print(f"  eps={eps:.4f}  {v:+.8f}")
print(f"limit {a.limit:+.8f}, rate {a.rate:.2f}, fit residual {a.fit_residual:.1e}")

# product rule: (d f) w + (d w) f = d(f w)
print(f"product rule gap {a.limit + b.limit - product_rule_gap(f, w, phi_x, 0):.2e}")

# another kernel, same limit
poly = PairingConfig(SweepPlan.geometric(grid, 16, 4, 6, profile="poly"))
print(f"polynomial kernel limit {pair_derivative_product(f, w, phi, poly).limit:+.8f}")

# sweeps stay bounded above the threshold theta1 + theta2 = 1 and grow below it
rows = threshold_table([(0.7, 0.7), (0.3, 0.3)], 3, [3, 4, 5], grid, phi, cfg)
for t1, t2, K, size in rows:
    print(f"theta=({t1}, {t2}) K={K}: max |sweep| = {size:.4f}")
