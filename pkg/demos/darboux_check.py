"""
Checking the Darboux equation on a sphere cap
=============================================

u = r.e for the unit sphere satisfies det(Hess_g u) = K_g (1 - |du|_g^2).
We look at the pointwise residual, then at the weak form paired with bumps,
and finally at a function that is *not* a solution.
"""

import numpy as np

from weakdarboux import PairingConfig, SweepPlan, get_case, weak_darboux_residual
from weakdarboux.fields import Bump
from weakdarboux.flatten import default_battery
from weakdarboux.weakprod import classical_darboux_residual

case = get_case("sphere_cap")
print(case.description)

# pointwise residual, second order in h
for n in (64, 128, 256):
    grid = case.grid(n)
    r = classical_darboux_residual(case.metric_field(grid), case.u_field(grid))
    print(f"n={n:4d}  max |residual| = {np.abs(r.values).max():.3e}")

# weak form: both sides are mollification sweeps, extrapolated to eps -> 0
grid = case.grid(256)
g, u = case.metric_field(grid), case.u_field(grid)
cfg = PairingConfig(SweepPlan.geometric(grid), margin=case.margin)
for bump in default_battery(grid, 3):
    res = weak_darboux_residual(g, u, bump.sample(grid), cfg)
    print(f"bump at ({bump.center[0]:.3f}, {bump.center[1]:.3f}) r={bump.radius:.3f}: "
          f"lhs={res.lhs.limit:.8f} rhs={res.rhs.limit:.8f} residual={res.residual:.2e} (rate {res.lhs.rate:.2f})")

# a paraboloid over the flat plane is not a solution: K = 0 but det D^2 u > 0
case = get_case("paraboloid_nonsolution")
grid = case.grid(256)
res = weak_darboux_residual(case.metric_field(grid), case.u_field(grid), Bump((0.1, -0.05), 0.5).sample(grid),
                            PairingConfig(SweepPlan.geometric(grid)))
print(f"paraboloid: residual = {res.residual:.10f} (nonzero, as it should be)")
