"""
Flat metrics and isometric immersions
=====================================

A flat metric in disguise is unrolled back into the plane.  Then a Darboux
solution u on the sphere cap is turned into an immersion r = (phi, u) and
compared with the standard embedding.
"""

import numpy as np

from weakdarboux import flatten_metric, get_case, immersion_from_darboux
from weakdarboux.errors import NotFlatError
from weakdarboux.flatten import procrustes

# (x + 0.2 sin y, y) pulls the plane back to a non-trivial flat metric
case = get_case("pullback_flat")
for n in (64, 128):
    grid = case.grid(n)
    phi = flatten_metric(case.metric_field(grid))
    oracle = np.stack([c.values.ravel() for c in case.flat_map_fields(grid)], axis=-1)
    R, t, dev = procrustes(phi.points(), oracle)
    print(f"n={n}: pullback residual {phi.pullback_residual['max']:.2e}, aligned deviation {dev:.2e}")

# the sphere itself is curved and is refused
try:
    flatten_metric(get_case("sphere_cap").metric_field(get_case("sphere_cap").grid(64)))
except NotFlatError as exc:
    print("sphere cap:", exc)

# g - du^2 is flat when u solves the Darboux equation; (phi, u) is then isometric
case = get_case("sphere_cap")
for n in (64, 128):
    grid = case.grid(n)
    r = immersion_from_darboux(case.metric_field(grid), case.u_field(grid))
    truth = np.stack([c.values.ravel() for c in case.immersion_fields(grid)], axis=-1)
    _, _, dev = procrustes(r.points(), truth)
    print(f"n={n}: |Dr^T Dr - g| relative {r.pullback_residual['relative']:.2e}, "
          f"distance to the round sphere {dev:.2e}")
