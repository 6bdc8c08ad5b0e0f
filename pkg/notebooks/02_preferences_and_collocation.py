"""
Preferences and shared entry points
===================================

Regions may dislike parts of their own territory.  A preference function,
rescaled to [0, 1] over each region, must reach a threshold at the entry
point.  Raising the threshold can only shrink the feasible set, so costs go up.

Separately, two overlapping regions may share one entry point and pay for it
once.
"""

import numpy as np

from regioloc.gen import GenConfig, generate
from regioloc.geometry import Region
from regioloc.model import Instance, solve_instance, validate_solution
from regioloc.prefs import normalize

# --- thresholds ---------------------------------------------------------------

# Cobb-Douglas preferences: piecewise constant over a few sector cells,
# so the threshold turns into a choice of admissible cells (binaries)
costs = {}
for t in (0.0, 0.2, 0.8):
    inst = generate(GenConfig(n=6, p=2, scenario="mixed", pref_family="CD", threshold=t, seed=8, blob_std=0.6))
    sol = solve_instance(inst)
    rep = validate_solution(inst, sol)
    costs[t] = sol.objective
    print(f"threshold {t}: cost {sol.objective:.5f}, nodes {sol.nodes}, worst violation {rep.max_violation():.1e}")

print("price of asking for 0.8:", (costs[0.8] - costs[0.0]) / costs[0.0])

# what does normalization look like for one region?
spec, region = inst.prefs[0], inst.regions[0]
norm = normalize(spec, region)
print("raw range", norm.lb, norm.ub, "over", len(norm.nonempty), "cell combinations")
pts = np.array(region.center) + region.radius * 0.5 * np.array([[1, 0], [0, 1], [-1, 0], [0, -1]])
print("rescaled values", [round(norm.normalized(p), 3) for p in pts])

# --- collocation ----------------------------------------------------------------

# two separated regions up top and two overlapping ones at the bottom
regions = [Region((0, 5), 0.5), Region((3, 5), 0.5), Region((0.2, 0), 0.6), Region((1.0, 0), 0.6)]
plain = solve_instance(Instance(regions, None))
merged = solve_instance(Instance(regions, None, collocation=True))
print("separate entry points:", round(plain.objective, 4))
print("shared entry point   :", round(merged.objective, 4), "pairs", merged.collocated)
print(f"saving {1 - merged.objective / plain.objective:.1%}")
print("bottom entries", merged.entries[2], merged.entries[3])
