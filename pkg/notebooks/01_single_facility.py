"""
One facility, many regions
==========================

Customers live in small norm balls rather than at points.  Each region gets an
entry point somewhere inside its ball and pays the distance from there to the
facility, so a region that already contains the facility pays nothing.
"""

import tempfile
from pathlib import Path

import numpy as np

from regioloc.gen import GenConfig, generate
from regioloc.harness import plot_solution
from regioloc.model import solve_instance
from regioloc.oracle import grid_weber

# twelve Euclidean regions in three loose clusters
inst = generate(GenConfig(n=12, p=1, scenario="l2", seed=4, blob_std=1.5))
for r in inst.regions[:3]:
    print(np.round(r.center, 3), round(r.radius, 3), round(r.weight, 3))

# the conic model; with one facility there are no binaries and a single
# interior-point solve does the job
sol = solve_instance(inst)
print("model:", sol.status, sol.objective)
print("facility at", sol.facilities[0])

# a brute-force check: evaluate the cost on a zooming grid
x, val = grid_weber(inst)
print("grid :", val, "at", x)
print("relative gap", abs(val - sol.objective) / sol.objective)

# entry points sit on the ball boundary facing the facility
for i in range(3):
    c = np.array(inst.regions[i].center)
    a = sol.entries[i]
    print(i, "entry is", round(float(np.linalg.norm(a - c)), 4), "from its center")

# mixed norms: l1 diamonds, l3 and l4 blobs and squares all compile to cones
mixed = generate(GenConfig(n=12, p=1, scenario="mixed", seed=4, blob_std=1.5))
msol = solve_instance(mixed)
print("mixed norms:", msol.objective, {r.ball_norm for r in mixed.regions})

out = Path(tempfile.mkdtemp()) / "single_facility.svg"
plot_solution(mixed, msol, out)
print("picture in", out)
