import sys
import time

import numpy as np

from dplogit import simulation as sim

which = sys.argv[1]
reps = int(sys.argv[2])
opts = {"step_tol": 3e-7}

t0 = time.perf_counter()
if which == "ar2000":
    design = sim.ar_design(n_units=2000, seed=20260814)
    res = sim.monte_carlo(design, ("identity", "rescaled"), reps=reps,
                          threads=1, solver_options=opts)
elif which == "ar8000":
    design = sim.ar_design(n_units=8000, seed=20260814)
    res = sim.monte_carlo(design, ("rescaled",), reps=reps,
                          threads=1, solver_options=opts)
else:
    design = sim.var_design(n_units=8000, seed=20260814)
    res = sim.monte_carlo(design, ("iterated",), reps=reps,
                          threads=1, solver_options=opts)
dt = time.perf_counter() - t0

print(f"{which} reps={reps} wall={dt:.0f}s ({dt / reps:.1f} s/rep)")
for est in res.estimators:
    print(f"  {est}: conv={res.convergence_fraction(est):.2f} "
          f"median_bias={np.round(res.median_bias(est), 4)} "
          f"mae={np.round(res.median_abs_error(est), 4)}")
