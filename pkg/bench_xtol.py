import time

import numpy as np

from dplogit import simulation as sim

for n in (2000, 8000):
    design = sim.ar_design(n_units=n, seed=11)
    for tol in (1e-10, 1e-8, 3e-7):
        t0 = time.perf_counter()
        recs = sim._run_rep(design, 0, ("rescaled",), False, None, None,
                            {"step_tol": tol})
        dt = time.perf_counter() - t0
        r = recs[0]
        flat = r.theta_hat
        print(f"N={n} xtol={tol:.0e} conv={r.converged} obj={r.objective:.6e} "
              f"theta={np.round(flat, 5)} wall={dt:.1f}s")
