import time

import numpy as np

from dplogit import simulation as sim

design = sim.var_design(n_units=8000, seed=11)
print("theta_true:", design.theta_true.to_flat(design.spec))
for tol in (1e-10, 3e-7):
    t0 = time.perf_counter()
    recs = sim._run_rep(design, 0, ("iterated",), False, None, None,
                        {"step_tol": tol})
    dt = time.perf_counter() - t0
    r = recs[0]
    print(f"xtol={tol:.0e} conv={r.converged} obj={r.objective:.4e} "
          f"theta={np.round(r.theta_hat, 4)} "
          f"wall={dt:.1f}s msgs={r.messages}")
