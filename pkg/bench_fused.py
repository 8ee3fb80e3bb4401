import time

from dplogit import simulation as sim

for n in (2000, 8000):
    design = sim.ar_design(n_units=n, seed=11)
    t0 = time.perf_counter()
    recs = sim._run_rep(design, 0, ("identity", "rescaled"), False, None, None, {})
    dt = time.perf_counter() - t0
    for r in recs:
        flat = r.theta_hat
        print(f"N={n} {r.estimator:9s} conv={r.converged} "
              f"obj={r.objective:.4e} theta={[round(v, 4) for v in flat]}")
    print(f"N={n} rep wall time {dt:.1f} s")
