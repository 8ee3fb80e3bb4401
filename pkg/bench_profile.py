import cProfile
import pstats
import time

from dplogit import gmm, moments, simulation as sim

design = sim.ar_design(n_units=8000, seed=11)
data = sim.simulate(design, 0)
spec = design.spec
ids = moments.enumerate_moments(spec)
expanded, n_paths = moments.expand_paths(spec, data)
theta = design.theta_true

t0 = time.perf_counter()
for _ in range(3):
    moments.psi_matrix(spec, theta, expanded, ids)
t_val = (time.perf_counter() - t0) / 3
t0 = time.perf_counter()
for _ in range(3):
    moments.psi_matrix_grad(spec, theta, expanded, ids)
t_grad = (time.perf_counter() - t0) / 3
print(f"psi_matrix {t_val:.3f}s  psi_matrix_grad {t_grad:.3f}s on expanded rows={expanded.n_units}")

prof = cProfile.Profile()
prof.enable()
moments.psi_matrix_grad(spec, theta, expanded, ids)
prof.disable()
stats = pstats.Stats(prof)
stats.sort_stats("cumulative").print_stats(18)
