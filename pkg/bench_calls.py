import time

import numpy as np

from dplogit import gmm, moments, simulation as sim
from dplogit.models import Theta

design = sim.ar_design(n_units=8000, seed=11)
data = sim.simulate(design, 0)
spec = design.spec
ids = moments.enumerate_moments(spec)
instr = gmm.default_instruments(spec)

pilot = gmm.estimate(data, spec=spec, config=gmm.EstimatorConfig(
    estimator="identity", compute_covariance=False)).theta_hat
x0 = pilot.to_flat(spec)

for fuse in (False, True):
    prob = gmm.GmmProblem(data, ids, instr, rescaled=True)
    prob._fuse_gradients = fuse
    calls = {"f": 0, "j": 0}
    jac_inner = prob.exact_jacobian(None)

    def res_fn(x):
        calls["f"] += 1
        return prob.residuals(Theta.from_flat(spec, x), None)

    def jac_fn(x):
        calls["j"] += 1
        return jac_inner(x)

    t0 = time.perf_counter()
    from scipy import optimize
    res = optimize.least_squares(res_fn, x0, jac=jac_fn, method="lm",
                                 diff_step=1e-5, xtol=1e-10, gtol=1e-8,
                                 ftol=1e-10, max_nfev=1000)
    dt = time.perf_counter() - t0
    print(f"fuse={fuse} nfev={calls['f']} njev={calls['j']} wall={dt:.1f}s "
          f"f={2*res.cost:.4e} x={np.round(res.x, 4)}")
