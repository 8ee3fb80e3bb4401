import numpy as np

from dplogit import moments, transitions as tf
from dplogit import simulation as sim
from dplogit.models import Theta

worst_val = 0.0
worst_grad = 0.0
rng = np.random.default_rng(7)
for p in (1, 2, 3):
    for kx in (0, 2):
        design = sim.ar_design(n_units=40, seed=3, p=p, T=p + 3, Kx=kx,
                               gamma=tuple(rng.normal(0.4, 0.3, p)),
                               beta=tuple(rng.normal(0.5, 0.2, kx)))
        data = sim.simulate(design, 0)
        spec = design.spec
        theta = design.theta_true
        ids = moments.enumerate_moments(spec)
        vals, grads = moments.psi_matrix_grad(spec, theta, data, ids)
        plain = moments.psi_matrix(spec, theta, data, ids)
        worst_val = max(worst_val, float(np.abs(vals - plain).max()))

        # scalar per-unit route for phi
        for target in ([1] * p, [0] + [1] * (p - 1)):
            with tf.shared_evaluation():
                vec = tf.phi(spec, theta, data, p, tuple(target))
            scal = np.array([tf.phi_arp(tuple(target), p, data.unit(i), theta)
                             for i in range(data.n_units)])
            worst_val = max(worst_val, float(np.abs(vec - scal).max()))

        x0 = theta.to_flat(spec)
        fd = np.empty_like(grads)
        for j in range(x0.size):
            h = 1e-6 * (1.0 + abs(x0[j]))
            e = np.zeros_like(x0)
            e[j] = h
            up = moments.psi_matrix(spec, Theta.from_flat(spec, x0 + e), data, ids)
            dn = moments.psi_matrix(spec, Theta.from_flat(spec, x0 - e), data, ids)
            fd[:, :, j] = (up - dn) / (2.0 * h)
        err = np.abs(grads - fd) / (1.0 + np.abs(fd))
        worst_grad = max(worst_grad, float(err.max()))

print(f"value agreement worst abs diff: {worst_val:.3e}")
print(f"gradient vs central FD worst rel err: {worst_grad:.3e}")
