"""Dev smoke test: transition identities against the brute-force oracle."""
import numpy as np

from dplogit import (
    ModelSpec, Theta, conditional_expectation, transition_probability,
    TransitionState, enumerate_moments, check_partial_fractions,
    rank_of_image,
)
from dplogit import transitions as tf
from dplogit import moments as mb
from dplogit import oracle as orc

rng = np.random.Generator(np.random.Philox(key=7))


def rand_theta(spec):
    if spec.family == "arp":
        return Theta(rng.uniform(-1, 1, spec.p), rng.uniform(-1, 1, spec.Kx))
    if spec.family == "var1":
        return Theta(rng.uniform(-1, 1, (spec.M, spec.M)),
                     rng.uniform(-1, 1, (spec.M, spec.Kx)))
    if spec.family == "mar1":
        g = np.zeros((spec.C + 1, spec.C + 1))
        g[1:, 1:] = rng.uniform(-1, 1, (spec.C, spec.C))
        return Theta(g, rng.uniform(-1, 1, (spec.C + 1, spec.Kx)))
    return Theta(rng.uniform(-1, 1, 2), rng.uniform(-1, 1, spec.Kx))


def rand_cfg(spec):
    theta = rand_theta(spec)
    if spec.family == "arp":
        x = rng.uniform(-2, 2, (spec.T, spec.Kx))
        y0 = rng.integers(0, 2, spec.p)
        a = rng.uniform(-1, 1)
    elif spec.family == "mar1":
        x = rng.uniform(-2, 2, (spec.T, spec.C + 1, spec.Kx))
        y0 = rng.integers(0, spec.C + 1)
        a = np.concatenate([[0.0], rng.uniform(-1, 1, spec.C)])
    else:
        x = rng.uniform(-2, 2, (spec.T, spec.n_layers, spec.Kx))
        y0 = rng.integers(0, 2, spec.n_layers)
        a = rng.uniform(-1, 1, spec.n_layers)
    return theta, a, x, y0


def pi_target(spec, theta, a, x, y0, t, target):
    """Transition probability pi_t^{k1|target} at the pinned state."""
    if spec.family == "arp":
        frm, to = tuple(target), int(target[0])
    elif spec.family == "mar1":
        frm, to = int(target), int(target)
    else:
        frm, to = tuple(target), tuple(target)
    x_next = x[t] if spec.family == "arp" else x[t]  # x index t -> period t+1
    return transition_probability(spec, theta, a, x_next, TransitionState(frm, to, t))


def check_family(spec, n_draws=8):
    worst_phi = worst_zeta = worst_psi = 0.0
    for _ in range(n_draws):
        theta, a, x, y0 = rand_cfg(spec)
        ids = enumerate_moments(spec)
        t_lo = spec.p if spec.family == "arp" else 1
        for t in range(t_lo, spec.T):
            for target in mb._targets_in_support_order(spec):
                pi = pi_target(spec, theta, a, x, y0, t, target)
                e = conditional_expectation(
                    spec, theta, a, x, y0,
                    lambda d: tf.phi(spec, theta, d, t, target))
                worst_phi = max(worst_phi, abs(e - pi))
        for m in ids:
            e = conditional_expectation(
                spec, theta, a, x, y0,
                lambda d: mb.psi_batch(spec, theta, d, m))
            worst_psi = max(worst_psi, abs(e))
            ez = conditional_expectation(
                spec, theta, a, x, y0,
                lambda d: tf.zeta(spec, theta, d, m.t, m.target, m.offsets))
            pi = pi_target(spec, theta, a, x, y0, m.t, m.target)
            worst_zeta = max(worst_zeta, abs(ez - pi))
    print(f"{spec.family} p={spec.p} T={spec.T} M={spec.M} C={spec.C}: "
          f"|E[phi]-pi|={worst_phi:.2e} |E[zeta]-pi|={worst_zeta:.2e} "
          f"|E[psi]|={worst_psi:.2e} n_ids={len(enumerate_moments(spec))}")
    assert worst_phi < 1e-10 and worst_zeta < 1e-10 and worst_psi < 1e-10


check_family(ModelSpec("arp", T=3, p=1, Kx=1))
check_family(ModelSpec("arp", T=4, p=1, Kx=2))
check_family(ModelSpec("arp", T=4, p=2, Kx=1))
check_family(ModelSpec("arp", T=5, p=2, Kx=1), n_draws=4)
check_family(ModelSpec("arp", T=5, p=3, Kx=1), n_draws=4)
check_family(ModelSpec("var1", T=3, M=2, Kx=1))
check_family(ModelSpec("var1", T=4, M=2, Kx=1), n_draws=3)
check_family(ModelSpec("mar1", T=3, C=2, Kx=1))
check_family(ModelSpec("net3", T=3, Kx=1), n_draws=3)

# moment counts
for (p, T), want in [((1, 3), 2), ((1, 4), 8), ((1, 5), 22), ((2, 4), 4),
                     ((2, 5), 16), ((3, 5), 8), ((2, 3), 0), ((3, 4), 0)]:
    got = len(enumerate_moments(ModelSpec("arp", T=T, p=p, Kx=1)))
    assert got == want == mb.arp_moment_count(p, T), (p, T, got, want)
print("ARP moment counts OK")

# rank checks
for (p, T), (want_rank, want_null) in [((1, 3), (6, 2)), ((2, 3), (8, 0)),
                                       ((1, 4), (8, 8)), ((2, 4), (12, 4)),
                                       ((3, 4), (16, 0)), ((3, 5), (24, 8)),
                                       ((1, 5), (10, 22)), ((2, 5), (16, 16))]:
    spec = ModelSpec("arp", T=T, p=p, Kx=1)
    from dplogit.oracle import min_index_gap
    for attempt in range(50):
        theta, a, x, y0 = rand_cfg(spec)
        if min_index_gap(spec, theta, x, y0) >= 0.05:
            break
    res = rank_of_image(spec, theta, x, y0)
    sv = res.singular_values
    print(f"rank p={p} T={T}: got ({res.rank},{res.nullity}) want ({want_rank},{want_null})"
          f"  sv[r-1]/sv0={sv[want_rank-1]/sv[0]:.2e} "
          f"sv[r]/sv0={(sv[want_rank]/sv[0] if want_rank < len(sv) else 0):.2e} gap={res.min_index_gap:.2e}")
    assert (res.rank, res.nullity) == (want_rank, want_null), (p, T, res.rank)

print("pf residual:", check_partial_fractions(trials=50, seed=3))
print("ALL SMOKE CHECKS PASSED")
