import numpy as np
import itertools

from dplogit import ModelSpec, Theta, PanelData
from dplogit import transitions as tf
from dplogit import oracle as orc
from dplogit.models import history_probability, transition_distribution

rng = np.random.Generator(np.random.Philox(key=11))
spec = ModelSpec("var1", T=2, M=2, Kx=1)
gamma = rng.uniform(-1, 1, (2, 2))
beta = rng.uniform(-1, 1, (2, 1))
theta = Theta(gamma, beta)
x = rng.uniform(-1, 1, (2, 2, 1))
y0 = np.array([1, 0])
a = rng.uniform(-1, 1, 2)

sig = lambda z: 1 / (1 + np.exp(-z))

# hand-rolled law over the 16 paths (y1, y2), each in {0,1}^2
def idx(state, t):  # per-layer index of outcome at period t (1-based), full incl a
    return gamma @ np.asarray(state, float) + x[t - 1, :, 0] * beta[:, 0] + a

def p_trans(state_prev, out, t):
    z = idx(state_prev, t)
    return np.prod(sig(z) ** out * (1 - sig(z)) ** (1 - np.asarray(out)))

states = [np.array(s) for s in itertools.product((0, 1), repeat=2)]
# hand phi per the displayed formula, t=1
def phi_hand(y1, y2, k):
    g = gamma @ (y0 - k) - (x[1, :, 0] - x[0, :, 0]) * beta[:, 0]
    if not np.array_equal(y1, k):
        return 0.0
    return float(np.exp(np.sum((y2 - k) * g)))

for k in states:
    e_hand = sum(p_trans(y0, y1, 1) * p_trans(y1, y2, 2) * phi_hand(y1, y2, k)
                 for y1 in states for y2 in states)
    pi = p_trans(k, k, 2)
    # library versions
    data = orc.all_paths_data(spec, y0, x)
    probs = history_probability(spec, theta, a, data)
    vals = tf.phi(spec, theta, data, 1, tuple(k))
    e_lib = float((probs * vals).sum())
    pi_lib = transition_distribution(spec, theta, a, x[1], tuple(k))[0, spec.state_to_code(k)]
    print(f"k={k}: hand E={e_hand:.12f} pi={pi:.12f} | lib E={e_lib:.12f} pi_lib={pi_lib:.12f}")
    # compare path-by-path
    paths = data.y
    for h in range(16):
        ph = p_trans(y0, paths[h, 0], 1) * p_trans(paths[h, 0], paths[h, 1], 2)
        vh = phi_hand(paths[h, 0], paths[h, 1], k)
        if abs(ph - probs[h]) > 1e-12 or abs(vh - vals[h]) > 1e-12:
            print(f"  path {paths[h].tolist()}: prob hand={ph:.9f} lib={probs[h]:.9f} "
                  f"phi hand={vh:.9f} lib={vals[h]:.9f}")
