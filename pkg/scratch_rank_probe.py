import numpy as np
from dplogit import ModelSpec, Theta, rank_of_image

cases = [((1, 3), 6), ((2, 3), 8), ((1, 4), 8), ((2, 4), 12), ((3, 4), 16),
         ((1, 5), 10), ((2, 5), 16), ((3, 5), 24)]

for xs in (0.3, 0.6, 1.0, 2.0):
    print(f"--- x scale {xs} ---")
    for (p, T), want in cases:
        spec = ModelSpec("arp", T=T, p=p, Kx=1)
        worst_ok, worst_bad = np.inf, 0.0
        for seed in range(8):
            rng = np.random.default_rng(seed)
            theta = Theta(gamma=rng.uniform(-1, 1, p), beta=rng.uniform(-1, 1, 1))
            x = rng.uniform(-xs, xs, (T, 1))
            y0 = rng.integers(0, 2, p)
            res = rank_of_image(spec, theta, x, y0)
            sv = res.singular_values
            ok = sv[want - 1] / sv[0]
            bad = sv[want] / sv[0] if want < len(sv) else 0.0
            worst_ok = min(worst_ok, ok)
            worst_bad = max(worst_bad, bad)
        print(f"  p={p} T={T}: min sv[r-1]/sv0={worst_ok:.2e}  max sv[r]/sv0={worst_bad:.2e}")
