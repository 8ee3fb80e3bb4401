"""Exact brute-force verification machinery.

Everything here enumerates the full outcome-path space, so it is the
independent referee for the closed-form constructions: conditional
expectations by summation against exact path probabilities, the matrix of
the conditional-expectation operator (history x fixed-effect-grid) with its
numerical rank and nullity, and direct scalar checks of the two
partial-fraction identities that underpin every chained transition function.
"""
from __future__ import annotations

import dataclasses
import math

import numpy as np
from scipy.special import logsumexp

from .models import (
    ModelSpec,
    PanelData,
    Theta,
    codes_to_paths,
    enumerate_histories,
    history_probability,
    layer_logits,
)


def all_paths_data(spec: ModelSpec, y0, x) -> PanelData:
    """One (y0, x) configuration tiled against every outcome path.

    Row h of the result carries the h-th history in canonical order (period-1
    outcome least significant).
    """
    paths = codes_to_paths(spec, enumerate_histories(spec))
    h = paths.shape[0]
    y0 = np.asarray(y0)
    x = np.asarray(x, dtype=float)
    y0e = np.repeat(y0[None], h, axis=0) if y0.ndim else np.repeat(y0, h)
    if spec.family == "mar1":
        y0e = y0e.reshape(h)
    return PanelData(spec, y0e, paths, np.repeat(x[None], h, axis=0))


def history_distribution(spec: ModelSpec, theta: Theta, a, x, y0) -> np.ndarray:
    """P(path | y0, x, a) for every path in canonical order; sums to 1."""
    data = all_paths_data(spec, y0, x)
    return history_probability(spec, theta, a, data)


def conditional_expectation(spec: ModelSpec, theta: Theta, a, x, y0, f) -> float:
    """E[f | y0, x, a] by full enumeration with compensated summation.

    f is called once on the all-paths PanelData and must return one value per
    path (shape (H,)).
    """
    data = all_paths_data(spec, y0, x)
    probs = history_probability(spec, theta, a, data)
    vals = np.asarray(f(data), dtype=float)
    if vals.shape != probs.shape:
        raise ValueError(f"f returned shape {vals.shape}, expected {probs.shape}")
    return math.fsum((vals * probs).tolist())


def chebyshev_grid(n: int, lo: float = -6.0, hi: float = 6.0) -> np.ndarray:
    """n Chebyshev nodes on [lo, hi], ordered ascending."""
    j = np.arange(n)
    nodes = np.cos(np.pi * (2 * j + 1) / (2 * n))
    return np.sort((lo + hi) / 2 + (hi - lo) / 2 * nodes)


@dataclasses.dataclass
class LambdaMatrix:
    """Grid discretization of the conditional-expectation operator.

    matrix[h, g] = P(history h | y0, x, a_grid[g]); each column is a
    probability distribution over histories and sums to 1.
    """

    matrix: np.ndarray
    a_grid: np.ndarray
    spec: ModelSpec
    theta: Theta
    x: np.ndarray
    y0: np.ndarray


def build_lambda_matrix(spec: ModelSpec, theta: Theta, x, y0, a_grid) -> LambdaMatrix:
    a_grid = np.asarray(a_grid, dtype=float)
    data = all_paths_data(spec, y0, x)
    cols = []
    for a in a_grid:
        av = a
        if spec.family in ("var1", "net3"):
            av = np.full(spec.n_layers, a)
        elif spec.family == "mar1":
            av = np.concatenate([[0.0], np.full(spec.C, a)])
        cols.append(history_probability(spec, theta, av, data))
    return LambdaMatrix(np.stack(cols, axis=1), a_grid, spec, theta,
                        np.asarray(x, float), np.asarray(y0))


def expected_rank(spec: ModelSpec) -> int:
    """Closed-form rank of the operator for the AR(p) family; the full
    history count for the other families (no closed form is claimed)."""
    if spec.family == "arp":
        if spec.T >= spec.p + 2:
            return (spec.T - spec.p + 1) * 2 ** spec.p
        return 2 ** spec.T
    return spec.n_states ** spec.T


def _history_pole_data(spec: ModelSpec, theta: Theta, x, y0):
    """Partial-fraction factor data for every history at one (y0, x).

    In u = e^a each history probability is a rational function
    e^{w} u^{m} / prod_f (1 + e^{c_f} u): one pole factor per (period, layer)
    for the binary-layer families, one per period (from the softmax
    denominator) for the multinomial family.  Returns

      pool:      dict (t, conditioning-state key, layer) -> basis column
      pool_vals: pole location c per basis column
      factors:   per history, (column indices, pole values, u-powers, log w)
    """
    data = all_paths_data(spec, y0, x)
    pool: dict = {}
    pool_vals: list = []
    cache: dict = {}

    def state_key(i, t):
        if spec.family == "arp":
            return tuple(int(data.out(t - r)[i]) for r in range(1, spec.p + 1))
        if spec.family == "mar1":
            return int(data.out(t - 1)[i])
        return tuple(int(v) for v in data.out(t - 1)[i])

    def poles_at(t, key):
        ck = (t, key)
        if ck not in cache:
            state = np.asarray([key], dtype=float if spec.family != "mar1" else int)
            z = np.atleast_1d(layer_logits(spec, theta, state, data.cov(t)[:1]))
            z = np.asarray(z, dtype=float).ravel()
            if spec.family == "mar1":
                cache[ck] = (np.array([logsumexp(z[1:]) - z[0]]), z)
            else:
                cache[ck] = (z, None)
        return cache[ck]

    def register(t, key, m):
        col = pool.get((t, key, m))
        if col is None:
            val = float(poles_at(t, key)[0][m])
            # identical pole values denote the same basis function even when
            # they arise from different (period, state, layer) combinations
            # (the network family coarsens states structurally), so merge them
            # or the duplicate columns would inflate the rank
            if pool_vals:
                arr = np.asarray(pool_vals)
                near = int(np.abs(arr - val).argmin())
                if abs(arr[near] - val) < 1e-12:
                    pool[(t, key, m)] = near
                    return near
            col = len(pool_vals)
            pool[(t, key, m)] = col
            pool_vals.append(val)
        return col

    factors = []
    for i in range(data.n_units):
        cols, poles, upows = [], [], []
        w = 0.0
        for t in range(1, spec.T + 1):
            key = state_key(i, t)
            pvals, z = poles_at(t, key)
            if spec.family == "mar1":
                lbl = int(data.out(t)[i])
                cols.append(register(t, key, 0))
                poles.append(pvals[0])
                upows.append(1 if lbl >= 1 else 0)
                w += float(z[lbl] - z[0])
            else:
                yt = np.atleast_1d(data.out(t)[i])
                for m in range(len(pvals)):
                    cols.append(register(t, key, m))
                    poles.append(pvals[m])
                    upows.append(int(yt[m]))
                    w += int(yt[m]) * pvals[m]
        factors.append((np.asarray(cols), np.asarray(poles), np.asarray(upows), w))
    return pool, np.asarray(pool_vals), factors


def min_index_gap(spec: ModelSpec, theta: Theta, x, y0) -> float:
    """Smallest spacing among the distinct pole values that occur in some
    history probability at this (theta, x, y0).

    The rank result assumes these are pairwise distinct; a zero or tiny gap
    signals a degenerate configuration whose image genuinely loses dimension.
    """
    _, pool_vals, _ = _history_pole_data(spec, theta, x, y0)
    vals = np.sort(pool_vals)
    gaps = np.diff(vals)
    return float(gaps.min()) if gaps.size else np.inf


def coefficient_matrix(spec: ModelSpec, theta: Theta, x, y0):
    """Histories expressed in the exact finite function basis of the image.

    Every history probability, as a function of the fixed effect a, expands
    by partial fractions into a combination of the constant function and the
    functions a -> 1/(1 + e^{c + a}) over the pole pool c.  Row h of the
    returned matrix holds those coefficients (constant last), so the row
    space of the matrix IS the image of the conditional-expectation operator
    expressed in a basis, and its rank is free of the severe ill-conditioning
    that the raw probability curves exhibit on any fixed-effect grid.

    Returns (A, pool_values, collisions) where collisions lists histories
    whose own pole multiset is degenerate (repeated poles make the simple
    residue expansion invalid, so callers must fall back to a grid method).
    """
    pool, pool_vals, factors = _history_pole_data(spec, theta, x, y0)
    n_hist = len(factors)
    A = np.zeros((n_hist, pool_vals.size + 1))
    collisions = []
    for i, (cols, cs, upows, w) in enumerate(factors):
        diffs = np.abs(cs[None, :] - cs[:, None])
        np.fill_diagonal(diffs, np.inf)
        if diffs.min() < 1e-12:
            collisions.append(i)
            continue
        m = int(upows.sum())
        if m == len(cs):
            A[i, -1] = np.exp(w - cs.sum())
        denom_parts = -np.expm1(cs[None, :] - cs[:, None])  # [f, f'] = 1-e^{c_f'-c_f}
        np.fill_diagonal(denom_parts, 1.0)
        residues = (-1.0) ** m * np.exp(w - m * cs) / denom_parts.prod(axis=1)
        np.add.at(A[i], cols, residues)
    return A, pool_vals, collisions


@dataclasses.dataclass
class RankResult:
    rank: int
    nullity: int
    expected_rank: int
    singular_values: np.ndarray
    min_index_gap: float
    a_grid: np.ndarray
    warnings: list
    null_basis: np.ndarray


def rank_of_image(spec: ModelSpec, theta: Theta, x, y0, a_grid=None,
                  tol: float = 1e-9) -> RankResult:
    """Numerical rank and nullity of the conditional-expectation operator.

    The rank decision runs on the partial-fraction coefficient matrix (see
    coefficient_matrix): row-equilibrated, then singular values above
    tol x the largest count toward the rank.  Working in that exact basis is
    what makes the decision reliable; the raw history-probability curves are
    rank-deficient to working precision on any grid once T - p grows, because
    the trailing directions carry exponentially small amplitude.  The grid
    argument is validated (and used directly if a degenerate configuration
    forces the fallback), and the rank provably does not change under grid
    refinement.  Nullity is the history count minus the rank; the returned
    null_basis has orthonormal columns spanning the left null space, which is
    exactly the space of valid moment functions at this (y0, x).
    """
    exp_rank = expected_rank(spec)
    if a_grid is None:
        a_grid = chebyshev_grid(4 * exp_rank)
    a_grid = np.asarray(a_grid, dtype=float)
    warnings = []
    if a_grid.size < 4 * exp_rank:
        raise ValueError(f"grid of {a_grid.size} nodes is below the required "
                         f"{4 * exp_rank} for expected rank {exp_rank}")
    A, pool_vals, collisions = coefficient_matrix(spec, theta, x, y0)
    vals = np.sort(pool_vals)
    gap = float(np.diff(vals).min()) if vals.size > 1 else np.inf
    if gap < 1e-8:
        warnings.append(f"near-degenerate indices: minimum pole gap {gap:.3e}")
    if collisions:
        warnings.append(f"coincident indices inside {len(collisions)} histories; "
                        "rank taken from the grid matrix instead")
        lmat = build_lambda_matrix(spec, theta, x, y0, a_grid)
        u, svals, _ = np.linalg.svd(lmat.matrix, full_matrices=True)
        rank = int(np.sum(svals > tol * svals[0]))
        null_basis = u[:, rank:]
    else:
        scale = np.abs(A).max(axis=1, keepdims=True)
        scaled = A / np.where(scale == 0, 1.0, scale)
        u, svals, _ = np.linalg.svd(scaled, full_matrices=True)
        rank = int(np.sum(svals > tol * svals[0]))
        # left null vectors of the scaled matrix map back through the row
        # scaling; re-orthonormalize so callers can project onto the space
        null_basis = np.linalg.qr(u[:, rank:] / scale)[0] if rank < A.shape[0] \
            else np.zeros((A.shape[0], 0))
    nullity = A.shape[0] - rank
    return RankResult(rank, nullity, exp_rank, svals, gap, a_grid, warnings,
                      null_basis)


# ---------------------------------------------------------------------------
# Scalar partial-fraction identities (the algebra behind every zeta).
# ---------------------------------------------------------------------------

def _softmax_identity_residuals(u, v, a):
    """Residuals of both multinomial-denominator identities at (u, v, a) in R^K."""
    du = 1.0 + np.exp(u + a).sum()
    dv = 1.0 + np.exp(v + a).sum()
    res = []
    lhs = 1.0 / dv + np.sum((1.0 - np.exp(u - v)) * np.exp(v + a)) / (dv * du)
    res.append(lhs - 1.0 / du)
    for j in range(len(u)):
        others = [k for k in range(len(u)) if k != j]
        lhs = np.exp(v[j] + a[j]) / dv \
            + (1.0 - np.exp(v[j] - u[j])) * np.exp(u[j] + a[j]) / (dv * du)
        for k in others:
            lhs += (1.0 - np.exp((u[k] - u[j]) - (v[k] - v[j]))) \
                * np.exp(v[k] + a[k] + u[j] + a[j]) / (dv * du)
        res.append(lhs - np.exp(u[j] + a[j]) / du)
    return res


def _product_identity_residuals(u, v, a):
    """Residuals of the M-layer product identity at (u, v, a) in R^M, all pins k."""
    m = len(u)
    pu = lambda b: np.prod(np.exp(b * (u + a)) / (1.0 + np.exp(u + a)))
    pv = lambda b: np.prod(np.exp(b * (v + a)) / (1.0 + np.exp(v + a)))
    states = [np.array([(c >> i) & 1 for i in range(m)], dtype=float)
              for c in range(2 ** m)]
    res = []
    for k in states:
        lhs = pv(k)
        for l in states:
            if np.array_equal(l, k):
                continue
            lhs += (1.0 - np.exp(np.sum((l - k) * (u - v)))) * pu(k) * pv(l)
        res.append(lhs - pu(k))
    return res


def check_partial_fractions(trials: int = 1000, seed: int = 0) -> float:
    """Worst absolute residual of the two identities over random inputs.

    Draws u, v, a uniformly on [-3, 3] for K = 1..4 (softmax identity, both
    parts) and M = 2..3 (product identity, all 2^M pins).
    """
    rng = np.random.Generator(np.random.Philox(key=seed))
    worst = 0.0
    for _ in range(trials):
        for k in range(1, 5):
            u, v, a = (rng.uniform(-3, 3, size=k) for _ in range(3))
            for r in _softmax_identity_residuals(u, v, a):
                worst = max(worst, abs(r))
        for m in (2, 3):
            u, v, a = (rng.uniform(-3, 3, size=m) for _ in range(3))
            for r in _product_identity_residuals(u, v, a):
                worst = max(worst, abs(r))
    return worst
