"""Enumeration and evaluation of valid moment functions psi, plus rescaling
and the special closed forms (Kitazawa h-forms, the T=3 expanded moments,
static logit, the limiting AR(2) moment, the pure-model efficient score).

A valid moment function has conditional expectation zero given (initial
condition, covariates, fixed effect). The complete families here are the
differences psi = phi(t) - zeta(t; s_1..s_J) over all legal anchors, offset
subsets, and pinned states, and for the covariate-free AR(1) model also the
plain differences phi(t) - phi(s).
"""
from __future__ import annotations

import dataclasses
import itertools

import numpy as np

from .models import (
    ModelSpec,
    PanelData,
    PanelUnit,
    Theta,
    codes_to_paths,
    enumerate_histories,
    paths_to_codes,
)
from . import transitions as tf

RESCALE_UNIQUE_TOL = 1e-12


@dataclasses.dataclass(frozen=True)
class MomentId:
    """Canonical identifier of one valid moment function.

    kind "chain": psi = phi(t) - zeta(t; offsets), offsets s_1 > ... > s_J.
    kind "pure_diff": psi = phi(t) - phi(s) with offsets = (s,), for the
    covariate-free AR(1) model only.

    target: p-tuple of lag pins (arp), layer tuple (var1/net3), label (mar1).
    """

    family: str
    target: tuple | int
    t: int
    offsets: tuple
    kind: str = "chain"

    def label(self) -> str:
        k = self.target if isinstance(self.target, int) \
            else "".join(str(v) for v in self.target)
        s = ",".join(str(v) for v in self.offsets)
        tag = "diff" if self.kind == "pure_diff" else "chain"
        return f"{self.family}:k={k}:t={self.t}:s={s}:{tag}"


def arp_moment_count(p: int, T: int) -> int:
    """Closed-form size of the AR(p) moment family: 2^T - (T-p+1)*2^p."""
    if T < p + 2:
        return 0
    return 2 ** T - (T - p + 1) * 2 ** p


def _offset_subsets(window: int):
    """Nonempty subsets of {1..window} as descending tuples, descending-lex order."""
    subs = []
    for size in range(1, window + 1):
        for comb in itertools.combinations(range(window, 0, -1), size):
            subs.append(comb)
    return sorted(subs, reverse=True)


def _targets_in_support_order(spec: ModelSpec):
    if spec.family == "arp":
        return list(itertools.product((0, 1), repeat=spec.p))
    if spec.family == "mar1":
        return list(range(spec.C + 1))
    return [tuple(int(b) for b in spec.code_to_state(c)) for c in range(spec.n_states)]


def enumerate_moments(spec: ModelSpec) -> list[MomentId]:
    """The complete psi = phi - zeta family in canonical order.

    Order: t ascending, then offset subsets in descending-lexicographic
    order, then the pinned state in support order. For arp the family is
    empty when T < p+2 and has size 2^T - (T-p+1)*2^p otherwise.
    """
    ids: list[MomentId] = []
    t_lo = spec.p + 1 if spec.family == "arp" else 2
    lag = spec.p if spec.family == "arp" else 1
    targets = _targets_in_support_order(spec)
    for t in range(t_lo, spec.T):
        for offs in _offset_subsets(t - lag):
            for k in targets:
                ids.append(MomentId(spec.family, k, t, offs))
    return ids


def enumerate_pure_moments(spec: ModelSpec) -> list[MomentId]:
    """Plain phi-difference moments for the covariate-free AR(1) model."""
    if spec.family != "arp" or spec.p != 1 or spec.Kx != 0:
        raise ValueError("pure phi-difference moments exist only for AR(1) with no covariates")
    ids = []
    for t in range(2, spec.T):
        for s in range(t - 1, 0, -1):
            for k in ((0,), (1,)):
                ids.append(MomentId("arp", k, t, (s,), kind="pure_diff"))
    return ids


def psi_batch(spec: ModelSpec, theta: Theta, data: PanelData, mid: MomentId) -> np.ndarray:
    """Evaluate one moment function on every unit, shape (N,)."""
    if mid.family != spec.family:
        raise ValueError(f"moment family {mid.family!r} does not match spec {spec.family!r}")
    if mid.kind == "pure_diff":
        if spec.Kx != 0 or spec.p != 1:
            raise ValueError("pure phi-difference moments require AR(1) with no covariates")
        return tf.phi(spec, theta, data, mid.t, mid.target) \
            - tf.phi(spec, theta, data, mid.offsets[0], mid.target)
    return tf.psi_chain(spec, theta, data, mid.t, mid.target, mid.offsets)


def psi(mid: MomentId, unit: PanelUnit, theta: Theta) -> float:
    """Scalar evaluation of one moment function on one unit."""
    spec = tf._unit_spec(mid.family, unit)
    theta.check(spec)
    return float(psi_batch(spec, theta, PanelData.from_unit(spec, unit), mid)[0])


def psi_matrix(spec: ModelSpec, theta: Theta, data: PanelData,
               ids: list[MomentId]) -> np.ndarray:
    """All moment functions on all units, shape (N, len(ids)).

    The moment functions share most of their index arithmetic, so the batch
    is evaluated under a shared memoization scope."""
    if not ids:
        return np.zeros((data.n_units, 0))
    with tf.shared_evaluation():
        return np.stack([psi_batch(spec, theta, data, m) for m in ids], axis=1)


def psi_matrix_grad(spec: ModelSpec, theta: Theta, data: PanelData,
                    ids: list[MomentId]):
    """Values and analytic parameter derivatives of all moment functions.

    Returns (values (N, k), gradients (N, k, dim)) with derivative columns
    ordered gamma then beta; binary lag family only.
    """
    dim = spec.theta_dim()
    if not ids:
        return (np.zeros((data.n_units, 0)),
                np.zeros((data.n_units, 0, dim)))
    vals = np.empty((data.n_units, len(ids)))
    grads = np.empty((data.n_units, len(ids), dim))
    with tf.shared_evaluation():
        for j, mid in enumerate(ids):
            if mid.family != spec.family:
                raise ValueError(f"moment family {mid.family!r} does not match "
                                 f"spec {spec.family!r}")
            if mid.kind == "pure_diff":
                v1, g1 = tf._phi_grad_arp(spec, theta, data, mid.t, mid.target)
                v0, g0 = tf._phi_grad_arp(spec, theta, data, mid.offsets[0],
                                          mid.target)
                vals[:, j], grads[:, j] = v1 - v0, g1 - g0
            else:
                vals[:, j], grads[:, j] = tf.psi_chain_grad(
                    spec, theta, data, mid.t, mid.target, mid.offsets)
    return vals, grads


def expand_paths(spec: ModelSpec, data: PanelData) -> tuple[PanelData, int]:
    """Tile every unit against all outcome paths of length T.

    Returns (expanded data, H). Row i*H + h carries unit i's (y0, x) with
    path h in canonical order. Used for rescaling and for brute-force sweeps.
    """
    paths = codes_to_paths(spec, enumerate_histories(spec))
    h = paths.shape[0]
    n = data.n_units
    y0e = np.repeat(data.y0, h, axis=0)
    xe = np.repeat(data.x, h, axis=0)
    reps = (n,) + (1,) * (paths.ndim - 1)
    ye = np.tile(paths, reps)
    return PanelData(spec, y0e, ye, xe), h


def observed_path_index(spec: ModelSpec, data: PanelData) -> np.ndarray:
    """Index of each unit's own outcome path within the canonical path order."""
    codes = paths_to_codes(spec, data.y)
    weights = spec.n_states ** np.arange(spec.T)
    return (codes * weights).sum(axis=1)


def psi_over_paths(spec: ModelSpec, theta: Theta, data: PanelData,
                   ids: list[MomentId]) -> np.ndarray:
    """Moment values on every outcome path, shape (N, H, len(ids))."""
    expanded, h = expand_paths(spec, data)
    vals = psi_matrix(spec, theta, expanded, ids)
    return vals.reshape(data.n_units, h, len(ids))


def rescale_from_path_values(path_vals: np.ndarray) -> np.ndarray:
    """Sum of absolute values of the distinct values along axis 1 (the path
    axis), with duplicates collapsed at absolute tolerance 1e-12 and a factor
    of 1 substituted when psi vanishes on every path."""
    svals = np.sort(path_vals, axis=1)
    first = np.ones(svals.shape, dtype=bool)
    first[:, 1:] = np.diff(svals, axis=1) > RESCALE_UNIQUE_TOL
    factors = np.where(first, np.abs(svals), 0.0).sum(axis=1)
    return np.where(factors > 0.0, factors, 1.0)


def rescale_factors_grad(path_vals: np.ndarray, path_grads: np.ndarray):
    """Rescale factors and their parameter derivatives.

    path_vals: (N, H, k); path_grads: (N, H, k, dim).  The factor is the sum
    of |v| over distinct path values; its derivative takes sign(v) times the
    derivative of one representative per duplicate group (duplicates are
    either the same function, where any representative works, or an
    accidental crossing of measure zero).  Factors of 1 substituted for
    all-zero rows carry a zero derivative.
    """
    order = np.argsort(path_vals, axis=1)
    svals = np.take_along_axis(path_vals, order, axis=1)
    first = np.ones(svals.shape, dtype=bool)
    first[:, 1:] = np.diff(svals, axis=1) > RESCALE_UNIQUE_TOL
    factors = np.where(first, np.abs(svals), 0.0).sum(axis=1)
    weights = np.where(first, np.sign(svals), 0.0)
    sgrads = np.take_along_axis(path_grads, order[..., None], axis=1)
    dfactors = (weights[..., None] * sgrads).sum(axis=1)
    dead = factors <= 0.0
    if dead.any():
        dfactors[dead] = 0.0
    return np.where(dead, 1.0, factors), dfactors


def rescale_factors(spec: ModelSpec, theta: Theta, data: PanelData,
                    ids: list[MomentId],
                    path_vals: np.ndarray | None = None) -> np.ndarray:
    """Per-unit, per-moment rescale factors, shape (N, len(ids))."""
    if path_vals is None:
        path_vals = psi_over_paths(spec, theta, data, ids)
    return rescale_from_path_values(path_vals)


def rescale_factor(mid: MomentId, unit: PanelUnit, theta: Theta) -> float:
    spec = tf._unit_spec(mid.family, unit)
    data = PanelData.from_unit(spec, unit)
    return float(rescale_factors(spec, theta, data, [mid])[0, 0])


# ---------------------------------------------------------------------------
# Special closed forms (AR(1) unless stated otherwise).
# ---------------------------------------------------------------------------

def _ar1_pieces(unit: PanelUnit, theta: Theta):
    y = np.concatenate([np.atleast_1d(unit.y0), np.asarray(unit.y)]).astype(float)
    x = np.asarray(unit.x, dtype=float)
    gamma = float(np.atleast_1d(theta.gamma)[0])
    beta = np.asarray(theta.beta, dtype=float).ravel()
    return y, x, gamma, beta


def kitazawa_forms(unit: PanelUnit, theta: Theta, t: int):
    """The h-form quadruple (U_t, Ups_t, hU_t, hUps_t) for AR(1), t >= 2.

    U_t = 1 - phi^{0|0}(t) and Ups_t = phi^{1|1}(t) written out with
    delta = e^gamma - 1; the hbar transforms subtract Y_{t-1} and a tanh
    weight built from periods t-2..t+1. Against the chained family:
    hU_t = -2/(2-omega^{0|0}_{t,t-1}) psi^{0|0}(t, s=t-1) and
    hUps_t = +2/(2-omega^{1|1}_{t,t-1}) psi^{1|1}(t, s=t-1).
    """
    y, x, gamma, beta = _ar1_pieces(unit, theta)
    T = len(unit.y)
    if not 2 <= t <= T - 1:
        raise ValueError(f"t={t} outside {{2..{T - 1}}}")
    # y index shift: y[j] = Y_{j-1} (y[0] is the initial condition Y_0)
    yt, ytp1, ytm1, ytm2 = y[t], y[t + 1], y[t - 1], y[t - 2]
    dx_t1 = float((x[t] - x[t - 1]) @ beta)        # Delta X_{t+1}' beta
    dx_t0 = float((x[t - 1] - x[t - 2]) @ beta)    # Delta X_t' beta
    delta = np.exp(gamma) - 1.0
    u = yt + (1 - yt) * ytp1 - (1 - yt) * ytp1 * np.exp(-dx_t1) \
        - delta * ytm1 * (1 - yt) * ytp1 * np.exp(-dx_t1)
    ups = yt * ytp1 + yt * (1 - ytp1) * np.exp(dx_t1) \
        + delta * (1 - ytm1) * yt * (1 - ytp1) * np.exp(dx_t1)
    hu = u - ytm1 - np.tanh((-gamma * ytm2 + dx_t0 + dx_t1) / 2.0) \
        * (u + ytm1 - 2 * u * ytm1)
    hups = ups - ytm1 - np.tanh((gamma * (1 - ytm2) + dx_t0 + dx_t1) / 2.0) \
        * (ups + ytm1 - 2 * ups * ytm1)
    return float(u), float(ups), float(hu), float(hups)


def honore_weidner_terms(unit: PanelUnit, theta: Theta):
    """The four-term expansions of psi^{0|0} and psi^{1|1} at T=3.

    Returns (terms0, terms1), each a length-4 array whose sum is the moment.
    The terms have pairwise disjoint history support, which is what makes a
    term-by-term comparison against phi - zeta meaningful.
    """
    y, x, gamma, beta = _ar1_pieces(unit, theta)
    if len(unit.y) != 3:
        raise ValueError("expanded T=3 forms require exactly three periods")
    y0, y1, y2, y3 = y[0], y[1], y[2], y[3]
    x1, x2, x3 = x[0], x[1], x[2]
    b = lambda xs: float(xs @ beta)
    terms0 = np.array([
        (np.exp(b(x2 - x3)) - 1.0) * (1 - y1) * (1 - y2) * y3,
        np.exp(b(x2 - x1) + gamma * (1 - y0)) * y1 * (1 - y2) * y3,
        np.exp(b(x3 - x1) - gamma * y0) * y1 * (1 - y2) * (1 - y3),
        -(1 - y1) * y2,
    ])
    terms1 = np.array([
        (np.exp(b(x3 - x2)) - 1.0) * y1 * y2 * (1 - y3),
        np.exp(b(x1 - x2) + gamma * y0) * (1 - y1) * y2 * (1 - y3),
        np.exp(b(x1 - x3) - gamma * (1 - y0)) * (1 - y1) * y2 * y3,
        -y1 * (1 - y2),
    ])
    return terms0, terms1


def honore_weidner_psi(unit: PanelUnit, theta: Theta) -> tuple[float, float]:
    terms0, terms1 = honore_weidner_terms(unit, theta)
    return float(terms0.sum()), float(terms1.sum())


def static_logit_psi(unit: PanelUnit, beta, t: int = 2) -> float:
    """Static-logit moment for the adjacent pair (t-1, t); gamma forced to 0.

    (1 - e^{-dx'b}) (Y_{t-1}(1-Y_t) e^{dx'b} - (1-Y_{t-1}) Y_t) with
    dx = X_t - X_{t-1}; proportional to the conditional-likelihood score.
    """
    beta = np.asarray(beta, dtype=float).ravel()
    y = np.asarray(unit.y, dtype=float)
    x = np.asarray(unit.x, dtype=float)
    if not 2 <= t <= len(y):
        raise ValueError(f"t={t} outside {{2..{len(y)}}}")
    dxb = float((x[t - 1] - x[t - 2]) @ beta)
    y_prev, y_curr = y[t - 2], y[t - 1]
    return float((1.0 - np.exp(-dxb))
                 * (y_prev * (1 - y_curr) * np.exp(dxb) - (1 - y_prev) * y_curr))


def psi_limit_ar2(unit: PanelUnit, theta: Theta) -> float:
    """The four-term limiting moment for the AR(2) model at T=4.

    Valid as theta's tail probability argument -> 0; exposed for evaluation
    only, with no identification claim attached.
    """
    y0 = np.atleast_1d(unit.y0).astype(float)
    if len(y0) != 2 or len(unit.y) != 4:
        raise ValueError("limiting moment requires an AR(2) unit with T=4")
    ym1, yz = y0[0], y0[1]          # Y_{-1}, Y_0
    y1, y2, y3, y4 = np.asarray(unit.y, dtype=float)
    x = np.asarray(unit.x, dtype=float)
    g1, g2 = np.asarray(theta.gamma, dtype=float)
    beta = np.asarray(theta.beta, dtype=float).ravel()
    b = lambda xs: float(xs @ beta)
    return float(
        -(1 - y1) * (1 - y2) * y3
        + (np.exp(b(x[2] - x[3])) - 1.0) * (1 - y1) * (1 - y2) * (1 - y3) * y4
        + np.exp(-g1 * yz + g2 * (1 - ym1) + b(x[2] - x[0])) * y1 * (1 - y2) * (1 - y3) * y4
        + np.exp(-g1 * yz - g2 * ym1 + b(x[3] - x[0])) * y1 * (1 - y2) * (1 - y3) * (1 - y4)
    )


def efficient_score_ar1_pure(unit: PanelUnit, gamma: float) -> float:
    """Efficient moment of the covariate-free AR(1) model at T=3, y_0 = 0:
    (psi^{0|0} + psi^{1|1}) / ((1+e^gamma)(e^{-gamma}-1)).
    """
    gamma = float(gamma)
    if gamma == 0.0:
        raise ValueError("gamma = 0 makes the prefactor singular")
    y0 = np.atleast_1d(unit.y0)
    if len(y0) != 1 or int(y0[0]) != 0:
        raise ValueError("stated for the initial condition y_0 = 0")
    if len(unit.y) != 3 or np.asarray(unit.x).shape[-1] != 0:
        raise ValueError("requires a covariate-free AR(1) unit with T=3")
    spec = ModelSpec("arp", T=3, p=1, Kx=0)
    theta = Theta(np.array([gamma]), np.zeros(0))
    data = PanelData.from_unit(spec, unit)
    combo = tf.psi_chain(spec, theta, data, 2, (0,), (1,)) \
        + tf.psi_chain(spec, theta, data, 2, (1,), (1,))
    return float(combo[0] / ((1.0 + np.exp(gamma)) * (np.exp(-gamma) - 1.0)))
