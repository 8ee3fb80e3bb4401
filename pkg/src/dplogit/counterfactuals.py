"""Average transition probabilities, marginal effects, and multi-period
counterfactuals.

Everything here averages transition functions over subpopulations, so the
fixed effects never need to be known: the conditional expectation of a
transition function equals the transition probability at the unit's own
effect, and multi-period products of transition probabilities decompose by
partial fractions into estimable single-period pieces.
"""
from __future__ import annotations

import dataclasses
import math

import numpy as np

from .models import ModelSpec, PanelData, Theta, TransitionState
from . import transitions as tf
from .oracle import chebyshev_grid


# ---------------------------------------------------------------------------
# Subpopulations
# ---------------------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class CovariateBand:
    """Match covariate k of `layer` at period t to `value` within tol.

    tol=0 is an exact match (discrete covariates); a positive tol gives the
    band |x - value| <= tol for continuous ones.
    """

    layer: int
    k: int
    t: int
    value: float
    tol: float = 0.0


@dataclasses.dataclass(frozen=True)
class Subpop:
    """Conditioning event: initial state plus covariate bands.

    y0=None keeps every initial state; x_matcher is None, an iterable of
    CovariateBand (or their tuples), or a callable (spec, data) -> bool mask.
    """

    y0: object = None
    x_matcher: object = None


def subpop_mask(spec: ModelSpec, data: PanelData, subpop: Subpop) -> np.ndarray:
    mask = np.ones(data.n_units, dtype=bool)
    if subpop.y0 is not None:
        want = np.asarray(subpop.y0)
        if spec.family == "mar1":
            mask &= data.y0 == int(want)
        else:
            mask &= np.all(data.y0 == want.reshape(1, -1), axis=1)
    matcher = subpop.x_matcher
    if matcher is None:
        return mask
    if callable(matcher):
        return mask & np.asarray(matcher(spec, data), dtype=bool)
    for band in matcher:
        if not isinstance(band, CovariateBand):
            band = CovariateBand(*band)
        xt = data.cov(band.t)
        col = xt[:, band.k - 1] if spec.family == "arp" \
            else xt[:, band.layer - 1, band.k - 1]
        if band.tol == 0.0:
            mask &= col == band.value
        else:
            mask &= np.abs(col - band.value) <= band.tol
    return mask


@dataclasses.dataclass
class CfEstimate:
    value: float
    std_error: float
    n_units: int
    theta_std_error: float | None = None

    @property
    def total_std_error(self) -> float:
        if self.theta_std_error is None:
            return self.std_error
        return math.hypot(self.std_error, self.theta_std_error)


def _mean_with_se(values: np.ndarray) -> tuple[float, float]:
    n = values.size
    mean = float(values.mean())
    se = float(values.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return mean, se


def _theta_se(fn, spec: ModelSpec, theta: Theta, theta_cov) -> float:
    """Delta-method standard error: fn(theta) -> scalar, theta_cov = Var(theta_hat)."""
    x0 = theta.to_flat(spec)
    grad = np.empty_like(x0)
    for j in range(x0.size):
        h = 1e-6 * (1.0 + abs(x0[j]))
        e = np.zeros_like(x0)
        e[j] = h
        grad[j] = (fn(Theta.from_flat(spec, x0 + e))
                   - fn(Theta.from_flat(spec, x0 - e))) / (2.0 * h)
    return float(np.sqrt(max(grad @ np.asarray(theta_cov) @ grad, 0.0)))


# ---------------------------------------------------------------------------
# Average transition probabilities and marginal effects
# ---------------------------------------------------------------------------

def _transition_values(spec: ModelSpec, theta: Theta, data: PanelData,
                       state: TransitionState) -> np.ndarray:
    """Per-unit unbiased values for P(to | from_state) at state.t.

    Same-destination transitions are the transition functions themselves.
    For the binary lag family any destination works through the complement;
    for the other families an off-diagonal destination is not identified by
    this construction and is refused (only same-state probabilities are).
    """
    frm = state.from_state
    if spec.family == "arp":
        target = tuple(np.atleast_1d(frm))
        vals = tf.phi(spec, theta, data, state.t, target)
        k = int(np.atleast_1d(state.to)[0])
        return vals if k == target[0] else 1.0 - vals
    diagonal = (state.to == frm) if np.isscalar(frm) \
        else tuple(np.atleast_1d(state.to)) == tuple(np.atleast_1d(frm))
    if diagonal:
        return tf.phi(spec, theta, data, state.t, frm)
    if spec.family == "mar1" and spec.C == 1:
        return 1.0 - tf.phi(spec, theta, data, state.t, frm)
    raise ValueError(
        "off-diagonal average transition probabilities are only partially "
        "identified for this family; this module estimates same-state ones")


def average_transition_probability(dataset, theta: Theta, subpop: Subpop,
                                   state: TransitionState,
                                   theta_cov=None) -> CfEstimate:
    """Subpopulation mean of the matching transition function, with the
    sampling standard error (theta held fixed) and, when theta_cov is given,
    a delta-method component for the estimated parameters."""
    data = dataset
    spec = data.spec
    mask = subpop_mask(spec, data, subpop)
    if not mask.any():
        raise ValueError("empty subpopulation")
    sub = data.subset(mask)
    vals = _transition_values(spec, theta, sub, state)
    mean, se = _mean_with_se(vals)
    theta_se = None
    if theta_cov is not None:
        theta_se = _theta_se(
            lambda th: float(_transition_values(spec, th, sub, state).mean()),
            spec, theta, theta_cov)
    return CfEstimate(mean, se, sub.n_units, theta_se)


def ame(dataset, theta: Theta, y0=None, x_matcher=None, t: int = None,
        rest: tuple = (), theta_cov=None) -> CfEstimate:
    """Average marginal effect of the most recent lag at period t.

    Per unit, phi pinned at (1, rest...) plus phi pinned at (0, rest...)
    minus one: the first estimates P(1 | state (1, rest)), the second
    estimates P(0 | state (0, rest)), so the combination is
    P(1 | on) - P(1 | off) averaged over the subpopulation's effects.
    """
    data = dataset
    spec = data.spec
    if spec.family != "arp":
        raise ValueError("marginal-effect contrasts require the binary lag family")
    if t is None:
        raise ValueError("a period t is required")
    if len(rest) != spec.p - 1:
        raise ValueError(f"rest must fix the other {spec.p - 1} lags")
    mask = subpop_mask(spec, data, Subpop(y0, x_matcher))
    if not mask.any():
        raise ValueError("empty subpopulation")
    sub = data.subset(mask)

    def values(th):
        on = tf.phi(spec, th, sub, t, (1,) + tuple(rest))
        off = tf.phi(spec, th, sub, t, (0,) + tuple(rest))
        return on + off - 1.0

    vals = values(theta)
    mean, se = _mean_with_se(vals)
    theta_se = None
    if theta_cov is not None:
        theta_se = _theta_se(lambda th: float(values(th).mean()), spec, theta, theta_cov)
    return CfEstimate(mean, se, sub.n_units, theta_se)


# ---------------------------------------------------------------------------
# Multi-period counterfactuals by partial fractions
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class PlanTerm:
    """One estimable piece: lam * (q + (1-2q) * phi^{state}(period))."""

    lam: float
    period: int
    state: tuple
    orientation: int      # q = state[0]; 0 means pi itself, 1 means 1 - pi


@dataclasses.dataclass
class PartialFractionPlan:
    """Exact decomposition of a multi-period transition product.

    For every fixed effect a, the product over j of
    P(Y_{t+1+j} = k_{j+1} | counterfactual state_j, a) equals
    mu + sum_j term_j with term_j built from the single-period transition
    probability at (period_j, state_j).  mu is zero unless the target path is
    all ones.
    """

    mu: float
    terms: list
    t: int
    from_state: tuple
    to_path: tuple
    min_pole_gap: float
    probe_residual: float


def _plan_poles(spec: ModelSpec, theta: Theta, t: int, from_state: tuple,
                to_path: tuple, x: np.ndarray):
    """Counterfactual states and their linear indices for each step."""
    p, s = spec.p, len(to_path)
    states, poles = [], []
    for j in range(s):
        lags = tuple(reversed(to_path[:j])) + tuple(from_state)
        state = lags[:p]
        idx = float(np.dot(theta.gamma, state) + x[t + j] @ theta.beta)
        states.append(state)
        poles.append(idx)
    return states, np.asarray(poles)


def plan_multiperiod(spec: ModelSpec, theta: Theta, t: int, from_state,
                     to_path, x) -> PartialFractionPlan:
    """Decompose a path probability into single-period estimable pieces.

    from_state: the p conditioning lags (most recent first) at period t;
    to_path: the counterfactual outcomes k_1..k_s for periods t+1..t+s;
    x: the unit's covariate panel, shape (T, Kx) (rows t+1..t+s are used).
    The returned coefficients are residues of the product at each pole, and
    the identity is verified at 16 probe effect values to 1e-9 before the
    plan is returned.
    """
    if spec.family != "arp":
        raise ValueError("multi-period plans exist for the binary lag family only")
    from_state = tuple(int(v) for v in np.atleast_1d(from_state))
    to_path = tuple(int(v) for v in np.atleast_1d(to_path))
    if len(from_state) != spec.p:
        raise ValueError(f"from_state must fix all {spec.p} lags")
    s = len(to_path)
    if s < 1:
        raise ValueError("to_path is empty")
    if not (spec.p <= t and t + s <= spec.T):
        raise ValueError(f"plan window [t+1, t+s] = [{t + 1}, {t + s}] must fit "
                         f"inside the panel (p={spec.p}, T={spec.T})")
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    states, poles = _plan_poles(spec, theta, t, from_state, to_path, x)
    diffs = np.abs(poles[None, :] - poles[:, None])
    np.fill_diagonal(diffs, np.inf)
    gap = float(diffs.min()) if s > 1 else np.inf
    if gap < 1e-12:
        i, j = np.unravel_index(np.argmin(diffs), diffs.shape)
        raise ValueError(
            f"coincident indices: period {t + 1 + i} at state {states[i]} and "
            f"period {t + 1 + j} at state {states[j]} share the value "
            f"{poles[i]:.12g}; the decomposition is not defined there")
    m = sum(to_path)
    mu = 1.0 if m == s else 0.0
    denom_parts = -np.expm1(poles[None, :] - poles[:, None])
    np.fill_diagonal(denom_parts, 1.0)
    w = float(np.dot(to_path, poles))
    lams = (-1.0) ** m * np.exp(w - m * poles) / denom_parts.prod(axis=1)
    terms = [PlanTerm(float(lams[j]), t + j, states[j], states[j][0])
             for j in range(s)]
    plan = PartialFractionPlan(mu, terms, t, from_state, to_path, gap, 0.0)
    plan.probe_residual = _probe_plan(plan, poles, chebyshev_grid(16))
    if plan.probe_residual > 1e-9:
        raise ValueError(f"plan failed its reconstruction probe: residual "
                         f"{plan.probe_residual:.3e} (minimum index gap {gap:.3e})")
    return plan


def _probe_plan(plan: PartialFractionPlan, poles: np.ndarray,
                a_values: np.ndarray) -> float:
    """Worst |product - (mu + sum lam * sigma)| over the probe effects."""
    worst = 0.0
    for a in a_values:
        pr_next_is_one = 1.0 / (1.0 + np.exp(-(poles + a)))
        product = np.prod(np.where(plan.to_path, pr_next_is_one, 1.0 - pr_next_is_one))
        recon = plan.mu + sum(term.lam * (1.0 - pr_next_is_one[j])
                              for j, term in enumerate(plan.terms))
        worst = max(worst, abs(product - recon))
    return worst


def multiperiod_average(dataset, theta: Theta, plan: PartialFractionPlan,
                        subpop: Subpop, theta_cov=None) -> CfEstimate:
    """Subpopulation mean of the plan's estimable combination.

    Per unit: mu + sum_j lam_j * (q_j + (1 - 2 q_j) * phi^{state_j}(period_j)).
    The plan's coefficients were computed at one covariate configuration, so
    the subpopulation should pin the covariates entering the plan (that is
    what the x-matcher is for); otherwise the average mixes identities that
    hold at different coefficient values.
    """
    data = dataset
    spec = data.spec
    mask = subpop_mask(spec, data, subpop)
    if not mask.any():
        raise ValueError("empty subpopulation")
    sub = data.subset(mask)

    def values(th):
        total = np.full(sub.n_units, plan.mu)
        for term in plan.terms:
            phi = tf.phi(spec, th, sub, term.period, term.state)
            q = term.orientation
            total = total + term.lam * (q + (1 - 2 * q) * phi)
        return total

    vals = values(theta)
    mean, se = _mean_with_se(vals)
    theta_se = None
    if theta_cov is not None:
        theta_se = _theta_se(lambda th: float(values(th).mean()), spec, theta, theta_cov)
    return CfEstimate(mean, se, sub.n_units, theta_se)
