"""Transition functions phi and chained transition functions zeta.

A transition function phi is an observable-data function whose conditional
expectation given (initial condition, covariates, fixed effect) equals a
one-period-ahead transition probability pi evaluated at a pinned lag state.
A chained function zeta has the same conditional expectation but anchors the
indicator at an earlier period s < t through weights omega, which is what
makes differences phi - zeta valid (zero-expectation) moment functions.

Everything is computed from one index-difference pattern. Write eta_m(state,
tau) for the fixed-effect-free linear index of layer m at period tau given a
lag state. Then for the one-lag families

    phi = 1{Y_t = k} * exp( sum_m (rep(Y_{t+1})_m - rep(k)_m)
                            * [eta_m(Y_{t-1}, t) - eta_m(k, t+1)] )

where rep() is the layer vector (binary layers) or a one-hot label
(multinomial). The fixed effect cancels because it enters eta at both periods
identically. The AR(p) family pins the p lag values one at a time: the base
case pins only the first lag, and a p-1 step recursion pins the rest, each
step weighting by w = 1 - exp(+/-(kappa - u)) built from the pinned index at
t+1 and the actual index at t-k.

zeta wraps phi (or a previous zeta) once per offset s:

    zeta = 1{Y_s = k} + omega_{t,s} * 1{Y_s != k} * previous

with omega = 1 - exp( sum_m (rep(Y_s)_m - rep(k)_m) * [kappa_m - mu_{m,s}] ),
kappa the pinned index at t+1 and mu the actual index at period s. Offsets
are applied largest first, so the outermost wrap uses the smallest offset.

All evaluators are vectorized over units; the *_ar1/_arp/_var1/_mar1/_network
wrappers give the scalar per-unit interface.
"""
from __future__ import annotations

import contextlib
import dataclasses
from contextvars import ContextVar

import numpy as np

from .models import (
    ModelSpec,
    PanelData,
    PanelUnit,
    Theta,
    TransitionState,
    clamped_exp,
    layer_logits,
)


def one_minus_exp(d, out=None):
    """1 - e^d, exactly zero at d = 0, clamped against overflow."""
    if out is None:
        return -np.expm1(np.clip(d, -700.0, 700.0))
    np.clip(d, -700.0, 700.0, out=out)
    np.expm1(out, out=out)
    return np.negative(out, out=out)


_EVAL_CACHE: ContextVar = ContextVar("transition_eval_cache", default=None)


@contextlib.contextmanager
def shared_evaluation(cache: dict | None = None):
    """Memoize index and indicator arrays across phi/zeta calls.

    Evaluating many moment functions on one dataset at one parameter value
    recomputes the same linear indices over and over; inside this context
    they are cached, keyed by the identity of the theta and data objects.
    Both must stay unmodified for the duration (they are immutable in normal
    use). Returned arrays are shared: callers must not write into them.

    Nested scopes reuse the active cache, so a caller holding a dict across
    many evaluations (see purge_theta_entries for invalidation) lets the
    parameter-independent arrays survive between parameter values.
    """
    current = _EVAL_CACHE.get()
    if cache is None and current is not None:
        yield current
        return
    use = {} if cache is None else cache
    token = _EVAL_CACHE.set(use)
    try:
        yield use
    finally:
        _EVAL_CACHE.reset(token)


def purge_theta_entries(cache: dict, keep: int) -> None:
    """Drop cached arrays tied to any parameter object other than `keep`.

    Memo keys carry the theta id in slot 1, with 0 marking
    parameter-independent entries; a long-lived cache must be purged this
    way whenever the parameter changes, both to bound memory and because a
    garbage-collected theta's id can be reused by a new object.
    """
    stale = [k for k in cache if k[1] != 0 and k[1] != keep]
    for k in stale:
        del cache[k]


def _memo(key, fn):
    cache = _EVAL_CACHE.get()
    if cache is None:
        return fn()
    hit = cache.get(key)
    if hit is None:
        hit = cache[key] = fn()
    return hit


@dataclasses.dataclass(frozen=True)
class ChainSpec:
    """Target transition plus the strictly descending offsets s_1 > ... > s_J.

    Empty offsets means plain phi. The target's `to` outcome must be the
    diagonal one: equal to from_state (one-lag families) or to the first
    component of the lag block (AR(p)).
    """

    target: TransitionState
    offsets: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "offsets", tuple(int(s) for s in self.offsets))


def check_target(spec: ModelSpec, target, t: int) -> None:
    if spec.family == "arp":
        target = tuple(np.atleast_1d(target))
        if len(target) != spec.p:
            raise ValueError(f"target must pin all {spec.p} lags, got {len(target)}")
        if any(v not in (0, 1) for v in target):
            raise ValueError("lag pins must be 0/1")
        if not spec.p <= t <= spec.T - 1:
            raise ValueError(f"anchor t={t} outside {{{spec.p}..{spec.T - 1}}}")
        return
    if spec.family == "mar1":
        if not 0 <= int(target) <= spec.C:
            raise ValueError(f"label {target} outside support 0..{spec.C}")
    else:
        target = np.atleast_1d(target)
        if target.shape != (spec.n_layers,):
            raise ValueError(f"target must be a {spec.n_layers}-vector")
        if np.any((target != 0) & (target != 1)):
            raise ValueError("layer pins must be 0/1")
    if not 1 <= t <= spec.T - 1:
        raise ValueError(f"anchor t={t} outside {{1..{spec.T - 1}}}")


def check_chain(spec: ModelSpec, chain: ChainSpec) -> None:
    state = chain.target
    check_target(spec, state.from_state, state.t)
    if spec.family == "arp":
        diag = state.to == tuple(np.atleast_1d(state.from_state))[0]
    elif spec.family == "mar1":
        diag = int(state.to) == int(state.from_state)
    else:
        diag = np.array_equal(np.atleast_1d(state.to), np.atleast_1d(state.from_state))
    if not diag:
        raise ValueError("only same-state transition functions exist; "
                         "to must equal from_state (its first lag for AR(p))")
    offs = chain.offsets
    if any(offs[i] <= offs[i + 1] for i in range(len(offs) - 1)):
        raise ValueError(f"offsets {offs} are not strictly descending")
    hi = state.t - spec.p if spec.family == "arp" else state.t - 1
    if offs and (offs[0] > hi or offs[-1] < 1):
        raise ValueError(f"offsets {offs} outside the legal window 1..{hi}")


def actual_index(spec: ModelSpec, theta: Theta, data: PanelData, s: int) -> np.ndarray:
    """Per-layer index of the outcome at period s given the observed past.

    Shapes: (N,) for arp, (N, M) for var1/net3, (N, C+1) for mar1 with the
    reference alternative's index subtracted (so component 0 is exactly 0).
    """
    return _memo(("actual", id(theta), id(data), s),
                 lambda: _actual_index(spec, theta, data, s))


def _actual_index(spec: ModelSpec, theta: Theta, data: PanelData, s: int) -> np.ndarray:
    if spec.family == "arp":
        state = np.stack([data.out(s - r) for r in range(1, spec.p + 1)], axis=1)
        return layer_logits(spec, theta, state.astype(float), data.cov(s))
    z = layer_logits(spec, theta, data.out(s - 1), data.cov(s))
    if spec.family == "mar1":
        z = z - z[:, [0]]
    return z


def pinned_index(spec: ModelSpec, theta: Theta, data: PanelData, target, t: int,
                 depth: int | None = None) -> np.ndarray:
    """Per-layer index at period t+1 with the target state pinned.

    For arp, `depth` pins only the first `depth` lag values and fills the
    rest with observed outcomes (the intermediate states of the pinning
    recursion); depth=None pins all p.
    """
    if spec.family == "arp" and depth is None:
        depth = spec.p
    key = ("pinned", id(theta), id(data), _target_key(spec, target, depth), t, depth)
    return _memo(key, lambda: _pinned_index(spec, theta, data, target, t, depth))


def _target_key(spec: ModelSpec, target, depth=None):
    if spec.family == "mar1":
        return int(target)
    pins = tuple(int(v) for v in np.atleast_1d(target))
    if spec.family == "arp" and depth is not None:
        pins = pins[:depth]       # deeper pins are ignored at this depth
    return pins


def _pinned_index(spec: ModelSpec, theta: Theta, data: PanelData, target, t: int,
                  depth: int | None = None) -> np.ndarray:
    n = data.n_units
    if spec.family == "arp":
        pins = tuple(np.atleast_1d(target))
        depth = spec.p if depth is None else depth
        state = np.empty((n, spec.p))
        for r in range(1, spec.p + 1):
            state[:, r - 1] = pins[r - 1] if r <= depth else data.out(t + 1 - r)
        return layer_logits(spec, theta, state, data.cov(t + 1))
    if spec.family == "mar1":
        z = layer_logits(spec, theta, np.full(n, int(target)), data.cov(t + 1))
        return z - z[:, [0]]
    state = np.tile(np.asarray(target, dtype=float), (n, 1))
    return layer_logits(spec, theta, state, data.cov(t + 1))


def _match_mask(spec: ModelSpec, data: PanelData, period: int, target) -> np.ndarray:
    """1{Y_period = target} as floats (for arp: the first pin component only)."""
    if spec.family == "arp":
        y1 = tuple(np.atleast_1d(target))[0]
        return _memo(("mask", 0, id(data), period, int(y1)),
                     lambda: (data.out(period) == y1).astype(float))
    if spec.family == "mar1":
        return _memo(("mask", 0, id(data), period, int(target)),
                     lambda: (data.out(period) == int(target)).astype(float))
    key = ("mask", 0, id(data), period,
           tuple(int(v) for v in np.atleast_1d(target)))
    return _memo(key, lambda: np.all(data.out(period) == np.asarray(target),
                                     axis=1).astype(float))


def _collapse_exponent(spec: ModelSpec, data: PanelData, period: int, target,
                       gap: np.ndarray) -> np.ndarray:
    """sum_m (rep(Y_period)_m - rep(target)_m) * gap_m, collapsed at the
    observed outcome (for arp the representation is the scalar first pin)."""
    if spec.family == "arp":
        y1 = tuple(np.atleast_1d(target))[0]
        ys = _memo(("yf", 0, id(data), period),
                   lambda: data.out(period).astype(float))
        out = ys - y1
        out *= gap
        return out
    if spec.family == "mar1":
        obs = data.out(period)
        return gap[np.arange(data.n_units), obs] - gap[:, int(target)]
    return ((data.out(period) - np.asarray(target)) * gap).sum(axis=1)


def phi(spec: ModelSpec, theta: Theta, data: PanelData, t: int, target) -> np.ndarray:
    """Transition function phi^{k|k}(t) for every unit, shape (N,)."""
    key = ("phi", id(theta), id(data), _target_key(spec, target), t)
    return _memo(key, lambda: _phi(spec, theta, data, t, target))


def _phi(spec: ModelSpec, theta: Theta, data: PanelData, t: int, target) -> np.ndarray:
    check_target(spec, target, t)
    if spec.family != "arp":
        gap = actual_index(spec, theta, data, t) - pinned_index(spec, theta, data, target, t)
        expo = _collapse_exponent(spec, data, t + 1, target, gap)
        return _match_mask(spec, data, t, target) * clamped_exp(expo)
    pins = tuple(int(v) for v in np.atleast_1d(target))
    return _phi_level_arp(spec, theta, data, t, pins, spec.p - 1)


def _arp_step_w(spec: ModelSpec, theta: Theta, data: PanelData, t: int,
                pins: tuple, k: int) -> np.ndarray:
    """Correction factor for pinning lag k+1, shared by value and gradient
    passes and by every pin vector with the same prefix."""
    def build():
        d = pinned_index(spec, theta, data, pins, t, depth=k + 1) \
            - actual_index(spec, theta, data, t - k)
        if pins[k] != 1:
            np.negative(d, out=d)
        return one_minus_exp(d, out=d)
    return _memo(("phiW", id(theta), id(data), t, pins[:k + 1]), build)


def _phi_level_arp(spec: ModelSpec, theta: Theta, data: PanelData, t: int,
                   pins: tuple, k: int) -> np.ndarray:
    """Recursion state after pinning lags 1..k+1; depends on pins[:k+1]
    only, so pin vectors sharing a prefix share the intermediate arrays."""
    def build():
        y1 = pins[0]
        if k == 0:
            gap = actual_index(spec, theta, data, t) \
                - pinned_index(spec, theta, data, pins, t, depth=1)
            y_next = _memo(("yf", 0, id(data), t + 1),
                           lambda: data.out(t + 1).astype(float))
            expo = y_next - y1
            expo *= gap
            clamped_exp(expo, out=expo)
            expo *= _match_mask(spec, data, t, (y1,))
            return expo
        val = _phi_level_arp(spec, theta, data, t, pins, k - 1)
        w = _arp_step_w(spec, theta, data, t, pins, k)
        same = _match_mask(spec, data, t - k, (y1,))
        if pins[k] == y1:
            acc = 1.0 - val
            acc *= w
            acc *= same
            np.subtract(same, acc, out=acc)
        else:
            acc = 1.0 - same
            acc *= w
            acc *= val
            acc += same
        return acc
    return _memo(("phiL", id(theta), id(data), t, pins[:k + 1]), build)


def zeta(spec: ModelSpec, theta: Theta, data: PanelData, t: int, target,
         offsets) -> np.ndarray:
    """Chained transition function zeta^{k|k}(t; s_1..s_J), shape (N,)."""
    offsets = tuple(int(s) for s in offsets)
    if not offsets:
        raise ValueError("zeta requires at least one offset; use phi otherwise")
    chain = ChainSpec(TransitionState(_as_from_state(spec, target),
                                      _diag_to(spec, target), t), offsets)
    check_chain(spec, chain)
    val = phi(spec, theta, data, t, target)
    kappa = pinned_index(spec, theta, data, target, t)
    for s in offsets:
        gap = kappa - actual_index(spec, theta, data, s)
        d = _collapse_exponent(spec, data, s, target, gap)
        om = one_minus_exp(d, out=d)
        same = _match_mask(spec, data, s, target)
        acc = 1.0 - same
        acc *= om
        acc *= val
        acc += same
        val = acc
    return val


def psi_chain(spec: ModelSpec, theta: Theta, data: PanelData, t: int, target,
              offsets) -> np.ndarray:
    """Valid moment function phi(t) - zeta(t; offsets), shape (N,)."""
    return phi(spec, theta, data, t, target) - zeta(spec, theta, data, t, target, offsets)


# ---------------------------------------------------------------------------
# Analytic parameter derivatives (binary lag family)
#
# Every quantity above is built from exponentials of index differences, and
# the indices are affine in theta, so the chain rule propagates derivative
# blocks of shape (N, p + Kx) alongside the values.  The derivative of an
# index w.r.t. gamma_r is the lag bit occupying slot r and w.r.t. beta is the
# covariate row; everything else is product rule.
# ---------------------------------------------------------------------------

def _d_actual(spec: ModelSpec, data: PanelData, s: int) -> np.ndarray:
    """d(actual_index at s)/d theta, shape (N, p + Kx); theta-independent."""
    def build():
        cols = [data.out(s - r).astype(float) for r in range(1, spec.p + 1)]
        if spec.Kx:
            return np.column_stack(cols + [data.cov(s)])
        return np.column_stack(cols)
    return _memo(("dact", 0, id(data), s), build)


def _d_pinned(spec: ModelSpec, data: PanelData, target, t: int, depth: int) -> np.ndarray:
    """d(pinned_index at t+1)/d theta with the first `depth` lags pinned."""
    pins = tuple(int(v) for v in np.atleast_1d(target))

    def build():
        n = data.n_units
        cols = [np.full(n, float(pins[r - 1])) if r <= depth
                else data.out(t + 1 - r).astype(float)
                for r in range(1, spec.p + 1)]
        if spec.Kx:
            return np.column_stack(cols + [data.cov(t + 1)])
        return np.column_stack(cols)
    return _memo(("dpin", 0, id(data), pins[:depth], t, depth), build)


def _phi_grad_level_arp(spec: ModelSpec, theta: Theta, data: PanelData,
                        t: int, pins: tuple, k: int) -> np.ndarray:
    """d(recursion state)/d theta at depth k, memoized by pin prefix."""
    def build():
        y1 = pins[0]
        if k == 0:
            y_next = _memo(("yf", 0, id(data), t + 1),
                           lambda: data.out(t + 1).astype(float))
            val = _phi_level_arp(spec, theta, data, t, pins, 0)
            coef = y_next - y1
            coef *= val
            acc = _d_actual(spec, data, t) - _d_pinned(spec, data, pins, t, 1)
            acc *= coef[:, None]
            return acc
        val = _phi_level_arp(spec, theta, data, t, pins, k - 1)
        dval = _phi_grad_level_arp(spec, theta, data, t, pins, k - 1)
        w = _arp_step_w(spec, theta, data, t, pins, k)
        same = _match_mask(spec, data, t - k, (y1,))
        # acc starts as dd and is scaled into the dw contribution in place
        acc = _d_pinned(spec, data, pins, t, k + 1) - _d_actual(spec, data, t - k)
        coef_w = w - 1.0
        if pins[k] != 1:
            np.negative(coef_w, out=coef_w)
        if pins[k] == y1:
            c1 = 1.0 - val
            c1 *= same
            np.negative(c1, out=c1)
            c2 = w * same
        else:
            c1 = 1.0 - same
            c2 = w * c1
            c1 *= val
        coef_w *= c1
        acc *= coef_w[:, None]
        acc += c2[:, None] * dval
        return acc
    return _memo(("phiGL", id(theta), id(data), t, pins[:k + 1]), build)


def _phi_grad_arp(spec: ModelSpec, theta: Theta, data: PanelData, t: int, target):
    """(phi, d phi/d theta) for the binary lag family."""
    pins = tuple(int(v) for v in np.atleast_1d(target))
    val = _phi_level_arp(spec, theta, data, t, pins, spec.p - 1)
    dval = _phi_grad_level_arp(spec, theta, data, t, pins, spec.p - 1)
    return val, dval


def psi_chain_grad(spec: ModelSpec, theta: Theta, data: PanelData, t: int,
                   target, offsets):
    """(psi, d psi/d theta) with derivative columns gamma_1..gamma_p then
    beta_1..beta_Kx; binary lag family only."""
    if spec.family != "arp":
        raise ValueError("analytic moment derivatives are implemented for the "
                         "binary lag family only")
    check_target(spec, target, t)
    offsets = tuple(int(s) for s in offsets)
    phi_val, dphi = _phi_grad_arp(spec, theta, data, t, target)
    if not offsets:
        return phi_val, dphi
    y1 = tuple(int(v) for v in np.atleast_1d(target))[0]
    kappa = pinned_index(spec, theta, data, target, t)
    dkappa = _d_pinned(spec, data, target, t, spec.p)
    val, dval = phi_val, dphi
    for s in offsets:
        gap = kappa - actual_index(spec, theta, data, s)
        ys = _memo(("yf", 0, id(data), s), lambda s=s: data.out(s).astype(float))
        u = ys - y1
        expo = u * gap
        om = one_minus_exp(expo, out=expo)
        same = _match_mask(spec, data, s, (y1,))
        rest = 1.0 - same
        # dval <- (rest*val) * dom + (om*rest) * dval, built in place
        coef = om - 1.0
        coef *= u
        coef *= rest
        coef *= val
        dom = dkappa - _d_actual(spec, data, s)
        dom *= coef[:, None]
        om *= rest
        dom += om[:, None] * dval
        dval = dom
        acc = om * val
        acc += same
        val = acc
    return phi_val - val, dphi - dval


def _as_from_state(spec: ModelSpec, target):
    if spec.family == "mar1":
        return int(target)
    return tuple(int(v) for v in np.atleast_1d(target))


def _diag_to(spec: ModelSpec, target):
    if spec.family == "arp":
        return int(np.atleast_1d(target)[0])
    if spec.family == "mar1":
        return int(target)
    return tuple(int(v) for v in np.atleast_1d(target))


# ---------------------------------------------------------------------------
# Scalar per-unit wrappers. Each infers the ModelSpec from the unit's arrays.
# ---------------------------------------------------------------------------

def _unit_spec(family: str, unit: PanelUnit) -> ModelSpec:
    x = np.asarray(unit.x)
    if family == "arp":
        return ModelSpec("arp", T=len(unit.y), p=len(np.atleast_1d(unit.y0)), Kx=x.shape[-1])
    if family == "var1":
        return ModelSpec("var1", T=len(unit.y), M=np.asarray(unit.y).shape[1], Kx=x.shape[-1])
    if family == "mar1":
        return ModelSpec("mar1", T=len(unit.y), C=x.shape[1] - 1, Kx=x.shape[-1])
    return ModelSpec("net3", T=len(unit.y), Kx=x.shape[-1])


def _scalar_phi(family: str, target, t: int, unit: PanelUnit, theta: Theta) -> float:
    spec = _unit_spec(family, unit)
    theta.check(spec)
    return float(phi(spec, theta, PanelData.from_unit(spec, unit), t, target)[0])


def _scalar_zeta(family: str, chain: ChainSpec, unit: PanelUnit, theta: Theta) -> float:
    spec = _unit_spec(family, unit)
    theta.check(spec)
    check_chain(spec, chain)
    data = PanelData.from_unit(spec, unit)
    return float(zeta(spec, theta, data, chain.target.t, chain.target.from_state,
                      chain.offsets)[0])


def phi_ar1(k: int, t: int, unit: PanelUnit, theta: Theta) -> float:
    """AR(1) transition function, E[.] = pi_t^{k|k}; k is 0 or 1."""
    if len(np.atleast_1d(unit.y0)) != 1:
        raise ValueError("phi_ar1 expects a one-lag unit")
    return _scalar_phi("arp", (int(k),), t, unit, theta)


def zeta_ar1(chain: ChainSpec, unit: PanelUnit, theta: Theta) -> float:
    return _scalar_zeta("arp", chain, unit, theta)


def phi_arp(target, t: int, unit: PanelUnit, theta: Theta) -> float:
    """AR(p) transition function with the full p-lag pin (y_1, ..., y_p)."""
    return _scalar_phi("arp", tuple(target), t, unit, theta)


def zeta_arp(chain: ChainSpec, unit: PanelUnit, theta: Theta) -> float:
    return _scalar_zeta("arp", chain, unit, theta)


def phi_var1(k, t: int, unit: PanelUnit, theta: Theta) -> float:
    """M-layer one-lag transition function at layer-state vector k."""
    return _scalar_phi("var1", tuple(k), t, unit, theta)


def zeta_var1(chain: ChainSpec, unit: PanelUnit, theta: Theta) -> float:
    return _scalar_zeta("var1", chain, unit, theta)


def phi_mar1(k: int, t: int, unit: PanelUnit, theta: Theta) -> float:
    """Multinomial one-lag transition function at label k."""
    return _scalar_phi("mar1", int(k), t, unit, theta)


def zeta_mar1(chain: ChainSpec, unit: PanelUnit, theta: Theta) -> float:
    return _scalar_zeta("mar1", chain, unit, theta)


def phi_network(d, t: int, unit: PanelUnit, theta: Theta) -> float:
    """Triangle-network transition function at dyad state d (3-vector)."""
    return _scalar_phi("net3", tuple(d), t, unit, theta)


def zeta_network(chain: ChainSpec, unit: PanelUnit, theta: Theta) -> float:
    return _scalar_zeta("net3", chain, unit, theta)
