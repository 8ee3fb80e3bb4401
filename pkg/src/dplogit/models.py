"""Model families, parameter layouts, panel containers, and exact likelihoods.

Four dynamic discrete-choice families with additive unit-level fixed effects
and logistic (or Gumbel, for the multinomial case) shocks are supported:

``arp``
    Binary outcome with p lags of state dependence,
    P(Y_t=1 | past) = sigma(sum_r gamma_r Y_{t-r} + X_t' beta + A).
``var1``
    M binary layers, each with one lag of every layer,
    P(Y_{m,t}=1 | past) = sigma(sum_j gamma_{mj} Y_{j,t-1} + X_{m,t}' beta_m + A_m),
    independent across layers given the past.
``mar1``
    Multinomial outcome in {0..C} with one lag,
    P(Y_t=k | Y_{t-1}=l) = softmax_k(gamma_{kl} + X_{k,t}' beta_k + A_k),
    normalized by gamma_{0.} = gamma_{.0} = 0 and A_0 = 0.
``net3``
    Three dyads of a triangle network; dyad m follows
    P(D_{m,t}=1 | past) = sigma(gamma D_{m,t-1} + delta R_{m,t-1} + X_{m,t}' beta + A_m)
    where R_{m,t-1} is the product of the other two dyads at t-1 (derived
    internally, never supplied by callers).

Index conventions used everywhere:
  * periods run t = 1..T with an initial block at t <= 0,
  * arp lag states are ordered most-recent-first: state = (Y_{t-1},...,Y_{t-p}),
  * multi-layer outcomes are encoded as integers with layer 1 in the least
    significant bit,
  * histories (outcome paths of length T) are indexed lexicographically with
    the period-1 outcome as the least significant digit.
"""
from __future__ import annotations

import dataclasses
from functools import cached_property

import numpy as np

FAMILIES = ("arp", "var1", "mar1", "net3")

# Exponent clamp: exp() of anything beyond this range would overflow or
# denormalize, and clamping keeps objectives finite for wild optimizer steps.
EXP_CLAMP = 700.0


def clamped_exp(z, out=None):
    if out is None:
        return np.exp(np.clip(z, -EXP_CLAMP, EXP_CLAMP))
    np.clip(z, -EXP_CLAMP, EXP_CLAMP, out=out)
    return np.exp(out, out=out)


def log_sigmoid(z):
    """log(1/(1+e^{-z})) without overflow."""
    return -np.logaddexp(0.0, -z)


@dataclasses.dataclass(frozen=True)
class ModelSpec:
    """Family tag plus dimensions. T counts periods after the initial block."""

    family: str
    T: int
    p: int = 1
    M: int = 2
    C: int = 1
    Kx: int = 1

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}, expected one of {FAMILIES}")
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if self.Kx < 0:
            raise ValueError("Kx must be >= 0")
        if self.family == "arp" and self.p < 1:
            raise ValueError("arp requires p >= 1")
        if self.family == "var1" and self.M < 2:
            raise ValueError("var1 requires M >= 2")
        if self.family == "mar1" and self.C < 1:
            raise ValueError("mar1 requires C >= 1")
        if self.family == "net3" and self.M != 3:
            object.__setattr__(self, "M", 3)
        if self.family != "arp" and self.p != 1:
            raise ValueError("p is fixed to 1 outside the arp family")

    @property
    def n_layers(self) -> int:
        """Binary layers (or softmax alternatives) per period."""
        if self.family == "arp":
            return 1
        if self.family == "var1":
            return self.M
        if self.family == "mar1":
            return self.C + 1
        return 3

    @property
    def n_states(self) -> int:
        """Size of the one-period outcome support."""
        if self.family == "arp":
            return 2
        if self.family == "mar1":
            return self.C + 1
        return 2 ** self.n_layers

    @property
    def state_dim(self) -> int:
        """Length of a lag-state vector (components of TransitionState.from_state)."""
        if self.family == "arp":
            return self.p
        if self.family == "mar1":
            return 1
        return self.n_layers

    def theta_dim(self) -> int:
        if self.family == "arp":
            return self.p + self.Kx
        if self.family == "var1":
            return self.M * self.M + self.M * self.Kx
        if self.family == "mar1":
            return self.C * self.C + (self.C + 1) * self.Kx
        return 2 + self.Kx

    def state_to_code(self, state) -> int:
        """Binary layer vector -> integer code (layer 1 = least significant bit)."""
        if self.family == "mar1":
            return int(state)
        if self.family == "arp":
            return int(state)
        code = 0
        for m, s in enumerate(np.atleast_1d(state)):
            code |= (int(s) & 1) << m
        return code

    def code_to_state(self, code: int) -> np.ndarray:
        if self.family in ("arp", "mar1"):
            return np.asarray(code)
        return np.array([(code >> m) & 1 for m in range(self.n_layers)], dtype=np.int8)


@dataclasses.dataclass
class Theta:
    """Common parameters.

    gamma layout by family:
      arp  -- (p,) lag coefficients gamma_1..gamma_p
      var1 -- (M, M) matrix, gamma[m, j] = effect of layer j at t-1 on layer m
      mar1 -- (C+1, C+1) full matrix gamma[k, l] (destination k, origin l) with
              row 0 and column 0 structurally zero
      net3 -- (2,) = (gamma, delta): state dependence and transitivity
    beta layout by family:
      arp/net3 -- (Kx,); var1 -- (M, Kx); mar1 -- (C+1, Kx) including the
      reference alternative's slope beta_0.
    """

    gamma: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma, dtype=float)
        self.beta = np.asarray(self.beta, dtype=float)

    def check(self, spec: ModelSpec) -> None:
        shapes = {
            "arp": ((spec.p,), (spec.Kx,)),
            "var1": ((spec.M, spec.M), (spec.M, spec.Kx)),
            "mar1": ((spec.C + 1, spec.C + 1), (spec.C + 1, spec.Kx)),
            "net3": ((2,), (spec.Kx,)),
        }
        g_shape, b_shape = shapes[spec.family]
        if self.gamma.shape != g_shape:
            raise ValueError(f"gamma shape {self.gamma.shape} != required {g_shape}")
        if self.beta.shape != b_shape:
            raise ValueError(f"beta shape {self.beta.shape} != required {b_shape}")
        if not (np.all(np.isfinite(self.gamma)) and np.all(np.isfinite(self.beta))):
            raise ValueError("non-finite parameter entries")
        if spec.family == "mar1":
            if np.any(self.gamma[0, :] != 0.0) or np.any(self.gamma[:, 0] != 0.0):
                raise ValueError("mar1 normalization requires gamma row 0 and column 0 to be zero")

    @classmethod
    def zeros(cls, spec: ModelSpec) -> "Theta":
        return cls.from_flat(spec, np.zeros(spec.theta_dim()))

    @classmethod
    def from_flat(cls, spec: ModelSpec, vec) -> "Theta":
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (spec.theta_dim(),):
            raise ValueError(f"flat parameter vector must have length {spec.theta_dim()}")
        if spec.family == "arp":
            return cls(vec[: spec.p].copy(), vec[spec.p :].copy())
        if spec.family == "var1":
            ng = spec.M * spec.M
            return cls(vec[:ng].reshape(spec.M, spec.M).copy(),
                       vec[ng:].reshape(spec.M, spec.Kx).copy())
        if spec.family == "mar1":
            ng = spec.C * spec.C
            gamma = np.zeros((spec.C + 1, spec.C + 1))
            gamma[1:, 1:] = vec[:ng].reshape(spec.C, spec.C)
            return cls(gamma, vec[ng:].reshape(spec.C + 1, spec.Kx).copy())
        return cls(vec[:2].copy(), vec[2:].copy())

    def to_flat(self, spec: ModelSpec) -> np.ndarray:
        if spec.family == "mar1":
            return np.concatenate([self.gamma[1:, 1:].ravel(), self.beta.ravel()])
        return np.concatenate([self.gamma.ravel(), self.beta.ravel()])

    def flat_names(self, spec: ModelSpec) -> list[str]:
        """Stable coordinate names for reports (theta.gamma.1, theta.beta.2.1, ...)."""
        names = []
        if spec.family == "arp":
            names += [f"gamma.{r}" for r in range(1, spec.p + 1)]
            names += [f"beta.{k}" for k in range(1, spec.Kx + 1)]
        elif spec.family == "var1":
            names += [f"gamma.{m}.{j}" for m in range(1, spec.M + 1) for j in range(1, spec.M + 1)]
            names += [f"beta.{m}.{k}" for m in range(1, spec.M + 1) for k in range(1, spec.Kx + 1)]
        elif spec.family == "mar1":
            names += [f"gamma.{k}.{l}" for k in range(1, spec.C + 1) for l in range(1, spec.C + 1)]
            names += [f"beta.{c}.{k}" for c in range(0, spec.C + 1) for k in range(1, spec.Kx + 1)]
        else:
            names += ["gamma", "delta"]
            names += [f"beta.{k}" for k in range(1, spec.Kx + 1)]
        return names


@dataclasses.dataclass(frozen=True)
class TransitionState:
    """A one-period transition: leaves `from_state` at period t, arrives `to` at t+1.

    from_state: arp -> length-p tuple (most recent lag first); var1/net3 ->
    length-M 0/1 tuple; mar1 -> integer label. `to` is a single outcome (0/1,
    layer vector, or label).
    """

    from_state: tuple
    to: object
    t: int


@dataclasses.dataclass
class PanelUnit:
    """One cross-sectional unit: initial block, outcome path, covariates.

    y0: arp -> (p,) outcomes Y_{-(p-1)}..Y_0 in chronological order;
        var1/net3 -> (M,) initial layer vector; mar1 -> scalar label.
    y : (T,) outcomes (arp), (T, M) layer paths, or (T,) labels.
    x : (T, Kx) for arp, (T, M, Kx) for var1/net3, (T, C+1, Kx) for mar1.
    x0: optional initial-period covariates for the staged var1/net3/mar1
        simulation designs (ignored by every estimator).
    """

    y0: np.ndarray
    y: np.ndarray
    x: np.ndarray
    x0: np.ndarray | None = None


class PanelData:
    """Batch of N units in struct-of-arrays layout; the workhorse container.

    All transition-function and moment evaluation is vectorized over the unit
    axis, so scalar calls are just N=1 batches.
    """

    def __init__(self, spec: ModelSpec, y0, y, x, x0=None):
        self.spec = spec
        self.y0 = np.asarray(y0)
        self.y = np.asarray(y)
        self.x = np.asarray(x, dtype=float)
        self.x0 = None if x0 is None else np.asarray(x0, dtype=float)
        self._validate_shapes()

    def _validate_shapes(self):
        spec = self.spec
        n = self.n_units
        if spec.family == "arp":
            want = ((n, spec.p), (n, spec.T), (n, spec.T, spec.Kx))
        elif spec.family == "mar1":
            want = ((n,), (n, spec.T), (n, spec.T, spec.C + 1, spec.Kx))
        else:
            m = spec.n_layers
            want = ((n, m), (n, spec.T, m), (n, spec.T, m, spec.Kx))
        got = (self.y0.shape, self.y.shape, self.x.shape)
        if got != want:
            raise ValueError(f"array shapes {got} do not match spec requirement {want}")

    @property
    def n_units(self) -> int:
        return self.y.shape[0]

    @cached_property
    def y_full(self) -> np.ndarray:
        """Initial block and path on one time axis.

        arp: (N, p+T) with column j holding Y_{-(p-1)+j}; other families:
        (N, 1+T[, M]) with index 0 holding the initial outcome.
        """
        if self.spec.family == "arp":
            return np.concatenate([self.y0, self.y], axis=1)
        if self.spec.family == "mar1":
            return np.concatenate([self.y0[:, None], self.y], axis=1)
        return np.concatenate([self.y0[:, None, :], self.y], axis=1)

    def out(self, t: int) -> np.ndarray:
        """Outcomes at period t (arp accepts t down to -(p-1), others down to 0)."""
        if self.spec.family == "arp":
            j = t + self.spec.p - 1
        else:
            j = t
        if j < 0 or j >= self.y_full.shape[1]:
            raise IndexError(f"period {t} outside the observed window")
        return self.y_full[:, j]

    def cov(self, t: int) -> np.ndarray:
        """Covariates at period t in 1..T."""
        if not 1 <= t <= self.spec.T:
            raise IndexError(f"covariates only observed for t in 1..{self.spec.T}")
        return self.x[:, t - 1]

    def unit(self, i: int) -> PanelUnit:
        y0 = self.y0[i] if self.y0.ndim > 1 else self.y0[i]
        return PanelUnit(y0=y0, y=self.y[i], x=self.x[i],
                         x0=None if self.x0 is None else self.x0[i])

    @classmethod
    def from_units(cls, spec: ModelSpec, units) -> "PanelData":
        units = list(units)
        y0 = np.stack([np.asarray(u.y0) for u in units])
        if spec.family == "mar1":
            y0 = y0.reshape(len(units))
        y = np.stack([np.asarray(u.y) for u in units])
        x = np.stack([np.asarray(u.x, dtype=float) for u in units])
        x0 = None
        if all(u.x0 is not None for u in units) and units:
            x0 = np.stack([np.asarray(u.x0, dtype=float) for u in units])
        return cls(spec, y0, y, x, x0)

    @classmethod
    def from_unit(cls, spec: ModelSpec, unit: PanelUnit) -> "PanelData":
        return cls.from_units(spec, [unit])

    def subset(self, mask) -> "PanelData":
        mask = np.asarray(mask)
        return PanelData(self.spec, self.y0[mask], self.y[mask], self.x[mask],
                         None if self.x0 is None else self.x0[mask])


def _net3_partner_product(d: np.ndarray) -> np.ndarray:
    """Transitivity regressors r_m = product of the other two dyads, (..., 3)."""
    return np.stack(
        [d[..., 1] * d[..., 2], d[..., 0] * d[..., 2], d[..., 0] * d[..., 1]], axis=-1
    )


def layer_logits(spec: ModelSpec, theta: Theta, from_state: np.ndarray,
                 x_next: np.ndarray) -> np.ndarray:
    """Fixed-effect-free linear indices of the next outcome, per layer.

    INPUTS
      from_state : (N, p) lag block for arp, (N, M) layer vector for
                   var1/net3, (N,) labels for mar1
      x_next     : covariates dated at the arrival period,
                   (N, Kx) / (N, M, Kx) / (N, C+1, Kx)
    OUTPUT
      (N,) for arp, (N, M) for var1/net3, (N, C+1) for mar1.

    Adding the fixed effect to these indices and applying the logistic (or
    softmax) map yields the transition probabilities.
    """
    if spec.family == "arp":
        z = from_state @ theta.gamma
        if spec.Kx:
            z = z + x_next @ theta.beta
        return z
    if spec.family == "var1":
        z = from_state @ theta.gamma.T
        if spec.Kx:
            z = z + np.einsum("nmk,mk->nm", x_next, theta.beta)
        return z
    if spec.family == "net3":
        d = np.asarray(from_state, dtype=float)
        z = theta.gamma[0] * d + theta.gamma[1] * _net3_partner_product(d)
        if spec.Kx:
            z = z + x_next @ theta.beta
        return z
    # mar1: gamma[k, l] picked by origin label l, per destination k
    labels = np.asarray(from_state, dtype=int)
    z = theta.gamma[:, labels].T
    if spec.Kx:
        z = z + np.einsum("nck,ck->nc", x_next, theta.beta)
    return z


def _fixed_effect_array(spec: ModelSpec, a) -> np.ndarray:
    """Broadcastable fixed-effect block; mar1 gets its reference zero enforced."""
    a = np.asarray(a, dtype=float)
    if spec.family == "arp":
        return a
    if spec.family == "mar1":
        if a.shape[-1] == spec.C:
            pad = [(0, 0)] * (a.ndim - 1) + [(1, 0)]
            a = np.pad(a, pad)
        elif not np.all(a[..., 0] == 0.0):
            raise ValueError("mar1 fixed effect must have a zero reference component")
        return a
    return a


def transition_distribution(spec: ModelSpec, theta: Theta, a, x_next,
                            from_state) -> np.ndarray:
    """Probability of every one-period-ahead outcome code, shape (N, n_states)."""
    from_state = np.atleast_2d(np.asarray(from_state)) if spec.family != "mar1" \
        else np.atleast_1d(np.asarray(from_state))
    x_next = np.asarray(x_next, dtype=float)
    if x_next.ndim == (1 if spec.family == "arp" else 2):
        x_next = x_next[None]
    z = layer_logits(spec, theta, from_state, x_next)
    a = _fixed_effect_array(spec, a)
    if spec.family == "mar1":
        zi = np.clip(z + a, -EXP_CLAMP, EXP_CLAMP)
        zi = zi - zi.max(axis=-1, keepdims=True)
        ez = np.exp(zi)
        return ez / ez.sum(axis=-1, keepdims=True)
    zi = np.atleast_2d(z + a)
    codes = np.arange(spec.n_states)
    bits = (codes[None, :] >> np.arange(zi.shape[-1])[:, None]) & 1  # (M, S)
    logp1 = log_sigmoid(np.clip(zi, -EXP_CLAMP, EXP_CLAMP))
    logp0 = log_sigmoid(-np.clip(zi, -EXP_CLAMP, EXP_CLAMP))
    logp = logp1 @ bits + logp0 @ (1 - bits)
    return np.exp(logp)


def transition_probability(spec: ModelSpec, theta: Theta, a, x_next,
                           state: TransitionState) -> float:
    """Exact probability of `state.to` given `state.from_state` and effect a."""
    dist = transition_distribution(spec, theta, a, x_next, state.from_state)
    return float(dist[0, spec.state_to_code(state.to)])


def log_history_probability(spec: ModelSpec, theta: Theta, a, data: PanelData) -> np.ndarray:
    """Log P(observed path | initial block, covariates, fixed effect), (N,).

    The fixed effect `a` broadcasts: scalar/(M,) for a shared effect, or one
    row per unit.
    """
    a = _fixed_effect_array(spec, a)
    n = data.n_units
    logp = np.zeros(n)
    for t in range(1, spec.T + 1):
        if spec.family == "arp":
            state = np.stack([data.out(t - r) for r in range(1, spec.p + 1)], axis=1)
        else:
            state = data.out(t - 1)
        z = layer_logits(spec, theta, state, data.cov(t))
        if spec.family == "mar1":
            zi = np.clip(z + a, -EXP_CLAMP, EXP_CLAMP)
            lse = np.log(np.exp(zi - zi.max(axis=1, keepdims=True)).sum(axis=1)) \
                + zi.max(axis=1)
            logp += zi[np.arange(n), data.out(t)] - lse
        else:
            zi = np.clip(z + a, -EXP_CLAMP, EXP_CLAMP)
            yt = np.asarray(data.out(t), dtype=float)
            term = yt * log_sigmoid(zi) + (1.0 - yt) * log_sigmoid(-zi)
            logp += term if spec.family == "arp" else term.sum(axis=1)
    return logp


def history_probability(spec: ModelSpec, theta: Theta, a, data: PanelData) -> np.ndarray:
    return np.exp(log_history_probability(spec, theta, a, data))


def validate_dataset(spec: ModelSpec, data: PanelData) -> list[str]:
    """Report-valued admissibility check; empty list iff the dataset is usable."""
    issues: list[str] = []
    smax = spec.n_states - 1 if spec.family == "mar1" else 1
    y0 = np.atleast_2d(data.y0) if data.y0.ndim == 1 else data.y0

    def _flag_outcomes(arr, label):
        arr = np.asarray(arr)
        bad = (arr < 0) | (arr > smax)
        for idx in np.argwhere(bad):
            issues.append(f"unit {idx[0]}: {label}{tuple(idx[1:])} = {arr[tuple(idx)]} "
                          f"outside support 0..{smax}")

    _flag_outcomes(y0 if spec.family != "mar1" else data.y0[:, None], "initial outcome ")
    _flag_outcomes(data.y, "outcome at path position ")
    nan_pos = np.argwhere(~np.isfinite(data.x))
    for idx in nan_pos[:50]:
        issues.append(f"unit {idx[0]}: covariate x{tuple(idx[1:])} not finite")
    if len(nan_pos) > 50:
        issues.append(f"... {len(nan_pos) - 50} further non-finite covariates")
    return issues


def enumerate_histories(spec: ModelSpec) -> np.ndarray:
    """All outcome paths as codes, shape (n_states**T, T), canonical row order.

    Row h encodes the path whose period-t code is digit t-1 of h written in
    base n_states (period 1 least significant). This ordering is the row
    order of the brute-force expectation operator's matrix.
    """
    s, T = spec.n_states, spec.T
    if T * np.log2(s) > 24:
        raise ValueError("history enumeration beyond 2^24 paths is refused")
    h = np.arange(s ** T)
    digits = (h[:, None] // s ** np.arange(T)[None, :]) % s
    return digits.astype(np.int64)


def codes_to_paths(spec: ModelSpec, codes: np.ndarray) -> np.ndarray:
    """Decode (H, T) outcome codes into the family's natural path array."""
    if spec.family in ("arp", "mar1"):
        return codes.astype(np.int8)
    m = spec.n_layers
    return ((codes[..., None] >> np.arange(m)) & 1).astype(np.int8)


def paths_to_codes(spec: ModelSpec, y: np.ndarray) -> np.ndarray:
    """Inverse of codes_to_paths for (N, T[, M]) path arrays."""
    if spec.family in ("arp", "mar1"):
        return y.astype(np.int64)
    weights = 2 ** np.arange(spec.n_layers)
    return (y.astype(np.int64) * weights).sum(axis=-1)
