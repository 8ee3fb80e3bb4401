"""Synthetic panel generators and Monte Carlo drivers.

Draws are keyed by (seed, replication) through a counter-based generator, so
any replication can be regenerated independently and reruns are
byte-identical.  Within a replication the layout is fixed: all covariate
normals are drawn first, then all shock uniforms.
"""
from __future__ import annotations

import dataclasses
import os
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .models import ModelSpec, PanelData, PanelUnit, Theta
from .gmm import ESTIMATORS, EstimatorConfig, estimate


@dataclasses.dataclass(frozen=True)
class Design:
    """A complete recipe for one synthetic dataset family."""

    spec: ModelSpec
    theta_true: Theta
    n_units: int
    seed: int
    fixed_effect_scale: float = 1.0
    label: str = ""

    def __post_init__(self):
        self.theta_true.check(self.spec)


def _rng(design: Design, rep: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[design.seed, rep]))


def _logistic(u: np.ndarray) -> np.ndarray:
    u = np.clip(u, 1e-12, 1.0 - 1e-12)
    return np.log(u) - np.log1p(-u)


def _gumbel(u: np.ndarray) -> np.ndarray:
    u = np.clip(u, 1e-12, 1.0 - 1e-12)
    return -np.log(-np.log(u))


def _effects(x_all: np.ndarray, scale: float, axes,
             rng: np.random.Generator) -> np.ndarray:
    """Standardized sums of the unit's covariate draws over `axes`, keeping
    the effect correlated with the covariates; with no covariates the
    effects are drawn independently instead."""
    axes = tuple(np.atleast_1d(axes))
    count = 1
    for ax in axes:
        count *= x_all.shape[ax]
    shape = tuple(s for ax, s in enumerate(x_all.shape) if ax not in axes)
    if count == 0:
        return scale * rng.standard_normal(shape)
    return scale * x_all.sum(axis=axes) / np.sqrt(count)


def simulate(design: Design, rep: int = 0) -> PanelData:
    """Generate one replication of the design as a PanelData."""
    spec, theta = design.spec, design.theta_true
    N, T, Kx = design.n_units, spec.T, spec.Kx
    rng = _rng(design, rep)

    if spec.family == "arp":
        p = spec.p
        x_all = rng.standard_normal((N, T + p, Kx))   # periods 1-p .. T
        u = rng.random((N, T + p))
        eps = _logistic(u)
        a = _effects(x_all, design.fixed_effect_scale, (1, 2), rng)
        y = np.zeros((N, T + p), dtype=int)
        for t in range(T + p):                        # t=0 is period 1-p
            z = x_all[:, t] @ theta.beta + a
            for r in range(1, p + 1):                 # lags enter as generated
                if t - r >= 0:
                    z = z + theta.gamma[r - 1] * y[:, t - r]
            y[:, t] = (z - eps[:, t] >= 0.0).astype(int)
        units = [PanelUnit(y0=y[i, :p], y=y[i, p:], x=x_all[i, p:])
                 for i in range(N)]
        return PanelData.from_units(spec, units)

    if spec.family in ("var1", "net3"):
        M = spec.M
        x_all = rng.standard_normal((N, T + 1, M, Kx))  # periods 0 .. T
        eps = _logistic(rng.random((N, T + 1, M)))
        a = _effects(x_all, design.fixed_effect_scale, (1, 3), rng)  # (N, M)
        y = np.zeros((N, T + 1, M), dtype=int)
        for t in range(T + 1):
            if spec.family == "var1":
                z = np.einsum("nmk,mk->nm", x_all[:, t], theta.beta) + a
                if t > 0:
                    z = z + y[:, t - 1] @ theta.gamma.T
            else:
                z = x_all[:, t] @ theta.beta + a
                if t > 0:
                    prev = y[:, t - 1].astype(float)
                    partner = np.empty_like(prev)
                    for m in range(3):
                        others = [j for j in range(3) if j != m]
                        partner[:, m] = prev[:, others[0]] * prev[:, others[1]]
                    z = z + theta.gamma[0] * prev + theta.gamma[1] * partner
            y[:, t] = (z - eps[:, t] >= 0.0).astype(int)
        units = [PanelUnit(y0=y[i, 0], y=y[i, 1:], x=x_all[i, 1:],
                           x0=x_all[i, 0]) for i in range(N)]
        return PanelData.from_units(spec, units)

    # mar1: multinomial labels, Gumbel-max draws, class-0 effect normalized out
    C = spec.C
    x_all = rng.standard_normal((N, T + 1, C + 1, Kx))   # periods 0 .. T
    g = _gumbel(rng.random((N, T + 1, C + 1)))
    a = np.zeros((N, C + 1))
    a[:, 1:] = _effects(x_all[:, :, 1:], design.fixed_effect_scale, (1, 3), rng)
    y = np.zeros((N, T + 1), dtype=int)
    for t in range(T + 1):
        z = np.einsum("nck,ck->nc", x_all[:, t], theta.beta) + a
        if t > 0:
            z = z + theta.gamma[:, y[:, t - 1]].T
        y[:, t] = np.argmax(z + g[:, t], axis=1)
    units = [PanelUnit(y0=np.array([y[i, 0]]), y=y[i, 1:], x=x_all[i, 1:],
                       x0=x_all[i, 0]) for i in range(N)]
    return PanelData.from_units(spec, units)


# ---------------------------------------------------------------------------
# Stock designs
# ---------------------------------------------------------------------------

def ar_design(n_units: int, seed: int, p: int = 3, T: int = 5, Kx: int = 1,
              gamma=None, beta=None, fixed_effect_scale: float = 1.0,
              label: str = "") -> Design:
    spec = ModelSpec(family="arp", T=T, p=p, Kx=Kx)
    if gamma is None:
        gamma = (1.0, 0.5, 0.25)[:p] if p <= 3 else tuple(0.5 ** r for r in range(p))
    if beta is None:
        beta = (0.5,) * Kx
    theta = Theta(gamma=np.asarray(gamma, dtype=float),
                  beta=np.asarray(beta, dtype=float))
    return Design(spec, theta, n_units, seed, fixed_effect_scale,
                  label or f"ar{p}_T{T}")


def var_design(n_units: int, seed: int, M: int = 2, T: int = 3, Kx: int = 1,
               gamma=None, beta=None, fixed_effect_scale: float = 1.0,
               label: str = "") -> Design:
    spec = ModelSpec(family="var1", T=T, M=M, Kx=Kx)
    if gamma is None:
        gamma = np.full((M, M), 0.5)
        np.fill_diagonal(gamma, 1.0)
    if beta is None:
        beta = np.full((M, Kx), 0.5)
    theta = Theta(gamma=np.asarray(gamma, dtype=float),
                  beta=np.asarray(beta, dtype=float))
    return Design(spec, theta, n_units, seed, fixed_effect_scale,
                  label or f"var1_M{M}_T{T}")


def mar_design(n_units: int, seed: int, C: int = 2, T: int = 3, Kx: int = 1,
               gamma=None, beta=None, fixed_effect_scale: float = 1.0,
               label: str = "") -> Design:
    spec = ModelSpec(family="mar1", T=T, C=C, Kx=Kx)
    if gamma is None:
        gamma = np.zeros((C + 1, C + 1))
        gamma[1:, 1:] = 0.25
        gamma[np.arange(1, C + 1), np.arange(1, C + 1)] = 1.0
    if beta is None:
        beta = np.full((C + 1, Kx), 0.5)
    theta = Theta(gamma=np.asarray(gamma, dtype=float),
                  beta=np.asarray(beta, dtype=float))
    return Design(spec, theta, n_units, seed, fixed_effect_scale,
                  label or f"mar1_C{C}_T{T}")


def net_design(n_units: int, seed: int, T: int = 3, Kx: int = 1,
               gamma: float = 1.0, delta: float = 0.5, beta=None,
               fixed_effect_scale: float = 1.0, label: str = "") -> Design:
    spec = ModelSpec(family="net3", T=T, Kx=Kx)
    if beta is None:
        beta = (0.5,) * Kx
    theta = Theta(gamma=np.array([gamma, delta], dtype=float),
                  beta=np.asarray(beta, dtype=float))
    return Design(spec, theta, n_units, seed, fixed_effect_scale,
                  label or f"net3_T{T}")


# ---------------------------------------------------------------------------
# Monte Carlo
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class RepRecord:
    rep: int
    estimator: str
    theta_hat: np.ndarray
    converged: bool
    objective: float
    messages: tuple = ()


@dataclasses.dataclass
class McResult:
    design: Design
    estimators: tuple
    reps: int
    records: list
    param_names: tuple

    def _hats(self, estimator: str, converged_only: bool = True) -> np.ndarray:
        rows = [r.theta_hat for r in self.records
                if r.estimator == estimator and (r.converged or not converged_only)]
        return np.array(rows) if rows else np.empty((0, len(self.param_names)))

    def convergence_fraction(self, estimator: str) -> float:
        runs = [r for r in self.records if r.estimator == estimator]
        return sum(r.converged for r in runs) / len(runs) if runs else 0.0

    def median_bias(self, estimator: str) -> np.ndarray:
        hats = self._hats(estimator)
        true = self.design.theta_true.to_flat(self.design.spec)
        return np.median(hats - true, axis=0) if hats.size else np.full(true.size, np.nan)

    def median_abs_error(self, estimator: str) -> np.ndarray:
        hats = self._hats(estimator)
        true = self.design.theta_true.to_flat(self.design.spec)
        return np.median(np.abs(hats - true), axis=0) if hats.size else np.full(true.size, np.nan)

    def table(self) -> list:
        """Rows of (estimator, parameter, true value, median bias, median
        absolute error, convergence fraction)."""
        true = self.design.theta_true.to_flat(self.design.spec)
        rows = []
        for est in self.estimators:
            bias = self.median_bias(est)
            mae = self.median_abs_error(est)
            frac = self.convergence_fraction(est)
            for j, name in enumerate(self.param_names):
                rows.append((est, name, float(true[j]), float(bias[j]),
                             float(mae[j]), frac))
        return rows


def _run_rep(design: Design, rep: int, estimators: tuple, warm_start: bool,
             ids, instruments, solver_options: dict) -> list:
    data = simulate(design, rep)
    opts = dict(solver_options)
    opts.setdefault("compute_covariance", False)
    theta0 = design.theta_true.to_flat(design.spec) if warm_start else None
    out = []
    pilot = None
    for est in estimators:
        start = theta0
        if start is None and est != "identity":
            # seed the heavier estimators with a cheap identity-weight fit
            if pilot is None:
                pilot_cfg = EstimatorConfig(estimator="identity", ids=ids,
                                            instruments=instruments, **opts)
                pilot = estimate(data, spec=design.spec, config=pilot_cfg).theta_hat
            start = pilot
        cfg = EstimatorConfig(estimator=est, theta0=start, ids=ids,
                              instruments=instruments, **opts)
        res = estimate(data, spec=design.spec, config=cfg)
        if est == "identity" and pilot is None:
            pilot = res.theta_hat
        out.append(RepRecord(rep, est, res.theta_hat.to_flat(design.spec),
                             res.converged, res.objective, tuple(res.messages)))
    return out


def monte_carlo(design: Design, estimators=("identity",), reps: int = 100,
                warm_start: bool = False, ids=None, instruments=None,
                threads: int = None, solver_options: dict = None) -> McResult:
    """Run `reps` independent replications and summarize each estimator.

    Replication r uses the generator keyed (design.seed, r), so results do
    not depend on the execution order or the number of worker processes.
    Starts are data driven: each estimator after the first is seeded with an
    identity-weight fit of the same replication (warm_start=True switches to
    starting at the design's true parameter, which is faster but only
    defensible for solver diagnostics, not for bias studies).  Non-converged
    replications are recorded but excluded from the medians.
    """
    for est in estimators:
        if est not in ESTIMATORS:
            raise ValueError(f"unknown estimator {est!r}")
    if threads is None:
        threads = int(os.environ.get("DPLOGIT_THREADS", "0")) or (os.cpu_count() or 1)
    solver_options = dict(solver_options or {})
    records = []
    if threads <= 1 or reps == 1:
        for rep in range(reps):
            records.extend(_run_rep(design, rep, tuple(estimators), warm_start,
                                    ids, instruments, solver_options))
    else:
        with ProcessPoolExecutor(max_workers=min(threads, reps)) as pool:
            futures = [pool.submit(_run_rep, design, rep, tuple(estimators),
                                   warm_start, ids, instruments, solver_options)
                       for rep in range(reps)]
            for fut in futures:
                records.extend(fut.result())
    records.sort(key=lambda r: (r.rep, estimators.index(r.estimator)))
    names = design.theta_true.flat_names(design.spec)
    return McResult(design, tuple(estimators), reps, records, tuple(names))
