"""GMM estimation on instrumented moment stacks.

Builds the unit-level moment vector as (moment values) x (instruments) via a
Kronecker product, exposes the quadratic-form objective with pluggable weight
action, and runs three estimators: identity weight on raw moments, identity
weight on per-unit rescaled moments, and iterated GMM that refits the weight
matrix from the previous estimate until the parameter step stalls.  Also
carries the T=3 one-lag efficiency bound with closed-form moment derivatives.
"""
from __future__ import annotations

import dataclasses
import warnings

import numpy as np
from scipy import linalg, optimize

from .models import ModelSpec, PanelData, PanelUnit, Theta
from .moments import (
    MomentId,
    enumerate_moments,
    expand_paths,
    observed_path_index,
    psi_matrix,
    psi_matrix_grad,
    rescale_factors,
    rescale_factors_grad,
    rescale_from_path_values,
)
from .oracle import history_distribution
from . import transitions as tf

ESTIMATORS = ("identity", "rescaled", "iterated")


# ---------------------------------------------------------------------------
# Instruments
# ---------------------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class InstrumentSpec:
    """Ordered unit-level instrument atoms.

    Atom forms:
      ("const",)               -- the constant 1
      ("y0", j)                -- j-th initial-condition component, 1-based;
                                  chronological (oldest first) for the lag
                                  family, layer index otherwise
      ("x", layer, k, t)       -- covariate k of `layer` at period t (all
                                  1-based; layer is 1 for the scalar family)
      ("custom", name, fn)     -- fn(spec, data) -> (N,) values
    """

    atoms: tuple

    def __post_init__(self):
        if not self.atoms:
            raise ValueError("instrument list is empty; at least the constant is required")
        for atom in self.atoms:
            kind = atom[0]
            if kind == "const" and len(atom) == 1:
                continue
            if kind == "y0" and len(atom) == 2 and int(atom[1]) >= 1:
                continue
            if kind == "x" and len(atom) == 4 and all(int(v) >= 1 for v in atom[1:]):
                continue
            if kind == "custom" and len(atom) == 3 and callable(atom[2]):
                continue
            raise ValueError(f"malformed instrument atom {atom!r}")

    @property
    def n_instruments(self) -> int:
        return len(self.atoms)

    def labels(self) -> list[str]:
        out = []
        for atom in self.atoms:
            if atom[0] == "const":
                out.append("const")
            elif atom[0] == "y0":
                out.append(f"y0.{atom[1]}")
            elif atom[0] == "x":
                out.append(f"x.{atom[1]}.{atom[2]}.{atom[3]}")
            else:
                out.append(f"custom.{atom[1]}")
        return out


def default_instruments(spec: ModelSpec) -> InstrumentSpec:
    """Constant, every initial-condition component, every covariate."""
    atoms = [("const",)]
    if spec.family == "arp":
        atoms += [("y0", j) for j in range(1, spec.p + 1)]
        layers = 1
    elif spec.family == "mar1":
        atoms += [("y0", 1)]
        layers = spec.C + 1
    else:
        atoms += [("y0", m) for m in range(1, spec.n_layers + 1)]
        layers = spec.n_layers
    for layer in range(1, layers + 1):
        for k in range(1, spec.Kx + 1):
            for t in range(1, spec.T + 1):
                atoms.append(("x", layer, k, t))
    return InstrumentSpec(tuple(atoms))


def instrument_matrix(spec: ModelSpec, data: PanelData,
                      instruments: InstrumentSpec) -> np.ndarray:
    """Evaluate every atom on every unit, shape (N, L)."""
    n = data.n_units
    cols = []
    for atom in instruments.atoms:
        if atom[0] == "const":
            cols.append(np.ones(n))
        elif atom[0] == "y0":
            j = int(atom[1])
            if spec.family == "mar1":
                if j != 1:
                    raise ValueError("the multinomial family has a single initial label")
                cols.append(data.y0.astype(float))
            else:
                width = spec.p if spec.family == "arp" else spec.n_layers
                if j > width:
                    raise ValueError(f"initial-condition index {j} exceeds {width}")
                cols.append(data.y0[:, j - 1].astype(float))
        elif atom[0] == "x":
            layer, k, t = int(atom[1]), int(atom[2]), int(atom[3])
            if t > spec.T or k > spec.Kx:
                raise ValueError(f"instrument atom {atom!r} is outside the panel "
                                 f"(T={spec.T}, Kx={spec.Kx})")
            xt = data.cov(t)
            if spec.family == "arp":
                if layer != 1:
                    raise ValueError("the scalar family has a single covariate layer")
                cols.append(xt[:, k - 1])
            else:
                n_layers = spec.C + 1 if spec.family == "mar1" else spec.n_layers
                if layer > n_layers:
                    raise ValueError(f"layer {layer} exceeds {n_layers}")
                cols.append(xt[:, layer - 1, k - 1])
        else:
            cols.append(np.asarray(atom[2](spec, data), dtype=float).reshape(n))
    return np.stack(cols, axis=1)


def stack_moments(ids: list[MomentId], instruments: InstrumentSpec,
                  unit: PanelUnit, theta: Theta, rescaled: bool = False) -> np.ndarray:
    """Unit-level stacked moment vector: psi block Kronecker instrument block.

    Order: [psi_1*z_1 .. psi_1*z_L, psi_2*z_1, ...].  With rescaled=True each
    psi is divided by its per-unit rescale factor first.
    """
    if not ids:
        raise ValueError("no moment ids supplied")
    spec = tf._unit_spec(ids[0].family, unit)
    data = PanelData.from_unit(spec, unit)
    psi = psi_matrix(spec, theta, data, ids)
    if rescaled:
        psi = psi / rescale_factors(spec, theta, data, ids)
    z = instrument_matrix(spec, data, instruments)
    return np.kron(psi[0], z[0])


# ---------------------------------------------------------------------------
# Objective machinery
# ---------------------------------------------------------------------------

def _as_paneldata(dataset, spec: ModelSpec | None = None) -> tuple[PanelData, ModelSpec]:
    if isinstance(dataset, PanelData):
        return dataset, dataset.spec
    if spec is None:
        raise ValueError("a ModelSpec is required when the dataset is a unit list")
    return PanelData.from_units(spec, list(dataset)), spec


def _cholesky_weight(w, dim: int):
    """Lower Cholesky factor of a weight matrix, ridged if singular.

    Returns (chol, cond, note); the note reports the ridge when one was
    needed (1e-10 * trace/L on the diagonal).
    """
    w = np.asarray(w, dtype=float)
    if w.shape != (dim, dim):
        raise ValueError(f"weight matrix shape {w.shape} != ({dim}, {dim})")
    note = None
    try:
        chol = np.linalg.cholesky(w)
    except np.linalg.LinAlgError:
        ridge = 1e-10 * np.trace(w) / dim
        note = f"singular weight matrix; ridged by {ridge:.3e}"
        chol = np.linalg.cholesky(w + ridge * np.eye(dim))
    svals = np.linalg.svd(w, compute_uv=False)
    cond = float(svals[0] / svals[-1]) if svals[-1] > 0 else np.inf
    return chol, cond, note


def _weight_action(w, dim: int):
    """Turn a weight specification into (action v -> W^{-1} v, cond, note).

    None means the identity weight.  A matrix is inverted through its
    Cholesky factor; if that fails the matrix is ridged by 1e-10 * trace/L
    and the note says so.
    """
    if w is None:
        return (lambda v: v), 1.0, None
    if callable(w):
        return w, np.nan, None
    chol, cond, note = _cholesky_weight(w, dim)

    def action(v):
        return np.linalg.solve(chol.T, np.linalg.solve(chol, v))

    return action, cond, note


def _half_weight(w, dim: int):
    """Half-inverse map for least squares: v -> L^{-1} v with W = L L'.

    |L^{-1} mbar|^2 equals mbar' W^{-1} mbar, so the quadratic form becomes
    a plain residual norm.  None means the identity weight.
    """
    if w is None:
        return (lambda v: v), 1.0, None
    chol, cond, note = _cholesky_weight(w, dim)
    return (lambda v: linalg.solve_triangular(chol, v, lower=True)), cond, note


class GmmProblem:
    """One dataset + moment family + instruments, with the path expansion
    cached so rescaled objectives do not re-tile the panel at every theta."""

    def __init__(self, data: PanelData, ids: list[MomentId],
                 instruments: InstrumentSpec, rescaled: bool = False):
        if not ids:
            spec = data.spec
            raise ValueError(
                f"the moment family is empty for family={spec.family}, T={spec.T}, "
                f"p={spec.p}: valid moments exist only when T >= p + 2")
        self.data = data
        self.spec = data.spec
        self.ids = list(ids)
        self.instruments = instruments
        self.rescaled = rescaled
        self.z = instrument_matrix(self.spec, data, instruments)
        self.n_units = data.n_units
        self.dim = len(self.ids) * instruments.n_instruments
        if rescaled:
            self._expanded, self._n_paths = expand_paths(self.spec, data)
            self._obs_rows = (np.arange(self.n_units) * self._n_paths
                              + observed_path_index(self.spec, data))
        else:
            self._expanded = None
        self._scale_key = None
        self._scale_parts = None
        self._eval_cache = {}
        self._cache_theta = None
        self._theta_key = None
        self._theta_obj = None

    def theta_at(self, x: np.ndarray) -> Theta:
        """Intern the Theta for a flat vector so repeated calls at one point
        (a residual then its jacobian) share one parameter object and with it
        the evaluation cache."""
        key = x.tobytes()
        if key != self._theta_key:
            self._theta_obj = Theta.from_flat(self.spec, np.asarray(x, dtype=float))
            self._theta_key = key
        return self._theta_obj

    def _eval_scope(self, theta: Theta):
        """Transition-evaluation scope whose parameter-independent arrays
        (indicator masks, lag columns) persist across solver iterations."""
        if self._cache_theta is not theta:
            tf.purge_theta_entries(self._eval_cache, id(theta))
            # hold a reference so the id cannot be recycled while cached
            self._cache_theta = theta
        return tf.shared_evaluation(self._eval_cache)

    def _value_and_grad(self, theta: Theta):
        """Raw observed psi, rescale factors, and the analytic jacobian of
        the rescaled moments, all from one pass over the expanded panel."""
        n_ids = len(self.ids)
        dim_theta = self.spec.theta_dim()
        with self._eval_scope(theta):
            vals, grads = psi_matrix_grad(self.spec, theta, self._expanded,
                                          self.ids)
        obs_v = vals[self._obs_rows]
        obs_g = grads[self._obs_rows]
        per_v = vals.reshape(self.n_units, self._n_paths, n_ids)
        per_g = grads.reshape(self.n_units, self._n_paths, n_ids, dim_theta)
        c, dc = rescale_factors_grad(per_v, per_g)
        dpsi = obs_g / c[:, :, None] - (obs_v / c ** 2)[:, :, None] * dc
        return obs_v, c, dpsi

    def _rescaled_parts(self, theta: Theta):
        """(observed raw psi, rescale factors, dpsi or None) at theta,
        memoized for the last theta so the closing diagnostics after a solve
        reuse the final jacobian pass instead of re-expanding the panel."""
        key = theta.to_flat(self.spec).tobytes()
        if key != self._scale_key:
            with self._eval_scope(theta):
                path_vals = psi_matrix(self.spec, theta, self._expanded,
                                       self.ids)
            observed = path_vals[self._obs_rows]
            per_path = path_vals.reshape(self.n_units, self._n_paths,
                                         len(self.ids))
            self._scale_parts = (observed,
                                 rescale_from_path_values(per_path), None)
            self._scale_key = key
        return self._scale_parts

    def psi_values(self, theta: Theta) -> np.ndarray:
        """(N, n_ids) moment values, rescaled when the problem says so."""
        if not self.rescaled:
            with self._eval_scope(theta):
                return psi_matrix(self.spec, theta, self.data, self.ids)
        observed, factors = self._rescaled_parts(theta)[:2]
        return observed / factors

    def moment_conditions(self, theta: Theta) -> np.ndarray:
        """(N, n_ids*L) stacked per-unit moment vectors."""
        psi = self.psi_values(theta)
        g = np.einsum("ni,nl->nil", psi, self.z)
        return g.reshape(self.n_units, self.dim)

    def mean_moments(self, theta: Theta) -> np.ndarray:
        return self.moment_conditions(theta).mean(axis=0)

    def residuals(self, theta: Theta, half=None) -> np.ndarray:
        """Weighted mean moments as a residual vector: the objective is
        exactly |residuals|^2, which lets a least-squares solver exploit
        the problem structure."""
        m = self.mean_moments(theta)
        return m if half is None else half(m)

    def exact_jacobian(self, half=None):
        """Analytic jacobian of the residual vector, shape (dim, theta_dim).

        Available for the binary lag family, where the moment functions have
        closed-form parameter derivatives; for rescaled problems the factor
        derivative is included through the distinct-path-value
        representatives."""
        dim_theta = self.spec.theta_dim()

        def jac(x):
            theta = self.theta_at(x)
            if not self.rescaled:
                with self._eval_scope(theta):
                    _, dpsi = psi_matrix_grad(self.spec, theta, self.data,
                                              self.ids)
            else:
                key = x.tobytes()
                if key != self._scale_key or self._scale_parts[2] is None:
                    self._scale_parts = self._value_and_grad(theta)
                    self._scale_key = key
                dpsi = self._scale_parts[2]
            mj = np.einsum("nkd,nl->kld", dpsi, self.z)
            mj = mj.reshape(self.dim, dim_theta) / self.n_units
            return mj if half is None else half(mj)

        return jac

    def objective(self, theta: Theta, w_inverse_action=None) -> float:
        action, _, note = (w_inverse_action, np.nan, None) \
            if callable(w_inverse_action) or w_inverse_action is None \
            else _weight_action(w_inverse_action, self.dim)
        if note:
            warnings.warn(note)
        m = self.mean_moments(theta)
        if action is None:
            return float(m @ m)
        return float(m @ action(m))

    def sample_weight(self, theta: Theta) -> np.ndarray:
        """Uncentered second moment of the stacked conditions, N^{-1} sum g g'."""
        g = self.moment_conditions(theta)
        return g.T @ g / self.n_units

    def prune(self, theta: Theta, threshold: float) -> list[MomentId]:
        """Drop moments that are exactly zero for more than `threshold` of
        the sample (evaluated at theta); returns the dropped ids."""
        psi = psi_matrix(self.spec, theta, self.data, self.ids)
        zero_frac = (psi == 0.0).mean(axis=0)
        dropped = [mid for mid, f in zip(self.ids, zero_frac) if f > threshold]
        if dropped:
            keep = [i for i, f in enumerate(zero_frac) if f <= threshold]
            self.ids = [self.ids[i] for i in keep]
            self.dim = len(self.ids) * self.instruments.n_instruments
        return dropped


def gmm_objective(dataset, theta: Theta, w_inverse_action=None, *,
                  spec: ModelSpec | None = None, ids=None,
                  instruments: InstrumentSpec | None = None,
                  rescaled: bool = False) -> float:
    """Quadratic form mbar' W^{-1} mbar of the stacked sample moments.

    w_inverse_action: None for the identity weight, a callable v -> W^{-1}v,
    or a weight matrix (inverted via Cholesky, ridged if singular).
    """
    data, spec = _as_paneldata(dataset, spec)
    if ids is None:
        ids = enumerate_moments(spec)
    if instruments is None:
        instruments = default_instruments(spec)
    problem = GmmProblem(data, ids, instruments, rescaled)
    return problem.objective(theta, w_inverse_action)


# ---------------------------------------------------------------------------
# Estimators
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class EstimatorConfig:
    estimator: str = "identity"
    theta0: Theta | None = None
    ids: list | None = None
    instruments: InstrumentSpec | None = None
    gtol: float = 1e-8
    step_tol: float = 1e-10
    max_iterations: int = 200
    max_weight_iterations: int = 50
    weight_step_tol: float = 1e-4
    prune_threshold: float | None = None
    fd_scheme: str = "central"
    solver: str = "lm"
    compute_covariance: bool = True

    def __post_init__(self):
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"unknown estimator {self.estimator!r}; "
                             f"choose from {ESTIMATORS}")
        if self.fd_scheme not in ("central", "forward"):
            raise ValueError("fd_scheme must be 'central' or 'forward'")
        if self.solver not in ("lm", "bfgs"):
            raise ValueError("solver must be 'lm' or 'bfgs'")


@dataclasses.dataclass
class GmmResult:
    theta_hat: Theta
    objective: float
    iterations: int
    converged: bool
    weight_condition: float
    covariance: np.ndarray
    std_errors: np.ndarray
    moment_means: np.ndarray
    estimator: str
    weight_iterations: int = 0
    objective_path: list = dataclasses.field(default_factory=list)
    messages: list = dataclasses.field(default_factory=list)
    dropped_moments: list = dataclasses.field(default_factory=list)


def _fd_gradient(fun, x: np.ndarray, scale: float = 1e-6,
                 scheme: str = "central", f0: float | None = None) -> np.ndarray:
    g = np.empty_like(x)
    if scheme == "forward" and f0 is None:
        f0 = fun(x)
    for j in range(x.size):
        h = scale * (1.0 + abs(x[j]))
        e = np.zeros_like(x)
        e[j] = h
        if scheme == "forward":
            g[j] = (fun(x + e) - f0) / h
        else:
            g[j] = (fun(x + e) - fun(x - e)) / (2.0 * h)
    return g


def _minimize(fun, x0: np.ndarray, cfg: EstimatorConfig):
    """BFGS with finite-difference gradients; Nelder-Mead restart if the
    line search fails, keeping whichever iterate has the lower objective."""
    res = optimize.minimize(
        fun, x0, method="BFGS",
        jac=lambda x: _fd_gradient(fun, x, scheme=cfg.fd_scheme),
        options={"gtol": cfg.gtol, "maxiter": cfg.max_iterations,
                 "xrtol": cfg.step_tol})
    best_x, best_f, n_iter, ok = res.x, float(res.fun), int(res.nit), bool(res.success)
    if not ok:
        res2 = optimize.minimize(
            fun, best_x, method="Nelder-Mead",
            options={"maxiter": 400 * x0.size, "xatol": 1e-8, "fatol": 1e-12})
        if float(res2.fun) <= best_f:
            best_x, best_f = res2.x, float(res2.fun)
            ok = bool(res2.success)
            n_iter += int(res2.nit)
    return best_x, best_f, n_iter, ok


def _minimize_ls(res_fn, x0: np.ndarray, cfg: EstimatorConfig, jac=None):
    """Levenberg-Marquardt on the residual vector (objective = |r|^2).

    Falls back to the scalar BFGS/Nelder-Mead path when the solver reports
    failure, keeping whichever point has the lower objective.
    """
    res = optimize.least_squares(
        res_fn, x0, jac=jac if jac is not None else "2-point",
        method="lm", diff_step=1e-5,
        xtol=cfg.step_tol, gtol=cfg.gtol, ftol=1e-10,
        max_nfev=cfg.max_iterations * (x0.size + 1))
    best_x, best_f = res.x, float(2.0 * res.cost)
    n_iter, ok = int(res.nfev), res.status > 0
    if not ok:
        def fun(x):
            r = res_fn(x)
            return float(r @ r)
        x2, f2, it2, ok2 = _minimize(fun, best_x, cfg)
        n_iter += it2
        if f2 <= best_f:
            best_x, best_f, ok = x2, f2, ok2
    return best_x, best_f, n_iter, ok


def estimate(dataset, spec: ModelSpec | None = None,
             config: EstimatorConfig | None = None) -> GmmResult:
    """Run one of the three estimators and package diagnostics.

    identity: minimize |mbar|^2.  rescaled: same with per-unit rescaled
    moments.  iterated: start from the identity estimate, then alternate
    weight refits W = N^{-1} sum g g' at the previous estimate with
    re-minimization until the parameter step drops below weight_step_tol or
    the round limit hits; non-convergence is reported, not raised.
    """
    config = config or EstimatorConfig()
    data, spec = _as_paneldata(dataset, spec)
    if data.n_units <= spec.theta_dim():
        raise ValueError(f"only {data.n_units} units for {spec.theta_dim()} parameters")
    ids = config.ids if config.ids is not None else enumerate_moments(spec)
    instruments = config.instruments or default_instruments(spec)
    problem = GmmProblem(data, ids, instruments,
                         rescaled=(config.estimator == "rescaled"))
    messages = []
    dropped = []
    theta0 = config.theta0 if config.theta0 is not None else Theta.zeros(spec)
    if not isinstance(theta0, Theta):
        theta0 = Theta.from_flat(spec, np.asarray(theta0, dtype=float))
    if config.prune_threshold is not None:
        dropped = problem.prune(theta0, config.prune_threshold)
        if dropped:
            messages.append(f"pruned {len(dropped)} moments identically zero on "
                            f"more than {config.prune_threshold:.1%} of units")
    x0 = theta0.to_flat(spec)

    def run(x_start, weight):
        """One solve from x_start under an optional weight matrix."""
        if config.solver == "lm":
            half, cond, note = _half_weight(weight, problem.dim)

            def res_fn(x):
                return problem.residuals(problem.theta_at(x), half)

            jac = problem.exact_jacobian(half) if spec.family == "arp" else None
            x, f, nit, ok = _minimize_ls(res_fn, x_start, config, jac=jac)
        else:
            action, cond, note = _weight_action(weight, problem.dim)

            def fun(x):
                return problem.objective(problem.theta_at(x), action)

            x, f, nit, ok = _minimize(fun, x_start, config)
        return x, f, nit, ok, cond, note

    objective_path = []
    weight_cond = 1.0
    weight_rounds = 0
    x_hat, f_hat, n_iter, ok, _, _ = run(x0, None)
    objective_path.append(f_hat)
    weight_used = None
    if config.estimator == "iterated":
        for round_ in range(1, config.max_weight_iterations + 1):
            w = problem.sample_weight(Theta.from_flat(spec, x_hat))
            x_new, f_hat, it2, ok, weight_cond, note = run(x_hat, w)
            if note:
                messages.append(f"round {round_}: {note}")
            n_iter += it2
            objective_path.append(f_hat)
            step = float(np.linalg.norm(x_new - x_hat))
            x_hat = x_new
            weight_rounds = round_
            if step < config.weight_step_tol:
                break
        else:
            ok = False
            messages.append(f"weight iteration did not settle in "
                            f"{config.max_weight_iterations} rounds")
        weight_used = problem.sample_weight(Theta.from_flat(spec, x_hat))
    theta_hat = Theta.from_flat(spec, x_hat)
    if config.compute_covariance:
        cov = asymptotic_variance(data, theta_hat, problem.ids, instruments,
                                  rescaled=problem.rescaled, weight=weight_used)
        ses = np.sqrt(np.clip(np.diag(cov), 0.0, None) / data.n_units)
    else:
        cov = np.full((spec.theta_dim(), spec.theta_dim()), np.nan)
        ses = np.full(spec.theta_dim(), np.nan)
    return GmmResult(
        theta_hat=theta_hat, objective=f_hat, iterations=n_iter, converged=ok,
        weight_condition=weight_cond, covariance=cov, std_errors=ses,
        moment_means=problem.mean_moments(theta_hat), estimator=config.estimator,
        weight_iterations=weight_rounds, objective_path=objective_path,
        messages=messages, dropped_moments=dropped)


def asymptotic_variance(dataset, theta_hat: Theta, ids, instruments,
                        *, spec: ModelSpec | None = None, rescaled: bool = False,
                        weight=None) -> np.ndarray:
    """Sandwich variance of sqrt(N)(theta_hat - theta0).

    M is the Jacobian of the mean moments by central differences with
    per-coordinate steps 1e-5*(1+|theta_j|); What = N^{-1} sum g g'.  With
    weight=None (identity) the sandwich is (M'M)^{-1} M' What M (M'M)^{-1};
    with weight=What it collapses to (M' What^{-1} M)^{-1}.  Symmetrized; a
    singular bread falls back to the pseudo-inverse with a rank warning.
    """
    data, spec = _as_paneldata(dataset, spec)
    problem = GmmProblem(data, list(ids), instruments, rescaled)
    x_hat = theta_hat.to_flat(spec)
    dim_theta = x_hat.size
    m_jac = np.empty((problem.dim, dim_theta))
    for j in range(dim_theta):
        h = 1e-5 * (1.0 + abs(x_hat[j]))
        e = np.zeros_like(x_hat)
        e[j] = h
        up = problem.mean_moments(Theta.from_flat(spec, x_hat + e))
        dn = problem.mean_moments(Theta.from_flat(spec, x_hat - e))
        m_jac[:, j] = (up - dn) / (2.0 * h)
    what = problem.sample_weight(theta_hat)
    if weight is None:
        w_inv_m = m_jac
    else:
        action, _, note = _weight_action(weight, problem.dim)
        if note:
            warnings.warn(note)
        w_inv_m = np.column_stack([action(m_jac[:, j]) for j in range(dim_theta)])
    bread = m_jac.T @ w_inv_m
    try:
        bread_inv = np.linalg.inv(bread)
    except np.linalg.LinAlgError:
        bread_inv = np.linalg.pinv(bread)
        warnings.warn(f"singular bread matrix, rank {np.linalg.matrix_rank(bread)} "
                      f"of {dim_theta}; pseudo-inverse used")
    meat = w_inv_m.T @ what @ w_inv_m
    cov = bread_inv @ meat @ bread_inv.T
    return (cov + cov.T) / 2.0


# ---------------------------------------------------------------------------
# T=3 one-lag efficiency bound
# ---------------------------------------------------------------------------

def _ar1_t3_psi_and_grads(theta: Theta, x: np.ndarray, y0: int):
    """The two T=3 moment functions and their exact theta-derivatives on all
    eight outcome paths (canonical order, period-1 bit least significant).

    Returns (psi, dpsi) with shapes (2, 8) and (2, 8, 1+Kx); row 0 pins the
    middle period at 0, row 1 pins it at 1.
    """
    x = np.asarray(x, dtype=float)
    beta = theta.beta
    gamma = float(theta.gamma[0])
    h = np.arange(8)
    y1, y2, y3 = (h & 1).astype(float), ((h >> 1) & 1).astype(float), ((h >> 2) & 1).astype(float)
    xb = x @ beta                       # (3,) period index contributions
    dim = 1 + beta.size

    # phi^0 = (1-Y2) exp(Y3 (gamma Y1 + (x2-x3)'beta))
    e0 = np.exp(y3 * (gamma * y1 + (xb[1] - xb[2])))
    phi0 = (1.0 - y2) * e0
    dphi0 = np.empty((8, dim))
    dphi0[:, 0] = phi0 * y3 * y1
    dphi0[:, 1:] = (phi0 * y3)[:, None] * (x[1] - x[2])[None, :]
    # zeta^0 = (1-Y1) + (1 - e^{d0}) Y1 phi0, d0 = -gamma y0 + (x3-x1)'beta
    d0 = -gamma * y0 + (xb[2] - xb[0])
    om0 = 1.0 - np.exp(d0)
    dd0 = np.concatenate([[-float(y0)], x[2] - x[0]])
    zeta0 = (1.0 - y1) + om0 * y1 * phi0
    dzeta0 = ((om0 - 1.0) * dd0)[None, :] * (y1 * phi0)[:, None] + om0 * y1[:, None] * dphi0
    # phi^1 = Y2 exp((Y3-1)(gamma(Y1-1) + (x2-x3)'beta))
    e1 = np.exp((y3 - 1.0) * (gamma * (y1 - 1.0) + (xb[1] - xb[2])))
    phi1 = y2 * e1
    dphi1 = np.empty((8, dim))
    dphi1[:, 0] = phi1 * (1.0 - y3) * (1.0 - y1)
    dphi1[:, 1:] = (phi1 * (1.0 - y3))[:, None] * (x[2] - x[1])[None, :]
    # zeta^1 = Y1 + (1 - e^{-d1})(1-Y1) phi1, d1 = gamma(1-y0) + (x3-x1)'beta
    d1 = gamma * (1.0 - y0) + (xb[2] - xb[0])
    om1 = 1.0 - np.exp(-d1)
    dd1 = np.concatenate([[1.0 - float(y0)], x[2] - x[0]])
    zeta1 = y1 + om1 * (1.0 - y1) * phi1
    dzeta1 = ((1.0 - om1) * dd1)[None, :] * ((1.0 - y1) * phi1)[:, None] \
        + om1 * (1.0 - y1)[:, None] * dphi1

    psi = np.stack([phi0 - zeta0, phi1 - zeta1])
    dpsi = np.stack([dphi0 - dzeta0, dphi1 - dzeta1])
    return psi, dpsi


@dataclasses.dataclass
class EfficiencyBound:
    v0: np.ndarray                # (1+Kx, 1+Kx)
    d: np.ndarray                 # (n, 2, 1+Kx) moment Jacobians per x
    sigma: np.ndarray             # (n, 2, 2) second moments per x
    omega: np.ndarray             # (n, 1+Kx, 2) efficient combination per x
    psi_paths: np.ndarray         # (n, 2, 8) moment values on all paths
    dropped: list                 # x rows with singular sigma
    n_used: int

    def efficient_moment_paths(self, i: int) -> np.ndarray:
        """-Omega(x_i) psi on all eight paths, shape (1+Kx, 8)."""
        return -self.omega[i] @ self.psi_paths[i]


def efficiency_bound_ar1_t3(x_sample, y0: int, theta: Theta,
                            a_points=(0.0,), a_weights=None,
                            prob_fn=None, cond_limit: float = 1e12) -> EfficiencyBound:
    """Variance bound for the T=3 one-lag design over a covariate sample.

    Path probabilities come from a finite heterogeneity mixture over the
    fixed effect (a_points, a_weights) unless prob_fn(x) supplies them
    directly.  Per x: D = sum_h P(h|x) dpsi(h), Sigma = sum_h P(h|x)
    psi(h)psi(h)', Omega = D' Sigma^{-1}; the bound is the inverse of the
    x-average of D' Sigma^{-1} D.  An x whose Sigma is numerically singular
    is dropped and counted.
    """
    x_sample = np.asarray(x_sample, dtype=float)
    if x_sample.ndim == 2:
        x_sample = x_sample[:, :, None]
    if x_sample.ndim != 3 or x_sample.shape[1] != 3:
        raise ValueError("x_sample must be (n, 3) or (n, 3, Kx)")
    kx = x_sample.shape[2]
    spec = ModelSpec("arp", T=3, p=1, Kx=kx)
    theta.check(spec)
    if a_weights is None:
        a_weights = np.full(len(a_points), 1.0 / len(a_points))
    a_weights = np.asarray(a_weights, dtype=float)
    if abs(a_weights.sum() - 1.0) > 1e-12:
        raise ValueError("mixture weights must sum to 1")
    dim = 1 + kx
    n = x_sample.shape[0]
    d_all = np.zeros((n, 2, dim))
    s_all = np.zeros((n, 2, 2))
    o_all = np.zeros((n, dim, 2))
    psi_all = np.zeros((n, 2, 8))
    dropped = []
    acc = np.zeros((dim, dim))
    for i in range(n):
        x = x_sample[i]
        if prob_fn is not None:
            probs = np.asarray(prob_fn(x), dtype=float)
        else:
            probs = sum(w * history_distribution(spec, theta, a, x, np.array([y0]))
                        for a, w in zip(a_points, a_weights))
        psi, dpsi = _ar1_t3_psi_and_grads(theta, x, y0)
        d_i = np.einsum("h,khj->kj", probs, dpsi)
        s_i = np.einsum("h,kh,lh->kl", probs, psi, psi)
        d_all[i], s_all[i], psi_all[i] = d_i, s_i, psi
        if np.linalg.cond(s_i) > cond_limit:
            dropped.append(i)
            continue
        s_inv = np.linalg.inv(s_i)
        o_all[i] = d_i.T @ s_inv
        acc += d_i.T @ s_inv @ d_i
    n_used = n - len(dropped)
    if n_used == 0:
        raise ValueError("every covariate row had a singular second-moment matrix")
    v0 = np.linalg.inv(acc / n_used)
    v0 = (v0 + v0.T) / 2.0
    return EfficiencyBound(v0, d_all, s_all, o_all, psi_all, dropped, n_used)
