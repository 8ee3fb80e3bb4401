"""Batch front door: simulate, estimate, verify, count, ame, montecarlo.

Every command reads one plain-text key-value configuration file (all keys
optional, all defaults documented in CONFIG_SCHEMA), applies the command-line
overrides, writes a resolved-config manifest into the output directory, and
emits deterministic tables: no timestamps, floats through repr so files
round-trip bit for bit.

Exit codes: 0 ok, 1 verify failure, 2 config error, 3 data error,
4 non-convergence (estimate only, results still written).
"""
from __future__ import annotations

import argparse
import csv
import pathlib
import sys

import numpy as np
from scipy.stats import gaussian_kde

from .counterfactuals import ame
from .gmm import (
    ESTIMATORS,
    EstimatorConfig,
    InstrumentSpec,
    default_instruments,
    estimate,
)
from .models import FAMILIES, ModelSpec, PanelData, PanelUnit, Theta, validate_dataset
from .moments import enumerate_moments, psi_batch
from .oracle import (
    check_partial_fractions,
    conditional_expectation,
    min_index_gap,
    rank_of_image,
)
from .simulation import Design, ar_design, mar_design, monte_carlo, net_design, simulate, var_design


class ConfigError(Exception):
    """Bad configuration file, key, value, or flag combination (exit 2)."""


class DataError(Exception):
    """Unreadable or inadmissible dataset (exit 3)."""


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------
# One row per key: (key, kind, default text, documentation).  The default
# text runs through the same value parser as user input, so the resolved
# manifest is itself a valid configuration file.

CONFIG_SCHEMA = (
    ("model.family", "str", "arp",
     "model family: arp, var1, mar1, or net3"),
    ("model.p", "int", "1", "lag order (arp only)"),
    ("model.T", "int", "4", "observed periods after the initial block"),
    ("model.M", "int", "2", "binary layers per period (var1)"),
    ("model.C", "int", "2", "non-reference alternatives (mar1)"),
    ("model.Kx", "int", "1", "covariates per layer"),
    ("data.input", "str", "",
     "dataset CSV path; empty means simulate from the sim block"),
    ("sim.n", "int", "500", "cross-sectional units to simulate"),
    ("sim.seed", "int", "0", "base seed of the counter-based generator"),
    ("sim.rep", "int", "0", "replication index for single-dataset commands"),
    ("sim.theta", "floats", "",
     "true parameters, flat layout; empty means the family default"),
    ("sim.effect_scale", "float", "1.0", "fixed-effect scale"),
    ("moments.prune", "float", "",
     "drop moments identically zero on more than this unit fraction; empty keeps all"),
    ("moments.rescale", "bool", "false",
     "per-unit rescaling of the moment vector (equivalent to estimator.kind = rescaled)"),
    ("instruments.atoms", "str", "default",
     "comma list of atoms (const, y0.j, x.layer.k.t) or 'default' for all"),
    ("estimator.kind", "str", "identity",
     "identity, rescaled, or iterated"),
    ("estimator.theta0", "floats", "",
     "starting parameters, flat layout; empty starts at zero"),
    ("estimator.solver", "str", "lm", "inner minimizer: lm or bfgs"),
    ("estimator.gtol", "float", "1e-08", "gradient tolerance"),
    ("estimator.step_tol", "float", "1e-10", "parameter step tolerance"),
    ("estimator.max_iterations", "int", "200", "inner iteration cap"),
    ("estimator.max_weight_iterations", "int", "50",
     "weight refit cap for the iterated estimator"),
    ("estimator.weight_step_tol", "float", "0.0001",
     "parameter step below which weight iteration stops"),
    ("mc.reps", "int", "100", "Monte Carlo replications"),
    ("mc.estimators", "strs", "identity",
     "comma list of estimators to compare"),
    ("mc.threads", "int", "0",
     "worker processes; 0 defers to DPLOGIT_THREADS, then the CPU count"),
    ("ame.theta", "floats", "",
     "parameters for the marginal-effect table, flat layout (required by ame)"),
    ("ame.t", "int", "",
     "single period for the contrast; empty tabulates every valid period"),
    ("ame.rest", "ints", "",
     "pins for the p-1 older lags; empty pins them at zero"),
    ("ame.y0", "ints", "",
     "restrict to units with this initial block; empty keeps all units"),
    ("verify.draws", "int", "25",
     "random (theta, a, x, y0) draws per oracle residual line"),
    ("verify.trials", "int", "200", "partial-fraction identity trials"),
    ("verify.seed", "int", "0", "seed of the verification draws"),
    ("output.dir", "str", "out", "directory for emitted files"),
    ("output.formats", "str", "csv", "table format; only csv is supported"),
)

_KINDS = {key: kind for key, kind, _, _ in CONFIG_SCHEMA}
_OPTIONAL = {key for key, _, default, _ in CONFIG_SCHEMA if default == ""}


def _parse_value(key: str, text: str):
    kind = _KINDS[key]
    text = text.strip()
    if text == "":
        if key in _OPTIONAL:
            return None
        raise ConfigError(f"key '{key}' requires a value")
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "bool":
            if text not in ("true", "false"):
                raise ValueError
            return text == "true"
        if kind == "floats":
            return tuple(float(v) for v in text.split(","))
        if kind == "ints":
            return tuple(int(v) for v in text.split(","))
        if kind == "strs":
            return tuple(v.strip() for v in text.split(",") if v.strip())
        return text
    except ValueError:
        raise ConfigError(f"key '{key}' expects a {kind} value, got {text!r}") from None


def _format_value(key: str, value) -> str:
    if value is None:
        return ""
    kind = _KINDS[key]
    if kind == "bool":
        return "true" if value else "false"
    if kind == "float":
        return repr(float(value))
    if kind == "floats":
        return ",".join(repr(float(v)) for v in value)
    if kind == "ints":
        return ",".join(str(int(v)) for v in value)
    if kind == "strs":
        return ",".join(value)
    return str(value)


class RunConfig:
    """Resolved configuration: every schema key bound to a typed value."""

    def __init__(self, values: dict):
        self.values = values

    def __getitem__(self, key: str):
        return self.values[key]

    def manifest_lines(self, command: str) -> list[str]:
        lines = [f"# dplogit {command}: resolved configuration; rerun with "
                 f"'dplogit {command} --config <this file>'"]
        for key, _, _, doc in CONFIG_SCHEMA:
            lines.append(f"# {key}: {doc}")
            lines.append(f"{key} = {_format_value(key, self.values[key])}")
        return lines


def load_config(path: str | None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the file, then command-line overrides; unknown or
    duplicate keys are rejected."""
    values = {key: _parse_value(key, default) for key, _, default, _ in CONFIG_SCHEMA}
    if path is not None:
        p = pathlib.Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {path}")
        seen = set()
        for lineno, raw in enumerate(p.read_text(encoding="utf-8").splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, _, text = line.partition("=")
            key = key.strip()
            if key not in _KINDS:
                raise ConfigError(f"line {lineno}: unknown key '{key}'")
            if key in seen:
                raise ConfigError(f"line {lineno}: duplicate key '{key}'")
            seen.add(key)
            values[key] = _parse_value(key, text)
    for key, value in (overrides or {}).items():
        values[key] = value
    cfg = RunConfig(values)
    _validate_config(cfg)
    return cfg


def _validate_config(cfg: RunConfig) -> None:
    if cfg["model.family"] not in FAMILIES:
        raise ConfigError(f"model.family must be one of {FAMILIES}, got "
                          f"'{cfg['model.family']}'")
    if cfg["estimator.kind"] not in ESTIMATORS:
        raise ConfigError(f"estimator.kind must be one of {ESTIMATORS}, got "
                          f"'{cfg['estimator.kind']}'")
    if cfg["estimator.solver"] not in ("lm", "bfgs"):
        raise ConfigError("estimator.solver must be 'lm' or 'bfgs'")
    if cfg["moments.rescale"] and cfg["estimator.kind"] == "iterated":
        raise ConfigError("moments.rescale pairs with the identity weighting; "
                          "it cannot be combined with estimator.kind = iterated")
    if cfg["output.formats"] != "csv":
        raise ConfigError("output.formats supports only 'csv'")
    for key in ("sim.n", "mc.reps", "verify.draws", "verify.trials"):
        if cfg[key] < 1:
            raise ConfigError(f"{key} must be >= 1")


def _spec_from(cfg: RunConfig) -> ModelSpec:
    try:
        return ModelSpec(family=cfg["model.family"], T=cfg["model.T"],
                         p=cfg["model.p"], M=cfg["model.M"], C=cfg["model.C"],
                         Kx=cfg["model.Kx"])
    except ValueError as e:
        raise ConfigError(str(e)) from None


def _design_from(cfg: RunConfig) -> Design:
    spec = _spec_from(cfg)
    n, seed, scale = cfg["sim.n"], cfg["sim.seed"], cfg["sim.effect_scale"]
    try:
        if cfg["sim.theta"] is not None:
            theta = Theta.from_flat(spec, np.asarray(cfg["sim.theta"]))
            return Design(spec, theta, n, seed, scale)
        if spec.family == "arp":
            return ar_design(n, seed, p=spec.p, T=spec.T, Kx=spec.Kx,
                             fixed_effect_scale=scale)
        if spec.family == "var1":
            return var_design(n, seed, M=spec.M, T=spec.T, Kx=spec.Kx,
                              fixed_effect_scale=scale)
        if spec.family == "mar1":
            return mar_design(n, seed, C=spec.C, T=spec.T, Kx=spec.Kx,
                              fixed_effect_scale=scale)
        return net_design(n, seed, T=spec.T, Kx=spec.Kx, fixed_effect_scale=scale)
    except ValueError as e:
        raise ConfigError(str(e)) from None


def _instruments_from(cfg: RunConfig, spec: ModelSpec) -> InstrumentSpec | None:
    text = cfg["instruments.atoms"]
    if text == "default":
        return None
    atoms = []
    for part in text.split(","):
        part = part.strip()
        fields = part.split(".")
        try:
            if fields == ["const"]:
                atoms.append(("const",))
            elif fields[0] == "y0" and len(fields) == 2:
                atoms.append(("y0", int(fields[1])))
            elif fields[0] == "x" and len(fields) == 4:
                atoms.append(("x", int(fields[1]), int(fields[2]), int(fields[3])))
            else:
                raise ValueError
        except ValueError:
            raise ConfigError(f"malformed instrument atom '{part}'; expected "
                              "const, y0.j, or x.layer.k.t") from None
    try:
        return InstrumentSpec(tuple(atoms))
    except ValueError as e:
        raise ConfigError(str(e)) from None


def _estimator_config_from(cfg: RunConfig, spec: ModelSpec,
                           compute_covariance: bool = True) -> EstimatorConfig:
    kind = cfg["estimator.kind"]
    if cfg["moments.rescale"] and kind == "identity":
        kind = "rescaled"
    theta0 = None
    if cfg["estimator.theta0"] is not None:
        try:
            theta0 = Theta.from_flat(spec, np.asarray(cfg["estimator.theta0"]))
        except ValueError as e:
            raise ConfigError(f"estimator.theta0: {e}") from None
    return EstimatorConfig(
        estimator=kind,
        theta0=theta0,
        instruments=_instruments_from(cfg, spec),
        gtol=cfg["estimator.gtol"],
        step_tol=cfg["estimator.step_tol"],
        max_iterations=cfg["estimator.max_iterations"],
        max_weight_iterations=cfg["estimator.max_weight_iterations"],
        weight_step_tol=cfg["estimator.weight_step_tol"],
        prune_threshold=cfg["moments.prune"],
        solver=cfg["estimator.solver"],
        compute_covariance=compute_covariance,
    )


# ---------------------------------------------------------------------------
# Dataset CSV schema
# ---------------------------------------------------------------------------
# Long format, one row per unit-period: `unit,time`, then the outcome
# column(s) (`y` for arp/mar1, `y_1..y_M` otherwise), then `x_<layer>_<k>`.
# Rows with time <= 0 carry the initial conditions: outcomes only for arp
# (covariate cells ignored there), outcomes plus the staged initial-period
# covariates for var1/net3/mar1.  Header mandatory, UTF-8, '.' decimal.

def _outcome_columns(spec: ModelSpec) -> list[str]:
    if spec.family in ("arp", "mar1"):
        return ["y"]
    return [f"y_{m}" for m in range(1, spec.n_layers + 1)]


def _covariate_columns(spec: ModelSpec) -> list[str]:
    layers = 1 if spec.family == "arp" else spec.n_layers
    return [f"x_{m}_{k}" for m in range(1, layers + 1) for k in range(1, spec.Kx + 1)]


def dataset_header(spec: ModelSpec) -> list[str]:
    return ["unit", "time"] + _outcome_columns(spec) + _covariate_columns(spec)


def _times(spec: ModelSpec) -> list[int]:
    first = 1 - spec.p if spec.family == "arp" else 0
    return list(range(first, spec.T + 1))


def write_dataset(path, data: PanelData) -> None:
    spec = data.spec
    staged = spec.family != "arp"
    if staged and data.x0 is None:
        raise DataError("initial-period covariates are missing; the staged "
                        "families store them on the time-0 row")
    n_x = len(_covariate_columns(spec))
    lines = [",".join(dataset_header(spec))]
    for i in range(data.n_units):
        for t in _times(spec):
            cells = [str(i + 1), str(t)]
            if spec.family == "arp":
                if t <= 0:
                    cells.append(str(int(data.y0[i, t + spec.p - 1])))
                    cells += [""] * n_x
                else:
                    cells.append(str(int(data.y[i, t - 1])))
                    cells += [repr(float(v)) for v in data.x[i, t - 1].ravel()]
            else:
                out = data.y0[i] if t == 0 else data.y[i, t - 1]
                cells += [str(int(v)) for v in np.atleast_1d(out)]
                x = data.x0[i] if t == 0 else data.x[i, t - 1]
                cells += [repr(float(v)) for v in x.ravel()]
            lines.append(",".join(cells))
    pathlib.Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _cell_int(text: str, lineno: int, col: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise DataError(f"line {lineno}: column '{col}' is not an integer: "
                        f"{text!r}") from None


def _cell_float(text: str, lineno: int, col: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise DataError(f"line {lineno}: column '{col}' is not a number: "
                        f"{text!r}") from None


def read_dataset(path, spec: ModelSpec) -> PanelData:
    """Parse the CSV schema back into a PanelData; errors name line numbers."""
    p = pathlib.Path(path)
    if not p.is_file():
        raise DataError(f"dataset file not found: {path}")
    header = dataset_header(spec)
    n_out = len(_outcome_columns(spec))
    times = _times(spec)
    rows: dict[str, dict[int, tuple]] = {}
    with open(p, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            got = next(reader)
        except StopIteration:
            raise DataError("line 1: missing header row") from None
        if got != header:
            raise DataError(f"line 1: header {got!r} does not match the "
                            f"required schema {header!r}")
        for cells in reader:
            lineno = reader.line_num
            if len(cells) != len(header):
                raise DataError(f"line {lineno}: expected {len(header)} "
                                f"columns, got {len(cells)}")
            unit = cells[0].strip()
            if not unit:
                raise DataError(f"line {lineno}: empty unit id")
            t = _cell_int(cells[1], lineno, "time")
            if t not in times:
                raise DataError(f"line {lineno}: time {t} outside "
                                f"{times[0]}..{times[-1]}")
            out = tuple(_cell_int(v, lineno, c) for v, c in
                        zip(cells[2:2 + n_out], header[2:2 + n_out]))
            x_cells = cells[2 + n_out:]
            if spec.family == "arp" and t <= 0:
                xs = None                      # initial rows: outcomes only
            else:
                xs = tuple(_cell_float(v, lineno, c) for v, c in
                           zip(x_cells, header[2 + n_out:]))
            unit_rows = rows.setdefault(unit, {})
            if t in unit_rows:
                raise DataError(f"line {lineno}: duplicate row for unit "
                                f"{unit}, time {t}")
            unit_rows[t] = (out, xs)
    if not rows:
        raise DataError("dataset has a header but no rows")
    units = []
    for unit, unit_rows in rows.items():
        missing = [t for t in times if t not in unit_rows]
        if missing:
            raise DataError(f"unit {unit}: missing row for time {missing[0]}")
        units.append(_assemble_unit(spec, unit, unit_rows))
    data = PanelData.from_units(spec, units)
    issues = validate_dataset(spec, data)
    if issues:
        for line in issues:
            print(line, file=sys.stderr)
        raise DataError(f"dataset failed validation with {len(issues)} issue(s)")
    return data


def _assemble_unit(spec: ModelSpec, unit: str, unit_rows: dict) -> PanelUnit:
    if spec.family == "arp":
        y0 = np.array([unit_rows[t][0][0] for t in range(1 - spec.p, 1)])
        y = np.array([unit_rows[t][0][0] for t in range(1, spec.T + 1)])
        x = np.array([unit_rows[t][1] for t in range(1, spec.T + 1)],
                     dtype=float).reshape(spec.T, spec.Kx)
        return PanelUnit(y0=y0, y=y, x=x)
    layers = spec.n_layers
    out0, x0 = unit_rows[0]
    if x0 is None or "" in (str(v) for v in x0):
        raise DataError(f"unit {unit}: the time-0 row must carry the staged "
                        "initial-period covariates")
    if spec.family == "mar1":
        y0 = np.array([out0[0]])
        y = np.array([unit_rows[t][0][0] for t in range(1, spec.T + 1)])
    else:
        y0 = np.array(out0)
        y = np.array([unit_rows[t][0] for t in range(1, spec.T + 1)])
    x = np.array([unit_rows[t][1] for t in range(1, spec.T + 1)],
                 dtype=float).reshape(spec.T, layers, spec.Kx)
    return PanelUnit(y0=y0, y=y, x=x,
                     x0=np.array(x0, dtype=float).reshape(layers, spec.Kx))


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------

def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_lines(path, lines) -> None:
    pathlib.Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _write_manifest(cfg: RunConfig, out_dir: pathlib.Path, command: str) -> None:
    _write_lines(out_dir / "manifest.txt", cfg.manifest_lines(command))


def _print_table(header: list[str], rows: list[tuple]) -> None:
    cells = [header] + [[f"{v:.6g}" if isinstance(v, float) else str(v)
                         for v in row] for row in rows]
    widths = [max(len(r[j]) for r in cells) for j in range(len(header))]
    for r in cells:
        print("  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip())


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_simulate(cfg: RunConfig, out_dir: pathlib.Path) -> int:
    design = _design_from(cfg)
    data = simulate(design, rep=cfg["sim.rep"])
    path = out_dir / "dataset.csv"
    write_dataset(path, data)
    print(f"wrote {path} ({data.n_units} units, family={design.spec.family}, "
          f"T={design.spec.T})")
    return 0


def _load_data(cfg: RunConfig, spec: ModelSpec) -> PanelData:
    if cfg["data.input"] is not None:
        return read_dataset(cfg["data.input"], spec)
    return simulate(_design_from(cfg), rep=cfg["sim.rep"])


def cmd_estimate(cfg: RunConfig, out_dir: pathlib.Path) -> int:
    spec = _spec_from(cfg)
    data = _load_data(cfg, spec)
    est_cfg = _estimator_config_from(cfg, spec)
    try:
        res = estimate(data, spec=spec, config=est_cfg)
    except ValueError as e:
        raise DataError(str(e)) from None
    names = res.theta_hat.flat_names(spec)
    flat = res.theta_hat.to_flat(spec)
    ids = est_cfg.ids if est_cfg.ids is not None else enumerate_moments(spec)
    instruments = est_cfg.instruments or default_instruments(spec)

    print(f"estimator = {res.estimator}")
    print(f"converged = {_fmt(res.converged)}")
    print(f"objective = {res.objective:.6g}")
    print(f"iterations = {res.iterations}")
    _print_table(["parameter", "estimate", "std.error"],
                 [(n, float(v), float(s))
                  for n, v, s in zip(names, flat, res.std_errors)])

    lines = [f"estimator = {res.estimator}",
             f"converged = {_fmt(res.converged)}",
             f"iterations = {res.iterations}",
             f"weight_iterations = {res.weight_iterations}",
             f"weight_condition = {_fmt(float(res.weight_condition))}",
             f"objective = {_fmt(float(res.objective))}",
             f"n_units = {data.n_units}",
             f"n_moments = {len(ids) - len(res.dropped_moments)}",
             f"n_instruments = {instruments.n_instruments}"]
    lines += [f"theta.{n} = {_fmt(float(v))}" for n, v in zip(names, flat)]
    lines += [f"se.{n} = {_fmt(float(s))}" for n, s in zip(names, res.std_errors)]
    lines += [f"message.{i} = {m}" for i, m in enumerate(res.messages, start=1)]
    lines += [f"dropped.{i} = {m.label()}"
              for i, m in enumerate(res.dropped_moments, start=1)]
    _write_lines(out_dir / "results.txt", lines)
    if not res.converged:
        print("error:convergence: estimator stopped before meeting its "
              "tolerances; results written anyway", file=sys.stderr)
        return 4
    return 0


def _random_config(spec: ModelSpec, rng: np.random.Generator):
    """One admissible (theta, a, x, y0) draw for the oracle sweeps."""
    if spec.family == "arp":
        theta = Theta(rng.uniform(-1, 1, spec.p), rng.uniform(-1, 1, spec.Kx))
        x = rng.uniform(-2, 2, (spec.T, spec.Kx))
        y0 = rng.integers(0, 2, spec.p)
        a = rng.uniform(-1, 1)
    elif spec.family == "mar1":
        g = np.zeros((spec.C + 1, spec.C + 1))
        g[1:, 1:] = rng.uniform(-1, 1, (spec.C, spec.C))
        theta = Theta(g, rng.uniform(-1, 1, (spec.C + 1, spec.Kx)))
        x = rng.uniform(-2, 2, (spec.T, spec.C + 1, spec.Kx))
        y0 = int(rng.integers(0, spec.C + 1))
        a = np.concatenate([[0.0], rng.uniform(-1, 1, spec.C)])
    else:
        if spec.family == "var1":
            theta = Theta(rng.uniform(-1, 1, (spec.M, spec.M)),
                          rng.uniform(-1, 1, (spec.M, spec.Kx)))
        else:
            theta = Theta(rng.uniform(-1, 1, 2), rng.uniform(-1, 1, spec.Kx))
        x = rng.uniform(-2, 2, (spec.T, spec.n_layers, spec.Kx))
        y0 = rng.integers(0, 2, spec.n_layers)
        a = rng.uniform(-1, 1, spec.n_layers)
    return theta, a, x, y0


def cmd_verify(cfg: RunConfig, out_dir: pathlib.Path) -> int:
    spec = _spec_from(cfg)
    rng = np.random.Generator(np.random.Philox(key=cfg["verify.seed"]))
    ids = enumerate_moments(spec)
    if not ids:
        raise ConfigError(f"the {spec.family} family has no valid moments at "
                          f"T={spec.T}; pick T >= {spec.p + 2}")
    draws = [_random_config(spec, rng) for _ in range(cfg["verify.draws"])]

    worst = {mid: 0.0 for mid in ids}
    for theta, a, x, y0 in draws:
        for mid in ids:
            e = conditional_expectation(
                spec, theta, a, x, y0,
                lambda d: psi_batch(spec, theta, d, mid))
            worst[mid] = max(worst[mid], abs(e))
    lines = [f"residual psi {mid.label()} = {_fmt(w)}" for mid, w in worst.items()]
    failures = sum(w >= 1e-10 for w in worst.values())

    # rank line: run on the lag family only, at a well-separated configuration
    if spec.family == "arp":
        theta_ref = _design_from(cfg).theta_true
        x_ref, y0_ref = None, None
        for _ in range(50):
            x_ref = rng.uniform(-2, 2, (spec.T, spec.Kx))
            y0_ref = rng.integers(0, 2, spec.p)
            if min_index_gap(spec, theta_ref, x_ref, y0_ref) >= 0.05:
                break
        rr = rank_of_image(spec, theta_ref, x_ref, y0_ref)
        ok = rr.rank == rr.expected_rank and rr.nullity == len(ids)
        lines.append(f"rank p={spec.p} T={spec.T}: operator rank={rr.rank} "
                     f"(expected {rr.expected_rank}), moment space={rr.nullity} "
                     f"(enumerated {len(ids)}) -> {'ok' if ok else 'FAIL'}")
        failures += 0 if ok else 1
    else:
        lines.append("rank: skipped (rank certification covers the binary "
                     "lag family)")

    pf = float(check_partial_fractions(trials=cfg["verify.trials"],
                                       seed=cfg["verify.seed"]))
    lines.append(f"residual pf = {_fmt(pf)}")
    failures += pf >= 1e-12

    lines.append(f"verify = {'pass' if failures == 0 else 'fail'}")
    for line in lines:
        print(line)
    _write_lines(out_dir / "report.txt", lines)
    return 0 if failures == 0 else 1


def cmd_count(cfg: RunConfig, out_dir: pathlib.Path) -> int:
    spec = _spec_from(cfg)
    ids = enumerate_moments(spec)
    print(len(ids))
    for i, mid in enumerate(ids, start=1):
        print(f"{i:4d} {mid.label()}")
    return 0


def cmd_ame(cfg: RunConfig, out_dir: pathlib.Path) -> int:
    spec = _spec_from(cfg)
    if spec.family != "arp":
        raise ConfigError("marginal-effect contrasts require the binary lag "
                          "family (model.family = arp)")
    if cfg["ame.theta"] is None:
        raise ConfigError("ame.theta is required: the flat parameter vector "
                          "to evaluate the contrast at")
    try:
        theta = Theta.from_flat(spec, np.asarray(cfg["ame.theta"]))
    except ValueError as e:
        raise ConfigError(f"ame.theta: {e}") from None
    rest = cfg["ame.rest"] if cfg["ame.rest"] is not None else (0,) * (spec.p - 1)
    if len(rest) != spec.p - 1:
        raise ConfigError(f"ame.rest must pin the other {spec.p - 1} lag(s)")
    if cfg["ame.t"] is not None:
        if not spec.p <= cfg["ame.t"] <= spec.T - 1:
            raise ConfigError(f"ame.t must lie in {spec.p}..{spec.T - 1}")
        periods = [cfg["ame.t"]]
    else:
        periods = list(range(spec.p, spec.T))
    data = _load_data(cfg, spec)
    y0 = cfg["ame.y0"]
    if y0 is not None and len(y0) != spec.p:
        raise ConfigError(f"ame.y0 must list {spec.p} initial outcome(s)")
    rows = []
    for t in periods:
        try:
            est = ame(data, theta, y0=y0, t=t, rest=tuple(rest))
        except ValueError as e:
            raise DataError(str(e)) from None
        rows.append((t, est.value, est.std_error, est.n_units))
    _print_table(["t", "estimate", "std.error", "n_units"], rows)
    lines = ["t,estimate,std_error,n_units"]
    lines += [f"{t},{_fmt(float(v))},{_fmt(float(s))},{n}" for t, v, s, n in rows]
    _write_lines(out_dir / "ame.csv", lines)
    return 0


def _density_table(values: np.ndarray):
    """Fixed-grid kernel density of one estimate column, or None when the
    sample is too degenerate to smooth."""
    values = np.asarray(values, dtype=float)
    if values.size < 2 or float(np.ptp(values)) < 1e-12:
        return None
    kde = gaussian_kde(values)
    lo, hi = float(values.min()), float(values.max())
    pad = 0.5 * (hi - lo)
    grid = np.linspace(lo - pad, hi + pad, 201)
    return grid, kde(grid)


def cmd_montecarlo(cfg: RunConfig, out_dir: pathlib.Path) -> int:
    design = _design_from(cfg)
    estimators = cfg["mc.estimators"]
    for est in estimators:
        if est not in ESTIMATORS:
            raise ConfigError(f"mc.estimators entry '{est}' is not one of "
                              f"{ESTIMATORS}")
    instruments = _instruments_from(cfg, design.spec)
    solver_options = {
        "gtol": cfg["estimator.gtol"],
        "step_tol": cfg["estimator.step_tol"],
        "max_iterations": cfg["estimator.max_iterations"],
        "max_weight_iterations": cfg["estimator.max_weight_iterations"],
        "weight_step_tol": cfg["estimator.weight_step_tol"],
        "solver": cfg["estimator.solver"],
    }
    threads = cfg["mc.threads"] if cfg["mc.threads"] > 0 else None
    res = monte_carlo(design, estimators=estimators, reps=cfg["mc.reps"],
                      instruments=instruments, threads=threads,
                      solver_options=solver_options)
    rows = res.table()
    _print_table(["estimator", "parameter", "true", "median_bias",
                  "median_abs_error", "convergence"], rows)
    lines = ["estimator,parameter,true,median_bias,median_abs_error,convergence"]
    lines += [",".join([est, name, _fmt(true), _fmt(bias), _fmt(mae), _fmt(frac)])
              for est, name, true, bias, mae, frac in rows]
    _write_lines(out_dir / "mc_table.csv", lines)
    for est in estimators:
        hats = res._hats(est)
        for j, name in enumerate(res.param_names):
            table = _density_table(hats[:, j]) if hats.size else None
            dest = out_dir / f"density_{est}_{name}.csv"
            if table is None:
                _write_lines(dest, ["x,y"])
                continue
            grid, dens = table
            _write_lines(dest, ["x,y"] + [f"{_fmt(float(a))},{_fmt(float(b))}"
                                          for a, b in zip(grid, dens)])
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

_COMMANDS = {
    "simulate": cmd_simulate,
    "estimate": cmd_estimate,
    "verify": cmd_verify,
    "count": cmd_count,
    "ame": cmd_ame,
    "montecarlo": cmd_montecarlo,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dplogit",
        description="Moment construction, GMM estimation, and counterfactuals "
                    "for dynamic panel logit models with fixed effects.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", metavar="PATH",
                        help="key-value configuration file")
        sp.add_argument("--seed", type=int, help="override sim.seed and verify.seed")
        sp.add_argument("--n", type=int, help="override sim.n")
        sp.add_argument("--reps", type=int, help="override mc.reps")
        sp.add_argument("--out", metavar="DIR", help="override output.dir")
        sp.add_argument("--threads", type=int, help="override mc.threads")
        if name == "count":
            sp.add_argument("--p", type=int, help="override model.p")
            sp.add_argument("--T", type=int, help="override model.T")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    overrides = {}
    if args.seed is not None:
        overrides["sim.seed"] = args.seed
        overrides["verify.seed"] = args.seed
    if args.n is not None:
        overrides["sim.n"] = args.n
    if args.reps is not None:
        overrides["mc.reps"] = args.reps
    if args.out is not None:
        overrides["output.dir"] = args.out
    if args.threads is not None:
        overrides["mc.threads"] = args.threads
    if getattr(args, "p", None) is not None:
        overrides["model.p"] = args.p
    if getattr(args, "T", None) is not None:
        overrides["model.T"] = args.T
    try:
        cfg = load_config(args.config, overrides)
        out_dir = pathlib.Path(cfg["output.dir"])
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_manifest(cfg, out_dir, args.command)
        return _COMMANDS[args.command](cfg, out_dir)
    except ConfigError as e:
        print(f"error:config: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"error:data: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
