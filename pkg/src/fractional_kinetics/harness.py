"""Experiment configuration, convergence sweeps, statistics, and emission.

Configurations are flat key-value mappings with dotted keys; unknown keys
are rejected.  Every Monte-Carlo estimate is reported with a standard
error, and every pass/fail decision uses the documented tolerance rule:
statistical comparisons at 3 combined standard errors, deterministic
numerics at stated absolute tolerances.  Convergence sweeps are judged by
a monotone-trend rule (each gap may exceed its predecessor by at most one
combined sigma of their difference) plus a final-gap rule (within 3
combined sigma of zero).
"""

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats as sps

from .errors import ConfigError
from .kinetic import FlowSolution, solve_flow_ensemble, solve_flow_grid, stable_dt
from .model import (
    EmpiricalMeasure,
    GridDensity,
    ModelSpec,
    TestFunctional,
)
from .ctrw import CtrwParams, run_chain_ensemble, run_ctrw_ensemble
from .streams import RngStream
from .subordinator import evaluate_direct, evaluate_formula

__all__ = [
    "ExperimentConfig",
    "ConvergenceReport",
    "combined_sigma",
    "trend_ok",
    "wasserstein1",
    "make_initial_empirical",
    "make_initial_grid",
    "make_functional",
    "run_convergence_markov",
    "run_convergence_ctrw",
    "write_csv",
    "write_json",
    "config_digest",
]


# ---------------------------------------------------------------------------
# statistics helpers
# ---------------------------------------------------------------------------

def combined_sigma(*sigmas) -> float:
    return float(np.sqrt(np.sum(np.square(np.asarray(sigmas, dtype=float)))))


def trend_ok(gaps, sigmas) -> bool:
    """Nonincreasing |gap| trend, with one combined sigma of slack per step."""
    gaps = np.abs(np.asarray(gaps, dtype=float))
    sigmas = np.asarray(sigmas, dtype=float)
    for k in range(len(gaps) - 1):
        slack = combined_sigma(sigmas[k], sigmas[k + 1])
        if gaps[k + 1] > gaps[k] + slack:
            return False
    return True


def wasserstein1(positions, grid: GridDensity) -> float:
    """W1 distance between an empirical sample and a grid density."""
    return float(sps.wasserstein_distance(
        np.asarray(positions, dtype=float), grid.centers,
        v_weights=grid.values * grid.dx,
    ))


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

_MODEL_KEYS = {
    "model.alpha": float,
    "model.domain_lo": float,
    "model.domain_hi": float,
    "model.G.family": str, "model.G.value": float, "model.G.base": float,
    "model.G.amplitude": float, "model.G.frequency": float,
    "model.b0.family": str, "model.b0.value": float, "model.b0.rate": float,
    "model.b0.intercept": float, "model.b0.slope": float,
    "model.a.family": str, "model.a.value": float, "model.a.base": float,
    "model.a.amplitude": float, "model.a.frequency": float,
    "model.a.intercept": float, "model.a.slope": float,
    "model.k.family": str, "model.k.strength": float, "model.k.width": float,
}

_INIT_KEYS = {
    "init.family": str,       # gaussian | uniform | point
    "init.mean": float,
    "init.sigma": float,
    "init.lo": float,
    "init.hi": float,
    "init.x0": float,
}

_FUNCTIONAL_KEYS = {
    "functional.kind": str,    # linear | quadratic
    "functional.f": str,       # identity | square | sin | one
    "functional.f.frequency": float,
    "functional.s_factor": str,  # none | exp-decay | bump
    "functional.s_center": float,
    "functional.s_width": float,
}

_COMMON_KEYS = {"seed": int}

_COMMAND_KEYS = {
    "simulate-ctrw": {
        **_COMMON_KEYS, **_MODEL_KEYS, **_INIT_KEYS, **_FUNCTIONAL_KEYS,
        "ctrw.N": int, "ctrw.t": float, "ctrw.s0": float,
        "ctrw.replicas": int, "ctrw.max_steps": int,
        "ctrw.mode": str,  # inverse | fixed
        "ctrw.chain_time": float,
        "ctrw.dump_trajectory": int,  # 0/1: per-event CSV for replica 0
    },
    "solve-flow": {
        **_COMMON_KEYS, **_MODEL_KEYS, **_INIT_KEYS,
        "flow.method": str,  # grid | ensemble
        "flow.t_end": float, "flow.dt": float,
        "flow.particles": int, "flow.save_nodes": int,
        "grid.cells": int, "grid.lo": float, "grid.hi": float,
    },
    "subordinate": {
        **_COMMON_KEYS, **_MODEL_KEYS, **_INIT_KEYS,
        "sub.beta": float, "sub.s0": float, "sub.u_end": float,
        "sub.du": float, "sub.n_paths": int,
        "density.u": float, "density.bins": int,
        "density.lo": float, "density.hi": float,
    },
    "evaluate": {
        **_COMMON_KEYS, **_MODEL_KEYS, **_INIT_KEYS, **_FUNCTIONAL_KEYS,
        "eval.t": float, "eval.s0": float, "eval.n_paths": int,
        "eval.du": float, "eval.K": float,
        "eval.methods": str,  # comma list: direct,formula-path,formula-density
        "flow.method": str, "flow.t_end": float, "flow.dt": float,
        "flow.particles": int,
        "grid.cells": int, "grid.lo": float, "grid.hi": float,
    },
    "residual": {
        **_COMMON_KEYS, **_MODEL_KEYS, **_INIT_KEYS, **_FUNCTIONAL_KEYS,
        "res.t": float, "res.n_paths": int, "res.du": float,
        "res.quad_nodes": int, "res.s_fractions": str,
        "res.flow_horizon": float, "res.flow_dt": float,
        "res.particles": int,
    },
    "appendix-rates": {
        **_COMMON_KEYS,
        "rates.alpha": float, "rates.B": float, "rates.sub_b": str,
        "rates.h_sweep": str, "rates.function": str,  # y-exp | indicator
        "rates.slope_floor": float,
    },
    "converge-markov": {
        **_COMMON_KEYS, **_MODEL_KEYS, **_INIT_KEYS, **_FUNCTIONAL_KEYS,
        "conv.N_list": str, "conv.t": float, "conv.replicas": int,
        "conv.s0": float,
        "flow.method": str, "flow.dt": float, "flow.particles": int,
        "grid.cells": int, "grid.lo": float, "grid.hi": float,
    },
    "converge-ctrw": {
        **_COMMON_KEYS, **_MODEL_KEYS, **_INIT_KEYS, **_FUNCTIONAL_KEYS,
        "conv.N_list": str, "conv.t": float, "conv.replicas": int,
        "conv.s0": float,
        "eval.n_paths": int, "eval.du": float,
        "flow.method": str, "flow.dt": float, "flow.particles": int,
        "grid.cells": int, "grid.lo": float, "grid.hi": float,
    },
}

_DEFAULTS = {
    "seed": 20260810,
    "init.family": "gaussian", "init.mean": 0.0, "init.sigma": 1.0,
    "init.lo": -1.0, "init.hi": 1.0, "init.x0": 0.0,
    "functional.kind": "linear", "functional.f": "identity",
    "functional.f.frequency": 1.0,
    "functional.s_factor": "none", "functional.s_center": 1.0,
    "functional.s_width": 1.0,
    "ctrw.s0": 0.0, "ctrw.replicas": 200, "ctrw.max_steps": 10**8,
    "ctrw.mode": "inverse", "ctrw.dump_trajectory": 0,
    "flow.method": "grid", "flow.save_nodes": 257, "flow.particles": 4000,
    "grid.cells": 400, "grid.lo": -6.0, "grid.hi": 6.0,
    "sub.s0": 0.0, "sub.n_paths": 10000,
    "density.bins": 128,
    "eval.s0": 0.0, "eval.n_paths": 20000, "eval.du": 1e-3,
    "eval.methods": "direct,formula-path",
    "res.n_paths": 20000, "res.du": 1e-3, "res.quad_nodes": 256,
    "res.s_fractions": "0.25,0.5,0.75", "res.flow_horizon": 2.0,
    "res.particles": 4000,
    "rates.alpha": 0.5, "rates.B": 1.0, "rates.sub_b": "none",
    "rates.h_sweep": "0.2,0.1,0.05,0.025", "rates.function": "y-exp",
    "rates.slope_floor": 0.4,
    "conv.N_list": "50,100,200,400", "conv.replicas": 2000, "conv.s0": 0.0,
}


@dataclass
class ExperimentConfig:
    """Validated flat configuration for one subcommand."""

    command: str
    values: dict = field(default_factory=dict)

    @classmethod
    def build(cls, command: str, raw: dict) -> "ExperimentConfig":
        if command not in _COMMAND_KEYS:
            raise ConfigError(f"unknown command {command!r}")
        schema = _COMMAND_KEYS[command]
        values = {}
        for key, val in raw.items():
            if key not in schema:
                raise ConfigError(f"unknown configuration key {key!r} for {command}")
            typ = schema[key]
            try:
                values[key] = typ(val)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"key {key!r}: cannot read {val!r} as {typ.__name__}") from exc
        for key, default in _DEFAULTS.items():
            if key in schema and key not in values:
                values[key] = default
        return cls(command=command, values=values)

    def __getitem__(self, key):
        if key not in self.values:
            raise ConfigError(f"missing configuration key {key!r}")
        return self.values[key]

    def get(self, key, default=None):
        return self.values.get(key, default)

    def int_list(self, key):
        return [int(tok) for tok in str(self[key]).split(",") if tok.strip()]

    def float_list(self, key):
        return [float(tok) for tok in str(self[key]).split(",") if tok.strip()]


def config_digest(values: dict) -> str:
    blob = json.dumps(values, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


# ---------------------------------------------------------------------------
# constructors from configuration
# ---------------------------------------------------------------------------

def make_initial_empirical(cfg, n: int) -> EmpiricalMeasure:
    """Deterministic n-atom initial configuration at distribution quantiles."""
    fam = cfg.get("init.family", "gaussian")
    q = (np.arange(n) + 0.5) / n
    if fam == "gaussian":
        pos = sps.norm.ppf(q, loc=cfg.get("init.mean", 0.0),
                           scale=cfg.get("init.sigma", 1.0))
    elif fam == "uniform":
        lo, hi = cfg.get("init.lo", -1.0), cfg.get("init.hi", 1.0)
        pos = lo + (hi - lo) * q
    elif fam == "point":
        pos = np.full(n, cfg.get("init.x0", 0.0))
    else:
        raise ConfigError(f"unknown init.family {fam!r}")
    return EmpiricalMeasure(pos)


def make_initial_grid(cfg) -> GridDensity:
    fam = cfg.get("init.family", "gaussian")
    lo, hi, cells = cfg["grid.lo"], cfg["grid.hi"], cfg["grid.cells"]
    if fam == "gaussian":
        m, sd = cfg.get("init.mean", 0.0), cfg.get("init.sigma", 1.0)
        return GridDensity.from_function(
            lambda x: np.exp(-((x - m) ** 2) / (2 * sd * sd)), lo, hi, cells)
    if fam == "uniform":
        a, b = cfg.get("init.lo", -1.0), cfg.get("init.hi", 1.0)
        return GridDensity.from_function(
            lambda x: ((x >= a) & (x <= b)).astype(float), lo, hi, cells)
    raise ConfigError(f"init.family {fam!r} has no grid form")


def make_functional(cfg) -> TestFunctional:
    name = cfg.get("functional.f", "identity")
    freq = cfg.get("functional.f.frequency", 1.0)
    table = {
        "identity": (lambda x: np.asarray(x, float),
                     lambda x: np.ones_like(np.asarray(x, float)),
                     lambda x: np.zeros_like(np.asarray(x, float))),
        "square": (lambda x: np.asarray(x, float) ** 2,
                   lambda x: 2.0 * np.asarray(x, float),
                   lambda x: np.full_like(np.asarray(x, float), 2.0)),
        "sin": (lambda x, w=freq: np.sin(w * np.asarray(x, float)),
                lambda x, w=freq: w * np.cos(w * np.asarray(x, float)),
                lambda x, w=freq: -w * w * np.sin(w * np.asarray(x, float))),
        "one": (lambda x: np.ones_like(np.asarray(x, float)),
                lambda x: np.zeros_like(np.asarray(x, float)),
                lambda x: np.zeros_like(np.asarray(x, float))),
    }
    if name not in table:
        raise ConfigError(f"unknown functional.f {name!r}")
    f, df, d2f = table[name]
    kind = cfg.get("functional.kind", "linear")
    sf = cfg.get("functional.s_factor", "none")
    kw = {}
    if sf == "exp-decay":
        kw = dict(s_factor=lambda s: np.exp(-s), ds_factor=lambda s: -np.exp(-s))
    elif sf == "bump":
        c, w = cfg.get("functional.s_center", 1.0), cfg.get("functional.s_width", 1.0)
        kw = dict(s_factor=_bump(c, w), ds_factor=_bump_d(c, w), support_end=c + w)
    elif sf != "none":
        raise ConfigError(f"unknown functional.s_factor {sf!r}")
    ctor = TestFunctional.linear if kind == "linear" else TestFunctional.quadratic
    return ctor(f, df, d2f, **kw)


def _bump(c, w):
    def psi(s):
        z = (np.asarray(s, float) - c) / w
        out = np.where(np.abs(z) < 1.0, (1.0 - z**2) ** 2, 0.0)
        return float(out) if np.ndim(s) == 0 else out
    return psi


def _bump_d(c, w):
    def dpsi(s):
        z = (np.asarray(s, float) - c) / w
        out = np.where(np.abs(z) < 1.0, -4.0 * z * (1.0 - z**2) / w, 0.0)
        return float(out) if np.ndim(s) == 0 else out
    return dpsi


def model_from_config(cfg) -> ModelSpec:
    return ModelSpec.from_config(cfg.values if isinstance(cfg, ExperimentConfig) else cfg)


# ---------------------------------------------------------------------------
# convergence sweeps
# ---------------------------------------------------------------------------

@dataclass
class ConvergenceRow:
    sweep_value: int
    estimate: float
    std_error: float
    reference: float
    reference_error: float

    @property
    def gap(self) -> float:
        return self.estimate - self.reference

    @property
    def sigma(self) -> float:
        return combined_sigma(self.std_error, self.reference_error)


@dataclass
class ConvergenceReport:
    """Per-sweep estimates against a reference, with the tolerance verdicts."""

    sweep_name: str
    rows: list
    tolerance_multiple: float = 3.0

    @property
    def gaps(self):
        return np.array([r.gap for r in self.rows])

    @property
    def sigmas(self):
        return np.array([r.sigma for r in self.rows])

    def trend_passed(self) -> bool:
        return trend_ok(self.gaps, self.sigmas)

    def final_gap_passed(self) -> bool:
        last = self.rows[-1]
        return abs(last.gap) <= self.tolerance_multiple * last.sigma

    def passed(self) -> bool:
        return self.trend_passed() and self.final_gap_passed()

    def as_rows(self):
        out = []
        for r in self.rows:
            out.append({
                self.sweep_name: r.sweep_value,
                "estimate": r.estimate, "std_error": r.std_error,
                "reference": r.reference, "reference_error": r.reference_error,
                "gap": r.gap, "combined_sigma": r.sigma,
                "pass": int(abs(r.gap) <= self.tolerance_multiple * r.sigma),
            })
        return out


def _reference_flow(cfg, spec, t_end, rng):
    method = cfg.get("flow.method", "grid")
    if method == "grid":
        grid0 = make_initial_grid(cfg)
        dt = cfg.get("flow.dt") or stable_dt(spec, grid0)

        def solver(u_end):
            return solve_flow_grid(grid0, u_end, dt, spec)
    elif method == "ensemble":
        n = cfg.get("flow.particles", 4000)
        x0 = make_initial_empirical(cfg, n).positions
        dt = cfg.get("flow.dt") or 1e-3

        def solver(u_end):
            return solve_flow_ensemble(x0, u_end, dt, spec, n_particles=n,
                                       rng=rng.generator)
    else:
        raise ConfigError(f"unknown flow.method {method!r}")
    return solver


def _flow_reference_error(F: TestFunctional, flow: FlowSolution) -> float:
    """Sampling error of the flow-side reference; zero for grid flows."""
    if flow.kind != "ensemble":
        return 0.0
    final = flow.states[-1]
    base = float(np.std(F.f(final), ddof=1) / np.sqrt(final.size))
    if F.kind == "quadratic":
        return 2.0 * abs(float(np.mean(F.f(final)))) * base
    return base


def run_convergence_markov(cfg: ExperimentConfig) -> ConvergenceReport:
    """Fixed-chain-time marginals of the chain against the limiting flow.

    For each N the replica ensemble is advanced to chain time t and the
    functional of the measure coordinate is compared with the flow value.
    A grid reference is deterministic; an ensemble reference carries its
    own sampling error, which enters the combined sigma.
    """
    spec = model_from_config(cfg)
    F = make_functional(cfg)
    t = cfg["conv.t"]
    replicas = cfg["conv.replicas"]
    seed = cfg["seed"]
    solver = _reference_flow(cfg, spec, t, RngStream(seed, 900))
    flow = solver(t)
    ref = float(flow.functional_at(F, t))
    ref_err = _flow_reference_error(F, flow)

    rows = []
    for idx, N in enumerate(cfg.int_list("conv.N_list")):
        params = CtrwParams(N=N)
        mu0 = make_initial_empirical(cfg, N)
        rng = RngStream(seed, 1000 + idx)
        X, _ = run_chain_ensemble(mu0, cfg.get("conv.s0", 0.0), t, params, spec,
                                  replicas, rng)
        vals = np.mean(F.f(X), axis=1)
        if F.kind == "quadratic":
            vals = vals**2
        rows.append(ConvergenceRow(
            sweep_value=N,
            estimate=float(np.mean(vals)),
            std_error=float(np.std(vals, ddof=1) / np.sqrt(replicas)),
            reference=ref,
            reference_error=ref_err,
        ))
    return ConvergenceReport(sweep_name="N", rows=rows)


def run_convergence_ctrw(cfg: ExperimentConfig) -> ConvergenceReport:
    """Scaled-CTRW marginals against the subordination evaluators.

    The reference is the direct estimator; the formula estimator is
    computed as well and must agree within the tolerance rule before the
    sweep is reported.
    """
    spec = model_from_config(cfg)
    F = make_functional(cfg)
    t = cfg["conv.t"]
    s0 = cfg.get("conv.s0", 0.0)
    replicas = cfg["conv.replicas"]
    seed = cfg["seed"]
    solver = _reference_flow(cfg, spec, t, RngStream(seed, 900))
    flow = solver(max(1.5 * t, 1.0))

    n_paths = cfg.get("eval.n_paths", 20000)
    du = cfg.get("eval.du", 1e-3)
    direct = evaluate_direct(F, flow, s0, t, n_paths, du,
                             RngStream(seed, 901), flow_solver=solver)
    formula = evaluate_formula(F, flow, s0, t, n_paths, du,
                               RngStream(seed, 902), flow_solver=solver)
    agreement = abs(direct.value - formula.value) <= 3.0 * combined_sigma(
        direct.std_error, formula.std_error)
    if not agreement:
        raise ConfigError(
            "direct and formula evaluators disagree beyond 3 sigma; "
            "refine du/n_paths before running the sweep"
        )

    rows = []
    for idx, N in enumerate(cfg.int_list("conv.N_list")):
        params = CtrwParams(N=N)
        mu0 = make_initial_empirical(cfg, N)
        rng = RngStream(seed, 2000 + idx)
        X, _T = run_ctrw_ensemble(mu0, s0, t, params, spec, replicas, rng)
        vals = np.mean(F.f(X), axis=1)
        if F.kind == "quadratic":
            vals = vals**2
        rows.append(ConvergenceRow(
            sweep_value=N,
            estimate=float(np.mean(vals)),
            std_error=float(np.std(vals, ddof=1) / np.sqrt(replicas)),
            reference=direct.value,
            reference_error=direct.std_error,
        ))
    return ConvergenceReport(sweep_name="N", rows=rows)


# ---------------------------------------------------------------------------
# deterministic emission
# ---------------------------------------------------------------------------

def _fmt(x):
    if isinstance(x, float):
        return format(x, ".17g")
    return x


def write_csv(path, rows, header=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not rows:
        raise ConfigError("refusing to write an empty table")
    if header is None:
        header = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(row[h]) for h in header])


def write_json(path, payload):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2, default=_fmt)
        fh.write("\n")
