"""Command-line entry point.

Subcommands: simulate-ctrw, solve-flow, subordinate, evaluate, residual,
appendix-rates, converge-markov, converge-ctrw.  Each validates its
configuration, runs the corresponding pipeline, and writes CSV/JSON
artifacts plus a run manifest (config hash, seed, versions) into the
output directory.  Exit codes: 0 pass, 1 a check failed, 2 configuration
error.

Configuration comes from an optional flat JSON file plus ``--set
key=value`` overrides; ``--seed`` overrides the seed key, ``--out`` the
output directory (also via the FKIN_OUT environment variable).
FKIN_THREADS is accepted as a worker-count hint but execution is
deterministic and single-process, so it does not affect outputs.
"""

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .errors import ConfigError, FkinError
from .harness import (
    ExperimentConfig,
    combined_sigma,
    config_digest,
    make_functional,
    make_initial_empirical,
    make_initial_grid,
    model_from_config,
    run_convergence_ctrw,
    run_convergence_markov,
    write_csv,
    write_json,
)
from .ctrw import ChainState, CtrwParams, chain_step_detailed, run_chain_ensemble, scaled_ctrw_evaluate
from .fractional import ResidualParams, residual_eq4
from .kinetic import solve_flow_ensemble, solve_flow_grid, stable_dt
from .model import order_of
from .rates import RateCase, RateTestFunction, rate_bound_check
from .streams import RngStream
from .subordinator import (
    FORMULA_DENSITY,
    FORMULA_PATH,
    estimate_density,
    evaluate_direct,
    evaluate_formula,
    simulate_subordinator,
)

_COMMANDS = (
    "simulate-ctrw", "solve-flow", "subordinate", "evaluate",
    "residual", "appendix-rates", "converge-markov", "converge-ctrw",
)


def _load_config(args) -> ExperimentConfig:
    raw = {}
    if args.config:
        with open(args.config) as fh:
            data = json.load(fh)
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a flat JSON object")
        raw.update(data)
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        raw[key.strip()] = val.strip()
    if args.seed is not None:
        raw["seed"] = args.seed
    return ExperimentConfig.build(args.command, raw)


def _out_dir(args) -> Path:
    out = args.out or os.environ.get("FKIN_OUT") or "fkin-out"
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _manifest(out: Path, cfg: ExperimentConfig):
    write_json(out / "manifest.json", {
        "command": cfg.command,
        "config": cfg.values,
        "config_sha256": config_digest(cfg.values),
        "seed": cfg.values.get("seed"),
        "versions": {
            "fractional-kinetics": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
    })


# ---------------------------------------------------------------------------
# subcommand bodies (each returns the exit code)
# ---------------------------------------------------------------------------

def _cmd_simulate_ctrw(cfg, out):
    spec = model_from_config(cfg)
    F = make_functional(cfg)
    N = cfg["ctrw.N"]
    params = CtrwParams(N=N, max_steps=cfg.get("ctrw.max_steps", 10**8))
    mu0 = make_initial_empirical(cfg, N)
    seed = cfg["seed"]
    replicas = cfg["ctrw.replicas"]
    mode = cfg.get("ctrw.mode", "inverse")

    records = {}
    values = []
    for rep in range(replicas):
        rng = RngStream(seed, rep)
        if mode == "inverse":
            res = scaled_ctrw_evaluate(mu0, cfg.get("ctrw.s0", 0.0), cfg["ctrw.t"],
                                       params, spec, rng)
            val = F.mu_value(res.measure)
            records[str(rep)] = {
                "stream_id": rep, "value": val,
                "inverse_time": res.inverse_time, "steps": res.steps,
            }
        elif mode == "fixed":
            t_chain = cfg["ctrw.chain_time"]
            n_steps = int(np.floor(t_chain / params.step_dt + 1e-9))
            state = ChainState(mu0, cfg.get("ctrw.s0", 0.0), 0)
            from .ctrw import chain_step
            for _ in range(n_steps):
                state = chain_step(state, params, spec, rng)
            val = F.mu_value(state.config)
            records[str(rep)] = {"stream_id": rep, "value": val, "s": state.s,
                                 "steps": state.k}
        else:
            raise ConfigError(f"unknown ctrw.mode {mode!r}")
        values.append(val)

    values = np.asarray(values)
    write_json(out / "replicas.json", records)
    write_json(out / "summary.json", {
        "mean": float(values.mean()),
        "std_error": float(values.std(ddof=1) / np.sqrt(len(values))) if len(values) > 1 else 0.0,
        "replicas": replicas, "N": N,
    })
    if cfg.get("ctrw.dump_trajectory"):
        rng = RngStream(seed, 0)
        state = ChainState(mu0, cfg.get("ctrw.s0", 0.0), 0)
        rows = []
        target = cfg["ctrw.t"] if mode == "inverse" else np.inf
        max_dump = 10000
        while state.s < target and state.k < max_dump:
            state, rec = chain_step_detailed(state, params, spec, rng)
            rows.append(rec)
            if mode == "fixed" and state.k >= int(cfg["ctrw.chain_time"] / params.step_dt):
                break
        write_csv(out / "trajectory.csv", rows,
                  header=["k", "s", "selected_i", "x_i_before", "x_i_after"])
    return 0


def _cmd_solve_flow(cfg, out):
    spec = model_from_config(cfg)
    method = cfg.get("flow.method", "grid")
    t_end = cfg["flow.t_end"]
    if method == "grid":
        grid0 = make_initial_grid(cfg)
        dt = cfg.get("flow.dt") or stable_dt(spec, grid0)
        flow = solve_flow_grid(grid0, t_end, dt, spec,
                               save_nodes=cfg.get("flow.save_nodes", 257))
    elif method == "ensemble":
        n = cfg.get("flow.particles", 4000)
        x0 = make_initial_empirical(cfg, n).positions
        dt = cfg.get("flow.dt") or 1e-3
        flow = solve_flow_ensemble(x0, t_end, dt, spec, n_particles=n,
                                   rng=RngStream(cfg["seed"], 0).generator,
                                   save_nodes=cfg.get("flow.save_nodes", 129))
    else:
        raise ConfigError(f"unknown flow.method {method!r}")

    # header: u, beta_u, then one column per grid cell (density value) or
    # per particle (position)
    width = flow.states.shape[1]
    prefix = "cell" if flow.kind == "grid" else "p"
    header = ["u", "beta_u"] + [f"{prefix}{i}" for i in range(width)]
    rows = []
    for j, u in enumerate(flow.u_nodes):
        row = {"u": float(u), "beta_u": float(flow.beta_nodes[j])}
        for i in range(width):
            row[f"{prefix}{i}"] = float(flow.states[j, i])
        rows.append(row)
    write_csv(out / "flow.csv", rows, header=header)
    write_json(out / "summary.json", {
        "method": method, "t_end": t_end,
        "mass_drift": flow.mass_drift, "boundary_mass": flow.boundary_mass,
    })
    return 0


def _cmd_subordinate(cfg, out):
    spec = model_from_config(cfg)
    beta = cfg.get("sub.beta")
    if beta is None:
        beta = spec.alpha
    beta = float(beta)
    s0 = cfg.get("sub.s0", 0.0)
    du, u_end = cfg["sub.du"], cfg["sub.u_end"]
    n_paths = cfg.get("sub.n_paths", 10000)
    seed = cfg["seed"]

    paths = [simulate_subordinator(lambda u: beta, s0, u_end, du, RngStream(seed, i))
             for i in range(min(n_paths, 10000))]

    dump = paths[: min(len(paths), 32)]
    rows = []
    for j, u in enumerate(dump[0].u):
        row = {"u": float(u)}
        for i, p in enumerate(dump):
            row[f"S{i}"] = float(p.S[j])
        rows.append(row)
    write_csv(out / "paths.csv", rows, header=["u"] + [f"S{i}" for i in range(len(dump))])

    u_q = cfg.get("density.u", u_end)
    lo = cfg.get("density.lo", s0)
    hi = cfg.get("density.hi")
    if hi is None:
        samples = np.array([p.S[int(round(u_q / p.du))] for p in paths])
        hi = float(np.quantile(samples, 0.95))
    edges = np.linspace(lo, hi, cfg.get("density.bins", 128) + 1)
    dens = estimate_density(paths, u_q, edges)
    rows = [{"S_mid": float(m), "density": float(d), "std_error": float(e)}
            for m, d, e in zip(dens.centers, dens.density, dens.bin_std_error)]
    write_csv(out / "density.csv", rows, header=["S_mid", "density", "std_error"])
    write_json(out / "summary.json", {
        "beta": beta, "du": du, "u_end": u_end, "n_paths": len(paths),
        "density_u": u_q, "tail_mass": dens.tail_mass, "seed": seed,
    })
    return 0


def _eval_flow_solver(cfg, spec, seed):
    method = cfg.get("flow.method", "grid")
    if method == "grid":
        grid0 = make_initial_grid(cfg)
        dt = cfg.get("flow.dt") or stable_dt(spec, grid0)
        return lambda u_end: solve_flow_grid(grid0, u_end, dt, spec)
    if method == "ensemble":
        n = cfg.get("flow.particles", 4000)
        x0 = make_initial_empirical(cfg, n).positions
        dt = cfg.get("flow.dt") or 1e-3
        rng = RngStream(seed, 950)
        return lambda u_end: solve_flow_ensemble(x0, u_end, dt, spec,
                                                 n_particles=n, rng=rng.generator)
    raise ConfigError(f"unknown flow.method {method!r}")


def _cmd_evaluate(cfg, out):
    spec = model_from_config(cfg)
    F = make_functional(cfg)
    t, s0 = cfg["eval.t"], cfg.get("eval.s0", 0.0)
    n_paths, du = cfg["eval.n_paths"], cfg["eval.du"]
    K = cfg.get("eval.K")
    seed = cfg["seed"]
    solver = _eval_flow_solver(cfg, spec, seed)
    flow = solver(cfg.get("flow.t_end") or max(1.5 * t, 1.0))

    methods = [m.strip() for m in str(cfg["eval.methods"]).split(",") if m.strip()]
    estimates = {}
    for idx, m in enumerate(methods):
        rng = RngStream(seed, 100 + idx)
        if m == "direct":
            est = evaluate_direct(F, flow, s0, t, n_paths, du, rng, flow_solver=solver)
        elif m == "formula-path":
            est = evaluate_formula(F, flow, s0, t, n_paths, du, rng, K=K,
                                   method=FORMULA_PATH, flow_solver=solver)
        elif m == "formula-density":
            est = evaluate_formula(F, flow, s0, t, n_paths, du, rng, K=K,
                                   method=FORMULA_DENSITY, flow_solver=solver)
        else:
            raise ConfigError(f"unknown eval method {m!r}")
        estimates[m] = est

    write_json(out / "estimates.json", {
        m: {"value": e.value, "std_error": e.std_error, "method": e.method,
            "K": e.cutoff, "n_paths": e.n_paths, "du": du, "seed": seed}
        for m, e in estimates.items()
    })
    rows, ok = [], True
    names = list(estimates)
    for i in range(len(names)):
        for j in range(i + 1, len(names)):
            a, b = estimates[names[i]], estimates[names[j]]
            gap = a.value - b.value
            sig = combined_sigma(a.std_error, b.std_error)
            passed = abs(gap) <= 3.0 * sig
            ok &= passed
            rows.append({
                "method_a": names[i], "method_b": names[j],
                "value_a": a.value, "value_b": b.value,
                "gap": gap, "combined_sigma": sig, "pass": int(passed),
            })
    if rows:
        write_csv(out / "pairs.csv", rows)
    return 0 if ok else 1


def _cmd_residual(cfg, out):
    spec = model_from_config(cfg)
    F = make_functional(cfg)
    mu0 = make_initial_empirical(cfg, cfg.get("res.particles", 4000))
    params = ResidualParams(
        n_paths=cfg["res.n_paths"], du=cfg["res.du"],
        quad_nodes=cfg["res.quad_nodes"],
        s_fractions=tuple(cfg.float_list("res.s_fractions")),
        seed=cfg["seed"],
        flow_horizon=cfg.get("res.flow_horizon", 2.0),
        flow_dt=cfg.get("res.flow_dt"),
    )
    report = residual_eq4(F, spec, mu0, cfg["res.t"], params)
    rows = [{
        "s": float(s), "lhs": float(l), "rhs": report.rhs,
        "residual": float(r), "mc_error": float(e),
    } for s, l, r, e in zip(report.s_values, report.lhs, report.residual,
                            report.mc_error)]
    write_csv(out / "residual.csv", rows,
              header=["s", "lhs", "rhs", "residual", "mc_error"])
    passed = report.within(3.0)
    write_json(out / "summary.json", {
        "beta": report.beta, "rhs": report.rhs,
        "terminal_value": report.terminal_value,
        "terminal_target": report.terminal_target,
        "shift_test": report.shift_test, "pass": bool(passed),
    })
    return 0 if passed else 1


_RATE_FUNCTIONS = {
    "y-exp": RateTestFunction(
        fn=lambda y: y * np.exp(-y), lipschitz_at_zero=1.0, label="y*exp(-y)"),
    "indicator": RateTestFunction(
        fn=lambda y: float(1.0 <= y <= 2.0), lipschitz_at_zero=0.0,
        support=(1.0, 2.0), label="1_[1,2]"),
}


def _cmd_appendix_rates(cfg, out):
    case = RateCase(alpha=cfg["rates.alpha"], B=cfg["rates.B"],
                    sub_b=cfg.get("rates.sub_b", "none"))
    fname = cfg.get("rates.function", "y-exp")
    if fname not in _RATE_FUNCTIONS:
        raise ConfigError(f"unknown rates.function {fname!r}")
    f = _RATE_FUNCTIONS[fname]
    h_sweep = cfg.float_list("rates.h_sweep")
    report = rate_bound_check(case, f, h_sweep)
    rows = [{
        "h": float(h), "lhs": float(l), "rhs": report.rhs,
        "abs_err": float(e), "bound": float(b), "pass": int(p),
    } for h, l, e, b, p in zip(report.h_values, report.lhs, report.abs_err,
                               report.bound, report.passed)]
    write_csv(out / "rates.csv", rows,
              header=["h", "lhs", "rhs", "abs_err", "bound", "pass"])
    slope_floor = cfg.get("rates.slope_floor", 0.4)
    slope_ok = report.slope >= slope_floor or not np.isfinite(report.slope)
    write_json(out / "summary.json", {
        "constant_C_B": report.constant, "slope": report.slope,
        "slope_floor": slope_floor, "bound_pass": report.all_passed(),
        "slope_pass": bool(slope_ok),
    })
    return 0 if (report.all_passed() and slope_ok) else 1


def _cmd_converge(cfg, out, runner):
    report = runner(cfg)
    write_csv(out / "converge.csv", report.as_rows())
    passed = report.passed()
    write_json(out / "summary.json", {
        "trend_pass": report.trend_passed(),
        "final_gap_pass": report.final_gap_passed(),
        "pass": bool(passed),
    })
    return 0 if passed else 1


_BODIES = {
    "simulate-ctrw": _cmd_simulate_ctrw,
    "solve-flow": _cmd_solve_flow,
    "subordinate": _cmd_subordinate,
    "evaluate": _cmd_evaluate,
    "residual": _cmd_residual,
    "appendix-rates": _cmd_appendix_rates,
    "converge-markov": lambda cfg, out: _cmd_converge(cfg, out, run_convergence_markov),
    "converge-ctrw": lambda cfg, out: _cmd_converge(cfg, out, run_convergence_ctrw),
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="fkin",
        description="Variable-order fractional kinetics toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat JSON configuration file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one configuration key")
        p.add_argument("--seed", type=int, help="master seed override")
        p.add_argument("--out", help="output directory (or FKIN_OUT)")
    args = parser.parse_args(argv)

    try:
        cfg = _load_config(args)
        out = _out_dir(args)
        _manifest(out, cfg)
        code = _BODIES[args.command](cfg, out)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except FkinError as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return 1
    return code


if __name__ == "__main__":
    sys.exit(main())
