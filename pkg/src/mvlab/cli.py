"""Batch front-end: ``mvlab <command> --config exp.yaml [--set k=v ...]``.

Exit status: 0 success, 1 invalid configuration, 2 runtime abort.  Every
run appends one line to ``<out>/manifest.jsonl``.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
import warnings
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import asymptotics as asy
from . import variational as var
from .coeffs import check_hypotheses, sample_tuples
from .config import ConfigError, ExperimentConfig, build_modulus, load_config
from .monotone import graph_samples
from .sde import ConfigurationError, SimulationAborted, k_monotonicity_diag, simulate

COMMANDS = ("simulate", "skeleton", "rate", "ldp-sweep", "mdp-sweep", "lil", "diag")
ENV_OUT = "MVLAB_OUT"


def _report(outdir, name, cfg, table=None, **kw):
    rep = asy.make_report(name, cfg.hash(), table, **kw)
    asy.write_report(rep, outdir / f"{name}.json")
    return rep


def _control(cfg: ExperimentConfig, steps: int, d: int, dt: float) -> var.ControlGrid:
    c = cfg.skeleton.control
    if c.kind == "zero":
        return var.ControlGrid.zeros(steps, d, dt)
    if c.kind == "constant":
        if len(c.value) != d:
            raise ConfigError(f"skeleton.control.value: expected {d} components")
        return var.ControlGrid.constant(c.value, steps, dt)
    vals = np.asarray(c.values, dtype=float).reshape(steps, d) if np.size(c.values) == steps * d else None
    if vals is None:
        raise ConfigError(f"skeleton.control.values: expected {steps} x {d} entries")
    return var.ControlGrid(vals, dt)


def _target(cfg: ExperimentConfig, steps: int):
    t = cfg.rate.target
    if t.kind == "endpoint_halfspace":
        return var.EndpointHalfSpace(np.asarray(t.normal, dtype=float), t.level)
    if t.kind == "endpoint_point":
        return var.EndpointPoint(np.asarray(t.point, dtype=float), t.tol)
    if t.kind == "tube_exit":
        return var.TubeExit(t.radius)
    path = np.asarray(t.path, dtype=float)
    if path.shape[0] != steps + 1:
        raise ConfigError(f"rate.target.path: expected {steps + 1} grid values")
    return var.PathMatch(path.reshape(steps + 1, -1), t.tol)


def _settings(cfg, threads):
    o = cfg.rate.optimizer
    return var.OptimizerSettings(o.rho0, o.rho_factor, o.rounds, o.restarts, o.restart_scale, o.feas_tol,
                                 o.maxiter, o.seed, threads)


def cmd_simulate(cfg, outdir, threads):
    problem, scheme, rng = cfg.build_problem(), cfg.build_scheme(), cfg.build_rng()
    s = cfg.simulate
    ens = simulate(problem, scheme, s.N, rng, record=s.record, workers=threads)
    files = []
    if "csv" in s.formats:
        ens.to_csv(outdir / "ensemble.csv")
        files.append("ensemble.csv")
    if "binary" in s.formats:
        ens.to_binary(outdir / "ensemble.bin")
        files.append("ensemble.bin")
    XT = ens.terminal
    rows = [{"coordinate": i, "mean": float(XT[:, i].mean()),
             "var": float(XT[:, i].var(ddof=1)) if s.N > 1 else 0.0} for i in range(ens.d)]
    _report(outdir, "simulate", cfg, rows=rows,
            extra={"max_domain_distance": ens.max_domain_distance, "max_penalty": ens.max_penalty,
                   "mean_k_tv": float(ens.K_tv[:, -1].mean())})
    return files + ["simulate.json"]


def cmd_skeleton(cfg, outdir, threads):
    problem, scheme = cfg.build_problem(0.0), cfg.build_scheme()
    steps = scheme.steps(problem.T)
    X0 = var.solve_limit_ode(problem, scheme)
    X0.to_csv(outdir / "limit.csv")
    files = ["limit.csv"]
    h = _control(cfg, steps, problem.dim, scheme.dt)
    Y = var.solve_skeleton(problem, h, scheme, X0)
    Y.to_csv(outdir / "skeleton.csv")
    files.append("skeleton.csv")
    rows = [{"kind": "limit", "terminal": X0.terminal.tolist(), "k_tv": float(X0.K_tv[-1])},
            {"kind": "skeleton", "terminal": Y.terminal.tolist(), "k_tv": float(Y.K_tv[-1]),
             "energy": var.energy(h)}]
    if cfg.skeleton.mdp:
        nu = var.solve_mdp_skeleton(problem, h, X0, scheme)
        nu.to_csv(outdir / "mdp.csv")
        files.append("mdp.csv")
        rows.append({"kind": "mdp", "terminal": nu.terminal.tolist(), "k_tv": float(nu.K_tv[-1])})
    _report(outdir, "skeleton", cfg, rows=rows)
    return files + ["skeleton.json"]


def _rate_result(cfg, threads, target=None):
    problem, scheme = cfg.build_problem(0.0), cfg.build_scheme()
    steps = scheme.steps(problem.T)
    rp = var.RateProblem(problem, target or _target(cfg, steps), scheme, _settings(cfg, threads))
    return var.minimize_rate(rp)


def cmd_rate(cfg, outdir, threads):
    res = _rate_result(cfg, threads)
    res.h.to_csv(outdir / "h.csv")
    res.Y.to_csv(outdir / "Y.csv")
    _report(outdir, "rate", cfg, rows=[res.to_dict()], extra={"I": res.I if math.isfinite(res.I) else "inf",
                                                              "feasible": res.feasible})
    return ["h.csv", "Y.csv", "rate.json"]


def cmd_ldp_sweep(cfg, outdir, threads):
    problem, scheme, rng = cfg.build_problem(), cfg.build_scheme(), cfg.build_rng()
    c = cfg.ldp_sweep
    e = c.event
    event = asy.RareEvent(e.kind, tuple(e.normal), e.level, e.radius, e.complement)
    table = asy.ldp_sweep(problem, event, c.eps_grid, c.N, scheme, rng, workers=threads)
    table.to_csv(outdir / "ldp.csv")
    rate_star = c.rate_star
    if rate_star is None and not e.complement:
        target = var.EndpointHalfSpace(np.asarray(e.normal), e.level) if e.kind == "halfspace" \
            else var.TubeExit(e.radius)
        rate_star = _rate_result(cfg, threads, target).I
    fit = asy.fit_rate(table, rate_star) if rate_star is not None else None
    _report(outdir, "ldp", cfg, table, oracle={"rate_star": rate_star},
            verdicts={} if fit is None else fit.to_dict())
    return ["ldp.csv", "ldp.json"]


def cmd_mdp_sweep(cfg, outdir, threads):
    problem, scheme, rng = cfg.build_problem(), cfg.build_scheme(), cfg.build_rng()
    c = cfg.mdp_sweep
    power = c.lambda_power
    table = asy.mdp_sweep(problem, c.eps_grid, c.N, scheme, rng, lam=lambda e: e ** power, statistic=c.statistic,
                          component=c.component, quantile=c.quantile, workers=threads, oracle_N=c.oracle_N)
    table.to_csv(outdir / "mdp.csv")
    errs = [r["rel_err"] for r in table.rows]
    _report(outdir, "mdp", cfg, table, oracle={"value": table.rows[0]["oracle"], "kind": table.meta["oracle_kind"]},
            verdicts={"final_rel_err": errs[-1], "final_z": table.rows[-1]["z"]})
    return ["mdp.csv", "mdp.json"]


def cmd_lil(cfg, outdir, threads):
    problem, rng = cfg.build_problem(1.0), cfg.build_rng()
    c = cfg.lil
    spec = asy.LilSpec(c.regime, c.c, tuple(c.js), c.T, c.steps)
    center = tuple(problem.x0) if c.center is None else tuple(c.center)
    fam = asy.ContractionFamily(center)
    table = asy.lil_harness(problem, spec, fam, c.N, rng, dt_factor=c.dt_factor, n_distance=c.n_distance,
                            workers=threads)
    table.to_csv(outdir / "lil.csv")
    verdicts = {"soft_bound_flag": table.meta["soft_bound_flag"]}
    if table.meta["brownian"]:
        verdicts["variance_within_3se"] = all(abs(r["var_z"]) <= 3 for r in table.rows)
    _report(outdir, "lil", cfg, table, verdicts=verdicts)
    return ["lil.csv", "lil.json"]


def cmd_diag(cfg, outdir, threads):
    problem = cfg.build_problem()
    c = cfg.diag
    gen = np.random.default_rng(c.seed)
    samples = sample_tuples(problem.dim, c.n_samples, gen, scale=c.sample_scale)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rep = check_hypotheses(problem.coeffs, build_modulus(c.modulus), c.L, samples, tuple(c.which),
                               eps_grid=tuple(c.eps_grid))
    out = {"hypotheses": rep.to_dict(), "hypotheses_ok": rep.ok, "H3": "asserted by user"}
    if c.k_monotonicity:
        scheme, rng = cfg.build_scheme(), cfg.build_rng()
        ens = simulate(problem, scheme, c.N, rng, workers=threads)
        xs, ys = graph_samples(problem.A, 16, gen)
        km = k_monotonicity_diag(ens, xs, ys)
        out["k_monotonicity"] = {"worst_margin": km.worst_margin, "tol": km.tol, "violations": km.violations,
                                 "ok": km.ok}
    _report(outdir, "diag", cfg, rows=[out], verdicts={"hypotheses_ok": rep.ok})
    return ["diag.json"]


HANDLERS = {"simulate": cmd_simulate, "skeleton": cmd_skeleton, "rate": cmd_rate, "ldp-sweep": cmd_ldp_sweep,
            "mdp-sweep": cmd_mdp_sweep, "lil": cmd_lil, "diag": cmd_diag}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="YAML or JSON experiment file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a dotted config key (repeatable)")
    common.add_argument("--out", help=f"output root (default: ${ENV_OUT} or ./runs)")
    common.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
    common.add_argument("--threads", type=int, help="worker threads; never changes results")
    p = argparse.ArgumentParser(prog="mvlab", description="Multivalued mean-field SDE laboratory")
    sub = p.add_subparsers(dest="command", required=True)
    for c in COMMANDS:
        sub.add_parser(c, parents=[common])
    return p


def _out_root(args, cfg) -> Path:
    return Path(args.out or cfg.out or os.environ.get(ENV_OUT) or "runs")


def _append_manifest(root: Path, line: dict) -> bool:
    try:
        root.mkdir(parents=True, exist_ok=True)
        with open(root / "manifest.jsonl", "a") as fh:
            fh.write(json.dumps(line) + "\n")
        return True
    except OSError as e:
        print(f"mvlab: cannot write manifest: {e}", file=sys.stderr)
        return False


def run(command: str, config: str, overrides=(), out=None, seed=None, threads=None) -> int:
    argv = [command, "--config", str(config)]
    for o in overrides:
        argv += ["--set", o]
    if out is not None:
        argv += ["--out", str(out)]
    if seed is not None:
        argv += ["--seed", str(seed)]
    if threads is not None:
        argv += ["--threads", str(threads)]
    return main(argv)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"rng.seed={args.seed}")
    if args.threads is not None:
        overrides.append(f"threads={args.threads}")
    try:
        cfg = load_config(args.config, overrides)
        cfg.build_problem()
        cfg.build_scheme()
    except (ConfigError, ConfigurationError) as e:
        print(f"mvlab: invalid configuration: {e}", file=sys.stderr)
        root = Path(args.out or os.environ.get(ENV_OUT) or "runs")
        _append_manifest(root, {"timestamp": datetime.now(timezone.utc).isoformat(), "command": args.command,
                                "config_hash": None, "seed": args.seed, "duration_s": 0.0, "status": 1,
                                "error": str(e)})
        return 1
    root = _out_root(args, cfg)
    h = cfg.hash()
    outdir = root / f"{args.command}-{h}"
    start = time.perf_counter()
    status, files, error = 0, [], None
    try:
        outdir.mkdir(parents=True, exist_ok=True)
        with open(outdir / "config.json", "w") as fh:
            json.dump(asy._clean(cfg.to_dict()), fh, indent=2, sort_keys=True)
        files = HANDLERS[args.command](cfg, outdir, cfg.threads)
    except (ConfigError, ConfigurationError) as e:
        status, error = 1, str(e)
        print(f"mvlab: invalid configuration: {e}", file=sys.stderr)
    except (SimulationAborted, ArithmeticError, RuntimeError, OSError) as e:
        status, error = 2, str(e)
        print(f"mvlab: run aborted: {e}", file=sys.stderr)
    line = {"timestamp": datetime.now(timezone.utc).isoformat(), "command": args.command, "config_hash": h,
            "seed": cfg.rng.seed, "duration_s": round(time.perf_counter() - start, 6), "status": status,
            "outdir": str(outdir), "files": files}
    if error:
        line["error"] = error
    if not _append_manifest(root, line):
        status = status or 2
    if status == 0:
        print(str(outdir))
    return status


if __name__ == "__main__":
    sys.exit(main())
