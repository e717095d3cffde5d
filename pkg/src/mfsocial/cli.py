"""Command-line entry point binding scenarios, solvers, and experiments.

Every run is reproducible from its manifest: the scenario hash covers the
canonical scenario document plus the grid and solver parameters, seeds are
mandatory inputs (never wall clock), and all output files embed the hash.

Exit codes: 0 success, 1 assumption/validation failure, 2 numerical
divergence, 3 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .ccfix import (CCSolution, PicardDivergenceError, PicardOptions, SubclassError,
                    cc_residual, mean_system_solve, picard_solve)
from .forward import DivergenceError
from .grid import build_grid, write_ensemble
from .oracles import OracleSubclassError, deterministic_qp, riccati_lq
from .population import (Perturbation, consistency_error, directional_derivative,
                         rate_fit, simulate_population)
from .scenario import (canonical_json, empirical_mix, load_scenario, scenario_hash,
                       validate_scenario)
from .wellposedness import certify

EXIT_OK, EXIT_INVALID, EXIT_DIVERGED, EXIT_USAGE = 0, 1, 2, 3


def _grid_for(sc, args):
    return build_grid(sc.T, sc.T / args.grid_steps, sc.delta, sc.theta)


def _manifest(args, sc, extra=None) -> dict:
    params = {k: v for k, v in sorted(vars(args).items())
              if k not in ("func", "scenario") and not callable(v)}
    return {
        "command": args.command,
        "scenario": str(args.scenario),
        "scenario_hash": scenario_hash(sc, extra={"params": params}),
        "params": params,
        **(extra or {}),
    }


def _write_json(path: Path, doc: dict):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")


def _write_csv(path: Path, header_cols, rows, sc_hash: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        f.write(f"# scenario_hash={sc_hash}\n")
        f.write(",".join(header_cols) + "\n")
        for row in rows:
            f.write(",".join(repr(float(v)) if isinstance(v, (int, float, np.floating)) else str(v)
                             for v in row) + "\n")


def cmd_validate(args) -> int:
    sc = load_scenario(args.scenario)
    report = validate_scenario(sc, r_min=args.r_min)
    print(report.summary())
    print(f"result: {'PASS' if report.ok else 'FAIL'}")
    return EXIT_OK if report.ok else EXIT_INVALID


def cmd_echo(args) -> int:
    sc = load_scenario(args.scenario)
    print(canonical_json(sc))
    return EXIT_OK


def cmd_certify(args) -> int:
    sc = load_scenario(args.scenario)
    grid = _grid_for(sc, args)
    cert = certify(sc, grid, rho_override=args.rho)
    doc = cert.to_dict()
    out = Path(args.out_dir)
    _write_json(out / "certificate.json", doc)
    _write_json(out / "manifest.json", _manifest(args, sc))
    print(f"branch: {cert.branch}")
    print(f"stability margin: {cert.l_margin:.6g}")
    print(f"modulus: {cert.modulus:.6g}  (pass={cert.passed})")
    print(f"dominating term: {cert.dominating_term()}")
    return EXIT_OK


def _solve(sc, grid, args) -> CCSolution:
    opts = PicardOptions(M=args.paths, max_iters=args.max_iters, tol=args.tol,
                         rho=args.rho or 0.0, damping=args.damping, seed=args.seed)
    return picard_solve(sc, grid, opts)


def _dump_cc(out: Path, sc, grid, cc: CCSolution, args):
    hl = grid.history_len
    times = np.arange(grid.steps + 1) * grid.h
    rows = []
    for i in range(grid.steps + 1):
        row = [times[i]] + list(cc.xhat[hl + i]) + list(cc.uhat[hl + i]) + list(cc.w[i])
        rows.append(row)
    cols = (["t"] + [f"xhat_{j}" for j in range(sc.n)]
            + [f"uhat_{j}" for j in range(sc.d)] + [f"w_{j}" for j in range(sc.n)])
    _write_csv(out / "cc_meanfields.csv", cols, rows, cc.sc_hash)
    header = {
        "scenario_hash": cc.sc_hash,
        "residuals": cc.residuals,
        "opts": {"M": cc.opts.M, "tol": cc.opts.tol, "rho": cc.opts.rho,
                 "damping": cc.opts.damping, "seed": cc.opts.seed},
        "deterministic": cc.deterministic,
    }
    _write_json(out / "cc_solution.json", header)
    if args.dump_ensembles:
        for k in range(sc.K):
            write_ensemble(str(out / f"cc_state_{k}.bin"), cc.x[k])
            write_ensemble(str(out / f"cc_control_{k}.bin"), cc.v[k])


def cmd_solve_cc(args) -> int:
    sc = load_scenario(args.scenario)
    report = validate_scenario(sc)
    if not report.ok:
        print(report.summary())
        return EXIT_INVALID
    grid = _grid_for(sc, args)
    try:
        cc = _solve(sc, grid, args)
    except (PicardDivergenceError, DivergenceError) as e:
        print(f"divergence: {e}")
        return EXIT_DIVERGED
    out = Path(args.out_dir)
    _dump_cc(out, sc, grid, cc, args)
    _write_json(out / "manifest.json", _manifest(args, sc))
    res = cc_residual(cc, sc, grid)
    print(f"iterations: {len(cc.residuals)}  final residual: {cc.residuals[-1]:.3e}")
    print(f"refresh residual: {res['total']:.3e}  mean defect: {res['mean_defect']:.3e}")
    return EXIT_OK


def cmd_mean_solve(args) -> int:
    sc = load_scenario(args.scenario)
    report = validate_scenario(sc)
    if not report.ok:
        print(report.summary())
        return EXIT_INVALID
    grid = _grid_for(sc, args)
    try:
        opts = PicardOptions(max_iters=args.max_iters, tol=args.tol, seed=args.seed)
        cc = mean_system_solve(sc, grid, opts)
    except SubclassError as e:
        print(f"usage error: {e}")
        return EXIT_USAGE
    except (PicardDivergenceError, DivergenceError) as e:
        print(f"divergence: {e}")
        return EXIT_DIVERGED
    out = Path(args.out_dir)
    args.dump_ensembles = False
    _dump_cc(out, sc, grid, cc, args)
    _write_json(out / "manifest.json", _manifest(args, sc))
    print(f"iterations: {len(cc.residuals)}  final residual: {cc.residuals[-1]:.3e}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    sc = load_scenario(args.scenario)
    report = validate_scenario(sc)
    if not report.ok:
        print(report.summary())
        return EXIT_INVALID
    grid = _grid_for(sc, args)
    try:
        cc = _solve(sc, grid, args)
        mix = empirical_mix(args.agents, sc.pi, policy=args.mix, seed=args.seed)
        run = simulate_population(sc, grid, cc, mix, seed=args.seed)
    except (PicardDivergenceError, DivergenceError) as e:
        print(f"divergence: {e}")
        return EXIT_DIVERGED
    gaps = consistency_error(run, cc, grid)
    out = Path(args.out_dir)
    rows = [[args.agents, args.seed, run.social, run.social / args.agents,
             gaps["state_gap_sq"], gaps["control_gap_sq"], mix.eps_N]]
    _write_csv(out / "population_metrics.csv",
               ["N", "seed", "social_cost", "per_agent_cost", "state_gap_sq",
                "control_gap_sq", "eps_N"], rows, cc.sc_hash)
    _write_json(out / "manifest.json", _manifest(args, sc))
    print(f"social cost: {run.social:.6g}  per agent: {run.social / args.agents:.6g}")
    print(f"state gap^2: {gaps['state_gap_sq']:.3e}  control gap^2: {gaps['control_gap_sq']:.3e}")
    return EXIT_OK


def cmd_perturb(args) -> int:
    sc = load_scenario(args.scenario)
    grid = _grid_for(sc, args)
    try:
        cc = _solve(sc, grid, args)
        mix = empirical_mix(args.agents, sc.pi, seed=args.seed)
        du = np.zeros((grid.steps + 1, sc.d))
        du[: grid.steps] = 1.0 / np.sqrt(sc.T)  # unit-norm constant direction
        rep = directional_derivative(sc, grid, cc, mix, agent=args.agent,
                                     du=Perturbation(du),
                                     seeds=[args.seed + j for j in range(args.reps)])
    except (PicardDivergenceError, DivergenceError) as e:
        print(f"divergence: {e}")
        return EXIT_DIVERGED
    out = Path(args.out_dir)
    doc = {
        "scenario_hash": cc.sc_hash,
        "N": args.agents, "agent": args.agent,
        "derivative": rep.derivative, "bracket": rep.bracket, "fd": rep.fd,
        "eps_terms": rep.eps.tolist(), "diagnostics": rep.diagnostics,
    }
    _write_json(out / "perturbation.json", doc)
    _write_json(out / "manifest.json", _manifest(args, sc))
    print(f"derivative: {rep.derivative:.6g}  fd check: {rep.fd:.6g}")
    return EXIT_OK


def cmd_rates(args) -> int:
    sc = load_scenario(args.scenario)
    n_list = [int(x) for x in args.n_list.split(",")]
    out = Path(args.out_dir)
    if args.synthetic:
        vals = [eval_synthetic(args.synthetic, n) for n in n_list]
        fit = rate_fit(n_list, vals)
        _write_json(out / "rates_summary.json",
                    {"metric": f"synthetic:{args.synthetic}", "N": n_list, "values": vals,
                     "slope": fit.slope, "band": fit.band,
                     "scenario_hash": scenario_hash(sc)})
        print(f"slope: {fit.slope:.3f} +/- {fit.band:.3f}")
        return EXIT_OK
    grid = _grid_for(sc, args)
    try:
        cc = _solve(sc, grid, args)
    except (PicardDivergenceError, DivergenceError) as e:
        print(f"divergence: {e}")
        return EXIT_DIVERGED
    rows = []
    means = []
    for n in n_list:
        gaps = []
        for j in range(args.reps):
            mix = empirical_mix(n, sc.pi, policy=args.mix, seed=args.seed + j)
            run = simulate_population(sc, grid, cc, mix, seed=args.seed + 1000 * j + n)
            g = consistency_error(run, cc, grid)
            gaps.append(g["state_gap_sq"])
            rows.append([n, args.seed + j, g["state_gap_sq"], g["control_gap_sq"]])
        means.append(float(np.mean(gaps)))
    fit = rate_fit(n_list, means)
    _write_csv(out / "population_metrics.csv", ["N", "seed", "state_gap_sq", "control_gap_sq"],
               rows, cc.sc_hash)
    _write_json(out / "rates_summary.json",
                {"metric": "state_gap_sq", "N": n_list, "values": means,
                 "slope": fit.slope, "band": fit.band, "scenario_hash": cc.sc_hash})
    _write_json(out / "manifest.json", _manifest(args, sc))
    print(f"slope: {fit.slope:.3f} +/- {fit.band:.3f}")
    return EXIT_OK


def eval_synthetic(expr: str, n: int) -> float:
    if expr == "1/N":
        return 1.0 / n
    if expr == "1/sqrtN":
        return 1.0 / np.sqrt(n)
    raise ValueError(f"unknown synthetic metric {expr!r}")


def cmd_oracle_compare(args) -> int:
    sc = load_scenario(args.scenario)
    grid = _grid_for(sc, args)
    try:
        cc = _solve(sc, grid, args)
        mix = empirical_mix(args.agents, sc.pi, seed=args.seed)
        run = simulate_population(sc, grid, cc, mix, seed=args.seed)
        qp = deterministic_qp(sc, grid, args.agents, mix)
    except OracleSubclassError as e:
        print(f"usage error: {e}")
        return EXIT_USAGE
    except (PicardDivergenceError, DivergenceError) as e:
        print(f"divergence: {e}")
        return EXIT_DIVERGED
    gap = (run.social - qp.objective) / args.agents
    out = Path(args.out_dir)
    _write_csv(out / "oracle_gap.csv",
               ["N", "decentralized_social", "centralized_social", "per_agent_gap", "kkt_residual"],
               [[args.agents, run.social, qp.objective, gap, qp.kkt_residual]],
               cc.sc_hash)
    _write_json(out / "manifest.json", _manifest(args, sc))
    print(f"decentralized: {run.social:.8g}  centralized: {qp.objective:.8g}  per-agent gap: {gap:.3e}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mfsocial",
                                description="Delayed mean-field team solver and experiments")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, grid=True, solver=False):
        sp.add_argument("scenario", help="scenario file (YAML or JSON)")
        sp.add_argument("--out-dir", default="out")
        if grid:
            sp.add_argument("--grid-steps", type=int, default=100)
        if solver:
            sp.add_argument("--paths", type=int, default=2000)
            sp.add_argument("--max-iters", type=int, default=60)
            sp.add_argument("--tol", type=float, default=1e-9)
            sp.add_argument("--rho", type=float, default=None)
            sp.add_argument("--damping", type=float, default=1.0)
            sp.add_argument("--seed", type=int, required=True)
            sp.add_argument("--workers", type=int, default=1,
                            help="chunking hint; results are worker-count independent")

    sp = sub.add_parser("validate", help="check the standing assumptions")
    sp.add_argument("scenario")
    sp.add_argument("--r-min", type=float, default=1e-8)
    sp.set_defaults(func=cmd_validate)

    sp = sub.add_parser("echo-scenario", help="canonical JSON form")
    sp.add_argument("scenario")
    sp.set_defaults(func=cmd_echo)

    sp = sub.add_parser("certify", help="discounting certificate")
    common(sp)
    sp.add_argument("--rho", type=float, default=None)
    sp.set_defaults(func=cmd_certify)

    sp = sub.add_parser("solve-cc", help="solve the consistency condition")
    common(sp, solver=True)
    sp.add_argument("--dump-ensembles", action="store_true")
    sp.set_defaults(func=cmd_solve_cc)

    sp = sub.add_parser("mean-solve", help="deterministic mean system")
    common(sp)
    sp.add_argument("--max-iters", type=int, default=60)
    sp.add_argument("--tol", type=float, default=1e-11)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_mean_solve)

    sp = sub.add_parser("simulate", help="population run under the decentralized strategy")
    common(sp, solver=True)
    sp.add_argument("--agents", type=int, default=100)
    sp.add_argument("--mix", default="exact-proportion")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("perturb", help="directional derivative of the social cost")
    common(sp, solver=True)
    sp.add_argument("--agents", type=int, default=64)
    sp.add_argument("--agent", type=int, default=0)
    sp.add_argument("--reps", type=int, default=8)
    sp.set_defaults(func=cmd_perturb)

    sp = sub.add_parser("rates", help="multi-N sweep with slope fits")
    common(sp, solver=True)
    sp.add_argument("--n-list", default="64,128,256,512")
    sp.add_argument("--reps", type=int, default=4)
    sp.add_argument("--mix", default="exact-proportion")
    sp.add_argument("--synthetic", default=None,
                    help="bypass simulation with a synthetic metric (1/N, 1/sqrtN)")
    sp.set_defaults(func=cmd_rates)

    sp = sub.add_parser("oracle-compare", help="gap against the centralized optimum")
    common(sp, solver=True)
    sp.add_argument("--agents", type=int, default=10)
    sp.set_defaults(func=cmd_oracle_compare)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else 0
    try:
        return args.func(args)
    except FileNotFoundError as e:
        print(f"usage error: {e}")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
