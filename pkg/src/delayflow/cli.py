"""Command line entry point: ``delayflow <subcommand>``.

Exit codes: 0 run reached t_end (or study/check passed), 10 run stabilized,
20 solver failure (partial outputs written), 30 study failed or inconclusive,
1 configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from . import diagnostics as dg
from . import steady_states as ss
from .config import (OUTPUT_ROOT_ENV, build_config, output_dir, parse_config, write_csv, write_json,
                     write_outputs, json_safe)
from .evolve import FixedPointFailure, StepFailure, run_delayed, run_limit
from .kernel import check_hypotheses, moments
from .spatial import ConfigurationError, make_grid

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_STABILIZED = 10
EXIT_FAILURE = 20
EXIT_STUDY_FAILED = 30

STUDIES = ("eps-convergence", "holder", "jump", "resolvent", "mu1-drift")

log = logging.getLogger("delayflow")


def _run_exit(status: str) -> int:
    return {"ReachedTEnd": EXIT_OK, "Stabilized": EXIT_STABILIZED}.get(status, EXIT_FAILURE)


def cmd_steady_states(args) -> int:
    if args.config:
        cfg = parse_config(args.config, seed=args.seed)
        L, n, mu1 = cfg.L, cfg.n_cells, moments(cfg.kernel).mu1
    else:
        if args.L is None:
            raise ConfigurationError("steady-states needs --L or --config")
        L, n = args.L, args.n_cells
        cfg = build_config({"grid": {"L": L, "n_cells": n},
                            "kernel": {"family": "exponential", "b": args.mu1},
                            "run": {"eps": 0.0, "t_end": 0.0}})
        mu1 = moments(cfg.kernel).mu1
    rows = ss.steady_table(L, make_grid(L, n), mu1=mu1, K=args.K)
    write_csv(args.out or sys.stdout, rows, ss.TABLE_COLUMNS)
    return EXIT_OK


def _simulate(args, limit: bool) -> int:
    cfg = parse_config(args.config, seed=args.seed)
    if limit and cfg.eps != 0:
        raise ConfigurationError("run.eps must be 0 for the limit subcommand")
    if not limit and not cfg.eps > 0:
        raise ConfigurationError("run.eps must be > 0 for the simulate subcommand (use limit for eps = 0)")
    out = output_dir(cfg, args.out_dir)
    try:
        traj = run_limit(cfg) if limit else run_delayed(cfg)
    except (FixedPointFailure, StepFailure) as exc:
        traj = exc.trajectory
        log.error("%s", exc)
    summary = write_outputs(traj, paths=out, config=cfg)
    print(json.dumps({k: summary[k] for k in ("status", "matched_branch", "kappa", "t_final")},
                     sort_keys=True))
    return _run_exit(traj.status)


def cmd_simulate(args) -> int:
    return _simulate(args, limit=False)


def cmd_limit(args) -> int:
    return _simulate(args, limit=True)


def cmd_check_kernel(args) -> int:
    cfg = parse_config(args.config, seed=args.seed, check_kernel=False)
    rep = check_hypotheses(cfg.kernel)
    print(json.dumps(json_safe(rep.to_dict()), indent=2, sort_keys=True))
    return EXIT_OK if rep.passed else EXIT_CONFIG


def run_study(cfg, study: str):
    st = cfg.raw["study"]
    if study == "eps-convergence":
        return dg.eps_convergence_study(cfg, st["eps_list"], compare_dt=st["compare_dt"])
    if study == "holder":
        pairs = st["eps_pairs"]
        if pairs is None:
            pairs = [[2.0 * e, e] for e in st["eps_list"]]
        return dg.holder_study(cfg, pairs, st["t_probe"], floor=st["floor"])
    if study == "jump":
        return dg.jump_study(cfg, st["eps_list"], floor=st["floor"])
    if study == "mu1-drift":
        return dg.mu1_drift_study(cfg, st["eps_list"], floor=st["floor"] or 0.0)
    if study == "resolvent":
        return dg.resolvent_scaling_probe(make_grid(cfg.L, cfg.n_cells), cfg.kernel, st["eps_list"],
                                          j=st["j"], forcing=st["forcing"])
    raise ConfigurationError(f"unknown study {study!r}")


def cmd_sweep(args) -> int:
    cfg = parse_config(args.config, seed=args.seed)
    res = run_study(cfg, args.study)
    out = output_dir(cfg, args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = res.rows()
    write_csv(out / f"sweep_{args.study}.csv", rows, list(rows[0]) if rows else ["eps"])
    summary = res.to_dict()
    summary["config"] = cfg.raw
    write_json(out / f"sweep_{args.study}.json", summary)
    for name, f in res.fits.items():
        print(f"{name}: slope {f.slope:.4g} (bound {f.bound:.4g}) {'pass' if f.passed else 'FAIL'}")
    return EXIT_OK if res.passed else EXIT_STUDY_FAILED


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="delayflow", description="Delayed fourth-order gradient flow laboratory.",
                                epilog=f"Relative output folders are placed under ${OUTPUT_ROOT_ENV} (default: cwd).")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="JSON configuration file")
        sp.add_argument("--seed", type=int, default=None, help="override run.seed")

    sp = sub.add_parser("steady-states", help="steady-state table as CSV")
    common(sp, config_required=False)
    sp.add_argument("--L", type=float, default=None)
    sp.add_argument("--n-cells", type=int, default=200)
    sp.add_argument("--mu1", default=1.0, type=_number_or_expr, help="mu1 profile: number or formula in s")
    sp.add_argument("--K", type=float, default=0.0, help="target value of (Z, mu1)")
    sp.add_argument("--out", default=None, help="CSV path (default: stdout)")
    sp.set_defaults(func=cmd_steady_states)

    for name, func, help_ in (("simulate", cmd_simulate, "delayed run (eps > 0)"),
                              ("limit", cmd_limit, "limit problem run (eps = 0)")):
        sp = sub.add_parser(name, help=help_)
        common(sp)
        sp.add_argument("--out-dir", default=None)
        sp.set_defaults(func=func)

    sp = sub.add_parser("sweep", help="epsilon study: CSV of metrics plus JSON summary")
    common(sp)
    sp.add_argument("--study", required=True, choices=STUDIES)
    sp.add_argument("--out-dir", default=None)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("check-kernel", help="kernel hypothesis report as JSON")
    common(sp)
    sp.set_defaults(func=cmd_check_kernel)
    return p


def _number_or_expr(v: str):
    try:
        return float(v)
    except ValueError:
        return v


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
