"""Command-line entry point: ``fiberlay <command> [--config PATH] [--seed N] [--out DIR]``.

Exit status is 0 on success, 2 for configuration errors and 1 when a backend
fails or a verification does not pass.
"""
from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__, hypo, rates, sde
from .config import ConfigError, RunConfig, parse_config
from .grid import FP_SERIES_COLUMNS, PhaseField, build_operators, solve, write_snapshot
from .model import check_hypotheses

log = logging.getLogger("fiberlay")

COMMANDS = ("simulate-sde", "solve-fp", "diagnose", "sweep", "verify-hypotheses")
DEFAULT_SDE_DT = 2e-3


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def write_csv(path: Path, columns, rows):
    """CSV with a header row, '.' decimals, ``.17g`` floats and LF line endings."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_cell(v) for v in row])
    log.info("wrote %s", path)


def _sample_times(T, interval):
    n = int(math.floor(T / interval + 1e-9))
    times = [k * interval for k in range(n + 1)]
    if T - times[-1] > 1e-12:
        times.append(T)
    return times


def _suffix(cfg: RunConfig, A):
    return "" if len(cfg.A_values) == 1 else f"_A{A:g}"


# commands ------------------------------------------------------------------

def cmd_simulate_sde(cfg: RunConfig, out: Path):
    r = cfg.values["run"]
    dt = r["dt"] or DEFAULT_SDE_DT
    spec = cfg.spec
    for A in cfg.A_values:
        params = cfg.params(A)
        ens = sde.init_ensemble(r["N"], cfg.init, cfg.seed)
        samples, final = sde.simulate(ens, params, spec, r["T_final"], dt,
                                      _sample_times(r["T_final"], r["sample_interval"]),
                                      grid=cfg.hist_grid)
        sfx = _suffix(cfg, A)
        write_csv(out / f"sde_series{sfx}.csv", sde.SDE_SERIES_COLUMNS,
                  [s.as_row() for s in samples])
        if r["dump_ensemble"]:
            sde.write_ensemble(out / f"ensemble{sfx}.bin", final)
    return 0


def cmd_solve_fp(cfg: RunConfig, out: Path):
    r = cfg.values["run"]
    if cfg.init.kind == "point":
        raise ConfigError("initial.kind: the grid solver needs a density, not a point mass")
    ops = build_operators(cfg.spec, cfg.grid)
    f0 = PhaseField.from_function(ops.grid, cfg.init.density, average=True)
    for A in cfg.A_values:
        params = cfg.params(A)
        sol = solve(f0, ops, params.D, r["T_final"], dt=r["dt"],
                    sample_times=_sample_times(r["T_final"], r["sample_interval"]),
                    scheme=r["scheme"], eps=cfg.values["theory"]["eps"])
        sfx = _suffix(cfg, A)
        write_csv(out / f"fp_series{sfx}.csv", FP_SERIES_COLUMNS,
                  [rec.as_row() for rec in sol.series])
        if r["snapshot"]:
            write_snapshot(out / f"fp_final{sfx}.bin", sol.final)
    return 0


def _theory_constants(cfg: RunConfig, ops, rng):
    t = cfg.values["theory"]
    if t["Lambda"] is not None:
        Lambda, lam_res = t["Lambda"], 0.0
    else:
        gap = hypo.estimate_lambda_spec(ops)
        Lambda, lam_res = gap.Lambda, gap.residual
    if t["C_V"] is not None:
        C_V, cv_res = t["C_V"], 0.0
    else:
        est = hypo.estimate_cv(ops, rng)
        C_V, cv_res = est.C_V, est.residual
    return Lambda, lam_res, C_V, cv_res


def cmd_diagnose(cfg: RunConfig, out: Path):
    t = cfg.values["theory"]
    params = cfg.params()
    ops = build_operators(cfg.spec, cfg.grid)
    rng = np.random.default_rng(cfg.seed)
    Lambda, lam_res, C_V, cv_res = _theory_constants(cfg, ops, rng)
    report = hypo.verify_coercivity(ops, params.D, trials=t["trials"], Lambda=Lambda,
                                    C_V=C_V, eta=t["eta"] if params.D > 0 else None, rng=rng)
    write_csv(out / "coercivity_report.csv", ("inequality", "bound", "worst_ratio", "trials"),
              [(c.name, c.bound, c.worst_ratio, c.trials) for c in report.checks])
    chains = [hypo.theoretical_rate(Lambda, C_V, D, t["eta"]) for D in t["D_values"]]
    write_csv(out / "rate_chain.csv", hypo.RATE_CHAIN_COLUMNS,
              [hypo.rate_chain_row(c) for c in chains])
    c0 = chains[0]
    _, D_star = hypo.eps_bar_max(Lambda, C_V)
    _, _, r2 = hypo.fit_closed_form(c0.D_curve, hypo.lambda_theory(
        c0.D_curve, Lambda, C_V, t["eta"], c0.eps_bar_max), t["eta"])
    write_csv(out / "theory_constants.csv", ("quantity", "value"), [
        ("Lambda", Lambda), ("Lambda_residual", lam_res), ("C_V", C_V),
        ("C_V_residual", cv_res), ("eps_bar_max", c0.eps_bar_max), ("D_at_max", D_star),
        ("C1", c0.C1), ("C2", c0.C2), ("closed_form_r_squared", r2)])
    for c in report.checks:
        log.info("%-16s %s %.6g  worst %.6g  %s", c.name, c.relation, c.bound,
                 c.worst_ratio, "pass" if c.passed else "FAIL")
    return 0 if report.passed else 1


def cmd_sweep(cfg: RunConfig, out: Path):
    s = cfg.values["sweep"]
    r = cfg.values["run"]
    t = cfg.values["theory"]
    ops = build_operators(cfg.spec, cfg.grid)
    Lambda, _, C_V, _ = _theory_constants(cfg, ops, np.random.default_rng(cfg.seed))
    settings = rates.SweepSettings(
        spec=cfg.spec, backend=s["backend"], grid=cfg.sweep_grid, hist_grid=cfg.hist_grid,
        init=cfg.init, N=r["N"], dt=r["dt"] or rates.SweepSettings.dt, seed=cfg.seed,
        eta=t["eta"], t_final=s["T_final"], sample_interval=r["sample_interval"],
        Lambda=Lambda, C_V=C_V)
    rows = rates.sweep_a(s["A_values"], settings)
    write_csv(out / "lambda_sweep.csv", rates.SWEEP_COLUMNS, [row.as_row() for row in rows])
    for row in rows:
        if row.status != "ok":
            log.warning("A = %g: %s", row.A, row.status)
    return 0 if all(not row.status.startswith("failed") for row in rows) else 1


def cmd_verify_hypotheses(cfg: RunConfig, out: Path):
    spec = cfg.spec
    box = 8.0 if spec.family != "tabulated" else float(min(abs(spec.table.x1[[0, -1]]).min(),
                                                            abs(spec.table.x2[[0, -1]]).min()))
    rep = check_hypotheses(spec, box=box)
    write_csv(out / "hypotheses_report.csv", ("quantity", "value", "pass"), rep.rows())
    for note in rep.notes:
        log.warning(note)
    log.info("hypotheses %s", "pass" if rep.passed else "FAIL")
    return 0 if rep.passed else 1


HANDLERS = {
    "simulate-sde": cmd_simulate_sde,
    "solve-fp": cmd_solve_fp,
    "diagnose": cmd_diagnose,
    "sweep": cmd_sweep,
    "verify-hypotheses": cmd_verify_hypotheses,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fiberlay", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="INI configuration file")
        p.add_argument("--seed", type=int, help="master seed (overrides run.seed)")
        p.add_argument("--out", type=Path, help="output directory (overrides output.dir)")
        p.add_argument("-q", "--quiet", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    overrides = {}
    if args.seed is not None:
        overrides["run.seed"] = args.seed
    if args.out is not None:
        overrides["output.dir"] = str(args.out)
    try:
        cfg = parse_config(args.config, args.command, overrides)
        out = cfg.out_dir
        out.mkdir(parents=True, exist_ok=True)
        manifest = cfg.to_ini(args.command, __version__)
        (out / f"manifest_{args.command}.ini").write_text(manifest)
        log.info("resolved configuration:\n%s", manifest.rstrip())
        return HANDLERS[args.command](cfg, out)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError, ArithmeticError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
