"""Command line entry point: ``periodic-eval validate|solve|verify|oracle-compare|simulate``.

Exit codes: 0 success, 2 standing assumption fails (or oracle comparison on a
model with a stochastic factor), 3 malformed configuration or missing inputs,
4 fixed-point iteration did not converge, 5 a verification check failed.

Outputs are written atomically (temporary file, then rename).  Wall-clock
times go to ``timing.json`` only, so every other artifact is byte-identical
across re-runs with the same configuration and seed.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import platform
import sys
import tempfile
import time
from pathlib import Path
from typing import List, Optional

import numpy as np
import scipy

from . import __version__
from .config import ConfigError, RunConfig, load_config, validate_data
from .errors import DomainError, NumericalFailure, UsageError
from .fixedpoint import (
    check_bounds_log,
    check_bounds_power,
    iterate_to_fixed_point,
    log_A_bounds,
    power_A_bounds,
    value_bounds,
    value_function,
)
from .horizon import (
    HorizonPlan,
    SolutionTable,
    budget_chain,
    default_horizon,
    evaluate_objective,
    supermartingale_check,
)
from .market import check_standing_assumption, effective_M0
from .mc import combined_se
from .oneperiod import (
    dual_value,
    quadrature_one_period,
    quadrature_oracle_constant,
    solve_dual,
    DualControl,
)
from .sde import export_terminal_csv, dump_bundle, simulate_factor, simulate_wealth
from .utility import GridFunction

log = logging.getLogger("periodic_eval")

EXIT_OK, EXIT_ASSUMPTION, EXIT_CONFIG, EXIT_NONCONVERGED, EXIT_CHECK = 0, 2, 3, 4, 5


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------

def _num(x) -> str:
    return repr(float(x))


def _jsonable(o):
    if isinstance(o, dict):
        return {str(k): _jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_jsonable(v) for v in o]
    if isinstance(o, np.ndarray):
        return _jsonable(o.tolist())
    if isinstance(o, (np.floating, float)):
        f = float(o)
        return f if math.isfinite(f) else str(f)
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, np.bool_):
        return bool(o)
    return o


def write_atomic(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path: Path, obj) -> None:
    write_atomic(path, json.dumps(_jsonable(obj), sort_keys=True, indent=2) + "\n")


def write_csv(path: Path, header: List[str], rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_num(v) if isinstance(v, (float, np.floating)) else v for v in row])
    write_atomic(path, buf.getvalue())


def read_csv(path: Path) -> List[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _exact(v) -> dict:
    return {"value": float(v), "exact": True}


def _with_se(v, se) -> dict:
    return {"value": float(v), "se": float(se)}


# ---------------------------------------------------------------------------
# shared steps
# ---------------------------------------------------------------------------

def _load(args) -> RunConfig:
    cfg = load_config(args.config)
    cfg = cfg.with_overrides(seed=getattr(args, "seed", None), paths=getattr(args, "paths", None))
    if getattr(args, "utility", None) and args.utility != cfg.utility.kind:
        u = cfg.utility.model_dump()
        u["kind"] = args.utility
        cfg = validate_data({**cfg.canonical(), "utility": u})
    return cfg


def _assumption(cfg: RunConfig):
    model, spec = cfg.market(), cfg.utility_spec()
    rep = check_standing_assumption(model, spec, cfg.y_grid())
    return model, spec, rep


def _versions() -> dict:
    return {"periodic_eval": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_validate(args) -> int:
    cfg = _load(args)
    _, _, rep = _assumption(cfg)
    out = {"config_hash": cfg.digest(), "assumption": rep.to_dict(), "y_grid": cfg.y_grid()}
    print(json.dumps(_jsonable(out), sort_keys=True, indent=2))
    if args.out:
        write_json(Path(args.out) / "validation.json", out)
    return EXIT_OK if rep.passed else EXIT_ASSUMPTION


def cmd_solve(args) -> int:
    cfg = _load(args)
    model, spec, rep = _assumption(cfg)
    if not rep.passed:
        print(f"standing assumption fails: {rep.message}", file=sys.stderr)
        return EXIT_ASSUMPTION
    out = Path(args.out)
    t0 = time.perf_counter()
    fp = cfg.fixed_point(refine=args.refine)
    res = iterate_to_fixed_point(model, spec, fp)
    wall = time.perf_counter() - t0
    A = res.A_star
    M0 = res.M0
    lo, hi = (log_A_bounds if spec.kind == "log" else power_A_bounds)(model, spec, M0)

    write_csv(out / "A_star.csv", ["y", "A_star", "A_se", "psi_se", "lower_bound", "upper_bound"],
              [(float(y), float(a), float(s), float(ps), float(lo), float(hi))
               for y, a, s, ps in zip(A.y, A.values, res.A_se_fixed, res.A_se)])

    xs = cfg.numerics.x_grid
    surface, vchecks = [], []
    for x in xs:
        vlo, vhi = value_bounds(model, spec, x, M0)
        for y, a in zip(A.y, A.values):
            v = value_function(A, spec, x, y)
            surface.append((float(x), float(y), float(v), float(vlo), float(vhi)))
            vchecks.append(bool(vlo <= v <= vhi))
    write_csv(out / "value_surface.csv", ["x", "y", "V", "V_lower", "V_upper"], surface)

    bounds = {"A_bounds": {"lower": _exact(lo), "upper": _exact(hi), "passed": res.bound_check.passed,
                           "min_margin": res.bound_check.min_margin},
              "value_bounds": {"passed": all(vchecks), "n_points": len(vchecks)}}
    write_json(out / "bounds.json", bounds)

    solutions = None
    if res.solutions is not None:
        solutions = [s.to_dict() for s in res.solutions]
    elif spec.kind == "power" and fp.inner == "quadrature":
        val, lam = quadrature_one_period(model, spec, float(A.values[0]))
        solutions = [{"y0": float(y), "lambda_star": lam, "eta_star": DualControl.zero().to_dict(),
                      "quadrature_value": val} for y in A.y]
    write_json(out / "solutions.json", {"certified": res.certified, "kind": spec.kind, "solutions": solutions})

    manifest = {
        "config_hash": cfg.digest(),
        "config": cfg.canonical(),
        "seed": cfg.numerics.seed,
        "versions": _versions(),
        "converged": res.converged,
        "certified": res.certified,
        "iterations": res.iterations,
        "refreshes": res.refreshes,
        "clamped_values": res.clamped,
        "flagged_grid_points": list(res.flagged),
        "M0": _exact(M0),
        "q_theory": _exact(res.q_theory),
        "stop_threshold": _exact(res.stop_threshold),
        "last_step": _with_se(res.steps[-1], float(np.max(res.A_se))) if res.steps else None,
        "measured_contraction_last": ({"value": float(res.measured_contraction[-1]), "exact": False, "note": "ratio of the last two steps"}
                                      if res.measured_contraction else None),
        "residual": None if res.residual is None else _with_se(res.residual, res.residual_se),
        "C_star": None if res.C_star is None else _exact(res.C_star),
        "A_star": [{"y": float(y), **_with_se(a, s)} for y, a, s in zip(A.y, A.values, res.A_se_fixed)],
        "workers": fp.n_workers,
    }
    write_json(out / "manifest.json", manifest)
    write_json(out / "timing.json", {"wall_seconds": wall})
    log.info("solve: A* in [%.6g, %.6g], %d iterations, converged=%s certified=%s",
             A.inf, A.sup, res.iterations, res.converged, res.certified)
    if not res.converged:
        print("fixed-point iteration did not converge; last iterate written", file=sys.stderr)
        return EXIT_NONCONVERGED
    if not res.certified and not args.allow_uncertified:
        print("solution not certified (duality gap or budget check failed)", file=sys.stderr)
        return EXIT_CHECK
    if not res.bound_check.passed or not all(vchecks):
        return EXIT_CHECK
    return EXIT_OK


def _check(name: str, passed: bool, **details) -> dict:
    return {"name": name, "passed": bool(passed), **details}


def cmd_verify(args) -> int:
    cfg = _load(args)
    model, spec, rep = _assumption(cfg)
    if not rep.passed:
        print(f"standing assumption fails: {rep.message}", file=sys.stderr)
        return EXIT_ASSUMPTION
    out = Path(args.out)
    if args.solve_first:
        code = cmd_solve(args)
        if code not in (EXIT_OK, EXIT_CHECK):
            return code
    try:
        manifest = json.loads((out / "manifest.json").read_text())
        rows = read_csv(out / "A_star.csv")
        sols = json.loads((out / "solutions.json").read_text())
    except (OSError, ValueError) as exc:
        print(f"no usable solve artifacts in {out} ({exc}); run solve or pass --solve-first", file=sys.stderr)
        return EXIT_CONFIG
    if manifest.get("config_hash") != cfg.digest():
        print("solve artifacts were produced from a different configuration", file=sys.stderr)
        return EXIT_CONFIG
    try:
        A = GridFunction(np.array([float(r["y"]) for r in rows]), np.array([float(r["A_star"]) for r in rows]))
        psi_se = A.with_values([float(r["psi_se"]) for r in rows])
    except (KeyError, ValueError) as exc:
        print(f"A_star.csv unreadable: {exc}", file=sys.stderr)
        return EXIT_CHECK

    M0 = effective_M0(model, cfg.y_grid())
    checks = []
    br = (check_bounds_log if spec.kind == "log" else check_bounds_power)(A, model, spec, M0)
    checks.append(_check("A_bounds", br.passed, lower=br.lower, upper=br.upper, min_margin=br.min_margin))

    vmargin = math.inf
    for x in cfg.numerics.x_grid:
        vlo, vhi = value_bounds(model, spec, x, M0)
        v = np.atleast_1d(value_function(A, spec, x, A.y))
        vmargin = min(vmargin, float(np.min(v - vlo)), float(np.min(vhi - v)))
    checks.append(_check("value_bounds", vmargin >= 0, min_margin=vmargin))

    solver = cfg.solver()
    records = sols.get("solutions")
    if spec.kind == "log":
        gaps = []
        for y in A.y:
            s = solve_dual(model, spec, A, float(y), solver)
            gaps.append({"y": float(y), **s.gap.to_dict()})
        checks.append(_check("duality_gap", all(g["passed"] for g in gaps), points=gaps))
        table = SolutionTable.constant(1.0)
    else:
        if not records:
            print("power verification needs one-period solutions from solve", file=sys.stderr)
            return EXIT_CONFIG
        certified = bool(sols.get("certified"))
        if "quadrature_value" in records[0]:
            checks.append(_check("duality_gap", True, note="quadrature inner values; gap is exact by construction"))
        else:
            gp = [r["gap"] for r in records]
            checks.append(_check("duality_gap", all(g is not None and g["passed"] for g in gp), points=gp))
            bud = [{"y": r["y0"], "residual": r["budget_residual"], "se": r["budget_se"],
                    "passed": abs(r["budget_residual"]) <= max(1e-8, 3.0 * r["budget_se"])} for r in records]
            checks.append(_check("budget_binding", all(b["passed"] for b in bud), points=bud))
        if not certified and not args.allow_uncertified:
            print("one-period solutions are not certified; pass --allow-uncertified to proceed", file=sys.stderr)
            return EXIT_CHECK
        table = SolutionTable.from_records(records, certified=True)

    vb = cfg.verify
    x0, y0 = vb.x0, cfg.numerics.y0
    V0 = float(value_function(A, spec, x0, y0))
    if vb.n_periods is not None:
        N = vb.n_periods
    elif spec.kind == "power" and spec.alpha < 0:
        N = 20
    else:
        N = min(default_horizon(model, spec, x0, M0, V0), 200)
    plan = HorizonPlan(N, cfg.simulation())
    drift_rows = []

    def drift(name, strategy, martingale):
        r = supermartingale_check(model, spec, A, strategy, plan, x0, y0, table=table, n_bins=vb.n_bins,
                                  min_count=vb.min_count, k=vb.k_se, allow_uncertified=True, A_se=psi_se)
        for row in r.rows:
            drift_rows.append((name, row["n"], row["bin"], row["y_lo"], row["y_hi"], row["count"], row["drift"],
                               row["se"], row["z"]))
        ok = r.martingale_ok if martingale else r.supermartingale_ok
        checks.append(_check(f"drift_{name}", ok, **{k: v for k, v in r.to_dict().items() if k != "passed"}))

    drift("optimal", "optimal", True)
    opt = evaluate_objective(model, spec, "optimal", x0, y0, plan, A_star=A, M0=M0, table=table,
                             allow_uncertified=True)
    gap_v = opt.value.mean - V0
    checks.append(_check("value_identity", abs(gap_v) <= opt.tail_bound + vb.k_se * opt.value.se,
                         objective=opt.to_dict(), value_function=V0, difference=gap_v))
    for pol in cfg.policies():
        name = pol.kind if pol.kind in ("zero", "cash") else f"{pol.kind}_x{pol.scale:g}"
        drift(name, pol, False)
        ob = evaluate_objective(model, spec, pol, x0, y0, plan, M0=M0)
        tol = vb.k_se * combined_se(opt.value.se, ob.value.se)
        checks.append(_check(f"dominance_{name}", opt.value.mean >= ob.value.mean - tol,
                             optimal=opt.value.to_dict(), policy=ob.value.to_dict()))

    if spec.kind == "power":
        from .horizon import concatenate_optimal_wealth
        path = concatenate_optimal_wealth(model, spec, A, table, x0, y0, plan, allow_uncertified=True)
        chain = budget_chain(path)
        # lambda* binds the budget on the solve sample only; its relative error (the solve-time
        # budget SE) repeats in every period, so it enters the tolerance linearly in n
        eps = max((r.get("budget_se") or 0.0) for r in records) / x0
        tols = [vb.k_se * math.hypot(e.se, n * eps * x0) + 1e-12 for n, e in enumerate(chain)]
        ok = all(abs(e.mean - x0) <= t for e, t in zip(chain, tols))
        checks.append(_check("budget_chain", ok, values=[e.to_dict() for e in chain], tolerances=tols,
                             lambda_rel_se=eps))

    write_csv(out / "drift.csv", ["check", "n", "bin", "y_lo", "y_hi", "count", "drift", "se", "z"], drift_rows)
    report = {"config_hash": cfg.digest(), "seed": cfg.numerics.seed, "n_periods": N,
              "all_passed": all(c["passed"] for c in checks), "checks": checks, "versions": _versions()}
    write_json(out / "verification_report.json", report)
    for c in checks:
        print(f"{'PASS' if c['passed'] else 'FAIL'}  {c['name']}")
    return EXIT_OK if report["all_passed"] else EXIT_CHECK


def cmd_oracle_compare(args) -> int:
    cfg = _load(args)
    model, spec, rep = _assumption(cfg)
    if not (model.price_coefficients_constant and spec.h.is_constant):
        print("oracle comparison needs constant coefficients and constant h", file=sys.stderr)
        return EXIT_ASSUMPTION
    if not rep.passed:
        print(f"standing assumption fails: {rep.message}", file=sys.stderr)
        return EXIT_ASSUMPTION
    oc = cfg.oracle
    A = oc.A
    if A is None:
        from .fixedpoint import log_fixed_point_constant, power_fixed_point_quadrature
        A = log_fixed_point_constant(model, spec) if spec.kind == "log" else power_fixed_point_quadrature(model, spec)[0]
    lams = oc.lambdas
    if lams is None:
        lam_star = quadrature_one_period(model, spec, A)[1]
        lams = list(lam_star * np.logspace(-0.5, 0.5, 5))
    bundle = simulate_factor(model, cfg.numerics.y0, cfg.simulation())
    rows, ok = [], True
    for lam in lams:
        mc = dual_value(model, spec, A, cfg.numerics.y0, DualControl.zero(), lam, bundle)
        qv = quadrature_oracle_constant(model, spec, A, lam)
        if mc.exact or mc.se == 0.0:
            z = 0.0 if abs(mc.mean - qv) <= 1e-10 * max(1.0, abs(qv)) else math.inf
        else:
            z = (mc.mean - qv) / mc.se
        ok &= abs(z) <= 3.0
        rows.append((float(lam), mc.mean, mc.se, qv, z))
    write_csv(Path(args.out) / "oracle_compare.csv", ["lambda", "mc_dual", "mc_se", "quadrature_dual", "z"], rows)
    for r in rows:
        print(f"lambda={r[0]:.6g}  mc={r[1]:.8g} +/- {r[2]:.2g}  quad={r[3]:.8g}  z={r[4]:+.2f}")
    return EXIT_OK if ok else EXIT_CHECK


def cmd_simulate(args) -> int:
    cfg = _load(args)
    model, spec, rep = _assumption(cfg)
    out = Path(args.out)
    b = simulate_factor(model, cfg.numerics.y0, cfg.simulation(), with_price=True)
    pols = cfg.policies()
    if pols:
        b = simulate_wealth(model, pols[0], cfg.verify.x0, b)
    out.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=out, suffix=".tmp")
    os.close(fd)
    dump_bundle(b, tmp)
    os.replace(tmp, out / "paths.bin")
    fd, tmp = tempfile.mkstemp(dir=out, suffix=".tmp")
    os.close(fd)
    export_terminal_csv(b, tmp)
    os.replace(tmp, out / "terminal.csv")
    write_json(out / "simulate.json", {"config_hash": cfg.digest(), "seed": cfg.numerics.seed,
                                       "n_paths": b.n_paths, "n_steps": b.n_steps,
                                       "policy": pols[0].to_dict() if pols else None,
                                       "clamped": b.n_clamped})
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="periodic-eval", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", required=True, help="YAML run configuration")
        sp.add_argument("--out", required=out_required, help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="override numerics.seed")
        sp.add_argument("--paths", type=int, default=None, help="override numerics.n_paths")

    sp = sub.add_parser("validate", help="check the configuration and the standing assumption")
    common(sp, out_required=False)
    sp.set_defaults(func=cmd_validate)

    sp = sub.add_parser("solve", help="iterate to the fixed point and write A*, V and bounds")
    common(sp)
    sp.add_argument("--utility", choices=("power", "log"), default=None)
    sp.add_argument("--refine", action="store_true", help="double the control-table resolution")
    sp.add_argument("--allow-uncertified", action="store_true")
    sp.set_defaults(func=cmd_solve)

    sp = sub.add_parser("verify", help="run the verification checks on a solved configuration")
    common(sp)
    sp.add_argument("--utility", choices=("power", "log"), default=None)
    sp.add_argument("--refine", action="store_true")
    sp.add_argument("--allow-uncertified", action="store_true")
    sp.add_argument("--solve-first", action="store_true")
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("oracle-compare", help="Monte Carlo dual values against quadrature")
    common(sp)
    sp.set_defaults(func=cmd_oracle_compare)

    sp = sub.add_parser("simulate", help="simulate factor, price and wealth paths")
    common(sp)
    sp.set_defaults(func=cmd_simulate)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    except (UsageError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED


if __name__ == "__main__":
    sys.exit(main())
