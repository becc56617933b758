"""Command-line front end.

Machine-readable artifacts go to ``--out-dir``; a short human summary goes to
standard output.  Failures print a JSON error object to standard error and exit
with 1 (input/output), 2 (validation), 3 (convergence) or 4 (internal).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import re
import secrets
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .cohort import Cohort, Schema, load_cohort
from .errors import CRSensError, DomainError, InputError
from .inference import band, bootstrap_sup_stats, format_interval, robustness_interval
from .influence import assemble_influence
from .missingness import fit_missingness, marginal_missing_death_prob
from .pseudoscore import SensitivityGrid, fit_functional
from .simulator import (TABLE1_COLUMNS, SimDesign, StudyConfig, load_study_config, parse_grid,
                        population_beta_star, run_study)

logger = logging.getLogger("crsens")

COMMANDS = ("fit", "band", "robustness", "marginal", "simulate")


# ------------------------------------------------------------------ parsing
def _parse_schema(text: Optional[str]) -> dict:
    if not text:
        return {}
    out = {}
    for part in text.split(","):
        if not part.strip():
            continue
        if "=" not in part:
            raise DomainError(f"schema entries must look like key=column, got {part!r}")
        k, v = (s.strip() for s in part.split("=", 1))
        out[k] = v
    return out


def _parse_floats(text: str, what: str) -> list:
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise DomainError(f"{what} must be comma-separated numbers, got {text!r}") from None
    if not vals:
        raise DomainError(f"{what} is empty")
    return vals


def _add_input(p):
    p.add_argument("--input", required=True, help="delimited cohort file (CSV or TSV with header)")
    p.add_argument("--schema", help="column overrides as key=column pairs, e.g. "
                   "'time=T,status=D,covariates=age;sex' (covariate lists separated by ';')")
    p.add_argument("--cluster-col", help="column holding cluster ids (default: 'cluster' if present)")
    p.add_argument("--no-cluster", action="store_true", help="ignore any cluster column")
    p.add_argument("--grid", help="sensitivity grid as a,b,M (default -1,1,41; robustness: "
                   "-eta_max,eta_max,101)")
    p.add_argument("--out-dir", default=".", help="directory for output artifacts (default: .)")


def _add_contrast(p):
    g = p.add_mutually_exclusive_group()
    g.add_argument("--coef", type=int, help="1-based coefficient index (indicator contrast)")
    g.add_argument("--contrast", help="contrast weights w1,...,wp")
    p.add_argument("--cause", type=int, choices=(1, 2), default=1, help="cause of interest (default 1)")
    p.add_argument("--alpha", type=float, default=0.05, help="1 - confidence level (default 0.05)")
    p.add_argument("--boot", type=int, default=1000, help="bootstrap replicates S (default 1000)")
    p.add_argument("--seed", type=int, help="random seed (generated and reported if absent)")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                   help="worker threads (results do not depend on this)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="crsens", description=__doc__.splitlines()[0])
    ap.add_argument("--verbose", "-v", action="store_true", help="log progress to standard error")
    sub = ap.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("fit", help="estimate beta_j(eta) over the grid for both causes")
    _add_input(p)

    p = sub.add_parser("band", help="simultaneous confidence band and identification region")
    _add_input(p)
    _add_contrast(p)
    p.add_argument("--sub-range", help="restrict the band to lo,hi inside the grid")

    p = sub.add_parser("robustness", help="robustness interval with the naive comparator")
    _add_input(p)
    _add_contrast(p)
    p.add_argument("--eta-max", type=float, default=5.0, help="search bound (default 5)")
    p.add_argument("--epsilon", type=float, default=1e-8, help="offset in the root equation (default 1e-8)")

    p = sub.add_parser("marginal", help="P(C=2 | missing cause) over the grid")
    _add_input(p)

    p = sub.add_parser("simulate", help="run a simulation study and write the summary table")
    p.add_argument("--config", help="study file with a [study] section")
    p.add_argument("--scenario", type=int, choices=(1, 2, 3, 4))
    p.add_argument("--n", type=int, help="sample size")
    p.add_argument("--replicates", type=int)
    p.add_argument("--boot", type=int, help="bootstrap replicates S")
    p.add_argument("--alpha", type=float)
    p.add_argument("--grid", help="a,b,M (default -1,1,41)")
    p.add_argument("--seed", type=int, help="master seed (generated and reported if absent)")
    p.add_argument("--oracle-n", type=int, help="population-oracle cohort size (default 1e6)")
    p.add_argument("--oracle-seed", type=int, help="population-oracle seed (default 1)")
    p.add_argument("--oracle-cache", help="JSON file caching population-oracle values")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                   help="worker threads (results do not depend on this)")
    p.add_argument("--out-dir", default=".", help="directory for output artifacts (default: .)")
    return ap


# ---------------------------------------------------------------- helpers
def _load(args) -> Cohort:
    mapping = _parse_schema(args.schema)
    if args.cluster_col:
        mapping["cluster"] = args.cluster_col
    try:
        schema = Schema.from_mapping(mapping)
    except (TypeError, ValueError) as exc:
        raise DomainError(str(exc)) from None
    return load_cohort(args.input, schema, use_cluster=not args.no_cluster)


def _grid(args, default: str) -> SensitivityGrid:
    return parse_grid(args.grid or default)


def _contrast(args, p: int) -> np.ndarray:
    if args.contrast:
        K = np.array(_parse_floats(args.contrast, "--contrast"))
        if K.size != p:
            raise DomainError(f"--contrast needs {p} weights, got {K.size}")
        return K
    k = args.coef or 1
    if not 1 <= k <= p:
        raise DomainError(f"--coef must be in 1..{p}, got {k}")
    K = np.zeros(p)
    K[k - 1] = 1.0
    return K


def _check_inference_args(args):
    if not 0 < args.alpha <= 0.5:
        raise DomainError("--alpha must lie in (0, 0.5]")
    if args.boot < 100:
        raise DomainError("--boot must be at least 100")
    if args.threads < 1:
        raise DomainError("--threads must be >= 1")


def _seed(args) -> int:
    if args.seed is None:
        args.seed = secrets.randbits(63)
        print(f"seed: {args.seed} (generated)")
    return args.seed


def _out(args) -> Path:
    out = Path(args.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _input_block(args, cohort: Cohort, grid: SensitivityGrid) -> dict:
    return {"input": str(args.input), "n": cohort.n, "n_units": cohort.n_units,
            "clustered": cohort.clustered, "n_missing_cause": cohort.n_missing,
            "grid": [float(x) for x in grid.points]}


def _fit(cohort, grid):
    mfit = fit_missingness(cohort)
    return mfit, fit_functional(cohort, mfit, grid)


# --------------------------------------------------------------- commands
def cmd_fit(args) -> int:
    cohort = _load(args)
    grid = _grid(args, "-1,1,41")
    out = _out(args)
    mfit, funfit = _fit(cohort, grid)
    report = {**_input_block(args, cohort, grid), "fit": funfit.to_dict()}
    _write_json(out / "fit.json", report)
    with open(out / "curves.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cause", "eta", "coef", "estimate", "hazard_ratio", "converged"])
        for j, eta, name, b, hr, ok in funfit.tidy_rows():
            w.writerow([j, repr(eta), name, repr(b), repr(hr), int(ok)])

    print(f"n = {cohort.n} ({cohort.n_missing} missing causes"
          + (f", {cohort.n_units} clusters)" if cohort.clustered else ")"))
    if cohort.n_missing == 0:
        print("no missing causes: estimates do not depend on eta")
    try:
        k0 = grid.index_of(0.0)
    except DomainError:
        k0 = None
    if k0 is not None:
        print("MAR (eta = 0) estimates:")
        print(f"  {'cause':>5}  {'coef':<12} {'beta':>10} {'HR':>10}")
        for j in funfit.causes:
            for c, name in enumerate(funfit.covariate_names):
                b = funfit.beta(j)[k0, c]
                print(f"  {j:>5}  {name:<12} {b:>10.4f} {np.exp(b):>10.4f}")
    bad = {j: int((~funfit.converged(j)).sum()) for j in funfit.causes}
    if any(bad.values()):
        print(f"warning: non-converged grid points per cause: {bad}")
    print(f"wrote {out / 'fit.json'} and {out / 'curves.csv'}")
    return 0


def _inference_setup(args, default_grid):
    _check_inference_args(args)
    cohort = _load(args)
    grid = _grid(args, default_grid)
    out = _out(args)
    seed = _seed(args)
    mfit, funfit = _fit(cohort, grid)
    K = _contrast(args, cohort.p)
    infl = assemble_influence(cohort, funfit, mfit, args.cause)
    draws = bootstrap_sup_stats(infl, K, S=args.boot, seed=seed, threads=args.threads)
    return cohort, grid, out, seed, funfit, K, infl, draws


def cmd_band(args) -> int:
    cohort, grid, out, seed, funfit, K, infl, draws = _inference_setup(args, "-1,1,41")
    sub = _parse_floats(args.sub_range, "--sub-range") if args.sub_range else None
    if sub is not None and len(sub) != 2:
        raise DomainError("--sub-range must be lo,hi")
    res = band(funfit, draws, K, args.alpha, sub)
    report = {**_input_block(args, cohort, grid), "seed": seed, "S": args.boot,
              "covariates": list(cohort.covariate_names), "band": res.to_dict()}
    if infl.pinv_points:
        report["pseudo_inverse_at_eta"] = list(infl.pinv_points)
    _write_json(out / "band.json", report)
    res.write_csv(out / "band.csv")
    lo, hi = res.id_region
    print(f"cause {args.cause}, contrast {list(map(float, K))}, alpha {args.alpha}, S {args.boot}, seed {seed}")
    print(f"critical value c = {res.c_hat:.4f}")
    print(f"identification region [{lo:.4f}, {hi:.4f}]; "
          f"{100 * (1 - args.alpha):g}% CI [{res.ir_ci[0]:.4f}, {res.ir_ci[1]:.4f}]")
    print(f"wrote {out / 'band.json'} and {out / 'band.csv'}")
    return 0


def cmd_robustness(args) -> int:
    if not args.eta_max > 0:
        raise DomainError("--eta-max must be positive")
    if args.epsilon < 0:
        raise DomainError("--epsilon must be nonnegative")
    cohort, grid, out, seed, funfit, K, infl, draws = _inference_setup(
        args, f"{-args.eta_max!r},{args.eta_max!r},101")
    res = robustness_interval(funfit, infl, K, args.alpha, args.eta_max, args.epsilon, draws=draws)
    report = {**_input_block(args, cohort, grid), "seed": seed, "S": args.boot,
              "covariates": list(cohort.covariate_names), "robustness": res.to_dict()}
    _write_json(out / "robustness.json", report)
    print(f"cause {args.cause}, contrast {list(map(float, K))}, alpha {args.alpha}, S {args.boot}, seed {seed}")
    print(f"status: {res.status}")
    print(f"robustness interval (odds ratio): {format_interval(res.interval_odds_ratio)}")
    print(f"naive interval (odds ratio):      {format_interval(res.naive_interval_odds_ratio)}")
    print(f"wrote {out / 'robustness.json'}")
    return 0


def cmd_marginal(args) -> int:
    cohort = _load(args)
    grid = _grid(args, "-1,1,41")
    out = _out(args)
    mfit = fit_missingness(cohort)
    probs = [marginal_missing_death_prob(cohort, mfit, float(e)) for e in grid.points]
    report = {**_input_block(args, cohort, grid), "missingness": mfit.to_dict(),
              "probability": [float(x) for x in probs]}
    _write_json(out / "marginal.json", report)
    with open(out / "marginal.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["eta", "probability"])
        for e, pr in zip(grid.points, probs):
            w.writerow([repr(float(e)), repr(float(pr))])
    print(f"P(C=2 | missing cause) ranges over [{min(probs):.4f}, {max(probs):.4f}] on the grid")
    print(f"wrote {out / 'marginal.json'} and {out / 'marginal.csv'}")
    return 0


def _study_config(args) -> StudyConfig:
    cfg = load_study_config(args.config) if args.config else StudyConfig(SimDesign(), parse_grid("-1,1,41"))
    d = cfg.design
    if args.seed is None and not args.config:
        _seed(args)
    design = SimDesign(
        n=args.n or d.n, p0=d.p0, lambda0=d.lambda0, beta01=d.beta01, beta02=d.beta02,
        censor_rate=d.censor_rate, scenario=args.scenario or d.scenario,
        replicates=args.replicates or d.replicates,
        seed=d.seed if args.seed is None else args.seed, modelled_event=d.modelled_event,
    )
    return StudyConfig(
        design=design, grid=parse_grid(args.grid) if args.grid else cfg.grid,
        S=args.boot or cfg.S, alpha=cfg.alpha if args.alpha is None else args.alpha,
        oracle_n=args.oracle_n or cfg.oracle_n,
        oracle_seed=cfg.oracle_seed if args.oracle_seed is None else args.oracle_seed,
    )


def cmd_simulate(args) -> int:
    cfg = _study_config(args)
    if cfg.S < 100:
        raise DomainError("bootstrap replicates must be at least 100")
    if not 0 < cfg.alpha <= 0.5:
        raise DomainError("alpha must lie in (0, 0.5]")
    out = _out(args)
    truth = population_beta_star(cfg.design, cfg.grid.points, cfg.oracle_n, cfg.oracle_seed,
                                 cache_path=args.oracle_cache)
    rep = run_study(cfg.design, cfg.grid, cfg.S, cfg.alpha, beta_star=truth, threads=args.threads)
    (out / "report.json").write_text(rep.to_json() + "\n")
    rep.write_table1_csv(out / "table1.csv")
    row = rep.table1_row()
    print(f"scenario {cfg.design.scenario}, n {cfg.design.n}, {rep.replicates_ok} replicates "
          f"({rep.dropped} dropped), seed {cfg.design.seed}")
    print("  ".join(f"{h}={v if isinstance(v, int) else round(v, 3)}" for h, v in zip(TABLE1_COLUMNS, row)))
    print(f"wrote {out / 'report.json'} and {out / 'table1.csv'}")
    return 0


HANDLERS = {"fit": cmd_fit, "band": cmd_band, "robustness": cmd_robustness,
            "marginal": cmd_marginal, "simulate": cmd_simulate}


def _fail(exc: BaseException, code: int) -> int:
    err = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    for attr in ("row", "column", "columns", "iterations"):
        val = getattr(exc, attr, None)
        if val not in (None, []):
            err[attr] = val
    if getattr(exc, "problems", None):
        err["problems"] = [{"row": r, "message": m} for r, m in exc.problems]
    print(json.dumps(err, sort_keys=True), file=sys.stderr)
    return code


LIST_OPTIONS = ("--grid", "--contrast", "--sub-range")
_NUMERIC_LIST = re.compile(r"^-[\d.]")


def _join_list_values(argv: Sequence[str]) -> list:
    """Let ``--grid -1,1,41`` through argparse, which would read -1,1,41 as an option."""
    out, it = [], iter(argv)
    for a in it:
        if a in LIST_OPTIONS:
            nxt = next(it, None)
            if nxt is not None and _NUMERIC_LIST.match(nxt):
                out.append(f"{a}={nxt}")
                continue
            out.append(a)
            if nxt is not None:
                out.append(nxt)
        else:
            out.append(a)
    return out


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(_join_list_values(argv))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return HANDLERS[args.command](args)
    except CRSensError as exc:
        return _fail(exc, exc.exit_code)
    except OSError as exc:
        return _fail(exc, 1)
    except Exception as exc:  # noqa: BLE001 - last-resort mapping to the internal-error code
        logger.debug("internal error", exc_info=True)
        return _fail(exc, 4)


if __name__ == "__main__":
    sys.exit(main())
