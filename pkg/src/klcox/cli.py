"""Command-line interface: fit, cv, simulate, evaluate, km.

Exit codes: 0 success, 2 usage or input validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass
from datetime import datetime, timezone

import numpy as np

from . import __version__
from .core import DataError, load_dataset
from .cox import CoxFitOptions, CoxKLFit, fit_cox
from .coxkl import fit_coxkl, load_scores
from .lasso import fit_coxkl_lasso
from .metrics import UndefinedMetricError, c_index, risk_stratify, write_km_csv
from .sim import _EXTERNALS_1, _EXTERNALS_2, CELLS, ExperimentReport, RunConfig, SimScenario, \
    run_cell
from .tuning import default_lambda_grid, select_tuning

log = logging.getLogger("klcox")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class NumericalFailure(RuntimeError):
    pass


@dataclass
class RunManifest:
    command: str
    config_digest: str
    seed: int | None
    tool_version: str
    started: str | None = None
    finished: str | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def _file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def config_digest(args) -> str:
    """SHA-256 of the canonical JSON of all flags plus input file digests.

    Input files enter by content, not by path. Output locations and job
    counts do not enter the digest.
    """
    cfg = {k: v for k, v in sorted(vars(args).items())
           if k not in ("func", "out", "jobs", "record_time", "verbose")}
    for key in ("data", "fit", "scores", "scenario"):
        paths = cfg.get(key)
        if paths is None:
            continue
        if isinstance(paths, list):
            cfg[key] = [_file_digest(p) for p in paths]
        else:
            cfg[key] = _file_digest(paths)
    blob = json.dumps({"args": cfg}, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def _now(args):
    return datetime.now(timezone.utc).isoformat() if args.record_time else None


def _write_manifest(args, path, started):
    m = RunManifest(args.command, config_digest(args), getattr(args, "seed", None),
                    __version__, started, _now(args))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(m.to_json())


def _write_text(path, text):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _load_inputs(args):
    ds = load_dataset(args.data)
    exts = []
    for path in args.scores or []:
        exts.extend(load_scores(path, ds))
    return ds, exts


def _require_converged(fit: CoxKLFit, args):
    if not fit.converged and not args.allow_nonconverged:
        raise NumericalFailure(f"fit did not converge after {fit.iterations} iterations "
                               f"(gradient norm {fit.gradient_norm:.3g}); "
                               "use --allow-nonconverged to keep the last iterate")


# ---------------------------------------------------------------- commands

def cmd_fit(args):
    started = _now(args)
    ds, exts = _load_inputs(args)
    etas = args.eta if args.eta is not None else [0.0] * len(exts)
    if len(etas) == 1 and len(exts) > 1:
        etas = etas * len(exts)
    if exts and len(etas) != len(exts):
        raise DataError(f"--eta needs {len(exts)} values, got {len(etas)}")
    if not exts and any(etas):
        raise DataError("--eta given without --scores")
    opts = CoxFitOptions(max_iterations=args.max_iter)
    if args.lasso:
        if args.lam is None:
            raise DataError("--lasso requires --lambda")
        fit = fit_coxkl_lasso(ds, exts, etas if exts else [], args.lam)
    elif exts:
        fit = fit_coxkl(ds, exts, etas, opts)
    else:
        fit = fit_cox(ds, opts)
    text = fit.to_json() + "\n"
    if args.out:
        _write_text(args.out, text)
        _write_manifest(args, args.out + ".manifest.json", started)
    else:
        sys.stdout.write(text)
    print(f"converged={fit.converged} objective={fit.objective:.10g} "
          f"nonzeros={fit.nonzeros}", file=sys.stderr if not args.out else sys.stdout)
    _require_converged(fit, args)
    return EXIT_OK


def cmd_cv(args):
    started = _now(args)
    ds, exts = _load_inputs(args)
    eta_grid = args.eta_grid if exts else [0.0]
    lam_grid = None
    if args.lambda_grid is not None:
        if args.lambda_grid == "auto":
            lam_grid = default_lambda_grid(ds, exts, eta_grid if eta_grid is not None else
                                           [0.0], args.n_lambda)
        else:
            lam_grid = _floats(args.lambda_grid)
    report = select_tuning(ds, exts, eta_grid, lam_grid, args.folds, args.seed)
    text = report.to_json() + "\n"
    if args.out:
        _write_text(args.out, text)
        _write_manifest(args, args.out + ".manifest.json", started)
    else:
        sys.stdout.write(text)
    sel = report.to_dict()["selected_eta"]
    print(f"selected_eta={sel} selected_lambda={report.selected_lambda} "
          f"nonconverged_fold_fits={report.nonconverged}",
          file=sys.stderr if not args.out else sys.stdout)
    return EXIT_OK


def _scenario_from_args(args):
    if args.scenario:
        with open(args.scenario, encoding="utf-8") as fh:
            sc = SimScenario.from_dict(json.load(fh))
        return [(sc.name or "custom", sc)]
    if args.cell:
        names = [c for part in args.cell for c in part.split(",") if c]
        bad = [c for c in names if c not in CELLS]
        if bad:
            raise DataError(f"unknown cell(s) {', '.join(bad)}; valid cells: "
                            f"{', '.join(CELLS)}")
        return [(c, CELLS[c]) for c in names]
    if args.n is None or args.censoring is None or args.external is None:
        raise DataError("give --cell, --scenario, or all of --n, --censoring, --external")
    table = _EXTERNALS_1 if args.setting == 1 else _EXTERNALS_2
    if args.external not in table:
        raise DataError(f"external {args.external!r} is not defined for setting "
                        f"{args.setting}; choose from {', '.join(table)}")
    name = f"n{args.n}_c{round(args.censoring * 100)}_{args.external}"
    return [(name, SimScenario(args.setting, args.n, args.censoring, 1.0, table[args.external],
                               name=name))]


def cmd_simulate(args):
    started = _now(args)
    cells = _scenario_from_args(args)
    for name, sc in cells:
        if sc.setting != args.setting:
            raise DataError(f"cell {name!r} belongs to setting {sc.setting}, not {args.setting}")
    config = RunConfig(args.reps, args.seed,
                       tuple(args.eta_grid) if args.eta_grid else None,
                       tuple(args.sweep_grid) if args.sweep_grid else None, args.folds)
    report = ExperimentReport(args.setting, config,
                              {name: run_cell(sc, config, args.jobs) for name, sc in cells})
    os.makedirs(args.out, exist_ok=True)
    _write_text(os.path.join(args.out, "report.json"), report.to_json() + "\n")
    _write_text(os.path.join(args.out, "table.csv"), report.table_csv())
    _write_text(os.path.join(args.out, "curves.csv"), report.long_csv())
    _write_manifest(args, os.path.join(args.out, "manifest.json"), started)
    for name, cell in report.cells.items():
        for method, row in cell.summary.items():
            stats = " ".join(f"{k}={row[k]:.3f}" for k in ("bias", "se", "mse", "c_index")
                             if k in row)
            print(f"{name} {method} {stats}")
    return EXIT_OK


def _read_fit(path) -> CoxKLFit:
    try:
        with open(path, encoding="utf-8") as fh:
            return CoxKLFit.from_dict(json.load(fh))
    except (KeyError, json.JSONDecodeError) as exc:
        raise DataError(f"not a fit file: {exc}", source=path) from None


def _fit_scores(fit, ds):
    if fit.beta_hat.shape != (ds.p,):
        raise DataError(f"fit has {fit.beta_hat.size} coefficients, data has {ds.p} covariates")
    return ds.covariates @ fit.beta_hat


def cmd_evaluate(args):
    started = _now(args)
    ds = load_dataset(args.data)
    if args.fit:
        scores = _fit_scores(_read_fit(args.fit), ds)
    elif args.scores:
        scores = load_scores(args.scores[0], ds)[0].scores
    else:
        raise DataError("give --fit or --scores")
    c = c_index(ds.time, ds.status, scores)
    print(f"c_index={c:.3f}")
    if args.out:
        _write_text(args.out, json.dumps({"c_index": c, "n": ds.n}, sort_keys=True) + "\n")
        _write_manifest(args, args.out + ".manifest.json", started)
    return EXIT_OK


def cmd_km(args):
    started = _now(args)
    ds = load_dataset(args.data)
    if args.fit:
        scores = _fit_scores(_read_fit(args.fit), ds)
    elif args.scores:
        scores = load_scores(args.scores[0], ds)[0].scores
    else:
        raise DataError("give --fit or --scores")
    curves, labels = risk_stratify(scores, args.cuts, ds.time, ds.status)
    sizes = np.bincount(labels, minlength=len(curves))
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="") as fh:
            write_km_csv(curves, fh)
        _write_manifest(args, args.out + ".manifest.json", started)
    else:
        write_km_csv(curves, sys.stdout)
    print("group_sizes=" + "/".join(str(int(s)) for s in sizes),
          file=sys.stderr if not args.out else sys.stdout)
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="klcox", description="Cox regression integrating external risk scores "
                                  "through a KL penalty.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--record-time", action="store_true",
                        help="store wall-clock timestamps in the run manifest "
                             "(off by default so artifacts are reproducible)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")

    def data_flags(p, scores_help):
        p.add_argument("--data", required=True, help="CSV with id,time,status,z1..zp")
        p.add_argument("--scores", action="append", metavar="FILE", help=scores_help)

    p = sub.add_parser("fit", parents=[common], help="fit Cox, CoxKL or CoxKL-LASSO")
    data_flags(p, "CSV of external scores, id,score[,score2...]; repeatable")
    p.add_argument("--eta", type=_floats, help="integration weights, one per score "
                                               "(a single value is shared)")
    p.add_argument("--lasso", action="store_true", help="add an L1 penalty")
    p.add_argument("--lambda", dest="lam", type=float, help="L1 penalty (with --lasso)")
    p.add_argument("--max-iter", type=int, default=100, help="Newton iteration cap")
    p.add_argument("--allow-nonconverged", action="store_true",
                   help="exit 0 even when the fit did not converge")
    p.add_argument("--out", help="write fit JSON here (default: stdout)")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("cv", parents=[common], help="cross-validated (eta, lambda) selection")
    data_flags(p, "CSV of external scores; repeatable")
    p.add_argument("--eta-grid", type=_floats, help="comma-separated eta candidates "
                                                    "(default 0 and 15 log-spaced in [0.01, 100])")
    p.add_argument("--lambda-grid", help="comma-separated lambda values, or 'auto'; "
                                         "omit for unpenalised fits")
    p.add_argument("--n-lambda", type=int, default=100, help="grid size for --lambda-grid auto")
    p.add_argument("--folds", type=int, default=5, help="number of folds V")
    p.add_argument("--seed", type=int, default=0, help="fold assignment seed")
    p.add_argument("--out", help="write the CV report JSON here (default: stdout)")
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("simulate", parents=[common], help="run simulation cells")
    p.add_argument("--setting", type=int, choices=(1, 2), required=True)
    p.add_argument("--cell", action="append", help="named cell(s), comma-separated; "
                                                   "see --list-cells")
    p.add_argument("--scenario", help="JSON scenario file instead of a named cell")
    p.add_argument("--n", type=int, help="internal sample size (explicit cell)")
    p.add_argument("--censoring", type=float, help="censoring rate target (explicit cell)")
    p.add_argument("--external", help="external setting name, e.g. E2 (explicit cell)")
    p.add_argument("--reps", type=int, default=500, help="Monte Carlo replicates")
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--eta-grid", type=_floats, help="CV eta candidates")
    p.add_argument("--sweep-grid", type=_floats, help="eta values for the sweep curves")
    p.add_argument("--folds", type=int, default=5, help="CV folds")
    p.add_argument("--jobs", type=int, default=1, help="parallel replicate workers")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--list-cells", action=_ListCells, nargs=0,
                   help="print the named cells and exit")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("evaluate", parents=[common], help="C-index of a fit or score")
    p.add_argument("--data", required=True, help="evaluation CSV")
    p.add_argument("--fit", help="fit JSON from 'klcox fit'")
    p.add_argument("--scores", action="append", metavar="FILE",
                   help="score CSV (first score column is used)")
    p.add_argument("--out", help="write {c_index, n} JSON here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("km", parents=[common], help="Kaplan-Meier curves by risk group")
    p.add_argument("--data", required=True, help="CSV with id,time,status,z1..zp")
    p.add_argument("--fit", help="fit JSON giving the risk score")
    p.add_argument("--scores", action="append", metavar="FILE",
                   help="score CSV (first score column is used)")
    p.add_argument("--cuts", type=_floats, default=[20.0, 80.0],
                   help="percentile cutpoints, e.g. 20,80")
    p.add_argument("--out", help="write group,t,survival CSV here (default: stdout)")
    p.set_defaults(func=cmd_km)
    return parser


class _ListCells(argparse.Action):
    def __call__(self, parser, namespace, values, option_string=None):
        for name, sc in CELLS.items():
            print(f"{name}\tsetting={sc.setting} n={sc.n_internal} "
                  f"censoring={sc.censoring_target:g}")
        parser.exit(0)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (DataError, UndefinedMetricError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalFailure, np.linalg.LinAlgError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
