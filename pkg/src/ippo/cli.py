"""Command-line entry point: ``ippo <datagen|run|tune|pha|audit|report> ...``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import datagen
from .experiment import (
    ConfigError, ExperimentConfig, SPLITS, TuningError, audit, mean_by, performance_metric,
    prepare_cell, read_results, run_experiment, tune_k, tune_lambda1, tune_regularization,
)

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL = 0, 2, 3
log = logging.getLogger("ippo")


def _float_list(text: str) -> list:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _load_config(path, overrides: dict) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(path)
    extra = {k: v for k, v in overrides.items() if v is not None}
    return ExperimentConfig.from_dict({**cfg.to_dict(), **extra}) if extra else cfg


# --- subcommands ---------------------------------------------------------------------------

def cmd_datagen(args) -> int:
    try:
        gen = datagen.GenConfig(problem=args.problem, n=args.n, d_x=args.d_x, d_l=args.d_l,
                                d_w=args.d_w, seed=args.seed)
        sigma = args.noise_sigma if args.noise_sigma is not None else datagen.calibrate_sigma(args.r2, gen)
        data, inst, meta = datagen.generate(gen.with_(noise_sigma=sigma), args.level, args.rep)
    except (datagen.GenError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    from .scenario import save_dataset

    meta["r2_target"] = args.r2 if args.noise_sigma is None else None
    out = save_dataset(args.out, data, inst, meta)
    print(f"wrote {data.n} rows to {out} (noise sigma {sigma:.6g}, measured R² {meta['r2_measured']:.4f})")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _load_config(args.config, {"output_dir": args.output_dir, "workers": args.workers})
    outcome = run_experiment(cfg, plots=not args.no_plots)
    print(f"results: {outcome.results}")
    for p in outcome.plots:
        print(f"plot: {p}")
    if outcome.errors:
        print(f"{len(outcome.errors)} method run(s) failed, see errors.csv", file=sys.stderr)
    return outcome.exit_code


def cmd_tune(args) -> int:
    cfg = _load_config(args.config, {"output_dir": args.output_dir})
    if not 0 <= args.level < len(cfg.r2_ladder) or not 0 <= args.rep < cfg.replications:
        raise ConfigError("level or replication outside the configured experiment")
    parts, _ = prepare_cell(cfg, args.level, args.rep)
    (tr, ti), (va, vi), _ = (parts[s] for s in SPLITS)
    from .bilevel import RegConfig, SolveOptions
    from .regression import LossKind

    opts = SolveOptions(node_limit=cfg.ippo_node_limit, lp_backend=cfg.lp_backend)
    if cfg.ippo_train_size is not None and args.param != "k":
        tr, ti = tr.subset(range(min(cfg.ippo_train_size, tr.n))), ti.subset(range(min(cfg.ippo_train_size, tr.n)))
    loss = LossKind(cfg.loss)
    if args.param == "k":
        best, table = tune_k(tr, ti, va, vi, args.grid or cfg.k_grid, cfg.lp_backend)
    elif args.param == "lambda1":
        best, table = tune_lambda1(tr, ti, va, vi, args.grid or cfg.lambda1_grid, opts, loss, cfg.lp_backend)
    elif args.param == "lambda2":
        row, table = tune_regularization(tr, ti, va, vi, lambda v: RegConfig.losscap(v, loss),
                                         args.grid or cfg.lambda2_grid, key="lambda2",
                                         prefer_largest=True, opts=opts, backend=cfg.lp_backend)
        best = row["lambda2"]
    else:
        row, table = tune_regularization(tr, ti, va, vi, RegConfig.ridge, args.grid or cfg.lambda3_grid,
                                         key="lambda3", prefer_largest=False, opts=opts,
                                         backend=cfg.lp_backend)
        best = row["lambda3"]
    out = Path(args.out or Path(cfg.output_dir) / f"tune_{args.param}_level{args.level:02d}_rep{args.rep:03d}")
    out.mkdir(parents=True, exist_ok=True)
    cols = [args.param, "train_cost", "valid_cost", "status"]
    with open(out / "tuning.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        w.writerows(table)
    if args.param != "k":
        from .plots import plot_tuning

        ok = [r for r in table if r.get("valid_cost") is not None]
        plot_tuning([r[args.param] for r in ok], [r["train_cost"] for r in ok],
                    [r["valid_cost"] for r in ok], out / "tuning.svg", args.param)
    for r in table:
        vc = r.get("valid_cost")
        print(f"{args.param}={r[args.param]:<8g} valid={'failed' if vc is None else format(vc, '.6g')}")
    print(f"best {args.param} = {best:g}")
    return EXIT_OK


def cmd_pha(args) -> int:
    from .bilevel import SolveOptions, build_bilevel, convex_at, kkt_reformulate, solve_kkt
    from .pha import PHAConfig, pha_solve
    from .regression import design
    from .scenario import load_dataset

    data, inst, _ = load_dataset(args.data)
    rows = range(min(args.scenarios, data.n)) if args.scenarios else range(data.n)
    tr, ti = data.subset(rows), inst.subset(rows)
    kkt = kkt_reformulate(build_bilevel(tr, ti))
    if args.fix_pattern:
        # minimum-norm least squares also works with fewer rows than coefficients
        kkt = convex_at(kkt, np.linalg.lstsq(design(tr.features), tr.responses, rcond=None)[0].T)
    try:
        cfg = PHAConfig(rho=args.rho, delta=args.delta, max_iter=args.max_iter, segments=args.segments)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res = pha_solve(kkt, cfg, trace_path=out / "pha_trace.csv")
    mono = solve_kkt(kkt, SolveOptions(node_limit=args.node_limit), tr)
    summary = {
        "scenarios": tr.n, "fix_pattern": bool(args.fix_pattern), "status": res.solution.status,
        "iterations": res.solution.stats["iterations"], "pha_objective": res.solution.objective,
        "monolithic_objective": mono.objective, "monolithic_status": mono.status,
        "abs_difference": abs(res.solution.objective - mono.objective),
        "pha_beta": res.solution.beta.beta.tolist(), "monolithic_beta": mono.beta.beta.tolist(),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    print(f"PHA {res.solution.status} after {summary['iterations']} iterations: "
          f"objective {res.solution.objective:.6f}, monolithic {mono.objective:.6f}")
    return EXIT_OK if res.converged else EXIT_PARTIAL


def cmd_audit(args) -> int:
    if not (Path(args.output_dir) / "results.csv").exists():
        raise ConfigError(f"no results.csv under {args.output_dir}")
    rep = audit(args.output_dir, tol=args.tol)
    print(f"checked {rep['rows']} rows, max abs error {rep['max_abs_error']:.3g}")
    for m in rep["mismatches"]:
        print(f"mismatch: {m['method']} r2={m['r2_target']} rep={m['replication']} {m['split']}: "
              f"{m['mean_cost']} vs {m['recomputed']!r}")
    return EXIT_OK if rep["ok"] else EXIT_PARTIAL


def cmd_report(args) -> int:
    from .plots import plot_results

    path = Path(args.results)
    if not path.exists():
        raise ConfigError(f"{path} does not exist")
    out = Path(args.out or path.parent)
    out.mkdir(parents=True, exist_ok=True)
    made = plot_results(path, out, splits=tuple(args.splits.split(",")))
    rows = read_results(path)
    means = mean_by([r for r in rows if r["split"] == args.split], "problem", "r2_target", "method")
    methods = list(dict.fromkeys(k[2] for k in means))
    print("problem r2 " + " ".join(methods) + " performance%")
    for prob, r2 in dict.fromkeys(k[:2] for k in means):
        vals = [means.get((prob, r2, m)) for m in methods]
        perf = None
        if all(m in methods for m in ("feature_based", "ippo", "perfect")):
            perf = performance_metric(means[(prob, r2, "feature_based")], means[(prob, r2, "ippo")],
                                      means[(prob, r2, "perfect")])
        cells = " ".join("-" if v is None else f"{v:.2f}" for v in vals)
        print(f"{prob} {float(r2):g} {cells} {'undefined' if perf is None else format(perf, '.1f')}")
    for p in made:
        print(f"plot: {p}")
    return EXIT_OK


# --- parser ---------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ippo", description=__doc__)
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="generate one synthetic dataset directory")
    p.add_argument("--problem", default="newsvendor", choices=("newsvendor", "shipment"))
    p.add_argument("--r2", type=float, default=0.5, help="target R², calibrated to a noise level")
    p.add_argument("--noise-sigma", type=float, help="use this noise level instead of calibrating")
    p.add_argument("--n", type=int, default=120)
    p.add_argument("--d-x", type=int, default=2)
    p.add_argument("--d-l", type=int, default=2)
    p.add_argument("--d-w", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--level", type=int, default=0, help="ladder index mixed into the data streams")
    p.add_argument("--rep", type=int, default=0, help="replication mixed into the data streams")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("run", help="run an experiment from a YAML config")
    p.add_argument("config")
    p.add_argument("--output-dir")
    p.add_argument("--workers", type=int)
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("tune", help="one tuning sweep on one experiment cell")
    p.add_argument("config")
    p.add_argument("--param", default="lambda1", choices=("lambda1", "lambda2", "lambda3", "k"))
    p.add_argument("--grid", type=_float_list, help="comma separated values, defaults to the config grid")
    p.add_argument("--level", type=int, default=0)
    p.add_argument("--rep", type=int, default=0)
    p.add_argument("--output-dir")
    p.add_argument("--out", help="directory for tuning.csv and tuning.svg")
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("pha", help="progressive hedging against the monolithic solve")
    p.add_argument("--data", required=True, help="dataset directory written by datagen")
    p.add_argument("--scenarios", type=int, default=3, help="use the first N rows (0 = all)")
    p.add_argument("--fix-pattern", action="store_true",
                   help="fix the complementarity pattern found at the least-squares fit")
    p.add_argument("--rho", type=float, default=1.0)
    p.add_argument("--delta", type=float, default=1e-4)
    p.add_argument("--max-iter", type=int, default=200)
    p.add_argument("--segments", type=int, default=32)
    p.add_argument("--node-limit", type=int, default=2000)
    p.add_argument("--out", default="pha_out")
    p.set_defaults(func=cmd_pha)

    p = sub.add_parser("audit", help="recompute every mean_cost from stored decisions")
    p.add_argument("output_dir")
    p.add_argument("--tol", type=float, default=1e-9)
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("report", help="SVG charts and a mean-cost table from results.csv")
    p.add_argument("results")
    p.add_argument("--out")
    p.add_argument("--split", default="test", choices=SPLITS, help="split used for the table")
    p.add_argument("--splits", default="test", help="comma separated splits to plot")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, TuningError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
