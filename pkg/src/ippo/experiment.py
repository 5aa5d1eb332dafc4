"""R²-ladder experiments: generate, split, run every method, tune on validation, write CSV.

Each (R² level, replication) pair is a cell with its own directory under
``<output_dir>/cells``. A cell keeps the dataset it was run on, the split
indices, every method's decisions per split and the rows it contributed, so
a rerun skips whatever is already there and ``audit`` can recompute every
reported cost from disk. ``results.csv`` is always rebuilt from the cell
files in a fixed order, which makes it independent of interruptions and of
the order in which cells finished.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import datagen
from .bilevel import IPPOError, RegConfig, SolveOptions, build_bilevel, kkt_reformulate, solve_ippo
from .linsolve import SolverError
from .pha import PHAConfig, pha_solve
from .prescriptors import (
    K_GRID, deterministic_decisions, evaluate_rule, feature_based_fit, knn, point_estimate, saa,
)
from .regression import LossKind, RegressionParams, ols_fit
from .scenario import NEWSVENDOR, PROBLEMS, load_dataset, save_dataset, scenario_costs

log = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")
METHODS = ("perfect", "point_estimate", "saa", "knn", "feature_based", "ippo",
           "ippo_losscap", "ippo_ridge", "ippo_pha")
RESULT_COLUMNS = ("problem", "method", "r2_target", "r2_measured", "replication", "split",
                  "mean_cost", "hyperparams", "runtime_s")
ERROR_COLUMNS = ("problem", "method", "r2_target", "replication", "error")
LAMBDA1_GRID = tuple(round(0.1 * i, 1) for i in range(11))
LAMBDA2_GRID = (1.0, 1.05, 1.1, 1.25, 1.5, 2.0)
LAMBDA3_GRID = (0.0, 0.001, 0.01, 0.1, 1.0)
TIE_TOL = 1e-9


class ConfigError(ValueError):
    pass


class TuningError(RuntimeError):
    pass


def _f(v) -> str:
    return format(float(v), ".17g")


# --- configuration -------------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentConfig:
    problem: str = NEWSVENDOR
    d_x: int = 2
    d_l: int = 2
    d_w: int = 2
    n: int = 120
    split_fractions: tuple = (0.7, 0.15, 0.15)
    replications: int = 30
    r2_ladder: tuple = datagen.DESK_R2_LADDER
    methods: tuple = ("perfect", "point_estimate", "saa", "knn", "feature_based", "ippo")
    lambda1_grid: tuple = LAMBDA1_GRID
    lambda2_grid: tuple = LAMBDA2_GRID
    lambda3_grid: tuple = LAMBDA3_GRID
    k_grid: tuple = K_GRID
    pha: dict = field(default_factory=dict)
    seed: int = 0
    output_dir: str = "results"
    ippo_train_size: Optional[int] = None
    ippo_node_limit: int = 10
    loss: str = "absolute"
    cost_ranges: dict = None
    lp_backend: str = "highs"
    workers: int = 1
    record_runtime: bool = False

    def __post_init__(self):
        tup = ("split_fractions", "r2_ladder", "methods", "lambda1_grid", "lambda2_grid",
               "lambda3_grid", "k_grid")
        for name in tup:
            object.__setattr__(self, name, tuple(getattr(self, name)))
        object.__setattr__(self, "pha", dict(self.pha or {}))
        if self.problem not in PROBLEMS:
            raise ConfigError(f"problem must be one of {PROBLEMS}")
        if self.replications < 1:
            raise ConfigError("replications must be at least 1")
        lad = np.asarray(self.r2_ladder, dtype=float)
        if lad.size < 1 or np.any(lad <= 0) or np.any(lad >= 1) or np.any(np.diff(lad) <= 0):
            raise ConfigError("r2_ladder must be strictly increasing inside (0, 1)")
        bad = [m for m in self.methods if m not in METHODS]
        if bad or not self.methods:
            raise ConfigError(f"unknown methods {bad}; choose from {METHODS}")
        if not self.lambda1_grid or any(not 0 <= v <= 1 for v in self.lambda1_grid):
            raise ConfigError("lambda1_grid must be a nonempty subset of [0, 1]")
        if not self.lambda2_grid or any(v < 1 for v in self.lambda2_grid):
            raise ConfigError("lambda2_grid values must be >= 1")
        if not self.lambda3_grid or any(v < 0 for v in self.lambda3_grid):
            raise ConfigError("lambda3_grid values must be >= 0")
        if not self.k_grid or any(int(k) != k or k < 1 for k in self.k_grid):
            raise ConfigError("k_grid must hold positive integers")
        if (self.ippo_train_size is not None and self.ippo_train_size < 1) \
                or self.ippo_node_limit < 1 or self.workers < 1:
            raise ConfigError("ippo_train_size, ippo_node_limit and workers must be positive")
        if self.lp_backend not in ("simplex", "highs"):
            raise ConfigError("lp_backend must be 'simplex' or 'highs'")
        try:
            LossKind(self.loss)
            datagen.SplitSpec(self.split_fractions)
            datagen.split_sizes(self.n, self.split_fractions)
            PHAConfig(**self.pha)
            self.gen_config()
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("the configuration must be a key/value mapping")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown configuration keys {unknown}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        try:
            d = yaml.safe_load(Path(path).read_text())
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read {path}: {exc}") from exc
        return cls.from_dict(d or {})

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def gen_config(self, noise_sigma: float = 0.0) -> datagen.GenConfig:
        return datagen.GenConfig(problem=self.problem, n=self.n, d_x=self.d_x, d_l=self.d_l,
                                 d_w=self.d_w, noise_sigma=noise_sigma, cost_ranges=self.cost_ranges,
                                 seed=self.seed)


# --- metrics and tuning ------------------------------------------------------------------

def performance_metric(feature_based_cost: float, ippo_cost: float, true_cost: float):
    """Percent by which the feature-based gap to foresight exceeds the IPPO gap; None if undefined."""
    denom = ippo_cost - true_cost
    if not denom > 0:
        return None
    return 100.0 * ((feature_based_cost - true_cost) / denom - 1.0)


def ippo_validation_cost(beta, valid, valid_inst, backend="highs") -> float:
    return point_estimate(RegressionParams(beta), valid, valid_inst, backend).mean_cost


def _pick(table, key, prefer_largest: bool):
    ok = [r for r in table if r.get("valid_cost") is not None]
    if not ok:
        raise TuningError("every grid point failed")
    best = min(r["valid_cost"] for r in ok)
    tied = [r for r in ok if r["valid_cost"] <= best + TIE_TOL * max(1.0, abs(best))]
    return (max if prefer_largest else min)(tied, key=lambda r: r[key])


def tune_regularization(train, train_inst, valid, valid_inst, reg_factory, grid, *, key,
                        prefer_largest, opts: SolveOptions | None = None, backend="highs"):
    """Solve IPPO on ``train`` per grid value and keep the one with the lowest validation cost."""
    if not grid:
        raise TuningError("empty grid")
    table = []
    for v in grid:
        row = {key: float(v)}
        t0 = time.perf_counter()
        try:
            sol = solve_ippo(train, train_inst, reg_factory(float(v)), opts)
            row.update(train_cost=sol.train_cost, objective=sol.objective, status=sol.status,
                       beta=sol.beta.beta.tolist(),
                       valid_cost=ippo_validation_cost(sol.beta.beta, valid, valid_inst, backend))
        except (IPPOError, SolverError, ValueError) as exc:
            row.update(valid_cost=None, error=str(exc))
        row["seconds"] = time.perf_counter() - t0
        table.append(row)
    return _pick(table, key, prefer_largest), table


def tune_lambda1(train, train_inst, valid, valid_inst, grid=LAMBDA1_GRID, opts=None,
                 loss=LossKind.ABSOLUTE, backend="highs"):
    """Best weighted-loss lambda1 on validation; ties go to the largest lambda1."""
    if any(not 0 <= v <= 1 for v in grid):
        raise TuningError("lambda1 grid must lie in [0, 1]")
    best, table = tune_regularization(train, train_inst, valid, valid_inst,
                                      lambda v: RegConfig.weighted(v, loss), grid,
                                      key="lambda1", prefer_largest=True, opts=opts, backend=backend)
    return best["lambda1"], table


def tune_k(train, train_inst, valid, valid_inst, grid=K_GRID, backend="highs"):
    """Best neighbourhood size on validation; ties go to the smallest k. Values above n are skipped."""
    ks = sorted({int(k) for k in grid if 1 <= int(k) <= train.n})
    if not ks:
        raise TuningError(f"no k in {tuple(grid)} fits {train.n} training rows")
    table = []
    for k in ks:
        try:
            c = knn(train, train_inst, valid, valid_inst, k, backend).mean_cost
        except SolverError as exc:
            table.append({"k": k, "valid_cost": None, "error": str(exc)})
            continue
        table.append({"k": k, "valid_cost": c})
    return _pick(table, "k", prefer_largest=False)["k"], table


# --- one cell ------------------------------------------------------------------------------

_SIGMA_CACHE: dict = {}


def level_sigma(cfg: ExperimentConfig, r2: float) -> float:
    key = (json.dumps(cfg.gen_config().to_dict(), sort_keys=True), float(r2))
    if key not in _SIGMA_CACHE:
        _SIGMA_CACHE[key] = datagen.calibrate_sigma(r2, cfg.gen_config())
    return _SIGMA_CACHE[key]


def cell_dir(cfg: ExperimentConfig, level: int, rep: int) -> Path:
    return Path(cfg.output_dir) / "cells" / f"level{level:02d}_rep{rep:03d}"


def prepare_cell(cfg: ExperimentConfig, level: int, rep: int):
    """Generate (or reload) the cell's dataset and split it."""
    d = cell_dir(cfg, level, rep)
    r2 = cfg.r2_ladder[level]
    if (d / "data" / "meta.json").exists() and (d / "splits.json").exists():
        data, inst, meta = load_dataset(d / "data")
        rows = [np.array(v, dtype=int) for v in json.loads((d / "splits.json").read_text())["rows"]]
    else:
        gen = cfg.gen_config(level_sigma(cfg, r2))
        data, inst, meta = datagen.generate(gen, level, rep)
        meta["r2_target"] = r2
        rows = datagen.split_rows(data.n, datagen.SplitSpec(cfg.split_fractions, cfg.seed), level, rep)
        save_dataset(d / "data", data, inst, meta)
        (d / "splits.json").write_text(json.dumps({"rows": [r.tolist() for r in rows]}) + "\n")
    parts = {s: (data.subset(r), inst.subset(r)) for s, r in zip(SPLITS, rows)}
    return parts, meta


def _method_decisions(method, cfg: ExperimentConfig, parts, diag: dict):
    """Decisions per split for one method plus its hyperparameters."""
    (tr, ti), (va, vi), _ = (parts[s] for s in SPLITS)
    be = cfg.lp_backend
    sub = tr.n if cfg.ippo_train_size is None else min(cfg.ippo_train_size, tr.n)
    itr, iti = tr.subset(range(sub)), ti.subset(range(sub))
    opts = SolveOptions(node_limit=cfg.ippo_node_limit, lp_backend=be)
    loss = LossKind(cfg.loss)
    if method == "perfect":
        return {s: deterministic_decisions(parts[s][0].responses, parts[s][1], be) for s in SPLITS}, {}
    if method == "point_estimate":
        p = ols_fit(tr.features, tr.responses)
        return {s: point_estimate(p, *parts[s], be).decisions for s in SPLITS}, {}
    if method == "saa":
        return {s: saa(tr, ti, *parts[s], be).decisions for s in SPLITS}, {}
    if method == "knn":
        k, table = tune_k(tr, ti, va, vi, cfg.k_grid, be)
        diag["knn_tuning"] = table
        return {s: knn(tr, ti, *parts[s], k, be).decisions for s in SPLITS}, {"k": k}
    if method == "feature_based":
        rule = feature_based_fit(tr, ti, backend=be)
        return {s: evaluate_rule(rule, *parts[s]).decisions for s in SPLITS}, {}
    if method in ("ippo", "ippo_losscap", "ippo_ridge"):
        if method == "ippo":
            lam, table = tune_lambda1(itr, iti, va, vi, cfg.lambda1_grid, opts, loss, be)
            hyper = {"lambda1": lam}
        elif method == "ippo_losscap":
            best, table = tune_regularization(itr, iti, va, vi, lambda v: RegConfig.losscap(v, loss),
                                              cfg.lambda2_grid, key="lambda2", prefer_largest=True,
                                              opts=opts, backend=be)
            hyper = {"lambda2": best["lambda2"]}
        else:
            best, table = tune_regularization(itr, iti, va, vi, RegConfig.ridge, cfg.lambda3_grid,
                                              key="lambda3", prefer_largest=False, opts=opts, backend=be)
            hyper = {"lambda3": best["lambda3"]}
        diag[f"{method}_tuning"] = table
        key = next(iter(hyper))
        beta = np.array(next(r for r in table if r[key] == hyper[key])["beta"])
        p = RegressionParams(beta)
        return {s: point_estimate(p, *parts[s], be).decisions for s in SPLITS}, hyper
    if method == "ippo_pha":
        kkt = kkt_reformulate(build_bilevel(itr, iti))
        res = pha_solve(kkt, PHAConfig(**cfg.pha))
        diag["ippo_pha"] = {"status": res.solution.status, "objective": res.solution.objective,
                            "iterations": res.solution.stats["iterations"]}
        p = res.solution.beta
        return {s: point_estimate(p, *parts[s], be).decisions for s in SPLITS}, {"rho": PHAConfig(**cfg.pha).rho}
    raise ConfigError(f"unknown method {method!r}")


def _hyper_text(h: dict) -> str:
    return json.dumps(h, sort_keys=True, separators=(",", ":"))


def run_cell(cfg: ExperimentConfig, level: int, rep: int) -> list:
    """Run every missing method of one cell; returns error records (empty on success)."""
    d = cell_dir(cfg, level, rep)
    d.mkdir(parents=True, exist_ok=True)
    parts, meta = prepare_cell(cfg, level, rep)
    rows_path = d / "rows.json"
    done = json.loads(rows_path.read_text()) if rows_path.exists() else {}
    diag_path = d / "diagnostics.json"
    diag = json.loads(diag_path.read_text()) if diag_path.exists() else {}
    errors = []
    for method in cfg.methods:
        if method in done:
            continue
        t0 = time.perf_counter()
        try:
            decisions, hyper = _method_decisions(method, cfg, parts, diag)
        except (TuningError, IPPOError, SolverError, ValueError, RuntimeError) as exc:
            log.warning("cell %d/%d method %s failed: %s", level, rep, method, exc)
            errors.append({"problem": cfg.problem, "method": method, "r2_target": cfg.r2_ladder[level],
                           "replication": rep, "error": f"{type(exc).__name__}: {exc}"})
            diag.setdefault("tracebacks", {})[method] = traceback.format_exc()
            continue
        runtime = time.perf_counter() - t0
        rows = []
        for s in SPLITS:
            D = np.atleast_2d(decisions[s])
            np.savetxt(d / f"decisions_{method}_{s}.csv", D, fmt="%.17g", delimiter=",")
            cost = float(np.mean(scenario_costs(D, *parts[s])))
            rows.append({
                "problem": cfg.problem, "method": method, "r2_target": _f(cfg.r2_ladder[level]),
                "r2_measured": _f(meta["r2_measured"]), "replication": rep, "split": s,
                "mean_cost": _f(cost), "hyperparams": _hyper_text(hyper),
                "runtime_s": f"{runtime:.3f}" if cfg.record_runtime else "",
            })
        done[method] = rows
        rows_path.write_text(json.dumps(done, indent=1, sort_keys=True) + "\n")
        diag_path.write_text(json.dumps(diag, indent=1, sort_keys=True, default=float) + "\n")
    return errors


def _run_cell_job(args):
    cfg, level, rep = args
    return level, rep, run_cell(cfg, level, rep)


# --- whole experiment ------------------------------------------------------------------------

def collect_rows(cfg: ExperimentConfig) -> list:
    out = []
    for level in range(len(cfg.r2_ladder)):
        for rep in range(cfg.replications):
            p = cell_dir(cfg, level, rep) / "rows.json"
            done = json.loads(p.read_text()) if p.exists() else {}
            for m in cfg.methods:
                out.extend(done.get(m, []))
    return out


def write_results(cfg: ExperimentConfig, rows) -> Path:
    path = Path(cfg.output_dir) / "results.csv"
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=RESULT_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: r[k] for k in RESULT_COLUMNS})
    path.write_text(buf.getvalue())
    return path


def write_errors(cfg: ExperimentConfig, errors) -> Path:
    path = Path(cfg.output_dir) / "errors.csv"
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ERROR_COLUMNS, lineterminator="\n")
        w.writeheader()
        for e in sorted(errors, key=lambda e: (float(e["r2_target"]), e["replication"], e["method"])):
            w.writerow(e)
    return path


@dataclass
class ExperimentOutcome:
    results: Path
    errors: list
    plots: list

    @property
    def exit_code(self) -> int:
        return 3 if self.errors else 0


def run_experiment(cfg: ExperimentConfig, plots: bool = True) -> ExperimentOutcome:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg_text = yaml.safe_dump(cfg.to_dict(), sort_keys=True)
    (out / "config.yaml").write_text(cfg_text)
    jobs = [(cfg, lv, rp) for lv in range(len(cfg.r2_ladder)) for rp in range(cfg.replications)]
    errors = []
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            for _, _, errs in pool.map(_run_cell_job, jobs):
                errors.extend(errs)
    else:
        for job in jobs:
            errors.extend(_run_cell_job(job)[2])
    path = write_results(cfg, collect_rows(cfg))
    write_errors(cfg, errors)
    made = []
    if plots:
        from .plots import plot_results
        made = plot_results(path, out)
    return ExperimentOutcome(path, errors, made)


# --- reading results back ----------------------------------------------------------------------

def read_results(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def mean_by(rows, *keys, value="mean_cost") -> dict:
    acc: dict = {}
    for r in rows:
        acc.setdefault(tuple(r[k] for k in keys), []).append(float(r[value]))
    return {k: float(np.mean(v)) for k, v in sorted(acc.items())}


def audit(output_dir, tol: float = 1e-9) -> dict:
    """Recompute every mean_cost in results.csv from the stored datasets and decisions."""
    out = Path(output_dir)
    cfg = ExperimentConfig.from_file(out / "config.yaml")
    checked, worst, bad = 0, 0.0, []
    cache: dict = {}
    for r in read_results(out / "results.csv"):
        level = cfg.r2_ladder.index(float(r["r2_target"]))
        rep = int(r["replication"])
        d = cell_dir(cfg, level, rep)
        if d not in cache:
            data, inst, _ = load_dataset(d / "data")
            rows = json.loads((d / "splits.json").read_text())["rows"]
            cache = {d: {s: (data.subset(ix), inst.subset(ix)) for s, ix in zip(SPLITS, rows)}}
        data, inst = cache[d][r["split"]]
        D = np.atleast_2d(np.loadtxt(d / f"decisions_{r['method']}_{r['split']}.csv", delimiter=",", ndmin=2))
        cost = float(np.mean(scenario_costs(D, data, inst)))
        err = abs(cost - float(r["mean_cost"]))
        worst = max(worst, err)
        checked += 1
        if err > tol:
            bad.append({**r, "recomputed": cost})
    return {"rows": checked, "max_abs_error": worst, "mismatches": bad, "ok": not bad}
