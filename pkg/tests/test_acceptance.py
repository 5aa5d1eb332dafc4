"""End-to-end acceptance checks, one test per criterion.

Each test records a verdict that conftest prints as a PASS/FAIL line at the end
of the run. Criteria 8 to 10 run full experiments; set IPPO_ACCEPT_DIR to a
directory to keep (and resume) those runs instead of using a temporary one.
"""
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.optimize import linprog
from scipy.stats import spearmanr

from conftest import VERDICTS
from generators import random_lp_arrays, random_pair_model
from oracles import enumerate_branches, highs_lp, lp_vertex_enumeration

from ippo import datagen
from ippo.bilevel import (
    NO_REG, RegConfig, SolveOptions, build_bilevel, convex_at, default_beta_bounds, kkt_reformulate,
    solve_ippo,
)
from ippo.experiment import (
    ExperimentConfig, SPLITS, audit, cell_dir, mean_by, prepare_cell, read_results, run_experiment,
)
from ippo.linsolve import LE, LinearProgram, Status, certificate_residuals, solve_lp, solve_milp
from ippo.pha import PHAConfig, pha_solve
from ippo.prescriptors import (
    deterministic_decisions, evaluate_rule, feature_based_fit, knn, point_estimate, saa,
)
from ippo.regression import RegressionParams, design, ols_fit
from ippo.scenario import Dataset, scenario_costs

ROOT = Path(__file__).resolve().parents[1]


def record(k, ok, detail):
    VERDICTS[k] = (bool(ok), detail)
    assert ok, detail


@pytest.fixture(scope="session")
def runs_dir(tmp_path_factory):
    keep = os.environ.get("IPPO_ACCEPT_DIR")
    if keep:
        Path(keep).mkdir(parents=True, exist_ok=True)
        return Path(keep)
    return tmp_path_factory.mktemp("acceptance_runs")


def config_in(name, runs_dir, **override):
    cfg = ExperimentConfig.from_file(ROOT / "configs" / f"{name}.yaml")
    return ExperimentConfig.from_dict({**cfg.to_dict(), "output_dir": str(runs_dir / name), **override})


# --- 1. LP against vertex enumeration --------------------------------------------------------

def test_criterion_01_lp_oracle():
    rng = np.random.default_rng(2024)
    bad, optimal, spent = [], 0, 0.0
    for i in range(200):
        c, A, b = random_lp_arrays(rng)
        lp = LinearProgram(c, A, (LE,) * len(b), b, np.zeros(len(c)), np.full(len(c), np.inf))
        t0 = time.perf_counter()
        sol = solve_lp(lp)
        spent += time.perf_counter() - t0
        kind = highs_lp(lp)
        if kind is None or kind == -np.inf:
            # vertex enumeration only speaks for feasible, bounded programs
            want = Status.INFEASIBLE if kind is None else Status.UNBOUNDED
            if sol.status != want:
                bad.append((i, sol.status, want))
            continue
        ref = lp_vertex_enumeration(c, A, b)
        optimal += 1
        if sol.status != Status.OPTIMAL:
            bad.append((i, sol.status, ref))
            continue
        cert = certificate_residuals(lp, sol)
        if (abs(sol.objective_value - ref) > 1e-7 or cert["duality_gap"] > 1e-7
                or cert["primal_infeasibility"] > 1e-7 or cert["dual_infeasibility"] > 1e-7):
            bad.append((i, sol.status, sol.objective_value, ref, cert))
    ok = not bad and spent < 10.0
    record(1, ok, f"200 LPs ({optimal} optimal), {len(bad)} mismatches, solver time {spent:.2f}s")


# --- 2. MILP against branch enumeration --------------------------------------------------------

def test_criterion_02_milp_oracle():
    rng = np.random.default_rng(77)
    bad, spent = [], 0.0
    for i in range(50):
        m = random_pair_model(rng, 1 + i % 12, n_binaries=i % 3)
        t0 = time.perf_counter()
        sol = solve_milp(m, gap_tol=0.0)
        spent += time.perf_counter() - t0
        ref = enumerate_branches(m)
        if np.isinf(ref):
            if sol.status != Status.INFEASIBLE:
                bad.append((i, sol.status))
        elif sol.status != Status.OPTIMAL or abs(sol.objective_value - ref) > 1e-7:
            bad.append((i, sol.status, sol.objective_value, ref))
    record(2, not bad and spent < 60.0, f"50 models, {len(bad)} mismatches, solver time {spent:.2f}s")


# --- 3. IPPO against a brute-force grid ----------------------------------------------------------

GRID = np.arange(-2000, 2001) / 100.0


def grid_oracle(x, y, c, b, h):
    """Lowest mean realized cost over the coefficient grid, ordering max(prediction, 0) when b > c."""
    best = np.inf
    for b0 in np.array_split(GRID, 40):
        tot = 0.0
        for n in range(len(y)):
            q = np.maximum(b0[:, None] + GRID[None, :] * x[n], 0.0) * (b[n] > c[n])
            tot = tot + c[n] * q + b[n] * np.maximum(y[n] - q, 0) + h[n] * np.maximum(q - y[n], 0)
        best = min(best, float(tot.min()) / len(y))
    return best


def quantized_instance(seed, n):
    # integer features in [-2, 2] and demands on a 0.12 lattice put every kink of the
    # cost surface, and so every candidate optimum, exactly on the 0.01 grid
    cfg = datagen.GenConfig(problem="newsvendor", n=n, d_x=1, d_l=1, noise_sigma=5.0, seed=seed)
    data, inst, _ = datagen.generate(cfg)
    x = np.clip(np.round(data.features), -2, 2)
    y = np.round(data.responses / 0.12) * 0.12
    return Dataset(x, y), inst


def test_criterion_03_grid_oracle():
    t0 = time.perf_counter()
    worst, bad = 0.0, []
    for s in range(30):
        data, inst = quantized_instance(300 + s, 2 + s % 3)
        sol = solve_ippo(data, inst, bounds=(-20.0, 20.0),
                         opts=SolveOptions(gap_tol=0.0, node_limit=100_000, use_data_seeds=False))
        ref = grid_oracle(data.features[:, 0], data.responses[:, 0], inst.order_cost[:, 0],
                          inst.backorder_cost[:, 0], inst.holding_cost[:, 0])
        err = abs(sol.objective - ref)
        worst = max(worst, err)
        if sol.status != "Optimal" or err > 0.05:
            bad.append((s, sol.status, sol.objective, ref))
    spent = time.perf_counter() - t0
    record(3, not bad and spent < 300, f"30 instances, max |MILP - grid| {worst:.2e}, {spent:.1f}s")


# --- 4. regularization endpoints ------------------------------------------------------------------

def lad_oracle(data):
    """Mean absolute residual of the best affine fit, from scipy's LP solver."""
    Xd = design(data.features)
    N, p = Xd.shape
    total = 0.0
    for j in range(data.d_l):
        # variables: beta (free), e+ , e-
        c = np.concatenate([np.zeros(p), np.ones(2 * N)])
        A = np.hstack([Xd, -np.eye(N), np.eye(N)])
        res = linprog(c, A_eq=A, b_eq=data.responses[:, j],
                      bounds=[(None, None)] * p + [(0, None)] * (2 * N), method="highs")
        total += res.fun
    return total / (N * data.d_l)


def mean_abs_residual(beta, data):
    return float(np.mean(np.abs(data.responses - design(data.features) @ np.asarray(beta).T)))


def test_criterion_04_degenerate_weights():
    out, ok = [], True
    for problem, seed in (("newsvendor", 41), ("shipment", 42)):
        cfg = datagen.GenConfig(problem=problem, n=6, d_l=2 if problem == "newsvendor" else 3,
                                noise_sigma=5.0, seed=seed)
        data, inst, _ = datagen.generate(cfg)
        opts = SolveOptions(gap_tol=0.0)
        plain = solve_ippo(data, inst, NO_REG, opts)
        one = solve_ippo(data, inst, RegConfig.weighted(1.0), opts)
        ridge0 = solve_ippo(data, inst, RegConfig.ridge(0.0), opts)
        zero = solve_ippo(data, inst, RegConfig.weighted(0.0), opts)
        cap = solve_ippo(data, inst, RegConfig.losscap(1.0), opts)
        lad = lad_oracle(data)
        checks = {
            "lambda1=1": abs(one.objective - plain.objective) <= 1e-9,
            "lambda3=0": abs(ridge0.objective - one.objective) <= 1e-9,
            "lambda1=0": abs(zero.objective - lad) <= 1e-6
            and abs(mean_abs_residual(zero.beta.beta, data) - lad) <= 1e-6,
            "lambda2=1": abs(mean_abs_residual(cap.beta.beta, data) - lad) <= 1e-6,
        }
        ok &= all(checks.values())
        failed = [k for k, v in checks.items() if not v]
        out.append(f"{problem}: " + (", ".join(failed) + " failed" if failed else "all four hold"))
    record(4, ok, "; ".join(out))


# --- 5. zero slopes reduce to the scenario program ----------------------------------------------

def test_criterion_05_zero_slopes_equal_saa():
    gaps, proven = [], 0
    for s in range(10):
        problem = "newsvendor" if s % 2 == 0 else "shipment"
        cfg = datagen.GenConfig(problem=problem, n=8, d_l=2 if problem == "newsvendor" else 3,
                                noise_sigma=8.0, seed=500 + s)
        data, inst, _ = datagen.generate(cfg)
        inst = inst.subset(np.zeros(data.n, dtype=int))  # every row gets row 0's costs
        lo, hi = default_beta_bounds(data)
        lo[:, 1:] = hi[:, 1:] = 0.0
        sol = solve_ippo(data, inst, bounds=(lo, hi), opts=SolveOptions(gap_tol=0.0))
        ref = saa(data, inst, data, inst, backend="highs").mean_cost
        gaps.append(abs(sol.objective - ref))
        proven += sol.status == "Optimal"
    record(5, max(gaps) <= 1e-6, f"10 instances, max |IPPO - SAA| {max(gaps):.2e}, {proven} proven optimal")


# --- 6. dominance relations at desk scale ----------------------------------------------------------

def dominance_violations(problem, rep, runs_dir):
    cfg = ExperimentConfig(problem=problem, d_l=2 if problem == "newsvendor" else 3, replications=30,
                           r2_ladder=(0.34,), output_dir=str(runs_dir / f"dominance_{problem}"))
    parts, _ = prepare_cell(cfg, 0, rep)
    (tr, ti) = parts["train"]
    be = "highs"
    cost = {}
    for s in SPLITS:
        cost[("perfect", s)] = float(np.mean(scenario_costs(deterministic_decisions(parts[s][0].responses,
                                                                                    parts[s][1], be), *parts[s])))
    ols = ols_fit(tr.features, tr.responses)
    rule = feature_based_fit(tr, ti, backend=be)
    ip = solve_ippo(tr, ti, opts=SolveOptions(node_limit=10, lp_backend=be))
    saa_res = {s: saa(tr, ti, *parts[s], be) for s in SPLITS}
    for s in SPLITS:
        cost[("point_estimate", s)] = point_estimate(ols, *parts[s], be).mean_cost
        cost[("saa", s)] = saa_res[s].mean_cost
        cost[("feature_based", s)] = evaluate_rule(rule, *parts[s]).mean_cost
        cost[("ippo", s)] = point_estimate(RegressionParams(ip.beta.beta), *parts[s], be).mean_cost
    bad = []
    for (m, s), v in cost.items():
        if v < cost[("perfect", s)] - 1e-9:
            bad.append(f"{m}<{s} perfect")
    full = knn(tr, ti, tr, ti, tr.n, be)
    if not np.array_equal(full.decisions, saa_res["train"].decisions):
        bad.append("knn(k=N) differs from SAA")
    if cost[("feature_based", "train")] > cost[("saa", "train")] + 1e-9:
        bad.append("feature-based train above SAA")
    if ip.objective > cost[("point_estimate", "train")] + 1e-9:
        bad.append("IPPO train above OLS")
    return bad


@pytest.mark.slow
def test_criterion_06_dominance(runs_dir):
    t0 = time.perf_counter()
    bad = [(p, r, v) for p in ("newsvendor", "shipment") for r in range(30)
           for v in dominance_violations(p, r, runs_dir)]
    record(6, not bad, f"60 replications, {len(bad)} violations {bad[:3]}, {time.perf_counter() - t0:.0f}s")


# --- 7. progressive hedging on convex instances ---------------------------------------------------

@pytest.mark.xfail(strict=True, reason="at rho=1 three of the ten instances still oscillate after "
                                       "200 iterations; see the decision ledger")
def test_criterion_07_pha_convergence():
    t0 = time.perf_counter()
    fails, sum_w = [], 0.0
    for seed in range(10):
        cfg = datagen.GenConfig(problem="newsvendor", d_l=1, d_x=1, seed=seed, noise_sigma=3.0)
        data, inst, _ = datagen.generate(cfg, 0)
        tr, ti = data.subset(range(3)), inst.subset(range(3))
        kkt = kkt_reformulate(build_bilevel(tr, ti))
        lp = convex_at(kkt, ols_fit(tr.features, tr.responses).beta)
        ref = solve_milp(lp.build()).objective_value
        res = pha_solve(lp, PHAConfig(rho=1.0, delta=1e-6, max_iter=200))
        scale = 1.0 + float(np.max(np.abs(res.state.w)))
        sum_w = max(sum_w, max(t["sum_w"] for t in res.trace) / scale)
        err = abs(res.solution.objective - ref)
        if err > 1e-3:
            fails.append((seed, round(err, 4), res.solution.status))
    # identical scenarios agree from the start
    cfg = datagen.GenConfig(problem="newsvendor", d_l=1, d_x=1, seed=2, noise_sigma=3.0)
    data, inst, _ = datagen.generate(cfg, 0)
    same = [0, 0, 0]
    kkt = kkt_reformulate(build_bilevel(Dataset(data.features[same], data.responses[same]), inst.subset(same)))
    first = pha_solve(kkt, PHAConfig(delta=1e-9)).solution.stats["iterations"] == 1
    spent = time.perf_counter() - t0
    ok = not fails and sum_w <= 1e-10 and first and spent < 300
    record(7, ok, f"{10 - len(fails)}/10 within 1e-3 {fails}, max relative |sum w| {sum_w:.1e}, "
                  f"identical converges at 1: {first}, {spent:.0f}s")


# --- 8 to 10. experiment runs ------------------------------------------------------------------------

@pytest.fixture(scope="session")
def ladder_run(runs_dir):
    cfg = config_in("newsvendor_ladder", runs_dir)
    t0 = time.perf_counter()
    out = run_experiment(cfg)
    return cfg, out, time.perf_counter() - t0


@pytest.mark.slow
def test_criterion_08_trends(ladder_run):
    cfg, out, spent = ladder_run
    rows = [r for r in read_results(out.results) if r["split"] == "test"]
    means = {(m, float(r2)): v for (m, r2), v in mean_by(rows, "method", "r2_target").items()}
    levels = [float(v) for v in cfg.r2_ladder]
    notes, ok = [], not out.errors and spent < 7200
    for m in cfg.methods:
        rho = spearmanr(levels, [means[(m, v)] for v in levels])[0]
        ok &= bool(rho <= -0.8)
        notes.append(f"{m} {rho:.2f}")
    below = [means[("ippo", v)] <= means[("saa", v)] for v in levels]
    ok &= all(below)
    ks = {}
    for r in rows:
        if r["method"] == "knn":
            ks.setdefault(float(r["r2_target"]), []).append(json.loads(r["hyperparams"])["k"])
    k_rho = spearmanr(levels, [np.mean(ks[v]) for v in levels])[0]
    ok &= bool(k_rho <= -0.5)
    record(8, ok, f"cost rho [{', '.join(notes)}]; IPPO<=SAA at {sum(below)}/{len(below)} levels; "
                  f"k rho {k_rho:.2f}; {spent / 60:.0f} min")


@pytest.mark.slow
def test_criterion_09_overfitting(runs_dir, ladder_run):
    cfg = config_in("shipment_overfit", runs_dir)
    out = run_experiment(cfg)
    wins = 0
    for rep in range(cfg.replications):
        diag = json.loads((cell_dir(cfg, 0, rep) / "diagnostics.json").read_text())
        table = {r["lambda1"]: r["valid_cost"] for r in diag["ippo_tuning"] if r["valid_cost"] is not None}
        if any(v < table[1.0] for k, v in table.items() if k < 1.0):
            wins += 1
    share = wins / cfg.replications
    nv_cfg, nv_out, _ = ladder_run
    low = nv_cfg.r2_ladder[0]
    picks = [json.loads(r["hyperparams"])["lambda1"] for r in read_results(nv_out.results)
             if r["method"] == "ippo" and r["split"] == "test" and float(r["r2_target"]) == low]
    nv_share = float(np.mean([p == 1.0 for p in picks]))
    record(9, not out.errors and share >= 0.6,
           f"shipment: some lambda1<1 beats lambda1=1 on validation in {wins}/{cfg.replications}; "
           f"newsvendor lowest R2 picks lambda1=1 in {nv_share:.0%} of replications")


@pytest.mark.slow
def test_criterion_10_determinism_and_audit(runs_dir, ladder_run):
    small = dict(replications=1, r2_ladder=[0.07, 0.92])
    a = run_experiment(config_in("newsvendor_ladder", runs_dir / "rerun_a", **small), plots=False)
    b = run_experiment(config_in("newsvendor_ladder", runs_dir / "rerun_b", **small), plots=False)
    same = Path(a.results).read_bytes() == Path(b.results).read_bytes()
    cfg, _, _ = ladder_run
    reports = [audit(runs_dir / "rerun_a" / "newsvendor_ladder"), audit(cfg.output_dir)]
    checked = sum(r["rows"] for r in reports)
    worst = max(r["max_abs_error"] for r in reports)
    record(10, same and all(r["ok"] for r in reports),
           f"rerun byte-identical: {same}; audit {checked} rows, max error {worst:.1e}")
