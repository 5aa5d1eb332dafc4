"""Progressive hedging over per-scenario copies of the regression coefficients.

The single-level model couples its scenarios only through beta. Giving every
scenario its own copy of beta and asking the copies to agree turns the model
into independent scenario problems plus a consensus constraint, which is then
relaxed with a linear price ``w_i`` and a proximal penalty ``rho/2 (z_i - zbar)^2``
applied entrywise. The penalty goes through the same piecewise-linear
machinery as the ridge term, with breakpoints graded towards the current
consensus so the approximation is tight where the copies end up.

With complementarity pairs present the scenario problems are mixed-integer and
progressive hedging is only a heuristic; the objective reported at the end is
always the exact model objective at the consensus beta.
"""
from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .bilevel import Evaluator, IPPOError, IPPOSolution, KKTModel, model_objective
from .linsolve import LinearProgram, MixedIntegerModel, SeparablePWLTerm, Status, solve_milp
from .linsolve.model import ComplementarityPair
from .regression import RegressionParams

log = logging.getLogger(__name__)

SUM_W_TOL = 1e-10
PROX_MIN_STEP = 1e-6
CONVERGED = "Converged"
UNCONVERGED = "Unconverged"


class PHAError(RuntimeError):
    pass


@dataclass(frozen=True)
class PHAConfig:
    rho: float = 1.0
    delta: float = 1e-4
    max_iter: int = 200
    segments: int = 32
    node_limit: int = 2000
    workers: int = 1

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.segments < 2:
            raise ValueError("the proximal term needs at least 2 segments")


@dataclass
class PHAState:
    z_dup: np.ndarray   # (N, d_l, d_x + 1) beta copies
    z_bar: np.ndarray   # (d_l, d_x + 1)
    w: np.ndarray       # (N, d_l, d_x + 1)
    iter: int = 0

    @property
    def deviation(self) -> float:
        return float(np.max(np.abs(self.z_dup - self.z_bar[None])))

    def check(self) -> None:
        s = np.max(np.abs(self.w.sum(axis=0)), initial=0.0)
        scale = max(1.0, float(np.max(np.abs(self.w), initial=0.0)))
        if s > SUM_W_TOL * scale * len(self.w):
            raise PHAError(f"dual weights do not sum to zero (|sum| = {s:.3g}) at iteration {self.iter}")
        if not np.allclose(self.z_bar, self.z_dup.mean(axis=0), rtol=0, atol=1e-12 * (1 + np.abs(self.z_bar).max())):
            raise PHAError("consensus is not the mean of the copies")


@dataclass
class ScenarioSubproblem:
    """One scenario's piece of the model; its beta copy occupies columns ``0..n_beta-1``."""

    index: int
    model: MixedIntegerModel
    columns: np.ndarray     # original columns of the non-beta variables, in local order
    rows: np.ndarray        # original rows, in local order
    n_beta: int
    beta_lo: np.ndarray
    beta_hi: np.ndarray


# --- decomposition ---------------------------------------------------------------------

def _scenario_tags(kkt: KKTModel, n_vars: int) -> np.ndarray:
    bm = kkt.bilevel
    tag = np.full(n_vars, -1)
    for n, blk in enumerate(bm.blocks):
        tag[blk.upper_vars] = n
        tag[blk.v] = n
        if n < len(kkt.pi):
            tag[kkt.pi[n]] = n
    for arr in kkt.loss_vars.values():
        for n in range(arr.shape[0]):
            tag[arr[n]] = n
    return tag


def duplicate_first_stage(kkt: KKTModel) -> list:
    """Split the single-level model into scenario problems that share only beta.

    Raises ``PHAError`` if any row, pair or piecewise term ties variables of two
    different scenarios together.
    """
    m = kkt.build()
    lp = m.base
    bm = kkt.bilevel
    N = bm.n_scenarios
    beta_cols = bm.beta.ravel()
    nb = beta_cols.size
    is_beta = np.zeros(lp.n_vars, dtype=bool)
    is_beta[beta_cols] = True
    tag = _scenario_tags(kkt, lp.n_vars)

    A = lp.A.tocsr()
    row_tag = np.full(lp.n_rows, -1)
    for r in range(lp.n_rows):
        cols = A.indices[A.indptr[r]:A.indptr[r + 1]]
        t = set(tag[cols[~is_beta[cols]]].tolist())
        if len(t) != 1 or -1 in t:
            raise PHAError(f"row {lp.row_names[r]} couples scenarios {sorted(t)} outside beta")
        row_tag[r] = t.pop()
    free = ~is_beta & (tag < 0)
    if np.any(free):
        raise PHAError(f"variable {lp.var_names[int(np.flatnonzero(free)[0])]} belongs to no scenario")
    for p in m.comp_pairs:
        if tag[p.dual_ref] != row_tag[p.slack_ref]:
            raise PHAError(f"pair on row {p.slack_ref} couples two scenarios")
    if m.binaries:
        raise PHAError("binary variables are not supported by the decomposition")

    subs = []
    for n in range(N):
        cols = np.flatnonzero((tag == n) & ~is_beta)
        rows = np.flatnonzero(row_tag == n)
        local = np.full(lp.n_vars, -1)
        local[beta_cols] = np.arange(nb)
        local[cols] = nb + np.arange(len(cols))
        sub_A = A[rows].tocoo()
        A_n = sp.csr_matrix((sub_A.data, (sub_A.row, local[sub_A.col])), shape=(len(rows), nb + len(cols)))
        c = np.concatenate([lp.c[beta_cols] / N, lp.c[cols]])
        order = np.concatenate([beta_cols, cols])
        row_pos = {int(r): k for k, r in enumerate(rows)}
        pairs = [ComplementarityPair(row_pos[p.slack_ref], int(local[p.dual_ref]))
                 for p in m.comp_pairs if row_tag[p.slack_ref] == n]
        terms = []
        for t in m.pwl_terms:
            if is_beta[t.variable_ref]:
                terms.append(SeparablePWLTerm(int(local[t.variable_ref]), t.breakpoints, t.values / N))
            elif tag[t.variable_ref] == n:
                terms.append(SeparablePWLTerm(int(local[t.variable_ref]), t.breakpoints, t.values))
        base = LinearProgram(c, A_n, tuple(lp.senses[r] for r in rows), lp.rhs[rows],
                             lp.lo[order], lp.hi[order],
                             tuple(lp.var_names[j] for j in order), tuple(lp.row_names[r] for r in rows))
        subs.append(ScenarioSubproblem(n, MixedIntegerModel(base, (), tuple(pairs), tuple(terms)),
                                       cols, rows, nb, bm.beta_lo.ravel().copy(), bm.beta_hi.ravel().copy()))
    return subs


# --- iterations ---------------------------------------------------------------------------

def proximal_pwl(var: int, lo: float, hi: float, center: float, rho: float, segments: int) -> SeparablePWLTerm:
    """``rho/2 (x - center)^2`` on [lo, hi], breakpoints spaced geometrically away from the center."""
    center = float(np.clip(center, lo, hi))
    width = max(hi - lo, 1e-12)
    per_side = max(1, segments // 2)
    steps = np.geomspace(PROX_MIN_STEP * width, width, per_side)
    bp = np.concatenate([[lo, hi, center], center - steps, center + steps])
    bp = np.unique(np.clip(bp, lo, hi))
    return SeparablePWLTerm(var, bp, 0.5 * rho * (bp - center) ** 2)


def _augmented(sub: ScenarioSubproblem, w=None, z_bar=None, cfg: PHAConfig | None = None) -> MixedIntegerModel:
    m = sub.model
    if w is None:
        return m
    c = m.base.c.copy()
    c[: sub.n_beta] += np.ravel(w)
    terms = list(m.pwl_terms)
    zb = np.ravel(z_bar)
    for k in range(sub.n_beta):
        lo, hi = sub.beta_lo[k], sub.beta_hi[k]
        if hi > lo:
            terms.append(proximal_pwl(k, lo, hi, zb[k], cfg.rho, cfg.segments))
    b = m.base
    base = LinearProgram(c, b.A, b.senses, b.rhs, b.lo, b.hi, b.var_names, b.row_names)
    return MixedIntegerModel(base, m.binaries, m.comp_pairs, tuple(terms))


def _solve_sub(sub: ScenarioSubproblem, cfg: PHAConfig, w=None, z_bar=None) -> np.ndarray:
    sol = solve_milp(_augmented(sub, w, z_bar, cfg), node_limit=cfg.node_limit)
    if sol.primal is None or sol.status in (Status.NO_INCUMBENT, Status.INFEASIBLE, Status.UNBOUNDED):
        raise PHAError(f"scenario {sub.index} subproblem ended {sol.status.value}")
    return sol.primal[: sub.n_beta]


def _solve_all(subs, cfg: PHAConfig, W=None, z_bar=None) -> np.ndarray:
    def one(i):
        return _solve_sub(subs[i], cfg, None if W is None else W[i], z_bar)

    if cfg.workers > 1 and len(subs) > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            out = list(pool.map(one, range(len(subs))))
    else:
        out = [one(i) for i in range(len(subs))]
    return np.array(out)


def pha_initialize(subs, cfg: PHAConfig, shape) -> PHAState:
    Z = _solve_all(subs, cfg).reshape((len(subs),) + tuple(shape))
    zb = Z.mean(axis=0)
    state = PHAState(Z, zb, cfg.rho * (Z - zb[None]), 0)
    state.check()
    return state


def pha_iterate(state: PHAState, subs, cfg: PHAConfig) -> PHAState:
    shape = state.z_bar.shape
    W = state.w.reshape(len(subs), -1)
    Z = _solve_all(subs, cfg, W, state.z_bar).reshape(state.z_dup.shape)
    zb = Z.mean(axis=0)
    new = PHAState(Z, zb.reshape(shape), state.w + cfg.rho * (Z - zb[None]), state.iter + 1)
    new.check()
    return new


# --- driver ----------------------------------------------------------------------------------

@dataclass
class PHAResult:
    solution: IPPOSolution
    trace: list = field(default_factory=list)
    state: PHAState | None = None

    @property
    def converged(self) -> bool:
        return self.solution.status == CONVERGED


class ConsensusObjective:
    """Exact model objective at a given beta (lower-level evaluation or LP with beta fixed).

    Infinite when beta is infeasible for the fixed-pattern model.
    """

    def __init__(self, kkt: KKTModel):
        self.kkt = kkt
        self.model = kkt.build()
        self.evaluator = Evaluator(kkt) if kkt.n_pairs else None

    def __call__(self, beta):
        bm = self.kkt.bilevel
        beta = np.clip(np.asarray(beta, float).reshape(bm.beta.shape), bm.beta_lo, bm.beta_hi)
        if self.evaluator is not None:
            ev = self.evaluator(beta)
            first = np.array([u[b.link] for u, b in zip(ev.upper, bm.blocks)])
            return model_objective(self.kkt, ev), ev.upper_cost, first, ev.lower, ev.upper
        lp = self.model.base
        lo, hi = lp.lo.copy(), lp.hi.copy()
        lo[bm.beta.ravel()] = hi[bm.beta.ravel()] = beta.ravel()
        sol = solve_milp(MixedIntegerModel(lp.with_bounds(lo, hi), (), (), self.model.pwl_terms))
        if not sol.ok:
            # the average of scenario-feasible copies can violate another scenario's rows
            return np.inf, np.inf, None, [], []
        x = sol.primal
        first = np.array([x[b.upper_vars[b.link]] for b in bm.blocks])
        return (float(sol.objective_value), float(self.kkt.upper_c @ x[: len(self.kkt.upper_c)]), first,
                [x[b.v] for b in bm.blocks], [x[b.upper_vars] for b in bm.blocks])


def pha_solve(kkt: KKTModel, cfg: PHAConfig | None = None, trace_path=None) -> PHAResult:
    """Progressive hedging until every copy is within ``delta`` of the consensus (sup norm)
    and the consensus itself moved by at most ``delta``.

    Returns the consensus beta with its exact objective. When ``max_iter`` runs
    out the iterate with the lowest exact objective is returned, flagged
    ``Unconverged``.
    """
    cfg = cfg or PHAConfig()
    subs = duplicate_first_stage(kkt)
    shape = kkt.bilevel.beta.shape
    exact = ConsensusObjective(kkt)
    t0 = time.perf_counter()
    trace = []

    def record(state):
        obj = exact(state.z_bar)
        trace.append({"iter": state.iter, "max_deviation": state.deviation,
                      "consensus_objective": obj[0], "wallclock": time.perf_counter() - t0,
                      "sum_w": float(np.max(np.abs(state.w.sum(axis=0)), initial=0.0))})
        return obj

    state = pha_initialize(subs, cfg, shape)
    best = (record(state), state)
    status = UNCONVERGED
    for _ in range(cfg.max_iter):
        prev = state.z_bar
        state = pha_iterate(state, subs, cfg)
        obj = record(state)
        # agreement alone can happen away from a fixed point, so the consensus must also have settled
        if state.deviation <= cfg.delta and np.max(np.abs(state.z_bar - prev)) <= cfg.delta:
            best, status = (obj, state), CONVERGED
            break
        if obj[0] < best[0][0]:
            best = (obj, state)
    (objective, train_cost, first, lower, upper), final = best
    if status == UNCONVERGED:
        log.warning("progressive hedging stopped after %d iterations (deviation %.3g)",
                    state.iter, state.deviation)
    if trace_path is not None:
        write_trace(trace_path, trace)
    sol = IPPOSolution(
        RegressionParams(final.z_bar), float(objective), float(train_cost), float("nan"), float("nan"),
        status, first, lower, upper, kkt.reg,
        {"iterations": state.iter, "final_deviation": state.deviation, "best_iteration": final.iter,
         "rho": cfg.rho, "delta": cfg.delta, "scenarios": len(subs)},
    )
    return PHAResult(sol, trace, state)


def write_trace(path, trace) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["iter", "max_deviation", "consensus_objective", "wallclock"])
        for t in trace:
            wr.writerow([t["iter"], f"{t['max_deviation']:.17g}", f"{t['consensus_objective']:.17g}",
                         f"{t['wallclock']:.6f}"])
    return path
