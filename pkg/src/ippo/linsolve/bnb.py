"""Best-bound branch and bound over binaries and complementarity pairs."""
from __future__ import annotations

import heapq
import itertools
import logging
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from .model import (
    EQ, GE, LE, LinearProgram, MixedIntegerModel, ModelError, PrimalDualSolution,
    SolverError, Status,
)
from .pwl import pwl_expand
from .simplex import StandardForm, _solve_highs, solve_standard

log = logging.getLogger(__name__)

TAU_COMP = 1e-6
GAP_TOL = 1e-6

# pattern[k] is True when pair k has its slack side forced to zero.
PatternHeuristic = Callable[[np.ndarray], Optional[np.ndarray]]


def bigm_expand(m: MixedIntegerModel, big_m: float) -> MixedIntegerModel:
    """Linearize every complementarity pair with a binary and constant ``big_m``.

    Only valid when ``big_m`` bounds both the slack and the multiplier at some
    optimal solution; nothing here can check that.
    """
    if big_m is None or not np.isfinite(big_m) or big_m <= 0:
        raise ModelError("big-M mode needs a positive finite big_m")
    lp = m.base
    n, nr, k = lp.n_vars, lp.n_rows, len(m.comp_pairs)
    A = lp.A.tocsr()
    rows, senses, rhs = [], [], []
    for p_idx, p in enumerate(m.comp_pairs):
        z = n + p_idx
        a = A.getrow(p.slack_ref).toarray().ravel()
        b = lp.rhs[p.slack_ref]
        # slack <= M z
        if lp.senses[p.slack_ref] == LE:
            row = np.concatenate([a, np.zeros(k)])
            row[z] = big_m
            rows.append(row); senses.append(GE); rhs.append(b)
        else:
            row = np.concatenate([a, np.zeros(k)])
            row[z] = -big_m
            rows.append(row); senses.append(LE); rhs.append(b)
        # multiplier <= M (1 - z)
        row = np.zeros(n + k)
        row[p.dual_ref] = 1.0
        row[z] = big_m
        rows.append(row); senses.append(LE); rhs.append(big_m)
    A_new = sp.vstack([sp.hstack([A, sp.csr_matrix((nr, k))]), sp.csr_matrix(np.array(rows))]).tocsr()
    names = (lp.var_names or tuple(f"x{j}" for j in range(n))) + tuple(f"z{p}" for p in range(k))
    expanded = LinearProgram(
        np.concatenate([lp.c, np.zeros(k)]), A_new, lp.senses + tuple(senses),
        np.concatenate([lp.rhs, rhs]), np.concatenate([lp.lo, np.zeros(k)]),
        np.concatenate([lp.hi, np.ones(k)]), names, None,
    )
    return MixedIntegerModel(expanded, m.binaries + tuple(range(n, n + k)), (), m.pwl_terms)


class _Search:
    def __init__(self, m: MixedIntegerModel, n_orig: int, tau_comp: float, lp_backend: str = "simplex"):
        self.model = m
        self.sf = StandardForm(m.base)
        self.lp_backend = lp_backend
        if lp_backend == "highs":
            lp = m.base
            self.A_std = sp.hstack([lp.A, sp.eye(lp.n_rows)]).tocsr()
        elif lp_backend != "simplex":
            raise ValueError(f"unknown LP backend {lp_backend!r}")
        self.n = m.base.n_vars
        self.n_orig = n_orig
        self.tau_comp = tau_comp
        self.bin = np.array(m.binaries, dtype=int)
        self.p_slack = np.array([self.n + p.slack_ref for p in m.comp_pairs], dtype=int)
        self.p_dual = np.array([p.dual_ref for p in m.comp_pairs], dtype=int)
        self.lp_solves = 0
        self.inc_x = None
        self.inc_obj = np.inf
        self.inc_sol = None

    def bounds(self, fixes):
        lo, hi = self.sf.lo.copy(), self.sf.hi.copy()
        for col, side, val in fixes:
            if side == 0:
                lo[col] = val
                hi[col] = val
            elif side == 1:
                lo[col] = max(lo[col], val)
            else:
                hi[col] = min(hi[col], val)
        return lo, hi

    def solve(self, fixes, warm=None):
        lo, hi = self.bounds(fixes)
        self.lp_solves += 1
        if self.lp_backend == "highs":
            return self._solve_highs(lo, hi)
        try:
            return solve_standard(self.sf, lo, hi, warm=warm)
        except SolverError:
            if warm is None:
                raise
            return solve_standard(self.sf, lo, hi)

    def _solve_highs(self, lo, hi):
        if np.any(lo > hi + 1e-12):
            return PrimalDualSolution(Status.INFEASIBLE, objective_value=np.inf)
        sf = self.sf
        lp = LinearProgram(sf.c, self.A_std, (EQ,) * sf.m, sf.b, lo, hi)
        sol = _solve_highs(lp)
        if sol.ok:
            sol.primal = sol.primal[: self.n]
        return sol

    def slack_values(self, x):
        return self.sf.b - self.sf.A[:, : self.n] @ x

    def pair_products(self, x):
        if not self.p_dual.size:
            return np.zeros(0), np.zeros(0), np.zeros(0)
        s = np.abs(self.slack_values(x)[self.p_slack - self.n])
        d = np.abs(x[self.p_dual])
        return s * d, s, d

    def feasible(self, x):
        prod, s, d = self.pair_products(x)
        if prod.size and np.any((prod > self.tau_comp) & (np.minimum(s, d) > 1e-9)):
            return False
        if self.bin.size:
            frac = np.abs(x[self.bin] - np.round(x[self.bin]))
            if np.any(frac > 1e-6):
                return False
        return True

    def offer(self, sol):
        x = sol.primal
        if sol.objective_value < self.inc_obj - 1e-12 and self.feasible(x):
            self.inc_obj = sol.objective_value
            self.inc_x = x.copy()
            self.inc_sol = sol
            return True
        return False

    def pattern_fixes(self, pattern, x=None):
        fixes = []
        for k, slack_zero in enumerate(pattern):
            if slack_zero:
                fixes.append((int(self.p_slack[k]), 0, 0.0))
            else:
                fixes.append((int(self.p_dual[k]), 2, 0.0))
        if self.bin.size and x is not None:
            for j in self.bin:
                fixes.append((int(j), 0, float(np.round(x[j]))))
        return fixes

    def pattern_of(self, x):
        _, s, d = self.pair_products(x)
        return s <= d

    def polish(self, pattern, x_hint=None, rounds=20, propose=None, warm=None):
        """Solve with every pair fixed by ``pattern``, then re-fix from the new point.

        ``propose`` maps a solution to the next pattern; the pattern read off
        the solution itself is the fallback. Stops when nothing improves or a
        pattern repeats.
        """
        seen = set()
        improved = False
        for _ in range(rounds):
            key = pattern.tobytes()
            if key in seen:
                break
            seen.add(key)
            sol = self.solve(self.pattern_fixes(pattern, x_hint), warm)
            if not sol.ok:
                break
            warm = sol.basis
            gained = self.offer(sol)
            improved |= gained
            if not gained and sol.objective_value >= self.inc_obj - 1e-9 and len(seen) > 1:
                break
            x_hint = sol.primal
            nxt = propose(sol.primal) if propose is not None else None
            if (nxt is None or len(nxt) != len(self.p_dual)
                    or np.asarray(nxt, dtype=bool).tobytes() in seen):
                nxt = self.pattern_of(sol.primal)
            pattern = np.asarray(nxt, dtype=bool)
        return improved


def solve_milp(m: MixedIntegerModel, gap_tol: float = GAP_TOL, node_limit: int = 100_000, *,
               complementarity: str = "branch", big_m: float | None = None,
               tau_comp: float = TAU_COMP, heuristic: PatternHeuristic | None = None,
               heuristic_every: int = 10, start_patterns=(), lp_backend: str = "simplex") -> PrimalDualSolution:
    """Solve a mixed-integer model with complementarity pairs and PWL terms.

    Parameters
    ----------
    m : MixedIntegerModel
    gap_tol : float
        Relative optimality gap at which the search stops.
    node_limit : int
        Maximum number of branch-and-bound nodes to evaluate.
    complementarity : {"branch", "bigm"}
        ``"branch"`` splits each violated pair into slack = 0 and
        multiplier = 0 children; ``"bigm"`` linearizes with ``big_m``.
    heuristic : callable, optional
        Maps a node relaxation to a pair pattern (True: slack side zero).
        The pattern LP and its iterated re-fixing provide incumbents.
    start_patterns : iterable of arrays
        Patterns tried before the root is branched.
    lp_backend : {"simplex", "highs"}
        Node LP solver. ``"highs"`` solves every node cold through SciPy and
        pays off only on large models where warm starts matter less than
        sparse linear algebra.

    Returns
    -------
    PrimalDualSolution
        ``primal`` is restricted to the columns of ``m``; ``bound`` and
        ``gap`` describe the proof state and ``binaries`` maps binary
        columns to their values.
    """
    n_orig = m.base.n_vars
    nr_orig = m.base.n_rows
    if complementarity == "bigm":
        m = bigm_expand(m, big_m)
    elif complementarity != "branch":
        raise ValueError(f"unknown complementarity mode {complementarity!r}")
    m = pwl_expand(m)
    search = _Search(m, n_orig, tau_comp, lp_backend)

    def _tol(inc):
        return max(gap_tol * abs(inc), 1e-9) if np.isfinite(inc) else 0.0

    root = search.solve(())
    if root.status == Status.INFEASIBLE:
        return PrimalDualSolution(Status.INFEASIBLE, nodes=1)
    if root.status == Status.UNBOUNDED:
        return PrimalDualSolution(Status.UNBOUNDED, nodes=1, ray=root.ray)

    propose = None
    if heuristic is not None:
        def propose(x):
            return heuristic(x[:n_orig])

    for pattern in start_patterns:
        if pattern is not None and len(pattern) == len(search.p_dual):
            search.polish(np.asarray(pattern, dtype=bool), root.primal, propose=propose,
                          warm=root.basis)

    counter = itertools.count()
    heap = [(root.objective_value, next(counter), (), root)]
    nodes = 0
    hit_limit = False
    while heap:
        bound, _, fixes, sol = heapq.heappop(heap)
        if bound >= search.inc_obj - _tol(search.inc_obj):
            heap.clear()
            break
        if nodes >= node_limit:
            heapq.heappush(heap, (bound, next(counter), fixes, sol))
            hit_limit = True
            break
        nodes += 1
        if sol is None or isinstance(sol, tuple):
            warm = sol[0] if isinstance(sol, tuple) else None
            sol = search.solve(fixes, warm)
            if not sol.ok:
                continue
            if sol.objective_value >= search.inc_obj - _tol(search.inc_obj):
                continue
        x = sol.primal
        if search.feasible(x):
            search.offer(sol)
            search.polish(search.pattern_of(x), x, propose=propose, warm=sol.basis)
            continue
        if heuristic is not None and (nodes <= 20 or nodes % heuristic_every == 0):
            pattern = heuristic(x[:n_orig])
            if pattern is not None:
                search.polish(np.asarray(pattern, dtype=bool), x, propose=propose, warm=sol.basis)
        branch = _branch_choice(search, x)
        for child_fix in branch:
            heapq.heappush(heap, (sol.objective_value, next(counter), fixes + (child_fix,),
                                  (sol.basis,)))

    best_bound = min(h[0] for h in heap) if heap else search.inc_obj
    if search.inc_x is None:
        status = Status.NO_INCUMBENT if hit_limit else Status.INFEASIBLE
        return PrimalDualSolution(status, bound=best_bound, nodes=nodes,
                                  stats={"lp_solves": search.lp_solves})
    inc = search.inc_obj
    best_bound = min(best_bound, inc)
    gap = (inc - best_bound) / max(abs(inc), 1e-10) if inc != best_bound else 0.0
    status = Status.OPTIMAL if (not hit_limit or gap <= gap_tol) else Status.NODE_LIMIT
    x = search.inc_x.copy()
    # integral within tolerance; report the exact integer
    x[list(m.binaries)] = np.round(x[list(m.binaries)])
    binaries = {int(j): float(x[j]) for j in m.binaries if j < n_orig}
    duals = search.inc_sol.duals[:nr_orig] if search.inc_sol.duals is not None else None
    return PrimalDualSolution(
        status, primal=x[:n_orig].copy(), duals=duals, objective_value=float(inc),
        bound=float(best_bound), gap=float(max(gap, 0.0)), nodes=nodes, binaries=binaries,
        stats={"lp_solves": search.lp_solves, "expanded_primal": x.copy()},
    )


def _branch_choice(search: _Search, x):
    prod, s, d = search.pair_products(x)
    if prod.size:
        viol = np.where(np.minimum(s, d) > 1e-9, prod, 0.0)
        k = int(np.argmax(viol))
        if viol[k] > search.tau_comp:
            return ((int(search.p_slack[k]), 0, 0.0), (int(search.p_dual[k]), 2, 0.0))
    if search.bin.size:
        frac = np.abs(x[search.bin] - np.round(x[search.bin]))
        i = int(np.argmax(frac))
        j = int(search.bin[i])
        return ((j, 2, 0.0), (j, 1, 1.0))
    raise SolverError("no branching candidate at an infeasible node")
