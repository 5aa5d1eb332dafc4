"""Dense bounded-variable revised simplex.

Every row ``a x (sense) b`` gets a slack column so the working system is
``[A | I] (x, s) = b`` with the sense encoded in the slack bounds
(``<=``: s in [0, inf), ``>=``: s in (-inf, 0], ``=``: s = 0). Pivoting uses
Dantzig pricing and switches to Bland's rule after a run of degenerate
pivots. A warm basis that is dual feasible is reoptimized with the dual
simplex, which is what branch-and-bound children need after a bound change.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .model import (
    EQ, GE, LE, Basis, LinearProgram, PrimalDualSolution, SolverError, Status,
)

TAU_FEAS = 1e-7
TAU_DUAL = 1e-7

_PIVOT_TOL = 1e-9
_REFACTOR_EVERY = 50
_STALL_LIMIT = 40


class StandardForm:
    """``[A | I]`` with slack bounds; bounds may be overridden per solve."""

    def __init__(self, lp: LinearProgram):
        self.lp = lp
        m, n = lp.n_rows, lp.n_vars
        self.m, self.n = m, n
        A = lp.A.toarray() if sp.issparse(lp.A) else np.asarray(lp.A, dtype=float)
        self.A = np.hstack([A, np.eye(m)])
        self.b = lp.rhs.copy()
        self.c = np.concatenate([lp.c, np.zeros(m)])
        s_lo = np.array([0.0 if s in (LE, EQ) else -np.inf for s in lp.senses])
        s_hi = np.array([np.inf if s == LE else 0.0 for s in lp.senses])
        self.lo = np.concatenate([lp.lo, s_lo])
        self.hi = np.concatenate([lp.hi, s_hi])

    @property
    def n_cols(self) -> int:
        return self.n + self.m


class _Simplex:
    def __init__(self, A, b, c, lo, hi, max_iter):
        self.A = A
        self.b = b
        self.lo = lo
        self.hi = hi
        self.m, self.N = A.shape
        self.x = np.zeros(self.N)
        self.basis = np.zeros(self.m, dtype=int)
        self.is_basic = np.zeros(self.N, dtype=bool)
        self.Binv = np.eye(self.m)
        self.iters = 0
        self.max_iter = max_iter
        self._since_refactor = 0
        self.movable = (hi - lo) > 0.0
        self.unit_row, self.unit_sign = _unit_columns(A)
        self.tol_b = 1e-9 * max(1.0, float(np.max(np.abs(b), initial=0.0)))
        self.cscale = max(1.0, float(np.max(np.abs(c), initial=0.0)))

    # -- basis bookkeeping -------------------------------------------------
    def set_basis(self, basis):
        self.basis = np.asarray(basis, dtype=int).copy()
        self.is_basic[:] = False
        self.is_basic[self.basis] = True

    def refactor(self):
        # Basic unit columns (slacks, artificials) are eliminated up front so
        # only the structural block needs an explicit inverse.
        ur = self.unit_row[self.basis]
        pos_u = np.flatnonzero(ur >= 0)
        pos_s = np.flatnonzero(ur < 0)
        T = ur[pos_u]
        P = np.setdiff1d(np.arange(self.m), T, assume_unique=False)
        if len(np.unique(T)) != len(T) or len(P) != len(pos_s):
            raise SolverError("singular basis", {"iterations": self.iters})
        S = self.basis[pos_s]
        try:
            M = np.linalg.inv(self.A[np.ix_(P, S)]) if len(S) else np.zeros((0, 0))
        except np.linalg.LinAlgError as exc:
            raise SolverError("singular basis", {"iterations": self.iters}) from exc
        sg = self.unit_sign[self.basis[pos_u]]
        Binv = np.zeros((self.m, self.m))
        Binv[np.ix_(pos_s, P)] = M
        if len(pos_u):
            Binv[np.ix_(pos_u, P)] = -sg[:, None] * (self.A[np.ix_(T, S)] @ M)
            Binv[pos_u, T] = sg
        self.Binv = Binv
        if not np.all(np.isfinite(self.Binv)):
            raise SolverError("non-finite basis inverse", {"iterations": self.iters})
        self._since_refactor = 0
        self.recompute_xb()

    def recompute_xb(self):
        xn = self.x.copy()
        xn[self.basis] = 0.0
        self.x[self.basis] = self.Binv @ (self.b - self.A @ xn)

    def _pivot(self, r, j, alpha):
        row = self.Binv[r] / alpha[r]
        self.Binv -= np.outer(alpha, row)
        self.Binv[r] = row
        self.is_basic[self.basis[r]] = False
        self.basis[r] = j
        self.is_basic[j] = True
        self._since_refactor += 1
        if self._since_refactor >= _REFACTOR_EVERY:
            self.refactor()

    def _tick(self):
        self.iters += 1
        if self.iters > self.max_iter:
            raise SolverError("iteration limit reached", {"iterations": self.iters})

    def duals(self, cost):
        y = cost[self.basis] @ self.Binv
        return y, cost - y @ self.A

    # -- primal simplex ----------------------------------------------------
    def primal(self, cost):
        """Returns (status, ray). Assumes the current basis is primal feasible."""
        bland = False
        stall = 0
        tol_d = 1e-9 * max(1.0, float(np.max(np.abs(cost), initial=0.0)))
        while True:
            self._tick()
            y, d = self.duals(cost)
            x = self.x
            nb = ~self.is_basic & self.movable
            inc = nb & (x < self.hi - self.tol_b) & (d < -tol_d)
            dec = nb & (x > self.lo + self.tol_b) & (d > tol_d)
            cand = inc | dec
            if not cand.any():
                return Status.OPTIMAL, None
            if bland:
                j = int(np.flatnonzero(cand)[0])
            else:
                score = np.where(inc, -d, 0.0) + np.where(dec, d, 0.0)
                j = int(np.argmax(score))
            direction = 1.0 if inc[j] else -1.0
            alpha = self.Binv @ self.A[:, j]
            delta = -direction * alpha
            xb = x[self.basis]
            lob = self.lo[self.basis]
            hib = self.hi[self.basis]
            t_rows = np.full(self.m, np.inf)
            neg = delta < -_PIVOT_TOL
            pos = delta > _PIVOT_TOL
            t_rows[neg] = (xb[neg] - lob[neg]) / -delta[neg]
            t_rows[pos] = (hib[pos] - xb[pos]) / delta[pos]
            np.maximum(t_rows, 0.0, out=t_rows)
            t_min = float(t_rows.min()) if self.m else np.inf
            t_flip = self.hi[j] - self.lo[j]
            if not np.isfinite(t_min) and not np.isfinite(t_flip):
                ray = np.zeros(self.N)
                ray[j] = direction
                ray[self.basis] = delta
                return Status.UNBOUNDED, ray
            if t_flip <= t_min:
                t = t_flip
                x[self.basis] += t * delta
                x[j] = self.hi[j] if direction > 0 else self.lo[j]
            else:
                t = t_min
                ties = np.flatnonzero(t_rows <= t_min + 1e-12 * (1.0 + t_min))
                if bland:
                    r = int(ties[np.argmin(self.basis[ties])])
                else:
                    r = int(ties[np.argmax(np.abs(delta[ties]))])
                leaving = self.basis[r]
                x[j] += direction * t
                x[self.basis] += t * delta
                x[leaving] = self.lo[leaving] if delta[r] < 0 else self.hi[leaving]
                self._pivot(r, j, alpha)
            if t <= 1e-12:
                stall += 1
                if stall > _STALL_LIMIT:
                    bland = True
            else:
                stall = 0
                bland = False

    # -- dual simplex ------------------------------------------------------
    def dual_feasible(self, cost, repair=True):
        _, d = self.duals(cost)
        tol_d = 1e-9 * max(1.0, float(np.max(np.abs(cost), initial=0.0)))
        nb = ~self.is_basic & self.movable
        x = self.x
        at_lo = nb & (x <= self.lo + self.tol_b)
        at_hi = nb & (x >= self.hi - self.tol_b)
        free = nb & ~at_lo & ~at_hi
        bad_lo = at_lo & (d < -tol_d)
        bad_hi = at_hi & (d > tol_d)
        if (free & (np.abs(d) > tol_d)).any():
            return False
        if not repair:
            return not (bad_lo.any() or bad_hi.any())
        if np.any(bad_lo & ~np.isfinite(self.hi)) or np.any(bad_hi & ~np.isfinite(self.lo)):
            return False
        if bad_lo.any() or bad_hi.any():
            x[bad_lo] = self.hi[bad_lo]
            x[bad_hi] = self.lo[bad_hi]
            self.recompute_xb()
        return True

    def dual(self, cost):
        """Returns (status, farkas_row). Assumes dual feasibility."""
        bland = False
        stall = 0
        while True:
            self._tick()
            xb = self.x[self.basis]
            lob = self.lo[self.basis]
            hib = self.hi[self.basis]
            below = lob - xb
            above = xb - hib
            viol = np.maximum(below, above)
            tol = 1e-9 * max(1.0, float(np.max(np.abs(xb), initial=0.0)))
            if not (viol > tol).any():
                return Status.OPTIMAL, None
            if bland:
                cand = np.flatnonzero(viol > tol)
                r = int(cand[np.argmin(self.basis[cand])])
            else:
                r = int(np.argmax(viol))
            is_below = below[r] > above[r]
            rho = self.Binv[r]
            _, d = self.duals(cost)
            alpha_r = rho @ self.A
            nb = ~self.is_basic & self.movable
            x = self.x
            at_lo = nb & (x <= self.lo + self.tol_b)
            at_hi = nb & (x >= self.hi - self.tol_b) & ~at_lo
            free = nb & ~at_lo & ~at_hi
            sgn = 1.0 if is_below else -1.0
            elig = (
                (at_lo & (sgn * alpha_r < -_PIVOT_TOL))
                | (at_hi & (sgn * alpha_r > _PIVOT_TOL))
                | (free & (np.abs(alpha_r) > _PIVOT_TOL))
            )
            if not elig.any():
                return Status.INFEASIBLE, rho.copy()
            idx = np.flatnonzero(elig)
            ratios = np.abs(d[idx]) / np.abs(alpha_r[idx])
            rmin = float(ratios.min())
            ties = idx[ratios <= rmin + 1e-12 * (1.0 + rmin)]
            if bland:
                q = int(ties[0])
            else:
                q = int(ties[np.argmax(np.abs(alpha_r[ties]))])
            alpha_q = self.Binv @ self.A[:, q]
            target = lob[r] if is_below else hib[r]
            theta = (xb[r] - target) / alpha_q[r]
            leaving = self.basis[r]
            x[q] += theta
            x[self.basis] -= theta * alpha_q
            x[leaving] = target
            self._pivot(r, q, alpha_q)
            if rmin <= 1e-12:
                stall += 1
                if stall > _STALL_LIMIT:
                    bland = True
            else:
                stall = 0
                bland = False


def _unit_columns(A):
    """Row and sign of every column that is a signed unit vector (-1 row otherwise)."""
    nz = A != 0.0
    count = nz.sum(axis=0)
    row = np.argmax(nz, axis=0)
    val = A[row, np.arange(A.shape[1])]
    unit = (count == 1) & (np.abs(val) == 1.0)
    return np.where(unit, row, -1), np.where(unit, val, 0.0)


def _nonbasic_start(lo, hi, at_upper=None):
    x = np.where(np.isfinite(lo), lo, np.where(np.isfinite(hi), hi, 0.0))
    if at_upper is not None:
        up = at_upper & np.isfinite(hi)
        x = np.where(up, hi, x)
    return x


def solve_standard(sf: StandardForm, lo=None, hi=None, warm: Basis | None = None,
                   max_iter: int | None = None) -> PrimalDualSolution:
    """Solve ``sf`` with optional bound overrides (full structural+slack length)."""
    lo = sf.lo if lo is None else np.asarray(lo, dtype=float)
    hi = sf.hi if hi is None else np.asarray(hi, dtype=float)
    if np.any(lo > hi + 1e-12):
        return PrimalDualSolution(Status.INFEASIBLE)
    m, N = sf.A.shape
    max_iter = max_iter or 50 * (m + N) + 1000
    if warm is not None:
        try:
            sol = _solve_warm(sf, lo, hi, warm, max_iter)
        except SolverError:
            sol = None
        if sol is not None:
            return sol
    return _solve_cold(sf, lo, hi, max_iter)


def _finish(sf, spx, cost, status, extra=None, basis_ok=True):
    n, m = sf.n, sf.m
    if status == Status.OPTIMAL:
        y, d = spx.duals(cost)
        x = spx.x[:n].copy()
        basis = None
        if basis_ok and np.all(spx.basis < sf.n_cols):
            at_upper = (~spx.is_basic[: sf.n_cols]) & (spx.x[: sf.n_cols] >= spx.hi[: sf.n_cols]) \
                & np.isfinite(spx.hi[: sf.n_cols]) & (spx.hi[: sf.n_cols] > spx.lo[: sf.n_cols])
            basis = Basis(spx.basis.copy(), at_upper)
        return PrimalDualSolution(
            Status.OPTIMAL, primal=x, duals=y[:m].copy(), objective_value=float(sf.c[:n] @ x),
            reduced_costs=d[:n].copy(), iterations=spx.iters, basis=basis,
        )
    if status == Status.UNBOUNDED:
        return PrimalDualSolution(Status.UNBOUNDED, ray=extra[:n].copy(), iterations=spx.iters,
                                  objective_value=-np.inf)
    return PrimalDualSolution(Status.INFEASIBLE, farkas=extra, iterations=spx.iters,
                              objective_value=np.inf)


def _solve_warm(sf, lo, hi, warm, max_iter):
    spx = _Simplex(sf.A, sf.b, sf.c, lo, hi, max_iter)
    spx.set_basis(warm.basic)
    spx.x = _nonbasic_start(lo, hi, warm.at_upper)
    spx.refactor()
    xb = spx.x[spx.basis]
    tol = 1e-9 * max(1.0, float(np.max(np.abs(xb), initial=0.0)))
    primal_ok = np.all(xb >= lo[spx.basis] - tol) and np.all(xb <= hi[spx.basis] + tol)
    if primal_ok:
        status, ray = spx.primal(sf.c)
        return _finish(sf, spx, sf.c, status, ray)
    if not spx.dual_feasible(sf.c):
        return None
    status, farkas = spx.dual(sf.c)
    if status == Status.INFEASIBLE:
        return _finish(sf, spx, sf.c, status, farkas)
    spx.refactor()
    status, ray = spx.primal(sf.c)
    return _finish(sf, spx, sf.c, status, ray)


def _solve_cold(sf, lo, hi, max_iter):
    m, N = sf.A.shape
    x0 = _nonbasic_start(lo, hi)
    x0[sf.n:] = 0.0
    resid = sf.b - sf.A[:, : sf.n] @ x0[: sf.n]
    s_lo, s_hi = lo[sf.n:], hi[sf.n:]
    s_val = np.clip(resid, s_lo, s_hi)
    need_art = np.abs(resid - s_val) > 0.0
    rows_art = np.flatnonzero(need_art)
    k = rows_art.size
    art_cols = np.zeros((m, k))
    art_cols[rows_art, np.arange(k)] = np.sign(resid[rows_art] - s_val[rows_art])
    A = np.hstack([sf.A, art_cols]) if k else sf.A
    lo_e = np.concatenate([lo, np.zeros(k)])
    hi_e = np.concatenate([hi, np.full(k, np.inf)])
    c_e = np.concatenate([sf.c, np.zeros(k)])
    spx = _Simplex(A, sf.b, c_e, lo_e, hi_e, max_iter)
    x = np.concatenate([x0, np.zeros(k)])
    x[sf.n:sf.n + m] = s_val
    basis = sf.n + np.arange(m)
    basis[rows_art] = N + np.arange(k)
    x[N:] = np.abs(resid[rows_art] - s_val[rows_art])
    spx.x = x
    spx.set_basis(basis)
    spx.refactor()
    farkas = None
    if k:
        cost1 = np.concatenate([np.zeros(N), np.ones(k)])
        status, _ = spx.primal(cost1)
        infeas = float(np.sum(spx.x[N:]))
        scale = max(1.0, float(np.max(np.abs(sf.b), initial=0.0)))
        if infeas > TAU_FEAS * scale:
            y, _ = spx.duals(cost1)
            return _finish(sf, spx, cost1, Status.INFEASIBLE, y)
        # Drive zero-level artificials out of the basis where a pivot exists.
        spx.hi[N:] = 0.0
        spx.movable[N:] = False
        spx.x[N:] = np.clip(spx.x[N:], 0.0, 0.0)
        for r in range(m):
            if spx.basis[r] < N:
                continue
            row = spx.Binv[r] @ A[:, :N]
            row[spx.is_basic[:N]] = 0.0
            row[~spx.movable[:N]] = 0.0
            j = int(np.argmax(np.abs(row)))
            if abs(row[j]) > 1e-7:
                alpha = spx.Binv @ A[:, j]
                spx._pivot(r, j, alpha)
        spx.refactor()
    status, ray = spx.primal(c_e)
    basis_ok = bool(np.all(spx.basis < N))
    return _finish(sf, spx, c_e, status, ray, basis_ok=basis_ok)


def solve_lp(lp: LinearProgram, backend: str = "simplex", warm: Basis | None = None) -> PrimalDualSolution:
    """Solve a linear program to optimality.

    Parameters
    ----------
    lp : LinearProgram
    backend : {"simplex", "highs"}
        ``"simplex"`` is the built-in bounded primal/dual simplex and is the
        reference path. ``"highs"`` delegates to :func:`scipy.optimize.linprog`
        for large baseline LPs where speed matters more than warm starts.
    warm : Basis, optional
        Starting basis from a previous solve of an LP with the same rows.

    Returns
    -------
    PrimalDualSolution
        ``duals`` holds one multiplier per row with the sign convention
        ``d objective / d rhs`` (nonpositive on ``<=`` rows, nonnegative on
        ``>=`` rows).
    """
    if backend == "highs":
        return _solve_highs(lp)
    if backend != "simplex":
        raise ValueError(f"unknown LP backend {backend!r}")
    return solve_standard(StandardForm(lp), warm=warm)


def _solve_highs(lp: LinearProgram) -> PrimalDualSolution:
    from scipy.optimize import linprog

    senses = np.array(lp.senses)
    A = lp.A.tocsr()
    le = np.flatnonzero(senses == LE)
    ge = np.flatnonzero(senses == GE)
    eq = np.flatnonzero(senses == EQ)
    ub_rows = np.concatenate([le, ge])
    sign = np.concatenate([np.ones(le.size), -np.ones(ge.size)])
    A_ub = sp.diags(sign) @ A[ub_rows] if ub_rows.size else None
    b_ub = sign * lp.rhs[ub_rows] if ub_rows.size else None
    A_eq = A[eq] if eq.size else None
    b_eq = lp.rhs[eq] if eq.size else None
    bounds = np.column_stack([lp.lo, lp.hi])
    bounds = [(None if not np.isfinite(a) else a, None if not np.isfinite(b) else b)
              for a, b in bounds]
    res = linprog(lp.c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq, bounds=bounds,
                  method="highs")
    if res.status == 2:
        # HiGHS presolve may report "infeasible or unbounded" as infeasible.
        feas = linprog(np.zeros_like(lp.c), A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq,
                       bounds=bounds, method="highs")
        if feas.status == 0:
            return PrimalDualSolution(Status.UNBOUNDED, objective_value=-np.inf)
        return PrimalDualSolution(Status.INFEASIBLE, objective_value=np.inf)
    if res.status == 3:
        return PrimalDualSolution(Status.UNBOUNDED, objective_value=-np.inf)
    if res.status != 0:
        raise SolverError(f"HiGHS failed: {res.message}", {"status": res.status})
    duals = np.zeros(lp.n_rows)
    if ub_rows.size:
        duals[ub_rows] = sign * res.ineqlin.marginals
    if eq.size:
        duals[eq] = res.eqlin.marginals
    rc = lp.c - lp.A.T @ duals
    return PrimalDualSolution(
        Status.OPTIMAL, primal=np.asarray(res.x), duals=duals,
        objective_value=float(lp.c @ res.x), reduced_costs=rc,
        iterations=int(getattr(res, "nit", 0)),
    )


def certificate_residuals(lp: LinearProgram, sol: PrimalDualSolution) -> dict:
    """Primal infeasibility, dual infeasibility and duality gap of an optimal solution."""
    x, y = sol.primal, sol.duals
    primal_inf = lp.max_violation(x)
    senses = np.array(lp.senses)
    sign_inf = 0.0
    if y.size:
        sign_inf = max(
            float(np.max(np.maximum(y[senses == LE], 0.0), initial=0.0)),
            float(np.max(np.maximum(-y[senses == GE], 0.0), initial=0.0)),
        )
    d = lp.c - lp.A.T @ y
    scale = max(1.0, float(np.max(np.abs(lp.c), initial=0.0)))
    tol = 1e-9 * scale
    # Reduced costs must push against an active finite bound.
    dual_inf = sign_inf
    bound_term = 0.0
    for j in range(lp.n_vars):
        dj = d[j]
        if dj > tol:
            if not np.isfinite(lp.lo[j]):
                dual_inf = max(dual_inf, dj)
            else:
                bound_term += dj * lp.lo[j]
        elif dj < -tol:
            if not np.isfinite(lp.hi[j]):
                dual_inf = max(dual_inf, -dj)
            else:
                bound_term += dj * lp.hi[j]
    dual_obj = float(lp.rhs @ y) + bound_term
    primal_obj = float(lp.c @ x)
    slack = lp.row_slack(x)
    ineq = senses != EQ
    comp = float(np.max(np.abs(slack[ineq] * y[ineq]), initial=0.0)) if y.size else 0.0
    return {
        "primal_infeasibility": primal_inf,
        "dual_infeasibility": dual_inf,
        "duality_gap": abs(primal_obj - dual_obj),
        "primal_objective": primal_obj,
        "dual_objective": dual_obj,
        "complementarity": comp,
    }
