"""Integrated prediction/prescription as a bilevel program and its KKT single-level form.

The upper level picks regression coefficients beta and is charged the realized
cost of the lower level's decisions under the true demand. Each training
scenario has its own lower-level LP that plans against the predicted demand
``yhat = beta @ [1, x]``. Since beta enters every lower LP only through its
right-hand side, replacing each lower LP by primal feasibility, dual
feasibility, stationarity and complementarity gives a model that is linear
apart from the complementarity pairs, which the branch-and-bound layer
handles by branching.

For a fixed beta the optimistic value can be computed without any
branching: solve each lower LP for its optimal value, then minimize the upper
cost over the lower optimal face (:func:`evaluate_beta`). The same solves
give a complementarity pattern, which seeds and polishes the search.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .linsolve import (
    EQ, GE, LE, ModelBuilder, MixedIntegerModel, PrimalDualSolution, SolverError, Status,
    quadratic_pwl, quadratic_pwl_error, solve_lp, solve_milp,
)
from .linsolve.pwl import _merged_segments
from .regression import LossKind, RegressionParams, design, ols_fit
from .scenario import NEWSVENDOR, Dataset

log = logging.getLogger(__name__)

TAU_FEAS = 1e-7
TAU_COMP = 1e-6
SQUARED_SEGMENTS = 64
RIDGE_SEGMENTS = 64


class IPPOError(RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


# --- regularization config ------------------------------------------------------

@dataclass(frozen=True)
class RegConfig:
    """``mode`` is one of "none", "weighted", "losscap", "ridge"; ``value`` is its lambda."""

    mode: str = "none"
    value: float = 1.0
    loss: LossKind = LossKind.ABSOLUTE
    loss_star: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "loss", LossKind(self.loss))
        v = float(self.value)
        object.__setattr__(self, "value", v)
        if self.mode == "weighted" and not 0.0 <= v <= 1.0:
            raise ValueError("weighted regularization needs 0 <= lambda1 <= 1")
        if self.mode == "losscap" and not v >= 1.0:
            raise ValueError("a loss cap below the minimal loss makes the model infeasible (lambda2 >= 1)")
        if self.mode == "ridge" and not v >= 0.0:
            raise ValueError("ridge weight lambda3 must be nonnegative")
        if self.mode not in ("none", "weighted", "losscap", "ridge"):
            raise ValueError(f"unknown regularization mode {self.mode!r}")

    @classmethod
    def weighted(cls, lam1, loss=LossKind.ABSOLUTE):
        return cls("weighted", lam1, loss)

    @classmethod
    def losscap(cls, lam2, loss=LossKind.ABSOLUTE, loss_star=None):
        return cls("losscap", lam2, loss, loss_star)

    @classmethod
    def ridge(cls, lam3):
        return cls("ridge", lam3)

    def to_dict(self):
        return {"mode": self.mode, "value": self.value, "loss": self.loss.value,
                "loss_star": self.loss_star}


NO_REG = RegConfig()


# --- bilevel model --------------------------------------------------------------

@dataclass
class LowerBlock:
    """One scenario's lower LP: min q v  s.t.  A v >= r0 + E beta_flat,  v >= 0."""

    v: np.ndarray
    A: np.ndarray
    r0: np.ndarray
    E: np.ndarray
    q: np.ndarray
    link: np.ndarray            # positions in v of the first-stage decisions
    upper_vars: np.ndarray      # global indices of this scenario's upper variables
    upper_rows: np.ndarray      # global rows (upper feasibility and link)
    row_names: tuple = ()

    def rhs(self, beta_flat) -> np.ndarray:
        return self.r0 + self.E @ beta_flat


@dataclass
class BilevelModel:
    problem: str
    builder: ModelBuilder
    beta: np.ndarray
    blocks: list
    Xd: np.ndarray
    Y: np.ndarray
    beta_lo: np.ndarray
    beta_hi: np.ndarray

    @property
    def n_scenarios(self) -> int:
        return len(self.blocks)

    def lower_counts(self):
        return sum(len(b.r0) for b in self.blocks), sum(len(b.v) for b in self.blocks)


def default_beta_bounds(train: Dataset, scale: float = 10.0, minimum: float = 10.0):
    """Symmetric box of ``scale`` times the OLS magnitude, at least +-``minimum``."""
    try:
        b = ols_fit(train.features, train.responses).beta
    except ValueError:
        b = np.zeros((train.d_l, train.d_x + 1))
        b[:, 0] = train.responses.mean(axis=0)
    width = np.maximum(scale * np.abs(b), minimum)
    return -width, width


def build_bilevel(train: Dataset, inst, bounds=None) -> BilevelModel:
    """Upper level in true demand, one lower LP per row in predicted demand, linked first stages."""
    if train.n < 1:
        raise ValueError("the training set is empty")
    inst.check(train)
    d_l, d_x, N = train.d_l, train.d_x, train.n
    lo, hi = bounds if bounds is not None else default_beta_bounds(train)
    lo = np.broadcast_to(np.asarray(lo, float), (d_l, d_x + 1)).copy()
    hi = np.broadcast_to(np.asarray(hi, float), (d_l, d_x + 1)).copy()
    if np.any(lo > hi) or not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise ValueError("beta bounds must be finite with lo <= hi")
    Xd = design(train.features)
    Y = train.responses
    mb = ModelBuilder()
    beta = mb.add_vars((d_l, d_x + 1), lo=lo, hi=hi, name="beta")
    n_beta = beta.size
    blocks = []
    for n in range(N):
        u_rows = []
        if inst.problem == NEWSVENDOR:
            w = 1.0 / (N * d_l)
            c, b, h = inst.order_cost[n], inst.backorder_cost[n], inst.holding_cost[n]
            Qu = mb.add_vars(d_l, obj=w * c, name=f"QU{n}")
            Uu = mb.add_vars(d_l, obj=w * b, name=f"UU{n}")
            Ou = mb.add_vars(d_l, obj=w * h, name=f"OU{n}")
            for j in range(d_l):
                u_rows.append(mb.add_row([Uu[j], Qu[j]], [1, 1], GE, Y[n, j], name=f"short_u{n}_{j}"))
                u_rows.append(mb.add_row([Ou[j], Qu[j]], [1, -1], GE, -Y[n, j], name=f"surp_u{n}_{j}"))
            Ql = mb.add_vars(d_l, name=f"QL{n}")
            Ul = mb.add_vars(d_l, name=f"UL{n}")
            Ol = mb.add_vars(d_l, name=f"OL{n}")
            for j in range(d_l):
                u_rows.append(mb.add_row([Qu[j], Ql[j]], [1, -1], EQ, 0.0, name=f"link{n}_{j}"))
            v = np.concatenate([Ql, Ul, Ol])
            A = np.zeros((2 * d_l, 3 * d_l))
            E = np.zeros((2 * d_l, n_beta))
            names = []
            for j in range(d_l):
                A[2 * j, [j, d_l + j]] = 1.0              # U + Q >= yhat
                A[2 * j + 1, [2 * d_l + j, j]] = [1.0, -1.0]  # O - Q >= -yhat
                E[2 * j, beta[j]] = Xd[n]
                E[2 * j + 1, beta[j]] = -Xd[n]
                names += [f"short_l{n}_{j}", f"surp_l{n}_{j}"]
            q = w * np.concatenate([c, b, h])
            link = np.arange(d_l)
            upper = np.concatenate([Qu, Uu, Ou])
        else:
            d_w = inst.d_w
            P1, P2, C = inst.advance_cost, inst.lastminute_cost, inst.ship_cost[n]
            Zu = mb.add_vars(d_w, obj=P1 / N, name=f"ZU{n}")
            Tu = mb.add_vars(d_w, obj=P2 / N, name=f"TU{n}")
            Su = mb.add_vars((d_w, d_l), obj=C / N, name=f"SU{n}")
            for j in range(d_l):
                u_rows.append(mb.add_row(Su[:, j], np.ones(d_w), GE, Y[n, j], name=f"dem_u{n}_{j}"))
            for i in range(d_w):
                u_rows.append(mb.add_row(np.concatenate([Su[i], [Zu[i], Tu[i]]]),
                                         np.concatenate([-np.ones(d_l), [1, 1]]), GE, 0.0,
                                         name=f"sup_u{n}_{i}"))
            Zl = mb.add_vars(d_w, name=f"ZL{n}")
            Tl = mb.add_vars(d_w, name=f"TL{n}")
            Sl = mb.add_vars((d_w, d_l), name=f"SL{n}")
            for i in range(d_w):
                u_rows.append(mb.add_row([Zu[i], Zl[i]], [1, -1], EQ, 0.0, name=f"link{n}_{i}"))
            v = np.concatenate([Zl, Tl, Sl.ravel()])
            nv = len(v)
            A = np.zeros((d_l + d_w, nv))
            E = np.zeros((d_l + d_w, n_beta))
            names = []
            s_pos = 2 * d_w + np.arange(d_w * d_l).reshape(d_w, d_l)
            for j in range(d_l):
                A[j, s_pos[:, j]] = 1.0                   # sum_i S_ij >= yhat_j
                E[j, beta[j]] = Xd[n]
                names.append(f"dem_l{n}_{j}")
            for i in range(d_w):
                A[d_l + i, s_pos[i]] = -1.0               # Z_i + T_i - sum_j S_ij >= 0
                A[d_l + i, [i, d_w + i]] = 1.0
                names.append(f"sup_l{n}_{i}")
            q = np.concatenate([np.full(d_w, P1 / N), np.full(d_w, P2 / N), C.ravel() / N])
            link = np.arange(d_w)
            upper = np.concatenate([Zu, Tu, Su.ravel()])
        blocks.append(LowerBlock(v, A, np.zeros(A.shape[0]), E, q, link, upper,
                                 np.array(u_rows), tuple(names)))
    return BilevelModel(inst.problem, mb, beta, blocks, Xd, Y, lo, hi)


# --- KKT reformulation -------------------------------------------------------------

@dataclass
class KKTModel:
    bilevel: BilevelModel
    builder: ModelBuilder
    pi: list = field(default_factory=list)          # per scenario: multiplier columns
    lower_rows: list = field(default_factory=list)  # per scenario: primal rows
    stat_rows: list = field(default_factory=list)   # per scenario: stationarity rows
    pair_start: list = field(default_factory=list)
    upper_c: np.ndarray = None                      # upper objective before regularization
    reg: RegConfig = NO_REG
    loss_vars: dict = field(default_factory=dict)
    pwl_error: float = 0.0

    @property
    def beta(self):
        return self.bilevel.beta

    @property
    def n_pairs(self) -> int:
        return len(self.builder.pairs)

    def build(self) -> MixedIntegerModel:
        return self.builder.build()


def kkt_reformulate(bm: BilevelModel) -> KKTModel:
    """Lower levels replaced by primal/dual feasibility, stationarity and complementarity.

    Pairs are ordered scenario by scenario: first each primal row with its
    multiplier, then each stationarity row with its lower variable.
    """
    mb = bm.builder.copy()
    kkt = KKTModel(bm, mb, upper_c=np.array(mb._obj))
    bflat = bm.beta.ravel()
    for n, blk in enumerate(bm.blocks):
        rows = []
        for i in range(len(blk.r0)):
            nz = np.flatnonzero(blk.A[i])
            bz = np.flatnonzero(blk.E[i])
            rows.append(mb.add_row(np.concatenate([blk.v[nz], bflat[bz]]),
                                   np.concatenate([blk.A[i, nz], -blk.E[i, bz]]),
                                   GE, blk.r0[i], name=blk.row_names[i] if blk.row_names else None))
        pi = mb.add_vars(len(rows), name=f"pi{n}")
        stat = []
        for k in range(len(blk.v)):
            nz = np.flatnonzero(blk.A[:, k])
            stat.append(mb.add_row(pi[nz], blk.A[nz, k], LE, blk.q[k], name=f"stat{n}_{k}"))
        kkt.pair_start.append(len(mb.pairs))
        for r, p in zip(rows, pi):
            mb.add_pair(r, int(p))
        for r, k in zip(stat, blk.v):
            mb.add_pair(r, int(k))
        kkt.pi.append(pi)
        kkt.lower_rows.append(np.array(rows))
        kkt.stat_rows.append(np.array(stat))
    kkt.pair_start.append(len(mb.pairs))
    return kkt


def linearity_audit(kkt: KKTModel) -> dict:
    """Structural check that no row couples beta with a multiplier or two unknowns multiplicatively.

    The model is stored as a coefficient matrix, so products cannot appear by
    construction; what can go wrong is beta reaching a stationarity row or a
    multiplier reaching a primal row. Both would signal a malformed reformulation.
    """
    lp = kkt.builder.build_lp()
    A = lp.A.tocsr()
    beta = set(kkt.beta.ravel().tolist())
    pis = set(np.concatenate(kkt.pi).tolist()) if kkt.pi else set()
    bad = []
    for rows in kkt.stat_rows:
        for r in rows:
            cols = set(A.indices[A.indptr[r]:A.indptr[r + 1]].tolist())
            if cols & beta or not cols <= pis:
                bad.append(int(r))
    for rows in kkt.lower_rows:
        for r in rows:
            cols = set(A.indices[A.indptr[r]:A.indptr[r + 1]].tolist())
            if cols & pis:
                bad.append(int(r))
    return {"rows_checked": lp.n_rows, "bilinear_terms": 0, "misplaced_rows": bad,
            "linear": not bad}


# --- regularization ------------------------------------------------------------------

def _residual_range(bm: BilevelModel) -> float:
    """Bound on |y - yhat| over the beta box, used as the squared-loss PWL range."""
    ab = np.maximum(np.abs(bm.beta_lo), np.abs(bm.beta_hi))
    return float(np.max(np.abs(bm.Y)) + np.max(np.abs(bm.Xd) @ ab.T)) + 1.0


def _add_loss(kkt: KKTModel, kind: LossKind, weight: float, as_row: bool):
    """Add the mean prediction loss over the training rows.

    Returns the (indices, coefficients) of a linear expression equal to the
    loss (absolute loss exactly, squared loss through PWL epigraph cuts).
    """
    bm, mb = kkt.bilevel, kkt.builder
    N, d_l = bm.Y.shape
    w = 1.0 / (N * d_l)
    idx, coef = [], []
    if kind == LossKind.ABSOLUTE:
        ep = mb.add_vars((N, d_l), name="eplus")
        em = mb.add_vars((N, d_l), name="eminus")
        for n in range(N):
            for j in range(d_l):
                mb.add_row(np.concatenate([bm.beta[j], [ep[n, j], em[n, j]]]),
                           np.concatenate([bm.Xd[n], [-1.0, 1.0]]), EQ, bm.Y[n, j],
                           name=f"resid{n}_{j}")
        idx = np.concatenate([ep.ravel(), em.ravel()])
        coef = np.full(idx.size, w)
        kkt.loss_vars = {"eplus": ep, "eminus": em}
    else:
        R = _residual_range(bm)
        r = mb.add_vars((N, d_l), lo=-R, hi=R, name="resid")
        for n in range(N):
            for j in range(d_l):
                mb.add_row(np.append(bm.beta[j], r[n, j]), np.append(bm.Xd[n], 1.0), EQ,
                           bm.Y[n, j], name=f"resid{n}_{j}")
        t = mb.add_vars((N, d_l), name="sqloss")
        for n in range(N):
            for j in range(d_l):
                term = quadratic_pwl(int(r[n, j]), -R, R, SQUARED_SEGMENTS)
                for s, b0 in _merged_segments(term):
                    mb.add_row([t[n, j], r[n, j]], [1.0, -s], GE, b0)
        idx = t.ravel()
        coef = np.full(idx.size, w)
        kkt.pwl_error = max(kkt.pwl_error, quadratic_pwl_error(-R, R, SQUARED_SEGMENTS))
        kkt.loss_vars = {"resid": r, "sqloss": t}
    if not as_row:
        mb.add_obj(idx, weight * coef)
    return idx, coef


def min_loss(train: Dataset, kind=LossKind.ABSOLUTE, bounds=None) -> tuple:
    """Minimal mean loss and its beta: an LP for absolute loss, OLS for squared."""
    if LossKind(kind) == LossKind.SQUARED:
        from .regression import loss
        p = ols_fit(train.features, train.responses)
        return loss(p, train.features, train.responses, LossKind.SQUARED), p.beta
    Xd = design(train.features)
    N, d_l = train.responses.shape
    mb = ModelBuilder()
    lo, hi = bounds if bounds is not None else (-np.inf, np.inf)
    beta = mb.add_vars((d_l, Xd.shape[1]), lo=lo, hi=hi, name="beta")
    ep = mb.add_vars((N, d_l), obj=1.0 / (N * d_l), name="eplus")
    em = mb.add_vars((N, d_l), obj=1.0 / (N * d_l), name="eminus")
    for n in range(N):
        for j in range(d_l):
            mb.add_row(np.concatenate([beta[j], [ep[n, j], em[n, j]]]),
                       np.concatenate([Xd[n], [-1.0, 1.0]]), EQ, train.responses[n, j])
    sol = solve_lp(mb.build_lp())
    if not sol.ok:
        raise SolverError(f"least absolute deviation LP ended {sol.status.value}")
    return float(sol.objective_value), sol.primal[beta]


def apply_regularization(kkt: KKTModel, reg: RegConfig, train: Dataset | None = None) -> KKTModel:
    """Return a copy of ``kkt`` with one of the three generalization controls added."""
    out = KKTModel(kkt.bilevel, kkt.builder.copy(), kkt.pi, kkt.lower_rows, kkt.stat_rows,
                   kkt.pair_start, kkt.upper_c, reg, {}, kkt.pwl_error)
    mb = out.builder
    if reg.mode == "none":
        return out
    if reg.mode == "weighted":
        if reg.value == 1.0:
            return out
        mb.scale_obj(reg.value)
        _add_loss(out, reg.loss, 1.0 - reg.value, as_row=False)
    elif reg.mode == "losscap":
        L_star = reg.loss_star
        if L_star is None:
            if train is None:
                raise ValueError("a loss cap needs the training data or a precomputed minimal loss")
            L_star, _ = min_loss(train, reg.loss)
            out.reg = RegConfig(reg.mode, reg.value, reg.loss, L_star)
        idx, coef = _add_loss(out, reg.loss, 0.0, as_row=True)
        mb.add_row(idx, coef, LE, reg.value * L_star, name="losscap")
    elif reg.mode == "ridge":
        if reg.value == 0.0:
            return out
        bm = out.bilevel
        for j, k in np.ndindex(bm.beta.shape):
            lo, hi = bm.beta_lo[j, k], bm.beta_hi[j, k]
            if hi > lo:
                mb.add_pwl(quadratic_pwl(int(bm.beta[j, k]), lo, hi, RIDGE_SEGMENTS, weight=reg.value))
                out.pwl_error += quadratic_pwl_error(lo, hi, RIDGE_SEGMENTS, reg.value)
            else:
                mb.add_obj(int(bm.beta[j, k]), 0.0)
    return out


# --- evaluation at a fixed beta ---------------------------------------------------------

@dataclass
class BetaEvaluation:
    beta: np.ndarray
    upper_cost: float
    scenario_costs: np.ndarray
    lower: list          # per scenario lower primal at the optimistic selection
    upper: list          # per scenario upper variables
    duals: list          # per scenario lower multipliers
    pattern: np.ndarray  # complementarity pattern consistent with the above


class Evaluator:
    """Lower-level responses and optimistic upper cost for a given beta, with caching."""

    def __init__(self, kkt: KKTModel):
        self.kkt = kkt
        self.bm = kkt.bilevel
        lp = self.bm.builder.build_lp()
        self.A_up = lp.A.tocsr()
        self.rhs_up = lp.rhs
        self.senses_up = lp.senses
        self.c_up = kkt.upper_c
        self._cache: dict = {}
        self._tmpl: dict = {}
        self._warm: dict = {}
        self.calls = 0

    def _templates(self, bi: int, blk: LowerBlock):
        """Lower LP and optimistic-completion LP of one scenario with placeholder right-hand sides."""
        if bi in self._tmpl:
            return self._tmpl[bi]
        zero = np.zeros(len(blk.r0))
        mb = ModelBuilder()
        v = mb.add_vars(len(blk.v), obj=blk.q)
        for i in range(len(zero)):
            nz = np.flatnonzero(blk.A[i])
            mb.add_row(v[nz], blk.A[i, nz], GE, 0.0)
        lower = mb.build_lp()

        mb = ModelBuilder()
        uv = blk.upper_vars
        u = mb.add_vars(len(uv), obj=self.c_up[uv])
        v = mb.add_vars(len(blk.v))
        col = {int(g): int(k) for g, k in zip(uv, u)}
        col.update({int(g): int(k) for g, k in zip(blk.v, v)})
        for r in blk.upper_rows:
            lo, hi = self.A_up.indptr[r], self.A_up.indptr[r + 1]
            cols = [col[int(c)] for c in self.A_up.indices[lo:hi]]
            mb.add_row(cols, self.A_up.data[lo:hi], self.senses_up[r], self.rhs_up[r])
        first = mb.n_rows
        for i in range(len(zero)):
            nz = np.flatnonzero(blk.A[i])
            mb.add_row(v[nz], blk.A[i, nz], GE, 0.0)
        nzq = np.flatnonzero(blk.q)
        mb.add_row(v[nzq], blk.q[nzq], LE, 0.0)
        opt = mb.build_lp()
        self._tmpl[bi] = (lower, opt, u, v, first)
        return self._tmpl[bi]

    def _lower(self, bi: int, blk: LowerBlock, beta_flat):
        lp = self._templates(bi, blk)[0]
        sol = solve_lp(replace(lp, rhs=blk.rhs(beta_flat)), warm=self._warm.get(("l", bi)))
        if not sol.ok:
            raise IPPOError(f"lower LP ended {sol.status.value}")
        self._warm[("l", bi)] = sol.basis
        return sol

    def _optimistic(self, bi: int, blk: LowerBlock, beta_flat, phi, tight, zero):
        """min upper cost over the lower optimal face of one scenario.

        Every lower optimum is complementary to the lower duals, so the face is
        cut out exactly by making rows with a positive multiplier tight and
        fixing variables with a positive reduced cost at zero. The cost cap on
        the last row is then only a loose safeguard.
        """
        _, lp, u, v, first = self._templates(bi, blk)
        rhs = lp.rhs.copy()
        rows = slice(first, first + len(blk.r0))
        rhs[rows] = blk.rhs(beta_flat)
        rhs[-1] = phi + 1e-9 * (1.0 + abs(phi))
        senses = list(lp.senses)
        senses[rows] = [EQ if t else GE for t in tight]
        hi = lp.hi.copy()
        hi[v[zero]] = 0.0
        sol = solve_lp(replace(lp, rhs=rhs, senses=tuple(senses), hi=hi), warm=self._warm.get(("o", bi)))
        if not sol.ok:
            raise IPPOError(f"optimistic completion LP ended {sol.status.value}")
        self._warm[("o", bi)] = sol.basis
        return sol.primal[u], sol.primal[v], float(sol.objective_value)

    def __call__(self, beta) -> BetaEvaluation:
        beta = np.clip(np.asarray(beta, float).reshape(self.bm.beta.shape), self.bm.beta_lo, self.bm.beta_hi)
        key = beta.tobytes()
        if key in self._cache:
            return self._cache[key]
        self.calls += 1
        bflat = beta.ravel()
        lows, ups, duals, costs, pattern = [], [], [], [], []
        for bi, blk in enumerate(self.bm.blocks):
            low = self._lower(bi, blk, bflat)
            pi = np.maximum(low.duals, 0.0)
            nu = blk.q - blk.A.T @ pi
            tol = 1e-9 * max(1.0, float(np.max(np.abs(blk.q))))
            u, v, cost = self._optimistic(bi, blk, bflat, float(low.objective_value), pi > tol, nu > tol)
            lows.append(v)
            ups.append(u)
            duals.append(pi)
            costs.append(cost)
            pattern.append(pi > tol)             # row pairs: slack side zero where the multiplier is positive
            pattern.append(~(nu > tol))          # stationarity pairs: reduced cost zero unless strictly positive
        ev = BetaEvaluation(beta, float(np.sum(costs)), np.array(costs), lows, ups, duals,
                            np.concatenate(pattern))
        if len(self._cache) > 4096:
            self._cache.clear()
        self._cache[key] = ev
        return ev


def evaluate_beta(kkt_or_bm, beta) -> BetaEvaluation:
    kkt = kkt_or_bm if isinstance(kkt_or_bm, KKTModel) else kkt_reformulate(kkt_or_bm)
    return Evaluator(kkt)(beta)


def regularization_value(kkt: KKTModel, beta) -> float:
    """Extra objective contributed by the regularization at ``beta`` (0 without one)."""
    reg = kkt.reg
    bm = kkt.bilevel
    beta = np.asarray(beta, float).reshape(bm.beta.shape)
    if reg.mode == "weighted" and reg.value < 1.0:
        r = bm.Y - bm.Xd @ beta.T
        if reg.loss == LossKind.ABSOLUTE:
            L = float(np.mean(np.abs(r)))
        else:
            R = _residual_range(bm)
            term = quadratic_pwl(0, -R, R, SQUARED_SEGMENTS)
            L = float(np.mean(term(np.clip(r, -R, R))))
        return (1.0 - reg.value) * L
    if reg.mode == "ridge" and reg.value > 0:
        total = 0.0
        for j, k in np.ndindex(bm.beta.shape):
            lo, hi = bm.beta_lo[j, k], bm.beta_hi[j, k]
            if hi > lo:
                total += float(quadratic_pwl(0, lo, hi, RIDGE_SEGMENTS, weight=reg.value)(beta[j, k]))
        return total
    return 0.0


def model_objective(kkt: KKTModel, ev: BetaEvaluation) -> float:
    scale = kkt.reg.value if (kkt.reg.mode == "weighted") else 1.0
    return scale * ev.upper_cost + regularization_value(kkt, ev.beta)


# --- solve ---------------------------------------------------------------------------

@dataclass
class SolveOptions:
    gap_tol: float = 1e-6
    node_limit: int = 2000
    heuristic_every: int = 10
    seed_betas: tuple = ()
    use_data_seeds: bool = True
    max_polished_seeds: int = 3
    complementarity: str = "branch"
    big_m: Optional[float] = None
    lp_backend: str = "simplex"


@dataclass
class IPPOSolution:
    beta: RegressionParams
    objective: float
    train_cost: float
    bound: float
    gap: float
    status: str
    first_stage: np.ndarray
    lower: list
    upper: list
    reg: RegConfig
    stats: dict

    def to_dict(self) -> dict:
        return {
            "beta": self.beta.beta.tolist(), "objective": self.objective,
            "train_cost": self.train_cost, "bound": self.bound, "gap": self.gap,
            "status": self.status, "first_stage": np.asarray(self.first_stage).tolist(),
            "lower": [np.asarray(v).tolist() for v in self.lower],
            "upper": [np.asarray(u).tolist() for u in self.upper],
            "reg": self.reg.to_dict(), "stats": self.stats,
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True, default=float) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "IPPOSolution":
        d = json.loads(Path(path).read_text())
        r = d["reg"]
        return cls(RegressionParams(np.array(d["beta"])), d["objective"], d["train_cost"],
                   d["bound"], d["gap"], d["status"], np.array(d["first_stage"]),
                   [np.array(v) for v in d["lower"]], [np.array(u) for u in d["upper"]],
                   RegConfig(r["mode"], r["value"], r["loss"], r["loss_star"]), d["stats"])


SEED_QUANTILES = (0.5, 0.75, 0.9, 0.95)


def candidate_betas(train: Dataset) -> list:
    """Cheap starting coefficients: OLS, OLS shifted to residual quantiles, and constants.

    The constant candidates (zero slopes) reproduce a feature-blind plan, so the
    search always starts from something no worse than ignoring the features.
    """
    out = []
    Y = train.responses
    if train.n > train.d_x + 1:
        p = ols_fit(train.features, Y)
        R = Y - p.intercepts[None, :] - train.features @ p.slopes.T
        out.append(p.beta)
        for q in SEED_QUANTILES:
            b = p.beta.copy()
            b[:, 0] += np.quantile(R, q, axis=0)
            out.append(b)
    for q in SEED_QUANTILES:
        b = np.zeros((train.d_l, train.d_x + 1))
        b[:, 0] = np.quantile(Y, q, axis=0)
        out.append(b)
    return out


def solve_kkt(kkt: KKTModel, opts: SolveOptions | None = None, train: Dataset | None = None) -> IPPOSolution:
    opts = opts or SolveOptions()
    bm = kkt.bilevel
    evaluator = Evaluator(kkt)
    beta_cols = bm.beta.ravel()

    def heuristic(x):
        try:
            return evaluator(x[beta_cols]).pattern
        except (IPPOError, SolverError):
            return None

    seeds = [np.asarray(b, float) for b in opts.seed_betas]
    if not kkt.n_pairs:
        # a pattern-fixed model is a plain LP; seeds and the heuristic have nothing to fix
        heuristic, seeds = None, []
    elif opts.use_data_seeds and train is not None:
        seeds = candidate_betas(train) + seeds
    scored = []
    for b in seeds:
        try:
            ev = evaluator(b)
        except (IPPOError, SolverError) as exc:
            log.debug("seed beta skipped: %s", exc)
            continue
        scored.append((model_objective(kkt, ev), len(scored), ev.pattern))
    patterns = [p for _, _, p in sorted(scored, key=lambda t: t[:2])[: opts.max_polished_seeds]]
    model = kkt.build()
    sol = solve_milp(model, gap_tol=opts.gap_tol, node_limit=opts.node_limit,
                     complementarity=opts.complementarity, big_m=opts.big_m,
                     heuristic=heuristic, heuristic_every=opts.heuristic_every,
                     start_patterns=patterns, tau_comp=TAU_COMP, lp_backend=opts.lp_backend)
    if sol.status in (Status.NO_INCUMBENT, Status.INFEASIBLE):
        raise IPPOError(f"IPPO solve ended {sol.status.value}",
                        {"bound": sol.bound, "nodes": sol.nodes, "pairs": kkt.n_pairs})
    return _package(kkt, sol, evaluator)


def _package(kkt: KKTModel, sol: PrimalDualSolution, evaluator: Evaluator) -> IPPOSolution:
    bm = kkt.bilevel
    x = sol.primal
    beta = x[bm.beta].copy()
    lower = [x[b.v] for b in bm.blocks]
    upper = [x[b.upper_vars] for b in bm.blocks]
    first = np.array([v[b.link] for v, b in zip(lower, bm.blocks)])
    train_cost = float(kkt.upper_c @ x[: len(kkt.upper_c)])
    model = kkt.build()
    comp = model.complementarity_residuals(x[: model.base.n_vars]) if kkt.n_pairs else np.zeros(0)
    link = max((float(np.max(np.abs(x[b.upper_vars[b.link]] - x[b.v[b.link]])))
                for b in bm.blocks), default=0.0)
    stats = {
        "nodes": sol.nodes, "lp_solves": sol.stats.get("lp_solves", 0),
        "pairs": kkt.n_pairs, "evaluations": evaluator.calls,
        "max_complementarity": float(comp.max()) if comp.size else 0.0,
        "max_link_residual": link, "pwl_error_bound": kkt.pwl_error,
        "n_scenarios": bm.n_scenarios,
    }
    return IPPOSolution(RegressionParams(beta), float(sol.objective_value), train_cost,
                        float(sol.bound), float(sol.gap), sol.status.value, first, lower, upper,
                        kkt.reg, stats)


def solve_ippo(train: Dataset, inst, reg: RegConfig = NO_REG, opts: SolveOptions | None = None,
               bounds=None) -> IPPOSolution:
    bm = build_bilevel(train, inst, bounds)
    kkt = apply_regularization(kkt_reformulate(bm), reg, train)
    return solve_kkt(kkt, opts, train)


def fix_pattern(kkt: KKTModel, pattern) -> KKTModel:
    """Drop every complementarity pair by fixing one side, which leaves a pure LP.

    ``pattern[k]`` True makes pair k's row tight (an equality), False pins its
    multiplier or lower variable to zero.
    """
    pattern = np.asarray(pattern, dtype=bool).ravel()
    if pattern.size != kkt.n_pairs:
        raise ValueError(f"pattern has {pattern.size} entries for {kkt.n_pairs} pairs")
    mb = kkt.builder.copy()
    for p, tight in zip(kkt.builder.pairs, pattern):
        if tight:
            mb._senses[p.slack_ref] = EQ
        else:
            mb.set_bounds(p.dual_ref, hi=0.0)
    mb.pairs = []
    return KKTModel(kkt.bilevel, mb, kkt.pi, kkt.lower_rows, kkt.stat_rows,
                    [0] * len(kkt.pair_start), kkt.upper_c, kkt.reg, kkt.loss_vars, kkt.pwl_error)


def convex_at(kkt: KKTModel, beta) -> KKTModel:
    """The LP obtained by fixing every pair to the pattern the lower level shows at ``beta``."""
    return fix_pattern(kkt, Evaluator(kkt)(np.asarray(beta, float)).pattern)
