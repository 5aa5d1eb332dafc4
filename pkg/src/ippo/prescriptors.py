"""Benchmark prescriptions: foresight, predict-then-optimize, SAA, kNN, decision rules."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linsolve import GE, LE, ModelBuilder, SolverError, solve_lp
from .regression import RegressionParams, design, predict
from .scenario import NEWSVENDOR, Dataset, decision_size, scenario_costs

K_GRID = (1, 2, 3, 5, 8, 12, 16, 22, 28, 31, 41, 50)


@dataclass
class MethodResult:
    method: str
    decisions: np.ndarray
    costs: np.ndarray
    hyperparams: dict = field(default_factory=dict)

    @property
    def mean_cost(self) -> float:
        return float(np.mean(self.costs))


def _result(method, decisions, data, inst, **hyper):
    D = np.asarray(decisions, dtype=float)
    if D.ndim == 1:
        D = np.tile(D, (data.n, 1))
    return MethodResult(method, D, scenario_costs(D, data, inst), dict(hyper))


def _solve(mb: ModelBuilder, backend: str, what: str):
    sol = solve_lp(mb.build_lp(), backend=backend)
    if not sol.ok:
        raise SolverError(f"{what} LP ended {sol.status.value}")
    return sol


# --- deterministic single-scenario problems ---------------------------------

def newsvendor_decision(y, c, b) -> np.ndarray:
    """Order the demand when backordering is dearer than ordering, else nothing."""
    y, c, b = (np.asarray(a, dtype=float) for a in (y, c, b))
    return np.where(b > c, np.maximum(y, 0.0), 0.0)


def shipment_decision(y, C, P1, P2, backend="simplex") -> np.ndarray:
    return extensive_decision(np.asarray(y, float)[None], None, (P1, P2, np.asarray(C)[None]), backend)


def deterministic_decisions(Y, inst, backend="simplex") -> np.ndarray:
    """Row-by-row optimal first-stage decision when demand equals ``Y``."""
    Y = np.asarray(Y, dtype=float)
    if inst.problem == NEWSVENDOR:
        return newsvendor_decision(Y, inst.order_cost, inst.backorder_cost)
    return np.array([
        shipment_decision(Y[k], inst.ship_cost[k], inst.advance_cost, inst.lastminute_cost, backend)
        for k in range(Y.shape[0])
    ])


# --- extensive forms ---------------------------------------------------------

def extensive_decision(Y, newsvendor_costs, shipment_costs=None, backend="simplex") -> np.ndarray:
    """Shared first-stage decision minimizing the average cost over the rows of ``Y``.

    Pass ``newsvendor_costs=(c, b, h)`` or ``shipment_costs=(P1, P2, C)``.
    """
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    n, d_l = Y.shape
    mb = ModelBuilder()
    if newsvendor_costs is not None:
        c, b, h = (np.asarray(a, dtype=float).reshape(n, d_l) for a in newsvendor_costs)
        w = 1.0 / (n * d_l)
        q = mb.add_vars(d_l, obj=w * c.sum(axis=0), name="Q")
        U = mb.add_vars((n, d_l), obj=w * b, name="U")
        O = mb.add_vars((n, d_l), obj=w * h, name="O")
        for k in range(n):
            for j in range(d_l):
                mb.add_row([U[k, j], q[j]], [1.0, 1.0], GE, Y[k, j])
                mb.add_row([O[k, j], q[j]], [1.0, -1.0], GE, -Y[k, j])
        sol = _solve(mb, backend, "newsvendor extensive form")
        return np.maximum(sol.primal[q], 0.0)
    P1, P2, C = shipment_costs
    C = np.asarray(C, dtype=float).reshape(n, -1, d_l)
    d_w = C.shape[1]
    z = mb.add_vars(d_w, obj=P1, name="Z")
    T = mb.add_vars((n, d_w), obj=P2 / n, name="T")
    S = mb.add_vars((n, d_w, d_l), obj=C / n, name="S")
    for k in range(n):
        for j in range(d_l):
            mb.add_row(S[k, :, j], np.ones(d_w), GE, Y[k, j])
        for i in range(d_w):
            mb.add_row(np.concatenate([S[k, i], [T[k, i], z[i]]]),
                       np.concatenate([np.ones(d_l), [-1.0, -1.0]]), LE, 0.0)
    sol = _solve(mb, backend, "shipment extensive form")
    return np.maximum(sol.primal[z], 0.0)


def saa_decision(data: Dataset, inst, backend="simplex") -> np.ndarray:
    inst.check(data)
    if inst.problem == NEWSVENDOR:
        return extensive_decision(data.responses,
                                  (inst.order_cost, inst.backorder_cost, inst.holding_cost),
                                  backend=backend)
    return extensive_decision(data.responses, None,
                              (inst.advance_cost, inst.lastminute_cost, inst.ship_cost), backend)


# --- methods -----------------------------------------------------------------

def perfect_foresight(data: Dataset, inst, backend="simplex") -> MethodResult:
    return _result("perfect", deterministic_decisions(data.responses, inst, backend), data, inst)


def point_estimate(params: RegressionParams, data: Dataset, inst, backend="simplex",
                   method="point_estimate") -> MethodResult:
    Yhat = predict(params, data.features)
    return _result(method, deterministic_decisions(Yhat, inst, backend), data, inst)


def saa(train: Dataset, train_inst, eval_data: Dataset, eval_inst, backend="simplex") -> MethodResult:
    return _result("saa", saa_decision(train, train_inst, backend), eval_data, eval_inst)


def neighbors(train_X, x_query, k: int) -> np.ndarray:
    """Indices of the k nearest rows by Euclidean distance, ties to the lower row."""
    train_X = np.atleast_2d(train_X)
    if not 1 <= k <= train_X.shape[0]:
        raise ValueError(f"k = {k} outside [1, {train_X.shape[0]}]")
    dist = np.sqrt(np.sum((train_X - np.asarray(x_query, dtype=float)) ** 2, axis=1))
    order = np.lexsort((np.arange(len(dist)), dist))
    return np.sort(order[:k])


def knn_cso(train: Dataset, x_query, k: int, inst_train, backend="simplex") -> np.ndarray:
    """SAA decision over the k training scenarios nearest to ``x_query``."""
    rows = neighbors(train.features, x_query, k)
    return saa_decision(train.subset(rows), inst_train.subset(rows), backend)


def knn(train: Dataset, train_inst, eval_data: Dataset, eval_inst, k: int,
        backend="simplex") -> MethodResult:
    cache: dict = {}
    D = np.empty((eval_data.n, decision_size(eval_inst)))
    for r in range(eval_data.n):
        rows = neighbors(train.features, eval_data.features[r], k)
        key = rows.tobytes()
        if key not in cache:
            cache[key] = saa_decision(train.subset(rows), train_inst.subset(rows), backend)
        D[r] = cache[key]
    return _result("knn", D, eval_data, eval_inst, k=k)


# --- linear decision rules ------------------------------------------------------

@dataclass(frozen=True)
class DecisionRule:
    """``decision(x) = max(theta @ [1, x], 0)`` row by row."""

    theta: np.ndarray
    objective: float = float("nan")

    def decide(self, X) -> np.ndarray:
        return np.maximum(design(X) @ np.asarray(self.theta).T, 0.0)


def feature_based_fit(train: Dataset, inst, use_features: bool = True,
                      backend="simplex") -> DecisionRule:
    """Affine decision rule minimizing average train cost, one LP.

    The rule is constrained to be nonnegative on the training rows, so its
    realized train cost equals the LP objective.
    """
    inst.check(train)
    Xd = design(train.features) if use_features else np.ones((train.n, 1))
    n, p = Xd.shape
    Y = train.responses
    d_l = train.d_l
    k = decision_size(inst)
    mb = ModelBuilder()
    theta = mb.add_vars((k, p), lo=-np.inf, name="theta")
    if inst.problem == NEWSVENDOR:
        w = 1.0 / (n * d_l)
        U = mb.add_vars((n, d_l), obj=w * inst.backorder_cost, name="U")
        O = mb.add_vars((n, d_l), obj=w * inst.holding_cost, name="O")
        mb.add_obj(theta, w * (inst.order_cost.T @ Xd))
        for r in range(n):
            for j in range(d_l):
                mb.add_row(np.append(theta[j], U[r, j]), np.append(Xd[r], 1.0), GE, Y[r, j])
                mb.add_row(np.append(theta[j], O[r, j]), np.append(-Xd[r], 1.0), GE, -Y[r, j])
    else:
        d_w = inst.d_w
        T = mb.add_vars((n, d_w), obj=inst.lastminute_cost / n, name="T")
        S = mb.add_vars((n, d_w, d_l), obj=inst.ship_cost / n, name="S")
        mb.add_obj(theta, np.tile(inst.advance_cost * Xd.mean(axis=0), (d_w, 1)))
        for r in range(n):
            for j in range(d_l):
                mb.add_row(S[r, :, j], np.ones(d_w), GE, Y[r, j])
            for i in range(d_w):
                mb.add_row(np.concatenate([S[r, i], [T[r, i]], theta[i]]),
                           np.concatenate([np.ones(d_l), [-1.0], -Xd[r]]), LE, 0.0)
    for r in range(n):
        for i in range(k):
            mb.add_row(theta[i], Xd[r], GE, 0.0)
    sol = _solve(mb, backend, "decision rule")
    th = sol.primal[theta]
    if not use_features:
        th = np.hstack([th, np.zeros((k, train.d_x))])
    return DecisionRule(th, float(sol.objective_value))


def evaluate_rule(rule: DecisionRule, data: Dataset, inst, method="feature_based") -> MethodResult:
    return _result(method, rule.decide(data.features), data, inst)
