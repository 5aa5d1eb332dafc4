"""Datasets, problem instances, and realized-cost evaluation.

Two prescriptive problems share this data model. In the multi-product
newsvendor the first-stage decision is an order quantity per product, and
shortage and surplus follow from the realized demand. In the two-stage
shipment problem the first-stage decision is advance production per
warehouse; after demand is seen, missing supply is produced last minute at a
higher price and shipped to the locations.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .linsolve import GE, LE, ModelBuilder, SolverError, solve_lp

NEWSVENDOR = "newsvendor"
SHIPMENT = "shipment"
PROBLEMS = (NEWSVENDOR, SHIPMENT)


class ShapeError(ValueError):
    pass


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    responses: np.ndarray
    ids: np.ndarray = None

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.features, dtype=float))
        Y = np.asarray(self.responses, dtype=float)
        if Y.ndim == 1:
            Y = Y[:, None]
        if X.shape[0] != Y.shape[0]:
            raise ShapeError(f"features have {X.shape[0]} rows, responses {Y.shape[0]}")
        if X.shape[0] < 1 or X.shape[1] < 1 or Y.shape[1] < 1:
            raise ShapeError("dataset needs n >= 1, d_x >= 1 and d_l >= 1")
        ids = np.arange(X.shape[0]) if self.ids is None else np.asarray(self.ids, dtype=np.int64)
        if ids.shape != (X.shape[0],) or len(np.unique(ids)) != len(ids):
            raise ShapeError("ids must be unique, one per row")
        object.__setattr__(self, "features", _frozen(X))
        object.__setattr__(self, "responses", _frozen(Y))
        object.__setattr__(self, "ids", _frozen(ids, np.int64))

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d_x(self) -> int:
        return self.features.shape[1]

    @property
    def d_l(self) -> int:
        return self.responses.shape[1]

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows, dtype=int)
        return Dataset(self.features[rows], self.responses[rows], self.ids[rows])


@dataclass(frozen=True)
class NewsvendorInstance:
    order_cost: np.ndarray
    backorder_cost: np.ndarray
    holding_cost: np.ndarray
    problem: str = field(default=NEWSVENDOR, init=False)

    def __post_init__(self):
        arrs = [np.atleast_2d(np.asarray(a, dtype=float)) for a in
                (self.order_cost, self.backorder_cost, self.holding_cost)]
        if not (arrs[0].shape == arrs[1].shape == arrs[2].shape):
            raise ShapeError("newsvendor cost matrices must share one shape")
        if any(np.any(a < 0) or not np.all(np.isfinite(a)) for a in arrs):
            raise ValueError("newsvendor costs must be finite and nonnegative")
        for name, a in zip(("order_cost", "backorder_cost", "holding_cost"), arrs):
            object.__setattr__(self, name, _frozen(a))

    @property
    def n(self) -> int:
        return self.order_cost.shape[0]

    @property
    def d_l(self) -> int:
        return self.order_cost.shape[1]

    def subset(self, rows) -> "NewsvendorInstance":
        rows = np.asarray(rows, dtype=int)
        return NewsvendorInstance(self.order_cost[rows], self.backorder_cost[rows],
                                  self.holding_cost[rows])

    def check(self, data: Dataset) -> None:
        if self.order_cost.shape != data.responses.shape:
            raise ShapeError(f"costs {self.order_cost.shape} do not match data {data.responses.shape}")


@dataclass(frozen=True)
class ShipmentInstance:
    advance_cost: float
    lastminute_cost: float
    ship_cost: np.ndarray
    problem: str = field(default=SHIPMENT, init=False)

    def __post_init__(self):
        P1, P2 = float(self.advance_cost), float(self.lastminute_cost)
        if not (0.0 <= P1 < P2):
            raise ValueError("need 0 <= advance_cost < lastminute_cost")
        C = np.asarray(self.ship_cost, dtype=float)
        if C.ndim == 2:
            C = C[None]
        if C.ndim != 3 or np.any(C < 0) or not np.all(np.isfinite(C)):
            raise ValueError("ship_cost must be a finite nonnegative n x d_w x d_l array")
        object.__setattr__(self, "advance_cost", P1)
        object.__setattr__(self, "lastminute_cost", P2)
        object.__setattr__(self, "ship_cost", _frozen(C))

    @property
    def n(self) -> int:
        return self.ship_cost.shape[0]

    @property
    def d_w(self) -> int:
        return self.ship_cost.shape[1]

    @property
    def d_l(self) -> int:
        return self.ship_cost.shape[2]

    def subset(self, rows) -> "ShipmentInstance":
        rows = np.asarray(rows, dtype=int)
        return ShipmentInstance(self.advance_cost, self.lastminute_cost, self.ship_cost[rows])

    def check(self, data: Dataset) -> None:
        if self.n != data.n or self.d_l != data.d_l:
            raise ShapeError(f"ship costs {self.ship_cost.shape} do not match data {data.responses.shape}")


ProblemInstance = Union[NewsvendorInstance, ShipmentInstance]


@dataclass(frozen=True)
class Decision:
    first_stage: np.ndarray

    def __post_init__(self):
        z = _frozen(np.ravel(self.first_stage))
        if np.any(z < 0):
            raise ValueError("first-stage decisions must be nonnegative")
        object.__setattr__(self, "first_stage", z)


def decision_size(inst: ProblemInstance) -> int:
    return inst.d_l if inst.problem == NEWSVENDOR else inst.d_w


# --- newsvendor -------------------------------------------------------------

def newsvendor_scenario_cost(q, y, c, b, h) -> float:
    q, y, c, b, h = (np.asarray(a, dtype=float).ravel() for a in (q, y, c, b, h))
    if not (q.shape == y.shape == c.shape == b.shape == h.shape):
        raise ShapeError("newsvendor cost inputs must share one shape")
    if np.any(q < 0):
        raise ValueError("order quantities must be nonnegative")
    return float(np.mean(c * q + b * np.maximum(y - q, 0.0) + h * np.maximum(q - y, 0.0)))


def newsvendor_costs(Q, Y, inst: NewsvendorInstance) -> np.ndarray:
    """Row-wise newsvendor cost for decisions ``Q`` (n x d_l or a shared d_l vector)."""
    Y = np.asarray(Y, dtype=float)
    Q = np.broadcast_to(np.asarray(Q, dtype=float), Y.shape)
    if Y.shape != inst.order_cost.shape:
        raise ShapeError("demand does not match the instance")
    if np.any(Q < 0):
        raise ValueError("order quantities must be nonnegative")
    per = (inst.order_cost * Q + inst.backorder_cost * np.maximum(Y - Q, 0.0)
           + inst.holding_cost * np.maximum(Q - Y, 0.0))
    return per.mean(axis=1)


# --- shipment ---------------------------------------------------------------

def recourse_lp(z, y, C, P2):
    """min P2 sum T + sum C S  s.t.  sum_i S_ij >= y_j,  sum_j S_ij - T_i <= z_i."""
    d_w, d_l = C.shape
    mb = ModelBuilder()
    S = mb.add_vars((d_w, d_l), obj=C, name="S")
    T = mb.add_vars(d_w, obj=P2, name="T")
    for j in range(d_l):
        mb.add_row(S[:, j], np.ones(d_w), GE, y[j], name=f"demand{j}")
    for i in range(d_w):
        mb.add_row(np.append(S[i], T[i]), np.append(np.ones(d_l), -1.0), LE, z[i], name=f"supply{i}")
    return mb.build_lp(), S, T


def shipment_recourse(z, y, C, P2) -> float:
    z, y, C = np.asarray(z, float).ravel(), np.asarray(y, float).ravel(), np.asarray(C, float)
    if C.shape != (z.size, y.size):
        raise ShapeError(f"ship cost {C.shape} does not match z {z.size}, y {y.size}")
    if np.all(y <= 0):
        return 0.0
    sol = solve_lp(recourse_lp(z, y, C, P2)[0])
    if not sol.ok:
        raise SolverError(f"recourse LP ended {sol.status.value}", {"z": z, "y": y})
    return float(sol.objective_value)


def shipment_scenario_cost(z, y, C, P1, P2) -> float:
    z = np.asarray(z, dtype=float).ravel()
    if np.any(z < 0):
        raise ValueError("advance production must be nonnegative")
    return float(P1 * z.sum() + shipment_recourse(z, y, C, P2))


def shipment_costs(Z, Y, inst: ShipmentInstance) -> np.ndarray:
    Y = np.asarray(Y, dtype=float)
    Z = np.broadcast_to(np.asarray(Z, dtype=float), (Y.shape[0], inst.d_w))
    if Y.shape != (inst.n, inst.d_l):
        raise ShapeError("demand does not match the instance")
    return np.array([
        shipment_scenario_cost(Z[k], Y[k], inst.ship_cost[k], inst.advance_cost, inst.lastminute_cost)
        for k in range(Y.shape[0])
    ])


# --- shared -----------------------------------------------------------------

def scenario_costs(decisions, data: Dataset, inst: ProblemInstance) -> np.ndarray:
    """Realized cost of each row; ``decisions`` is per-row (n x k) or one shared k-vector."""
    inst.check(data)
    D = np.asarray(decisions, dtype=float)
    k = decision_size(inst)
    if D.ndim == 1:
        if D.size != k:
            raise ShapeError(f"shared decision has {D.size} entries, expected {k}")
    elif D.shape != (data.n, k):
        raise ShapeError(f"decisions {D.shape} do not match {data.n} rows of size {k}")
    if inst.problem == NEWSVENDOR:
        return newsvendor_costs(D, data.responses, inst)
    return shipment_costs(D, data.responses, inst)


def empirical_cost(decisions, data: Dataset, inst: ProblemInstance) -> float:
    return float(np.mean(scenario_costs(decisions, data, inst)))


# --- csv layout -------------------------------------------------------------

def _fmt(v) -> str:
    return f"{float(v):.17g}"


def _write_matrix(path: Path, ids, M, prefix):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id"] + [f"{prefix}{k}" for k in range(M.shape[1])])
        for i, row in zip(ids, M):
            w.writerow([int(i)] + [_fmt(v) for v in row])


def _read_matrix(path: Path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    body = rows[1:]
    ids = np.array([int(r[0]) for r in body], dtype=np.int64)
    M = np.array([[float(v) for v in r[1:]] for r in body], dtype=float).reshape(len(body), -1)
    return ids, M


def save_dataset(directory, data: Dataset, inst: ProblemInstance, meta: dict | None = None) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    _write_matrix(d / "features.csv", data.ids, data.features, "x")
    _write_matrix(d / "responses.csv", data.ids, data.responses, "y")
    info = dict(meta or {})
    info["problem"] = inst.problem
    if inst.problem == NEWSVENDOR:
        _write_matrix(d / "costs_order.csv", data.ids, inst.order_cost, "c")
        _write_matrix(d / "costs_backorder.csv", data.ids, inst.backorder_cost, "b")
        _write_matrix(d / "costs_holding.csv", data.ids, inst.holding_cost, "h")
    else:
        with open(d / "costs_ship.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "warehouse", "location", "cost"])
            for k, i in enumerate(data.ids):
                for a in range(inst.d_w):
                    for b in range(inst.d_l):
                        w.writerow([int(i), a, b, _fmt(inst.ship_cost[k, a, b])])
        info["advance_cost"] = inst.advance_cost
        info["lastminute_cost"] = inst.lastminute_cost
        info["d_w"] = inst.d_w
    with open(d / "meta.json", "w") as fh:
        json.dump(info, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")
    return d


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def load_dataset(directory):
    """Inverse of :func:`save_dataset`; returns ``(data, inst, meta)``."""
    d = Path(directory)
    ids, X = _read_matrix(d / "features.csv")
    ids_y, Y = _read_matrix(d / "responses.csv")
    if not np.array_equal(ids, ids_y):
        raise ShapeError("features.csv and responses.csv list different ids")
    meta = json.loads((d / "meta.json").read_text())
    data = Dataset(X, Y, ids)
    if meta["problem"] == NEWSVENDOR:
        inst = NewsvendorInstance(_read_matrix(d / "costs_order.csv")[1],
                                  _read_matrix(d / "costs_backorder.csv")[1],
                                  _read_matrix(d / "costs_holding.csv")[1])
    else:
        d_w = int(meta["d_w"])
        C = np.zeros((data.n, d_w, data.d_l))
        pos = {int(i): k for k, i in enumerate(ids)}
        with open(d / "costs_ship.csv", newline="") as fh:
            for row in list(csv.reader(fh))[1:]:
                C[pos[int(row[0])], int(row[1]), int(row[2])] = float(row[3])
        inst = ShipmentInstance(meta["advance_cost"], meta["lastminute_cost"], C)
    inst.check(data)
    return data, inst, meta


def split_instance(data: Dataset, inst: ProblemInstance, rows: Sequence[int]):
    return data.subset(rows), inst.subset(rows)
