"""Linear predictor with intercept: least-squares fit, prediction, and losses."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
import scipy.linalg as sla

log = logging.getLogger(__name__)

COND_LIMIT = 1e12
RIDGE_JITTER = 1e-8


class FitError(ValueError):
    pass


class LossKind(str, Enum):
    SQUARED = "squared"
    ABSOLUTE = "absolute"


@dataclass(frozen=True)
class RegressionParams:
    """``beta[j, 0]`` is the intercept of response j, ``beta[j, 1:]`` its slopes."""

    beta: np.ndarray

    def __post_init__(self):
        b = np.array(self.beta, dtype=float)
        if b.ndim == 1:
            b = b[None, :]
        if b.ndim != 2 or b.shape[1] < 1 or not np.all(np.isfinite(b)):
            raise ValueError("beta must be a finite d_l x (d_x + 1) matrix")
        b.setflags(write=False)
        object.__setattr__(self, "beta", b)

    @property
    def d_l(self) -> int:
        return self.beta.shape[0]

    @property
    def d_x(self) -> int:
        return self.beta.shape[1] - 1

    @property
    def intercepts(self) -> np.ndarray:
        return self.beta[:, 0]

    @property
    def slopes(self) -> np.ndarray:
        return self.beta[:, 1:]


def design(X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    return np.hstack([np.ones((X.shape[0], 1)), X])


def ols_fit(X, Y) -> RegressionParams:
    """Least squares through the normal equations, one column of Y at a time."""
    D = design(X)
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    n, p = D.shape
    if n <= p:
        raise FitError(f"need more rows ({n}) than design columns ({p})")
    G = D.T @ D
    if np.linalg.cond(G) > COND_LIMIT:
        log.warning("ill-conditioned Gram matrix, adding ridge jitter %g", RIDGE_JITTER)
        G = G + RIDGE_JITTER * np.eye(p)
    try:
        B = sla.solve(G, D.T @ Y, assume_a="pos")
    except (sla.LinAlgError, ValueError) as exc:
        raise FitError(f"normal equations are singular: {exc}") from exc
    if not np.all(np.isfinite(B)):
        raise FitError("least-squares solution is not finite")
    return RegressionParams(B.T)


def predict(params: RegressionParams, X) -> np.ndarray:
    """Predictions for one row (returns d_l) or a matrix of rows (returns n x d_l)."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        if X.size != params.d_x:
            raise ValueError(f"expected {params.d_x} features, got {X.size}")
        return params.intercepts + params.slopes @ X
    if X.shape[1] != params.d_x:
        raise ValueError(f"expected {params.d_x} features, got {X.shape[1]}")
    return params.intercepts[None, :] + X @ params.slopes.T


def residuals(params: RegressionParams, X, Y) -> np.ndarray:
    Y = np.asarray(Y, dtype=float)
    return Y.reshape(Y.shape[0], -1) - predict(params, np.atleast_2d(X))


def loss(params: RegressionParams, X, Y, kind=LossKind.SQUARED) -> float:
    r = residuals(params, X, Y)
    if LossKind(kind) == LossKind.SQUARED:
        return float(np.mean(r ** 2))
    return float(np.mean(np.abs(r)))


def save_beta(path, params: RegressionParams) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["response", "intercept"] + [f"x{f}" for f in range(params.d_x)])
        for j, row in enumerate(params.beta):
            w.writerow([j] + [f"{v:.17g}" for v in row])
    return path


def load_beta(path) -> RegressionParams:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return RegressionParams(np.array([[float(v) for v in r[1:]] for r in rows]))
