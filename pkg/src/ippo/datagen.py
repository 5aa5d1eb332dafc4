"""Synthetic feature/demand/cost generation with R²-calibrated noise.

Every random quantity comes from a Philox generator keyed by the master seed
and a named stream, so changing one part of a configuration (say the cost
ranges) does not perturb the draws of another (the features).

Streams and their spawn keys::

    features     1     X ~ N(mean, covariance)
    noise        2     additive response noise
    costs        3     per-row cost draws
    splits       4     train/valid/test shuffles
    beta         5     default true coefficients
    calibration  6     large sample used only by calibrate_sigma
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .regression import ols_fit, residuals
from .scenario import NEWSVENDOR, SHIPMENT, Dataset, NewsvendorInstance, ShipmentInstance

STREAMS = {"features": 1, "noise": 2, "costs": 3, "splits": 4, "beta": 5, "calibration": 6}

# Printed as [[1,.5,-.5],[.5,1,-.5],[-.5,.5,1]], which is not symmetric; the
# (3,2) entry is mirrored from (2,3).
BASE_COVARIANCE = np.array([[1.0, 0.5, -0.5], [0.5, 1.0, -0.5], [-0.5, -0.5, 1.0]])

DEFAULT_COST_RANGES = {
    NEWSVENDOR: {"order": (0.0, 300.0), "backorder": (0.0, 3000.0), "holding": (0.0, 150.0)},
    SHIPMENT: {"ship": (0.0, 30.0)},
}
DEFAULT_P1 = 5.0
DEFAULT_P2 = 100.0

# Ten-level ladder and the six rungs of it used for desk-scale runs.
FULL_R2_LADDER = (0.07, 0.13, 0.20, 0.26, 0.34, 0.43, 0.53, 0.64, 0.76, 0.92)
DESK_R2_LADDER = (0.07, 0.20, 0.34, 0.53, 0.76, 0.92)


class GenError(ValueError):
    pass


def rng(seed: int, stream: str, *extra: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=(STREAMS[stream],) + tuple(int(e) for e in extra))
    return np.random.Generator(np.random.Philox(ss))


def default_covariance(d_x: int) -> np.ndarray:
    S = np.eye(d_x)
    k = min(d_x, 3)
    S[:k, :k] = BASE_COVARIANCE[:k, :k]
    return S


def default_beta(seed: int, d_x: int, d_l: int) -> np.ndarray:
    g = rng(seed, "beta")
    B = np.empty((d_l, d_x + 1))
    B[:, 0] = g.uniform(10.0, 50.0, size=d_l)
    B[:, 1:] = g.uniform(-5.0, 5.0, size=(d_l, d_x))
    return B


@dataclass(frozen=True)
class GenConfig:
    problem: str = NEWSVENDOR
    n: int = 120
    d_x: int = 2
    d_l: int = 2
    d_w: int = 2
    mean: Optional[np.ndarray] = None
    covariance: Optional[np.ndarray] = None
    beta_true: Optional[np.ndarray] = None
    noise_sigma: float = 0.0
    cost_ranges: Optional[dict] = None
    advance_cost: float = DEFAULT_P1
    lastminute_cost: float = DEFAULT_P2
    seed: int = 0

    def __post_init__(self):
        if self.problem not in (NEWSVENDOR, SHIPMENT):
            raise GenError(f"unknown problem {self.problem!r}")
        if min(self.n, self.d_x, self.d_l, self.d_w) < 1:
            raise GenError("n, d_x, d_l and d_w must be positive")
        mean = np.zeros(self.d_x) if self.mean is None else np.asarray(self.mean, dtype=float)
        cov = default_covariance(self.d_x) if self.covariance is None else np.asarray(self.covariance, dtype=float)
        if mean.shape != (self.d_x,) or cov.shape != (self.d_x, self.d_x):
            raise GenError("mean/covariance shapes do not match d_x")
        if not np.allclose(cov, cov.T, atol=1e-12):
            raise GenError("covariance must be symmetric")
        beta = (default_beta(self.seed, self.d_x, self.d_l) if self.beta_true is None
                else np.asarray(self.beta_true, dtype=float))
        if beta.shape != (self.d_l, self.d_x + 1):
            raise GenError(f"beta_true must be {self.d_l} x {self.d_x + 1}")
        if self.noise_sigma < 0:
            raise GenError("noise_sigma must be nonnegative")
        ranges = {k: tuple(v) for k, v in (self.cost_ranges or DEFAULT_COST_RANGES[self.problem]).items()}
        for k, (lo, hi) in ranges.items():
            if lo < 0 or hi < lo:
                raise GenError(f"cost range {k} = ({lo}, {hi}) is invalid")
        if not (0 <= self.advance_cost < self.lastminute_cost):
            raise GenError("need 0 <= advance_cost < lastminute_cost")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)
        object.__setattr__(self, "beta_true", beta)
        object.__setattr__(self, "cost_ranges", ranges)
        _cov_factor(cov)

    def with_(self, **kw) -> "GenConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return {
            "problem": self.problem, "n": self.n, "d_x": self.d_x, "d_l": self.d_l, "d_w": self.d_w,
            "mean": self.mean.tolist(), "covariance": self.covariance.tolist(),
            "beta_true": self.beta_true.tolist(), "noise_sigma": self.noise_sigma,
            "cost_ranges": {k: list(v) for k, v in self.cost_ranges.items()},
            "advance_cost": self.advance_cost, "lastminute_cost": self.lastminute_cost,
            "seed": self.seed, "streams": STREAMS, "rng": "numpy Philox via SeedSequence(seed, spawn_key=(stream, ...))",
        }


@dataclass(frozen=True)
class SplitSpec:
    fractions: tuple = (0.7, 0.15, 0.15)
    seed: int = 0

    def __post_init__(self):
        f = tuple(float(v) for v in self.fractions)
        if len(f) != 3 or min(f) <= 0 or abs(sum(f) - 1.0) > 1e-12:
            raise GenError("split fractions must be three positive numbers summing to 1")
        object.__setattr__(self, "fractions", f)


def _cov_factor(cov: np.ndarray) -> np.ndarray:
    """L with L L^T = cov; eigen-decomposition fallback for singular matrices."""
    sym = 0.5 * (cov + cov.T)
    try:
        return np.linalg.cholesky(sym)
    except np.linalg.LinAlgError:
        pass
    w, V = np.linalg.eigh(sym)
    scale = max(1.0, float(np.max(np.abs(w))))
    if w.min() < -1e-10 * scale:
        raise GenError(f"covariance is not positive semidefinite (min eigenvalue {w.min():.3g})")
    return V * np.sqrt(np.clip(w, 0.0, None))


def gen_features(cfg: GenConfig, *extra: int, n: int | None = None) -> np.ndarray:
    n = cfg.n if n is None else n
    L = _cov_factor(cfg.covariance)
    Z = rng(cfg.seed, "features", *extra).standard_normal((n, cfg.d_x))
    if not np.any(L):
        return np.tile(cfg.mean, (n, 1))
    return cfg.mean + Z @ L.T


def gen_responses(X, beta_true, noise_sigma: float, seed: int, *extra: int) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    B = np.asarray(beta_true, dtype=float)
    if B.ndim != 2 or B.shape[1] != X.shape[1] + 1:
        raise GenError(f"beta_true {B.shape} does not fit {X.shape[1]} features")
    signal = B[:, 0][None, :] + X @ B[:, 1:].T
    if noise_sigma == 0:
        return signal
    eps = rng(seed, "noise", *extra).standard_normal(signal.shape)
    return signal + noise_sigma * eps


def gen_costs(cfg: GenConfig, *extra: int, n: int | None = None):
    n = cfg.n if n is None else n
    g = rng(cfg.seed, "costs", *extra)
    r = cfg.cost_ranges
    if cfg.problem == NEWSVENDOR:
        shape = (n, cfg.d_l)
        return NewsvendorInstance(g.uniform(*r["order"], size=shape),
                                  g.uniform(*r["backorder"], size=shape),
                                  g.uniform(*r["holding"], size=shape))
    C = g.uniform(*r["ship"], size=(n, cfg.d_w, cfg.d_l))
    return ShipmentInstance(cfg.advance_cost, cfg.lastminute_cost, C)


def measure_r2(X, Y) -> float:
    """Mean over response columns of the in-sample R² of an OLS fit with intercept."""
    Y = np.asarray(Y, dtype=float)
    Y = Y.reshape(Y.shape[0], -1)
    R = residuals(ols_fit(X, Y), X, Y)
    sse = np.sum(R ** 2, axis=0)
    sst = np.sum((Y - Y.mean(axis=0)) ** 2, axis=0)
    r2 = np.where(sst > 0, 1.0 - sse / np.where(sst > 0, sst, 1.0), 0.0)
    return float(np.mean(np.clip(r2, 0.0, 1.0)))


def calibrate_sigma(target_r2: float, cfg: GenConfig, tol: float = 1e-3, n_cal: int = 20000,
                    max_iter: int = 200) -> float:
    """Noise level whose measured R² on a large seeded sample is within ``tol`` of the target.

    The calibration sample reuses one set of feature and noise draws for every
    trial sigma, so the bisection sees a deterministic curve.
    """
    if not 0.0 < target_r2 < 1.0:
        raise GenError("target R² must lie strictly between 0 and 1")
    X = gen_features(cfg, STREAMS["calibration"], n=n_cal)
    signal = gen_responses(X, cfg.beta_true, 0.0, cfg.seed)
    eps = rng(cfg.seed, "calibration").standard_normal(signal.shape)

    def r2(sigma):
        return measure_r2(X, signal + sigma * eps)

    if r2(0.0) < target_r2 + tol:
        raise GenError(f"target R² {target_r2} is not reachable with this beta_true")
    lo, hi = 0.0, 1.0
    while r2(hi) > target_r2:
        lo, hi = hi, 2.0 * hi
        if hi > 1e12:
            raise GenError("could not bracket the target R²")
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        val = r2(mid)
        if abs(val - target_r2) <= tol:
            return mid
        if val > target_r2:
            lo = mid
        else:
            hi = mid
    raise GenError("bisection did not reach the requested tolerance")


def split_sizes(n: int, fractions) -> tuple:
    n_tr = int(round(fractions[0] * n))
    n_va = int(round(fractions[1] * n))
    sizes = (n_tr, n_va, n - n_tr - n_va)
    if min(sizes) < 1:
        raise GenError(f"split of {n} rows by {fractions} leaves an empty part")
    return sizes


def split_rows(n: int, spec: SplitSpec, *extra: int):
    """Seeded permutation cut into train/valid/test row index arrays."""
    sizes = split_sizes(n, spec.fractions)
    perm = rng(spec.seed, "splits", *extra).permutation(n)
    a, b = sizes[0], sizes[0] + sizes[1]
    return perm[:a], perm[a:b], perm[b:]


def split(data: Dataset, inst, spec: SplitSpec, *extra: int):
    """Three (Dataset, instance) pairs; cost rows travel with their data rows."""
    return tuple((data.subset(r), inst.subset(r)) for r in split_rows(data.n, spec, *extra))


def generate(cfg: GenConfig, *extra: int):
    """Dataset, matching cost instance, and metadata for one configuration."""
    X = gen_features(cfg, *extra)
    Y = gen_responses(X, cfg.beta_true, cfg.noise_sigma, cfg.seed, *extra)
    inst = gen_costs(cfg, *extra)
    data = Dataset(X, Y)
    meta = cfg.to_dict()
    meta["stream_extra"] = list(extra)
    meta["r2_measured"] = measure_r2(X, Y) if cfg.n > cfg.d_x + 1 else None
    return data, inst, meta
