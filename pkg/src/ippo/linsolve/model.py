"""Data model shared by the LP and branch-and-bound solvers."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

INF = np.inf

LE, EQ, GE = "<=", "=", ">="
_SENSES = (LE, EQ, GE)


class Status(str, enum.Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    UNBOUNDED = "Unbounded"
    NODE_LIMIT = "NodeLimit"
    NO_INCUMBENT = "NoIncumbent"


class SolverError(RuntimeError):
    """Numerical breakdown that refactorization could not repair."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ModelError(ValueError):
    """A model violates a structural invariant."""


@dataclass(frozen=True, eq=False)
class LinearProgram:
    """``min c @ x`` subject to ``A x (sense) rhs`` and ``lo <= x <= hi``."""

    c: np.ndarray
    A: sp.csr_matrix
    senses: tuple
    rhs: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    var_names: Optional[tuple] = None
    row_names: Optional[tuple] = None

    def __post_init__(self):
        c = np.asarray(self.c, dtype=float).ravel()
        A = sp.csr_matrix(self.A, dtype=float)
        n = c.size
        if A.shape[0] == 0:
            A = sp.csr_matrix((0, n))
        if A.shape[1] != n:
            raise ModelError(f"A has {A.shape[1]} columns but c has {n} entries")
        m = A.shape[0]
        rhs = np.asarray(self.rhs, dtype=float).ravel()
        lo = np.asarray(self.lo, dtype=float).ravel()
        hi = np.asarray(self.hi, dtype=float).ravel()
        senses = tuple(self.senses)
        if rhs.size != m or len(senses) != m:
            raise ModelError("rhs/senses length must equal the number of rows")
        if lo.size != n or hi.size != n:
            raise ModelError("bounds must have one entry per variable")
        if any(s not in _SENSES for s in senses):
            raise ModelError(f"unknown row sense in {set(senses)}")
        if np.any(lo > hi):
            bad = int(np.flatnonzero(lo > hi)[0])
            raise ModelError(f"variable {bad} has lo > hi")
        if np.any(lo == np.inf) or np.any(hi == -np.inf):
            raise ModelError("a variable bound is infinite on the wrong side")
        if np.any(np.isnan(lo)) or np.any(np.isnan(hi)) or not np.all(np.isfinite(c)):
            raise ModelError("NaN bound or non-finite objective coefficient")
        A.eliminate_zeros()
        if m and np.any(np.diff(A.indptr) == 0):
            bad = int(np.flatnonzero(np.diff(A.indptr) == 0)[0])
            raise ModelError(f"row {bad} has no nonzero coefficient")
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "senses", senses)
        object.__setattr__(self, "rhs", rhs)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def n_vars(self) -> int:
        return self.c.size

    @property
    def n_rows(self) -> int:
        return self.rhs.size

    def with_bounds(self, lo=None, hi=None) -> "LinearProgram":
        return LinearProgram(
            self.c, self.A, self.senses, self.rhs,
            self.lo if lo is None else lo, self.hi if hi is None else hi,
            self.var_names, self.row_names,
        )

    def row_activity(self, x) -> np.ndarray:
        return self.A @ np.asarray(x, dtype=float)

    def row_slack(self, x) -> np.ndarray:
        """Nonnegative-when-feasible slack per row (``|ax - b|`` for equalities)."""
        act = self.row_activity(x)
        sl = np.empty_like(act)
        for i, s in enumerate(self.senses):
            if s == LE:
                sl[i] = self.rhs[i] - act[i]
            elif s == GE:
                sl[i] = act[i] - self.rhs[i]
            else:
                sl[i] = -abs(act[i] - self.rhs[i])
        return sl

    def max_violation(self, x) -> float:
        x = np.asarray(x, dtype=float)
        viol = 0.0
        if self.n_rows:
            viol = max(viol, float(np.max(np.maximum(-self.row_slack(x), 0.0))))
        viol = max(viol, float(np.max(np.maximum(self.lo - x, 0.0), initial=0.0)))
        viol = max(viol, float(np.max(np.maximum(x - self.hi, 0.0), initial=0.0)))
        return viol


@dataclass
class PrimalDualSolution:
    status: Status
    primal: Optional[np.ndarray] = None
    duals: Optional[np.ndarray] = None
    objective_value: float = np.nan
    reduced_costs: Optional[np.ndarray] = None
    # Unbounded: improving direction; Infeasible: row multipliers proving it.
    ray: Optional[np.ndarray] = None
    farkas: Optional[np.ndarray] = None
    iterations: int = 0
    basis: Optional["Basis"] = None
    # MILP-only fields.
    binaries: dict = field(default_factory=dict)
    bound: float = np.nan
    gap: float = np.nan
    nodes: int = 0
    stats: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status == Status.OPTIMAL

    @property
    def x(self):
        return self.primal


@dataclass(frozen=True)
class Basis:
    """Warm-start information over structural + slack columns."""

    basic: np.ndarray
    at_upper: np.ndarray


@dataclass(frozen=True)
class ComplementarityPair:
    """Row slack and a nonnegative variable of which at most one may be nonzero."""

    slack_ref: int
    dual_ref: int


@dataclass(frozen=True)
class SeparablePWLTerm:
    """Convex piecewise-linear function of one variable added to the objective."""

    variable_ref: int
    breakpoints: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        bp = np.asarray(self.breakpoints, dtype=float).ravel()
        vals = np.asarray(self.values, dtype=float).ravel()
        if bp.size < 2 or bp.size != vals.size:
            raise ModelError("need at least two breakpoints with one value each")
        if np.any(np.diff(bp) <= 0):
            raise ModelError("breakpoints must be strictly ascending")
        slopes = np.diff(vals) / np.diff(bp)
        scale = max(1.0, float(np.max(np.abs(slopes))))
        if np.any(np.diff(slopes) < -1e-9 * scale):
            raise ModelError(f"PWL term on variable {self.variable_ref} is not convex")
        object.__setattr__(self, "breakpoints", bp)
        object.__setattr__(self, "values", vals)

    @property
    def slopes(self) -> np.ndarray:
        return np.diff(self.values) / np.diff(self.breakpoints)

    def __call__(self, x) -> np.ndarray:
        return np.interp(x, self.breakpoints, self.values)


@dataclass(frozen=True, eq=False)
class MixedIntegerModel:
    base: LinearProgram
    binaries: tuple = ()
    comp_pairs: tuple = ()
    pwl_terms: tuple = ()

    def __post_init__(self):
        lp = self.base
        binaries = tuple(int(b) for b in self.binaries)
        for b in binaries:
            if lp.lo[b] != 0.0 or lp.hi[b] != 1.0:
                raise ModelError(f"binary variable {b} must have bounds [0, 1]")
        pairs = tuple(self.comp_pairs)
        for p in pairs:
            if not 0 <= p.slack_ref < lp.n_rows:
                raise ModelError(f"pair row {p.slack_ref} out of range")
            if lp.senses[p.slack_ref] == EQ:
                raise ModelError(f"pair row {p.slack_ref} is an equality")
            if lp.lo[p.dual_ref] != 0.0:
                raise ModelError(f"pair variable {p.dual_ref} must have lower bound 0")
        object.__setattr__(self, "binaries", binaries)
        object.__setattr__(self, "comp_pairs", pairs)
        object.__setattr__(self, "pwl_terms", tuple(self.pwl_terms))

    def objective(self, x) -> float:
        x = np.asarray(x, dtype=float)
        val = float(self.base.c @ x[: self.base.n_vars])
        for t in self.pwl_terms:
            val += float(t(x[t.variable_ref]))
        return val

    def complementarity_residuals(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if not self.comp_pairs:
            return np.zeros(0)
        slack = self.base.row_slack(x)
        rows = np.array([p.slack_ref for p in self.comp_pairs])
        cols = np.array([p.dual_ref for p in self.comp_pairs])
        return np.abs(slack[rows] * x[cols])


class ModelBuilder:
    """Incremental construction of a :class:`MixedIntegerModel`."""

    def __init__(self):
        self._lo: list = []
        self._hi: list = []
        self._obj: list = []
        self._names: list = []
        self._ri: list = []
        self._ci: list = []
        self._vals: list = []
        self._senses: list = []
        self._rhs: list = []
        self._row_names: list = []
        self.pairs: list = []
        self.binaries: list = []
        self.pwl_terms: list = []

    @property
    def n_vars(self) -> int:
        return len(self._lo)

    @property
    def n_rows(self) -> int:
        return len(self._rhs)

    def add_var(self, lo=0.0, hi=INF, obj=0.0, name=None) -> int:
        self._lo.append(float(lo))
        self._hi.append(float(hi))
        self._obj.append(float(obj))
        self._names.append(name or f"x{len(self._lo) - 1}")
        return len(self._lo) - 1

    def add_vars(self, shape, lo=0.0, hi=INF, obj=0.0, name="x") -> np.ndarray:
        shape = (shape,) if np.isscalar(shape) else tuple(shape)
        count = int(np.prod(shape))
        lo_a = np.broadcast_to(np.asarray(lo, dtype=float), shape).ravel()
        hi_a = np.broadcast_to(np.asarray(hi, dtype=float), shape).ravel()
        ob_a = np.broadcast_to(np.asarray(obj, dtype=float), shape).ravel()
        start = self.n_vars
        for k, idx in enumerate(np.ndindex(*shape)):
            tag = ",".join(map(str, idx))
            self.add_var(lo_a[k], hi_a[k], ob_a[k], f"{name}[{tag}]")
        return np.arange(start, start + count).reshape(shape)

    def add_binary(self, obj=0.0, name=None) -> int:
        j = self.add_var(0.0, 1.0, obj, name)
        self.binaries.append(j)
        return j

    def add_obj(self, idx, coef) -> None:
        idx = np.atleast_1d(idx)
        coef = np.broadcast_to(np.asarray(coef, dtype=float), idx.shape).ravel()
        for j, a in zip(idx.ravel(), coef):
            self._obj[int(j)] += float(a)

    def scale_obj(self, factor: float) -> None:
        self._obj = [factor * v for v in self._obj]

    def set_bounds(self, idx, lo=None, hi=None) -> None:
        for j in np.atleast_1d(idx).ravel():
            if lo is not None:
                self._lo[int(j)] = float(lo)
            if hi is not None:
                self._hi[int(j)] = float(hi)

    def add_row(self, idx, coef, sense, rhs, name=None) -> int:
        idx = np.atleast_1d(np.asarray(idx)).ravel()
        coef = np.broadcast_to(np.asarray(coef, dtype=float), idx.shape).ravel()
        r = self.n_rows
        merged: dict = {}
        for j, a in zip(idx, coef):
            merged[int(j)] = merged.get(int(j), 0.0) + float(a)
        for j, a in merged.items():
            if a != 0.0:
                self._ri.append(r)
                self._ci.append(j)
                self._vals.append(a)
        self._senses.append(sense)
        self._rhs.append(float(rhs))
        self._row_names.append(name or f"r{r}")
        return r

    def add_pair(self, row: int, var: int) -> None:
        self.pairs.append(ComplementarityPair(int(row), int(var)))

    def add_pwl(self, term: SeparablePWLTerm) -> None:
        self.pwl_terms.append(term)

    def build_lp(self) -> LinearProgram:
        A = sp.csr_matrix(
            (self._vals, (self._ri, self._ci)), shape=(self.n_rows, self.n_vars)
        )
        return LinearProgram(
            np.array(self._obj), A, tuple(self._senses), np.array(self._rhs),
            np.array(self._lo), np.array(self._hi),
            tuple(self._names), tuple(self._row_names),
        )

    def build(self) -> MixedIntegerModel:
        return MixedIntegerModel(
            self.build_lp(), tuple(self.binaries), tuple(self.pairs), tuple(self.pwl_terms)
        )

    def copy(self) -> "ModelBuilder":
        other = ModelBuilder()
        for k, v in self.__dict__.items():
            setattr(other, k, list(v))
        return other
