import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from ippo.linsolve import (
    EQ, GE, LE, LinearProgram, MixedIntegerModel, ModelBuilder, ModelError, SeparablePWLTerm, Status,
    certificate_residuals, lp_text, pwl_expand, quadratic_pwl, quadratic_pwl_error, solve_lp,
    solve_milp,
)

from generators import random_lp_arrays, random_pair_model
from oracles import enumerate_branches, highs_lp, lp_vertex_enumeration

seeds = st.integers(0, 2**31 - 1)


def lp_from_arrays(c, A, b):
    n = len(c)
    return LinearProgram(c, sp.csr_matrix(A), (LE,) * len(b), b, np.zeros(n), np.full(n, np.inf))


def random_general_lp(rng):
    """Mixed senses with boxed and half-free variables, feasible by construction."""
    n = int(rng.integers(1, 6))
    m = int(rng.integers(1, 6))
    A = np.round(rng.normal(size=(m, n)), 2)
    x0 = rng.uniform(-2, 2, size=n)
    senses = tuple(rng.choice([LE, GE, EQ], size=m, p=[0.45, 0.45, 0.1]))
    act = A @ x0
    rhs = np.array([a + (0.5 if s == LE else -0.5 if s == GE else 0.0) for a, s in zip(act, senses)])
    lo = np.where(rng.random(n) < 0.3, -np.inf, -3.0)
    hi = np.full(n, 3.0)
    return LinearProgram(np.round(rng.normal(size=n), 2), A, senses, rhs, lo, hi)


# --- LP -----------------------------------------------------------------------------------

def test_textbook_lp():
    # max 3x + 5y, x <= 4, 2y <= 12, 3x + 2y <= 18 -> (2, 6), 36
    lp = lp_from_arrays(np.array([-3.0, -5.0]), np.array([[1.0, 0], [0, 2], [3, 2]]), np.array([4.0, 12, 18]))
    sol = solve_lp(lp)
    assert sol.status == Status.OPTIMAL
    assert sol.objective_value == pytest.approx(-36.0, abs=1e-9)
    np.testing.assert_allclose(sol.primal, [2.0, 6.0], atol=1e-9)
    np.testing.assert_allclose(sol.duals, [0.0, -1.5, -1.0], atol=1e-9)


def test_infeasible_and_unbounded():
    infeas = LinearProgram([1.0], [[1.0], [1.0]], (LE, GE), [1.0, 2.0], [0.0], [np.inf])
    assert solve_lp(infeas).status == Status.INFEASIBLE
    unb = LinearProgram([-1.0, 0.0], [[1.0, -1.0]], (LE,), [1.0], [0.0, 0.0], [np.inf, np.inf])
    sol = solve_lp(unb)
    assert sol.status == Status.UNBOUNDED
    d = sol.ray
    assert d is not None and unb.c @ d < 0 and unb.A @ d <= 1e-9


def test_crossed_bounds_rejected():
    with pytest.raises(ModelError):
        LinearProgram([1.0], np.zeros((0, 1)), (), [], [2.0], [1.0])


@settings(max_examples=60, deadline=None)
@given(seeds)
def test_lp_matches_vertex_enumeration(seed):
    c, A, b = random_lp_arrays(np.random.default_rng(seed))
    ref = lp_vertex_enumeration(c, A, b)
    sol = solve_lp(lp_from_arrays(c, A, b))
    if np.isinf(ref):
        # no vertex: infeasible, or the optimum sits on an unbounded ray
        assert sol.status != Status.OPTIMAL or highs_lp(lp_from_arrays(c, A, b)) is not None
    if sol.status == Status.OPTIMAL:
        assert sol.objective_value == pytest.approx(ref, abs=1e-7)


@settings(max_examples=60, deadline=None)
@given(seeds)
def test_general_lp_against_highs_with_certificates(seed):
    lp = random_general_lp(np.random.default_rng(seed))
    ref = highs_lp(lp)
    sol = solve_lp(lp)
    if ref is None:
        assert sol.status == Status.INFEASIBLE
        return
    if ref == -np.inf:
        assert sol.status == Status.UNBOUNDED
        return
    assert sol.status == Status.OPTIMAL
    assert sol.objective_value == pytest.approx(ref, abs=1e-7)
    cert = certificate_residuals(lp, sol)
    assert cert["primal_infeasibility"] < 1e-8
    assert cert["dual_infeasibility"] < 1e-8
    assert cert["duality_gap"] < 1e-7


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_warm_start_after_rhs_change(seed):
    rng = np.random.default_rng(seed)
    lp = random_general_lp(rng)
    first = solve_lp(lp)
    if not first.ok:
        return
    moved = LinearProgram(lp.c, lp.A, lp.senses, lp.rhs + rng.uniform(-0.3, 0.3, lp.n_rows), lp.lo, lp.hi)
    ref = highs_lp(moved)
    warm = solve_lp(moved, warm=first.basis)
    if ref is None:
        assert warm.status == Status.INFEASIBLE
    elif ref == -np.inf:
        assert warm.status == Status.UNBOUNDED
    else:
        assert warm.objective_value == pytest.approx(ref, abs=1e-7)


def test_highs_backend_agrees():
    lp = random_general_lp(np.random.default_rng(3))
    a, b = solve_lp(lp), solve_lp(lp, backend="highs")
    assert a.objective_value == pytest.approx(b.objective_value, abs=1e-8)
    with pytest.raises(ValueError):
        solve_lp(lp, backend="cplex")


def test_model_validation():
    with pytest.raises(ModelError):
        LinearProgram([1.0, 2.0], [[1.0]], (LE,), [1.0], [0, 0], [1, 1])
    b = ModelBuilder()
    x = b.add_var(lo=-1.0)
    r = b.add_row([x], [1.0], LE, 1.0)
    b.add_pair(r, x)
    with pytest.raises(ModelError):
        b.build()


# --- MILP ------------------------------------------------------------------------------------

@settings(max_examples=25, deadline=None)
@given(seeds, st.integers(1, 6), st.integers(0, 2))
def test_milp_matches_branch_enumeration(seed, k, nb):
    m = random_pair_model(np.random.default_rng(seed), k, nb)
    ref = enumerate_branches(m)
    sol = solve_milp(m)
    if np.isinf(ref):
        assert sol.status == Status.INFEASIBLE
        return
    assert sol.status == Status.OPTIMAL
    assert sol.objective_value == pytest.approx(ref, abs=1e-7)
    assert np.max(m.complementarity_residuals(sol.primal), initial=0.0) < 1e-7
    for j in m.binaries:
        assert sol.primal[j] in (0.0, 1.0)


@pytest.mark.parametrize("seed", range(6))
def test_bigm_and_highs_nodes_agree_with_branching(seed):
    m = random_pair_model(np.random.default_rng(100 + seed), 4)
    ref = solve_milp(m)
    if not ref.ok:
        return
    # every variable lives in [0, 10] and the rows have at most three small coefficients
    big = solve_milp(m, complementarity="bigm", big_m=100.0)
    hi = solve_milp(m, lp_backend="highs")
    assert big.objective_value == pytest.approx(ref.objective_value, abs=1e-7)
    assert hi.objective_value == pytest.approx(ref.objective_value, abs=1e-7)


def test_node_limit_reports_bound():
    m = random_pair_model(np.random.default_rng(7), 8)
    sol = solve_milp(m, node_limit=1)
    assert sol.nodes <= 1
    if sol.status == Status.NODE_LIMIT:
        assert sol.bound <= sol.objective_value + 1e-9


# --- piecewise-linear terms ----------------------------------------------------------------------

@settings(max_examples=50, deadline=None)
@given(st.floats(-50, 50), st.floats(0.1, 80), st.integers(2, 100), st.floats(0.01, 10), st.floats(0, 1))
def test_quadratic_pwl_error_bound(lo, width, segs, weight, frac):
    hi = lo + width
    t = quadratic_pwl(0, lo, hi, segs, weight)
    x = lo + frac * width
    over = float(t(x)) - weight * x * x
    assert -1e-9 * (1 + weight * x * x) <= over <= quadratic_pwl_error(lo, hi, segs, weight) * (1 + 1e-9) + 1e-9


def test_pwl_expand_recovers_interpolant():
    # min |x - 1.3|-like convex PWL over a box: optimum at the kink
    b = ModelBuilder()
    x = b.add_var(lo=-5.0, hi=5.0)
    b.add_pwl(SeparablePWLTerm(x, [-5.0, 1.3, 5.0], [6.3, 0.0, 7.4]))
    m = b.build()
    sol = solve_milp(m)
    assert sol.primal[x] == pytest.approx(1.3, abs=1e-9)
    assert sol.objective_value == pytest.approx(0.0, abs=1e-9)
    ex = pwl_expand(m)
    assert ex.base.n_vars == 2 and not ex.pwl_terms


def test_nonconvex_pwl_rejected():
    with pytest.raises(ModelError):
        SeparablePWLTerm(0, [0.0, 1.0, 2.0], [0.0, 1.0, 1.5])


def test_lp_text_sections():
    b = ModelBuilder()
    x = b.add_vars(2, hi=4.0, obj=[1.0, -2.0], name="x")
    r = b.add_row(x, [1.0, 1.0], LE, 3.0)
    b.add_pair(r, int(x[0]))
    text = lp_text(b.build())
    for section in ("Minimize", "Subject To", "Bounds", "End"):
        assert section in text
