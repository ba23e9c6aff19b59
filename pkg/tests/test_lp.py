import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coldchain.lp import (EQ, GE, INF, INFEASIBLE, LE, OPTIMAL, UNBOUNDED, LinearProgram, LpBuilder, solve,
                          warm_solve, write_lp)

from oracles import lp_to_dense, tableau_simplex


def dense_lp(c, A, senses, rhs, lb, ub):
    r, k = np.nonzero(A)
    return LinearProgram(c, r, k, A[r, k], senses, rhs, lb, ub)


def random_lp(rng, m=20, n=30):
    """Feasible and bounded by construction: rows hold at a known point, every variable is boxed."""
    A = rng.normal(size=(m, n)) * (rng.uniform(size=(m, n)) < 0.5)
    x0 = rng.uniform(0.0, 2.0, size=n)
    senses = rng.choice([LE, GE, EQ], size=m, p=[0.45, 0.45, 0.1])
    slack = rng.uniform(0.0, 1.0, size=m)
    rhs = A @ x0 + np.where(senses == LE, slack, np.where(senses == GE, -slack, 0.0))
    lb = rng.choice([0.0, -1.0], size=n)
    ub = x0 + rng.uniform(0.5, 3.0, size=n)
    return dense_lp(rng.normal(size=n), A, senses, rhs, lb, ub)


def row_activity(lp, x):
    return lp.matrix() @ x


def test_analytic_example():
    lp = dense_lp([2.0, 3.0], np.array([[1.0, 1.0]]), [GE], [4.0], [0.0, 0.0], [INF, INF])
    sol = solve(lp)
    assert sol.status == OPTIMAL
    assert np.allclose(sol.x, [4.0, 0.0])
    assert sol.objective == pytest.approx(8.0)
    assert sol.duals[0] == pytest.approx(2.0)


def test_single_bound():
    lp = dense_lp([1.0], np.array([[1.0]]), [GE], [3.0], [-INF], [INF])
    assert solve(lp).objective == pytest.approx(3.0)
    assert solve(lp, backend="simplex").objective == pytest.approx(3.0)


def test_infeasible_and_unbounded_statuses():
    inf = dense_lp([1.0], np.array([[1.0], [1.0]]), [GE, LE], [3.0, 2.0], [0.0], [INF])
    unb = dense_lp([-1.0], np.array([[1.0]]), [GE], [1.0], [0.0], [INF])
    for backend in ("highs", "simplex"):
        assert solve(inf, backend).status == INFEASIBLE
        assert solve(unb, backend).status == UNBOUNDED
    with pytest.raises(ValueError):
        solve(inf, backend="nope")


def test_malformed_lp_rejected():
    with pytest.raises(ValueError):
        LinearProgram([1.0], [0], [3], [1.0], [LE], [1.0], [0.0], [1.0])
    with pytest.raises(ValueError):
        LinearProgram([1.0], [0], [0], [np.nan], [LE], [1.0], [0.0], [1.0])
    with pytest.raises(ValueError):
        LinearProgram([1.0], [0], [0], [1.0], ["?"], [1.0], [0.0], [1.0])
    with pytest.raises(ValueError):
        LinearProgram([1.0], [0], [0], [1.0], [LE], [1.0], [2.0], [1.0])


def test_random_lps_match_tableau_oracle():
    rng = np.random.default_rng(2024)
    for k in range(500):
        lp = random_lp(rng)
        status, _, obj = tableau_simplex(**lp_to_dense(lp))
        sol = solve(lp)
        assert status == OPTIMAL and sol.status == OPTIMAL, k
        assert sol.objective == pytest.approx(obj, rel=1e-6, abs=1e-6), k


def test_reference_simplex_agrees():
    rng = np.random.default_rng(7)
    for k in range(60):
        lp = random_lp(rng, m=12, n=18)
        a, b = solve(lp), solve(lp, backend="simplex")
        assert b.status == OPTIMAL
        assert b.objective == pytest.approx(a.objective, rel=1e-7, abs=1e-7), k


def test_complementary_slackness():
    rng = np.random.default_rng(5)
    for _ in range(100):
        lp = random_lp(rng)
        sol = solve(lp)
        act = row_activity(lp, sol.x)
        gap = act - lp.rhs
        assert np.all(np.abs(sol.duals * gap) <= 1e-7 * (1 + np.abs(sol.duals)))
        # dual signs follow the row senses
        assert np.all(sol.duals[lp.senses == GE] >= -1e-7)
        assert np.all(sol.duals[lp.senses == LE] <= 1e-7)
        # reduced costs vanish on variables strictly between their bounds
        rc = lp.c - lp.matrix().T @ sol.duals
        inside = (sol.x > lp.lb + 1e-6) & (sol.x < lp.ub - 1e-6)
        assert np.all(np.abs(rc[inside]) <= 1e-7)
        # strong duality
        at_lb = np.isclose(sol.x, lp.lb, atol=1e-7)
        bound_term = np.where(at_lb, lp.lb, lp.ub) * rc
        bound_term[inside] = 0.0
        dual_obj = lp.rhs @ sol.duals + bound_term.sum()
        assert dual_obj == pytest.approx(sol.objective, rel=1e-6, abs=1e-6)


def test_finite_difference_duals():
    rng = np.random.default_rng(9)
    checked = 0
    eps = 1e-6
    while checked < 30:
        lp = random_lp(rng)
        sol = solve(lp)
        eq = np.flatnonzero(lp.senses == EQ)
        if len(eq) == 0:
            continue
        i = int(eq[0])
        up = lp.rhs.copy()
        up[i] += eps
        down = lp.rhs.copy()
        down[i] -= eps
        fu, fd = solve(lp.with_rhs(up)), solve(lp.with_rhs(down))
        slope_u = (fu.objective - sol.objective) / eps
        slope_d = (sol.objective - fd.objective) / eps
        if abs(slope_u - slope_d) > 1e-4 * (1 + abs(slope_u)):
            continue  # degenerate: one-sided derivatives differ
        assert sol.duals[i] == pytest.approx(slope_u, rel=1e-4, abs=1e-4)
        checked += 1


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_solution_is_primal_feasible(seed):
    lp = random_lp(np.random.default_rng(seed), m=8, n=10)
    sol = solve(lp)
    act = row_activity(lp, sol.x)
    assert np.all(act[lp.senses == LE] <= lp.rhs[lp.senses == LE] + 1e-7)
    assert np.all(act[lp.senses == GE] >= lp.rhs[lp.senses == GE] - 1e-7)
    assert np.allclose(act[lp.senses == EQ], lp.rhs[lp.senses == EQ], atol=1e-7)
    assert np.all(sol.x >= lp.lb - 1e-7) and np.all(sol.x <= lp.ub + 1e-7)


def test_deterministic():
    lp = random_lp(np.random.default_rng(3))
    a, b = solve(lp), solve(lp)
    assert np.array_equal(a.x, b.x) and np.array_equal(a.duals, b.duals)


def test_warm_solve_uses_and_survives_hints():
    rng = np.random.default_rng(11)
    lp = random_lp(rng)
    sol = solve(lp)
    rhs = lp.rhs + rng.normal(scale=1e-3, size=lp.n_rows) * (lp.senses != EQ)
    cold = solve(lp.with_rhs(rhs))
    warm = warm_solve(lp.with_rhs(rhs), sol.basis)
    assert warm.objective == pytest.approx(cold.objective, rel=1e-9, abs=1e-9)
    # wrong dimensions and junk fall back to a cold start
    for hint in (([1, 2], [3]), "junk", None):
        assert warm_solve(lp, hint).objective == pytest.approx(sol.objective, rel=1e-9, abs=1e-9)
    assert warm_solve(lp, None, backend="simplex").objective == pytest.approx(sol.objective, rel=1e-7, abs=1e-7)


def test_builder_and_dump(tmp_path):
    b = LpBuilder()
    x = b.add_vars(2, lb=0.0, cost=[2.0, 3.0], prefix="x")
    b.add_row(x, [1.0, 1.0], GE, 4.0, name="demand")
    lp = b.build(names=True)
    assert lp.col_names == ["x_0", "x_1"] and lp.row_names == ["demand"]
    assert solve(lp).objective == pytest.approx(8.0)
    p = tmp_path / "m.lp"
    write_lp(lp, p)
    text = p.read_text().lower()
    assert "minimize" in text and "subject to" in text and "end" in text
