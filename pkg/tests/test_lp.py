import numpy as np
import pytest

from ndesim.lp import LinearProgram, LpStatus, export_lp_text, solve

from oracles import lp_minimum_by_enumeration


def test_trivial_equality():
    # min x1 s.t. x1 + x2 = 1
    sol = solve(LinearProgram(c=[1.0, 0.0], A=[[1.0, 1.0]], b=[1.0]))
    assert sol.status is LpStatus.OPTIMAL
    assert sol.objective == pytest.approx(0.0, abs=1e-9)
    assert sol.x == pytest.approx([0.0, 1.0], abs=1e-9)


def test_slack_form_upper_bound():
    # min -x1 s.t. x1 <= 1 via slack: x1 + s = 1
    sol = solve(LinearProgram(c=[-1.0, 0.0], A=[[1.0, 1.0]], b=[1.0]))
    assert sol.status is LpStatus.OPTIMAL
    assert sol.x[0] == pytest.approx(1.0, abs=1e-9)
    assert sol.objective == pytest.approx(-1.0, abs=1e-9)


def test_variable_upper_bounds():
    sol = solve(LinearProgram(c=[-1.0, 0.0], A=[[1.0, 1.0]], b=[5.0], ub=[3.0, np.inf]))
    assert sol.status is LpStatus.OPTIMAL
    assert sol.x == pytest.approx([3.0, 2.0], abs=1e-9)


def test_infeasible_negative_rhs():
    sol = solve(LinearProgram(c=[1.0, 1.0], A=[[1.0, 1.0]], b=[-1.0]))
    assert sol.status is LpStatus.INFEASIBLE


def test_infeasible_contradictory_rows():
    sol = solve(LinearProgram(c=[0.0, 0.0], A=[[1.0, 1.0], [1.0, 1.0]], b=[1.0, 2.0]))
    assert sol.status is LpStatus.INFEASIBLE


def test_unbounded():
    # min -x1 s.t. x1 - x2 = 0: both can grow without limit
    sol = solve(LinearProgram(c=[-1.0, 0.0], A=[[1.0, -1.0]], b=[0.0]))
    assert sol.status is LpStatus.UNBOUNDED


def test_redundant_row_is_harmless():
    sol = solve(LinearProgram(c=[1.0, 2.0], A=[[1.0, 1.0], [2.0, 2.0]], b=[1.0, 2.0]))
    assert sol.status is LpStatus.OPTIMAL
    assert sol.objective == pytest.approx(1.0, abs=1e-9)


def test_beale_cycling_example_terminates():
    # Classic Dantzig-rule cycling instance; Bland switching must escape it.
    A = [
        [0.25, -60.0, -1.0 / 25.0, 9.0, 1.0, 0.0, 0.0],
        [0.5, -90.0, -1.0 / 50.0, 3.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
    ]
    c = [-0.75, 150.0, -0.02, 6.0, 0.0, 0.0, 0.0]
    sol = solve(LinearProgram(c=c, A=A, b=[0.0, 0.0, 1.0]))
    assert sol.status is LpStatus.OPTIMAL
    assert sol.objective == pytest.approx(-0.05, abs=1e-9)


def test_dimension_mismatch_raises_before_solving():
    with pytest.raises(ValueError):
        LinearProgram(c=[1.0], A=[[1.0, 2.0]], b=[1.0])
    with pytest.raises(ValueError):
        LinearProgram(c=[1.0, 2.0], A=[[1.0, 2.0]], b=[1.0, 2.0])


def _random_feasible_lp(rng):
    m = int(rng.integers(1, 6))
    n = int(rng.integers(m, 9))
    A = rng.normal(size=(m, n))
    x0 = rng.uniform(0.0, 2.0, size=n)  # feasible by construction
    b = A @ x0
    c = rng.uniform(0.0, 2.0, size=n)   # c >= 0 keeps the LP bounded on x >= 0
    return LinearProgram(c=c, A=A, b=b)


def test_random_lps_match_vertex_enumeration():
    rng = np.random.default_rng(1234)
    checked = 0
    while checked < 120:
        lp = _random_feasible_lp(rng)
        best = lp_minimum_by_enumeration(lp.c, lp.A, lp.b)
        if best is None:
            continue
        sol = solve(lp)
        assert sol.status is LpStatus.OPTIMAL
        assert sol.objective == pytest.approx(best, abs=1e-7)
        assert np.abs(lp.A @ sol.x - lp.b).max() <= 1e-7 * (1 + np.abs(lp.b).max())
        assert sol.x.min() >= -1e-9
        checked += 1


def test_weak_duality_spot_check():
    rng = np.random.default_rng(7)
    for _ in range(20):
        lp = _random_feasible_lp(rng)
        sol = solve(lp)
        if sol.status is not LpStatus.OPTIMAL:
            continue
        # Any dual-feasible y must satisfy b'y <= c'x. Scale a random y until
        # A'y <= c holds, which keeps it hand-supplied and solver-independent.
        y = rng.normal(size=lp.shape[0])
        slack = lp.A.T @ y - lp.c
        if slack.max() > 0:
            y = y / (slack.max() + 1.0)
            if (lp.A.T @ y - lp.c).max() > 0:
                y = np.zeros(lp.shape[0])
        if (lp.A.T @ y - lp.c).max() <= 1e-12:
            assert lp.b @ y <= sol.objective + 1e-7


def test_solver_is_deterministic():
    rng = np.random.default_rng(99)
    lp = _random_feasible_lp(rng)
    a = solve(lp)
    b = solve(LinearProgram(c=lp.c.copy(), A=lp.A.copy(), b=lp.b.copy()))
    assert a.x.tobytes() == b.x.tobytes()
    assert a.objective == b.objective
    assert a.iterations == b.iterations


def test_export_text_round_trips_the_structure():
    lp = LinearProgram(c=[1.0, 0.0], A=[[1.0, 1.0]], b=[1.0],
                       var_names=["p", "q"], con_names=["row"])
    text = export_lp_text(lp)
    assert "Minimize" in text and "row:" in text and "p" in text
    assert text.endswith("End\n")
