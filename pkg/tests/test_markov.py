import numpy as np
import pytest
import scipy.sparse as sp

from ndesim.core import ActionSpace, Situation
from ndesim.markov import (
    TransitionMatrix,
    UncoveredStateError,
    assemble_car_following,
    assemble_free_driving,
    diagnose,
    stationary,
    stationary_direct,
)

from conftest import make_model, toy_cf_grid, toy_speed_grid
from oracles import stationary_by_balance


def dense_tm(P, dt=1.0) -> TransitionMatrix:
    return TransitionMatrix(sp.csr_matrix(np.asarray(P, float)), dt)


def brute_force_fd_kernel(grid, actions, table, dt):
    """Independent allocation: loop states/actions, split on bracketing centers."""
    n = grid.n_states
    ax = grid.axes[0]
    centers = ax.centers
    P = np.zeros((n, n))
    for i in range(n):
        for k, a in enumerate(actions.accels):
            p = table[i, 1 + k]
            if p == 0:
                continue
            v = centers[i] + a * dt
            if v <= centers[0]:
                P[i, 0] += p
            elif v >= centers[-1]:
                P[i, -1] += p
            else:
                j = int(np.floor((v - centers[0]) / ax.resolution))
                frac = (v - centers[j]) / ax.resolution
                P[i, j] += p * (1 - frac)
                P[i, j + 1] += p * frac
        P[i, i] += table[i, actions.lc_left] + table[i, actions.lc_right]
    return P


def test_zero_accel_gives_identity(toy_actions):
    grid = toy_speed_grid(4)
    rows = np.tile([0.0, 1.0, 0.0], (4, 1))  # deterministic a = 0
    F = make_model(grid, toy_actions, rows)
    P = assemble_free_driving(F, dt_mc=1.0)
    assert np.allclose(P.dense(), np.eye(4), atol=1e-12)


def test_center_aligned_successor_is_single_bin(toy_actions):
    grid = toy_speed_grid(4)
    rows = np.tile([0.0, 0.0, 1.0], (4, 1))  # deterministic a = +1, res 1
    F = make_model(grid, toy_actions, rows)
    P = assemble_free_driving(F, dt_mc=1.0).dense()
    expected = np.zeros((4, 4))
    expected[0, 1] = expected[1, 2] = expected[2, 3] = expected[3, 3] = 1.0
    assert np.allclose(P, expected, atol=1e-12)


def test_uniform_row_matches_brute_force_allocation():
    actions = ActionSpace(accels=np.linspace(-1.0, 1.0, 31))
    grid = toy_speed_grid(10, res=0.5)
    rows = np.full((10, 31), 1.0 / 31.0)
    F = make_model(grid, actions, rows)
    P = assemble_free_driving(F, dt_mc=1.0).dense()
    expected = brute_force_fd_kernel(grid, actions, F.table, 1.0)
    assert np.allclose(P, expected, atol=1e-12)
    assert np.allclose(P.sum(axis=1), 1.0, atol=1e-9)


def test_lane_change_mass_self_loops(toy_actions):
    grid = toy_speed_grid(3)
    rows = np.tile([0.0, 0.0, 1.0], (3, 1))
    F = make_model(grid, toy_actions, rows, lc_left=0.25, lc_right=0.15)
    P = assemble_free_driving(F, dt_mc=1.0).dense()
    assert P[1, 1] == pytest.approx(0.4)
    assert P[1, 2] == pytest.approx(0.6)


def test_assembly_is_linear_in_f(toy_actions):
    grid = toy_speed_grid(5)
    rng = np.random.default_rng(3)
    r1 = rng.dirichlet(np.ones(3), size=5)
    r2 = rng.dirichlet(np.ones(3), size=5)
    F1 = make_model(grid, toy_actions, r1)
    F2 = make_model(grid, toy_actions, r2)
    P1 = assemble_free_driving(F1).dense()
    P2 = assemble_free_driving(F2).dense()
    for alpha in (0.0, 0.25, 0.5, 1.0):
        Fm = make_model(grid, toy_actions, alpha * r1 + (1 - alpha) * r2)
        Pm = assemble_free_driving(Fm).dense()
        assert np.allclose(Pm, alpha * P1 + (1 - alpha) * P2, atol=1e-12)


def test_uncovered_rows_raise_listing_states(toy_actions):
    grid = toy_speed_grid(3)
    rows = np.tile([0.0, 1.0, 0.0], (3, 1))
    F = make_model(grid, toy_actions, rows)
    F.coverage = np.array([10_000, 0, 10_000])
    F.min_samples = 50
    with pytest.raises(UncoveredStateError) as err:
        assemble_free_driving(F)
    assert err.value.states == [1]


def test_cf_self_transition_at_steady_state(toy_actions):
    grid = toy_cf_grid(2, 2, 3)
    n = grid.n_states
    rows = np.tile([0.0, 1.0, 0.0], (n, 1))  # a = 0 deterministic
    F = make_model(grid, toy_actions, rows, situation=Situation.CAR_FOLLOWING)
    P = assemble_car_following(F, dt_mc=1.0).dense()
    # states with rr bin centered at 0 (middle rr bin) self-loop
    for iv in range(2):
        for ir in range(2):
            s = grid.ravel((iv, ir, 1))
            assert P[s, s] == pytest.approx(1.0)


def test_cf_range_advances_with_positive_rr(toy_actions):
    grid = toy_cf_grid(2, 3, 3)
    n = grid.n_states
    rows = np.tile([0.0, 1.0, 0.0], (n, 1))
    F = make_model(grid, toy_actions, rows, situation=Situation.CAR_FOLLOWING)
    P = assemble_car_following(F, dt_mc=1.0).dense()
    src = grid.ravel((0, 0, 2))   # rr center = +1 m/s
    dst = grid.ravel((0, 1, 2))   # one range bin up
    assert P[src, dst] == pytest.approx(1.0)


def test_cf_mixed_row_matches_enumeration(toy_actions):
    grid = toy_cf_grid(2, 2, 3)
    n = grid.n_states
    rng = np.random.default_rng(11)
    rows = rng.dirichlet(np.ones(3), size=n)
    F = make_model(grid, toy_actions, rows, situation=Situation.CAR_FOLLOWING)
    P = assemble_car_following(F, dt_mc=1.0).dense()
    axv, axr, axrr = grid.axes

    def alloc(axis, val):
        centers = axis.centers
        if val <= centers[0]:
            return [(0, 1.0)]
        if val >= centers[-1]:
            return [(axis.n_bins - 1, 1.0)]
        j = int(np.floor((val - centers[0]) / axis.resolution))
        frac = (val - centers[j]) / axis.resolution
        return [(j, 1.0 - frac), (j + 1, frac)]

    expected = np.zeros((n, n))
    for s in range(n):
        iv, ir, irr = grid.unravel(s)
        v, r, rr = axv.center(iv), axr.center(ir), axrr.center(irr)
        for k, a in enumerate(toy_actions.accels):
            p = F.table[s, 1 + k]
            for jv, wv in alloc(axv, v + a):
                for jr, wr in alloc(axr, r + rr):
                    for jrr, wrr in alloc(axrr, rr - a):
                        expected[s, grid.ravel((jv, jr, jrr))] += p * wv * wr * wrr
    assert np.allclose(P, expected, atol=1e-12)


def test_crash_states_become_absorbing(toy_actions):
    grid = toy_cf_grid(2, 2, 3)
    n = grid.n_states
    rows = np.tile([1.0, 0.0, 0.0], (n, 1))
    crash = np.zeros(n, dtype=bool)
    crash[0] = True
    F = make_model(grid, toy_actions, rows, situation=Situation.CAR_FOLLOWING)
    P = assemble_car_following(F, dt_mc=1.0, crash_mask=crash).dense()
    assert P[0, 0] == pytest.approx(1.0)
    assert P[0].sum() == pytest.approx(1.0)
    assert np.allclose(P.sum(axis=1), 1.0, atol=1e-9)


def test_stationary_of_identity_is_uniform():
    res = stationary(dense_tm(np.eye(7)))
    assert res.converged and res.residual == 0.0
    assert np.allclose(res.pi, 1.0 / 7)


def test_two_state_chain_hand_oracle():
    # pi1 = 0.9 pi1 + 0.5 pi2  =>  pi = (5/6, 1/6)
    P = dense_tm([[0.9, 0.1], [0.5, 0.5]])
    res = stationary(P, tol=1e-14)
    assert np.allclose(res.pi, [5.0 / 6.0, 1.0 / 6.0], atol=1e-10)
    assert np.allclose(stationary_by_balance(P.dense()), res.pi, atol=1e-10)


def test_doubly_stochastic_gives_uniform():
    P = dense_tm([[0.2, 0.3, 0.5], [0.5, 0.2, 0.3], [0.3, 0.5, 0.2]])
    res = stationary(P, tol=1e-13)
    assert np.allclose(res.pi, 1.0 / 3.0, atol=1e-9)


def test_power_iteration_matches_direct_solve_up_to_200_states():
    rng = np.random.default_rng(42)
    for n in (5, 30, 120, 200):
        P = rng.uniform(0.01, 1.0, size=(n, n))
        P /= P.sum(axis=1, keepdims=True)
        tm = dense_tm(P)
        res = stationary(tm, tol=1e-12)
        assert res.converged
        assert np.abs(res.pi - stationary_direct(tm)).max() < 1e-8
        assert np.abs(res.pi @ P - res.pi).sum() <= 1e-11


def test_nonconvergence_sets_flag():
    # Bipartite chain with unequal sides: power iteration from uniform
    # oscillates between (2/3, 1/6, 1/6) and (1/3, 1/3, 1/3).
    P = dense_tm([[0.0, 0.5, 0.5], [1.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    res = stationary(P, tol=1e-12, max_iters=50)
    assert not res.converged


def test_diagnose_identity_is_reducible():
    d = diagnose(dense_tm(np.eye(4)))
    assert not d.irreducible
    assert len(d.reachable_sets) == 4
    assert d.aperiodic  # every singleton has a self-loop


def test_diagnose_cycle_of_length_three():
    P = dense_tm([[0, 1, 0], [0, 0, 1], [1, 0, 0]])
    d = diagnose(P)
    assert d.irreducible
    assert not d.aperiodic
    assert d.periods == [3]


def test_diagnose_positive_matrix():
    rng = np.random.default_rng(0)
    P = rng.uniform(0.1, 1.0, size=(6, 6))
    P /= P.sum(axis=1, keepdims=True)
    d = diagnose(dense_tm(P))
    assert d.irreducible and d.aperiodic
