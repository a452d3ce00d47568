import numpy as np
import pytest
from hypothesis import given, strategies as st

from ndesim import core
from ndesim.core import (
    Axis,
    GridRangeError,
    Situation,
    discretize,
    free_driving_grid,
    car_following_grid,
    lateral_grid,
    lateral_situation,
    standard_action_space,
)


def test_speed_axis_boundaries():
    ax = Axis("speed", 20.0, 40.0, 0.2)
    assert ax.n_bins == 100
    assert discretize(20.0, ax) == 0
    assert discretize(31.07, ax) == 55  # floor(11.07 / 0.2)
    with pytest.raises(GridRangeError):
        discretize(40.0, ax)  # right-open interval
    with pytest.raises(GridRangeError):
        discretize(19.999, ax)


def test_action_space_is_the_33_action_scheme():
    space = standard_action_space()
    assert space.n_actions == 33
    assert space.action_to_accel(1) == pytest.approx(-4.0)
    assert space.action_to_accel(21) == pytest.approx(0.0)
    assert space.action_to_accel(31) == pytest.approx(2.0)
    assert space.action_to_accel(0) == core.LC_LEFT_MARKER
    assert space.action_to_accel(32) == core.LC_RIGHT_MARKER
    with pytest.raises(ValueError):
        space.action_to_accel(33)
    # index -> acceleration is bijective over 1..31
    accels = [space.action_to_accel(k) for k in range(1, 32)]
    assert len(set(np.round(accels, 9))) == 31


def test_accel_round_trip():
    space = standard_action_space()
    for k in range(1, 32):
        a = space.action_to_accel(k)
        assert int(space.accel_to_action(a)) == k
        assert abs(space.action_to_accel(int(space.accel_to_action(a))) - a) < 1e-12


@given(st.integers(min_value=0, max_value=99))
def test_discretize_of_center_is_identity(idx):
    ax = Axis("speed", 20.0, 40.0, 0.2)
    assert ax.index(float(ax.center(idx))) == idx


@given(st.floats(min_value=20.0, max_value=39.999999), st.floats(min_value=20.0, max_value=39.999999))
def test_bins_are_disjoint_and_covering(a, b):
    ax = Axis("speed", 20.0, 40.0, 0.2)
    ia, ib = ax.index(a), ax.index(b)
    assert 0 <= ia < ax.n_bins
    if ia == ib:
        assert abs(a - b) < 2 * ax.resolution
    else:
        lo, hi = sorted((a, b))
        assert ax.index(lo) <= ax.index(hi)


def test_grid_shapes():
    fd = free_driving_grid()
    assert fd.shape == (100,)
    cf = car_following_grid()
    assert cf.shape == (20, 115, 40)
    assert cf.n_states == 92000
    flat = cf.ravel((3, 50, 20))
    assert cf.unravel(flat) == (3, 50, 20)


def test_lateral_grids_follow_the_context_tuples():
    assert len(lateral_grid(Situation.FREE_LANE_CHANGE).axes) == 3
    assert len(lateral_grid(Situation.CUT_IN).axes) == 5
    assert len(lateral_grid(Situation.LC_ONE_ADJACENT).axes) == 5
    assert len(lateral_grid(Situation.LC_TWO_ADJACENT).axes) == 7
    with pytest.raises(ValueError):
        lateral_grid(Situation.FREE_DRIVING)


def test_lateral_situation_partition():
    assert lateral_situation(False, False) is Situation.FREE_LANE_CHANGE
    assert lateral_situation(False, True) is Situation.CUT_IN
    assert lateral_situation(True, False) is Situation.LC_ONE_ADJACENT
    assert lateral_situation(True, True) is Situation.LC_TWO_ADJACENT


def test_behavior_model_validation():
    grid = free_driving_grid(resolution=5.0)  # 4 states
    space = standard_action_space()
    table = np.zeros((4, 33))
    table[:, 21] = 1.0
    coverage = np.array([100, 100, 10, 100])
    model = core.BehaviorModel(Situation.FREE_DRIVING, grid, space, table, coverage)
    model.validate()
    assert model.covered_mask().tolist() == [True, True, False, True]
    bad = table.copy()
    bad[0, 21] = 0.5
    with pytest.raises(ValueError):
        core.BehaviorModel(Situation.FREE_DRIVING, grid, space, bad, coverage).validate()


def test_histogram_invariants():
    h = core.Histogram(edges=[0.0, 1.0, 2.0], counts=[3, 1])
    assert h.normalized == pytest.approx([0.75, 0.25])
    assert abs(h.normalized.sum() - 1.0) < 1e-9
    with pytest.raises(ValueError):
        core.Histogram(edges=[0.0, 1.0], counts=[1, 2])
    empty = core.Histogram(edges=[0.0, 1.0, 2.0], counts=[0, 0])
    assert empty.normalized.sum() == 0.0


def test_clip_ravel_clamps_to_grid():
    cf = car_following_grid()
    flat = cf.clip_ravel(([25.0], [300.0], [50.0]))  # range, rr beyond bounds
    iv, ir, irr = cf.unravel(int(flat[0]))
    assert ir == 114 and irr == 39 and iv == 5
