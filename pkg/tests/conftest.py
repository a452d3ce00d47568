import numpy as np
import pytest

from ndesim.core import (
    ActionSpace,
    Axis,
    BehaviorModel,
    GridKind,
    Situation,
    StateGrid,
)


def toy_speed_grid(n_states: int = 3, lo: float = 0.0, res: float = 1.0) -> StateGrid:
    return StateGrid(GridKind.FREE_DRIVING, (Axis("speed", lo, lo + n_states * res, res),))


def toy_cf_grid(nv: int = 2, nr: int = 2, nrr: int = 3) -> StateGrid:
    return StateGrid(
        GridKind.CAR_FOLLOWING,
        (
            Axis("speed", 0.0, float(nv), 1.0),
            Axis("range", 0.0, float(nr), 1.0),
            Axis("range_rate", -(nrr / 2.0), nrr / 2.0, 1.0),
        ),
    )


def make_model(grid: StateGrid, actions: ActionSpace, accel_rows: np.ndarray,
               situation: Situation = Situation.FREE_DRIVING,
               lc_left: float = 0.0, lc_right: float = 0.0) -> BehaviorModel:
    """Dense model from per-state accel PMFs plus optional constant LC mass."""
    n = grid.n_states
    table = np.zeros((n, actions.n_actions))
    scale = 1.0 - lc_left - lc_right
    table[:, actions.accel_slice] = accel_rows * scale
    table[:, actions.lc_left] = lc_left
    table[:, actions.lc_right] = lc_right
    coverage = np.full(n, 10_000)
    return BehaviorModel(situation, grid, actions, table, coverage, min_samples=1)


@pytest.fixture
def toy_actions():
    return ActionSpace(accels=np.array([-1.0, 0.0, 1.0]))
