"""Shared domain types: action space, state grids, situations, behavior models.

Everything here is immutable after construction and safe to share read-only
across parallel workers.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

# Canonical constants of the discrete action/state scheme.
ACCEL_MIN = -4.0
ACCEL_MAX = 2.0
ACCEL_RES = 0.2
N_ACCELS = 31
LC_LEFT = 0            # action index of a left lane change
LC_RIGHT = 32          # action index of a right lane change
N_ACTIONS = 33

SPEED_MIN = 20.0
SPEED_MAX = 40.0
D_OBS = 115.0          # car-following observation range [m]

LC_LEFT_MARKER = "lc_left"
LC_RIGHT_MARKER = "lc_right"


class Situation(enum.Enum):
    """The six driving situations, two longitudinal and four lateral."""

    FREE_DRIVING = "free_driving"
    CAR_FOLLOWING = "car_following"
    CUT_IN = "cut_in"
    LC_ONE_ADJACENT = "lc_one_adjacent"
    LC_TWO_ADJACENT = "lc_two_adjacent"
    FREE_LANE_CHANGE = "free_lane_change"

    @property
    def is_lateral(self) -> bool:
        return self not in (Situation.FREE_DRIVING, Situation.CAR_FOLLOWING)


LATERAL_SITUATIONS = (
    Situation.CUT_IN,
    Situation.LC_ONE_ADJACENT,
    Situation.LC_TWO_ADJACENT,
    Situation.FREE_LANE_CHANGE,
)


class GridRangeError(ValueError):
    """A continuous value fell outside the half-open range of a grid axis."""


@dataclass(frozen=True)
class Axis:
    """One binning axis: left-closed right-open bins of equal width."""

    name: str
    lo: float
    hi: float
    resolution: float

    def __post_init__(self):
        if self.resolution <= 0:
            raise ValueError(f"axis {self.name}: resolution must be > 0")
        if self.hi <= self.lo:
            raise ValueError(f"axis {self.name}: empty range [{self.lo}, {self.hi})")

    @cached_property
    def n_bins(self) -> int:
        return math.ceil((self.hi - self.lo) / self.resolution)

    @cached_property
    def _inv_res(self) -> float:
        return 1.0 / self.resolution

    def index(self, value: float) -> int:
        """Strict bin lookup; raises GridRangeError outside [lo, hi)."""
        if not (self.lo <= value < self.hi):
            raise GridRangeError(
                f"axis {self.name}: value {value} outside [{self.lo}, {self.hi})"
            )
        return min(int((value - self.lo) / self.resolution), self.n_bins - 1)

    def clip_index(self, value):
        """Vectorised bin lookup with clamping to the edge bins."""
        # Values below lo go negative and clamp to 0, so a plain int cast
        # (truncation) equals floor everywhere it matters.
        pos = (np.asarray(value, dtype=np.float64) - self.lo) * self._inv_res
        pos = np.minimum(np.maximum(pos, 0.0), self.n_bins - 1)
        return pos.astype(np.int64)

    def center(self, idx):
        return self.lo + (np.asarray(idx, dtype=np.float64) + 0.5) * self.resolution

    @cached_property
    def centers(self) -> np.ndarray:
        return self.lo + (np.arange(self.n_bins) + 0.5) * self.resolution


def discretize(value: float, axis: Axis) -> int:
    """Bin a continuous scalar on an axis; left-closed right-open bins."""
    return axis.index(value)


class GridKind(enum.Enum):
    FREE_DRIVING = "free_driving"
    CAR_FOLLOWING = "car_following"
    LANE_CHANGE_CONTEXT = "lane_change_context"


@dataclass(frozen=True)
class StateGrid:
    """A product of binning axes; states are flat row-major indices."""

    kind: GridKind
    axes: tuple[Axis, ...]

    @cached_property
    def shape(self) -> tuple[int, ...]:
        return tuple(a.n_bins for a in self.axes)

    @cached_property
    def n_states(self) -> int:
        return int(np.prod(self.shape))

    @cached_property
    def strides(self) -> tuple[int, ...]:
        """Row-major flat-index multipliers per axis."""
        out = []
        mult = 1
        for n in reversed(self.shape):
            out.append(mult)
            mult *= n
        return tuple(reversed(out))

    def ravel(self, indices) -> int:
        return int(np.ravel_multi_index(tuple(indices), self.shape))

    def ravel_many(self, index_columns) -> np.ndarray:
        """Vectorised ravel; index_columns is a sequence of per-axis index arrays."""
        return np.ravel_multi_index(tuple(index_columns), self.shape).astype(np.int64)

    def unravel(self, flat: int) -> tuple[int, ...]:
        return tuple(int(i) for i in np.unravel_index(flat, self.shape))

    def centers_of(self, flat) -> tuple[np.ndarray, ...]:
        """Per-axis bin centers of flat state indices (vectorised)."""
        flat = np.asarray(flat, dtype=np.int64)
        out = []
        for ax, stride, n in zip(self.axes, self.strides, self.shape):
            idx = (flat // stride) % n
            out.append(ax.lo + (idx + 0.5) * ax.resolution)
        return tuple(out)

    def index_of(self, values) -> tuple[int, ...]:
        """Strict per-axis binning of a continuous state tuple."""
        if len(values) != len(self.axes):
            raise ValueError(f"expected {len(self.axes)} values, got {len(values)}")
        return tuple(ax.index(v) for ax, v in zip(self.axes, values))

    def clip_ravel(self, value_columns) -> np.ndarray:
        """Vectorised clamp-and-ravel of continuous state columns."""
        axes = self.axes
        strides = self.strides
        flat = axes[0].clip_index(value_columns[0]) * strides[0]
        for ax, col, stride in zip(axes[1:], value_columns[1:], strides[1:]):
            flat += ax.clip_index(col) * stride
        return flat


def speed_axis(resolution: float = 1.0, lo: float = SPEED_MIN, hi: float = SPEED_MAX,
               name: str = "speed") -> Axis:
    return Axis(name, lo, hi, resolution)


def range_axis(name: str = "range", hi: float = D_OBS) -> Axis:
    return Axis(name, 0.0, hi, 1.0)


def free_driving_grid(resolution: float = 0.2) -> StateGrid:
    return StateGrid(GridKind.FREE_DRIVING, (speed_axis(resolution),))


def car_following_grid(speed_res: float = 1.0, range_res: float = 1.0,
                       rr_res: float = 1.0, range_max: float = D_OBS,
                       rr_max: float = 20.0) -> StateGrid:
    return StateGrid(
        GridKind.CAR_FOLLOWING,
        (
            Axis("speed", SPEED_MIN, SPEED_MAX, speed_res),
            Axis("range", 0.0, range_max, range_res),
            Axis("range_rate", -rr_max, rr_max, rr_res),
        ),
    )


def lateral_grid(situation: Situation, speed_res: float = 1.0,
                 range_res: float = 1.0) -> StateGrid:
    """State grid of a lane-change context.

    The subject always has a current-lane lead (no lead => no lane change), so
    every context starts with (v, v_lead, r_lead). Target-lane occupancy picks
    the situation: none -> free lane change; rear only -> cut-in; lead only ->
    one adjacent; lead and rear -> two adjacent.

    Resolutions are configurable: coarser bins trade state fidelity for
    coverage when the training data is small.
    """
    range_hi = math.ceil(D_OBS / range_res) * range_res

    def sp(name):
        return Axis(name, SPEED_MIN, SPEED_MAX, speed_res)

    def rg(name):
        return Axis(name, 0.0, range_hi, range_res)

    v = sp("speed")
    lead = (sp("lead_speed"), rg("lead_range"))
    tgt_lead = (sp("target_lead_speed"), rg("target_lead_range"))
    tgt_rear = (sp("target_rear_speed"), rg("target_rear_range"))
    if situation is Situation.FREE_LANE_CHANGE:
        axes = (v, *lead)
    elif situation is Situation.CUT_IN:
        axes = (v, *lead, *tgt_rear)
    elif situation is Situation.LC_ONE_ADJACENT:
        axes = (v, *lead, *tgt_lead)
    elif situation is Situation.LC_TWO_ADJACENT:
        axes = (v, *lead, *tgt_lead, *tgt_rear)
    else:
        raise ValueError(f"{situation} is not a lane-change context")
    return StateGrid(GridKind.LANE_CHANGE_CONTEXT, axes)


@dataclass(frozen=True)
class LateralGrids:
    """The four lane-change context grids plus their fused key machinery.

    `stride_templates[code]` maps the canonical 7-column binned state
    (v, lv, lr, tlv, tlr, trv, trr) to each situation's flat key; absent
    columns carry stride zero. Consumers must share one instance between
    data labeling and simulation so train and test keys agree.
    """

    speed_res: float = 1.0
    range_res: float = 1.0

    @cached_property
    def grids(self) -> dict:
        return {s: lateral_grid(s, self.speed_res, self.range_res)
                for s in LATERAL_SITUATIONS}

    @cached_property
    def speed_axis(self) -> Axis:
        return self.grids[Situation.FREE_LANE_CHANGE].axes[0]

    @cached_property
    def range_axis(self) -> Axis:
        return self.grids[Situation.FREE_LANE_CHANGE].axes[2]

    @cached_property
    def code_of(self) -> dict:
        return {s: i for i, s in enumerate(LATERAL_SITUATIONS)}

    @cached_property
    def stride_templates(self) -> np.ndarray:
        templates = np.zeros((len(LATERAL_SITUATIONS), 7), dtype=np.int64)
        col_of = {
            Situation.FREE_LANE_CHANGE: [0, 1, 2],
            Situation.CUT_IN: [0, 1, 2, 5, 6],
            Situation.LC_ONE_ADJACENT: [0, 1, 2, 3, 4],
            Situation.LC_TWO_ADJACENT: [0, 1, 2, 3, 4, 5, 6],
        }
        for situation, cols in col_of.items():
            for stride, col in zip(self.grids[situation].strides, cols):
                templates[self.code_of[situation], col] = stride
        return templates


def lateral_situation(has_target_lead: bool, has_target_rear: bool) -> Situation:
    """Classify a lane-change context from target-lane occupancy within d_obs."""
    if has_target_lead and has_target_rear:
        return Situation.LC_TWO_ADJACENT
    if has_target_lead:
        return Situation.LC_ONE_ADJACENT
    if has_target_rear:
        return Situation.CUT_IN
    return Situation.FREE_LANE_CHANGE


def standard_grids() -> dict[Situation, StateGrid]:
    grids = {
        Situation.FREE_DRIVING: free_driving_grid(),
        Situation.CAR_FOLLOWING: car_following_grid(),
    }
    for s in LATERAL_SITUATIONS:
        grids[s] = lateral_grid(s)
    return grids


@dataclass(frozen=True)
class DiscreteState:
    grid: StateGrid
    indices: tuple[int, ...]

    def __post_init__(self):
        if len(self.indices) != len(self.grid.axes):
            raise ValueError("index tuple length does not match grid axes")
        for i, (idx, ax) in enumerate(zip(self.indices, self.grid.axes)):
            if not (0 <= idx < ax.n_bins):
                raise ValueError(f"index {idx} out of range for axis {ax.name}")

    @property
    def flat(self) -> int:
        return self.grid.ravel(self.indices)


@dataclass(frozen=True)
class ActionSpace:
    """Discrete action set: LC-left, a grid of accelerations, LC-right.

    The standard space has 31 accelerations from -4.0 to +2.0 m/s^2 in 0.2
    steps (33 actions total). Reduced spaces are allowed for toy problems.
    """

    accels: np.ndarray = field(
        default_factory=lambda: np.round(ACCEL_MIN + ACCEL_RES * np.arange(N_ACCELS), 10)
    )

    def __post_init__(self):
        object.__setattr__(self, "accels", np.asarray(self.accels, dtype=np.float64))
        if self.accels.ndim != 1 or len(self.accels) < 1:
            raise ValueError("accels must be a non-empty 1-D array")

    @property
    def n_accels(self) -> int:
        return len(self.accels)

    @property
    def n_actions(self) -> int:
        return self.n_accels + 2

    @property
    def lc_left(self) -> int:
        return 0

    @property
    def lc_right(self) -> int:
        return self.n_accels + 1

    @property
    def accel_slice(self) -> slice:
        return slice(1, self.n_accels + 1)

    def action_to_accel(self, index: int):
        """Map an action index to its acceleration, or to an LC marker."""
        if index == self.lc_left:
            return LC_LEFT_MARKER
        if index == self.lc_right:
            return LC_RIGHT_MARKER
        if 1 <= index <= self.n_accels:
            return float(self.accels[index - 1])
        raise ValueError(f"action index {index} outside 0..{self.n_actions - 1}")

    def accel_to_action(self, accel) -> np.ndarray:
        """Nearest-bin action index for continuous accelerations (vectorised)."""
        res = float(self.accels[1] - self.accels[0]) if self.n_accels > 1 else 1.0
        k = np.rint((np.asarray(accel) - self.accels[0]) / res).astype(np.int64)
        return np.clip(k, 0, self.n_accels - 1) + 1


def standard_action_space() -> ActionSpace:
    space = ActionSpace()
    assert space.n_actions == N_ACTIONS
    assert abs(space.accels[0] - ACCEL_MIN) < 1e-12
    assert abs(space.accels[-1] - ACCEL_MAX) < 1e-12
    return space


class BehaviorModel:
    """A table of conditional action PMFs, one row per discrete state.

    Dense storage (2-D ndarray) for the longitudinal grids; sparse dict
    {flat state: row} for the high-dimensional lane-change contexts where
    only visited states are representable.
    """

    def __init__(self, situation: Situation, grid: StateGrid, actions: ActionSpace,
                 table, coverage, min_samples: int = 50, crash_flags=None):
        self.situation = situation
        self.grid = grid
        self.actions = actions
        self.table = table
        self.coverage = coverage
        self.min_samples = int(min_samples)
        self.crash_flags = crash_flags
        if self.is_dense:
            if table.shape != (grid.n_states, actions.n_actions):
                raise ValueError(
                    f"table shape {table.shape} != "
                    f"({grid.n_states}, {actions.n_actions})"
                )
            if len(coverage) != grid.n_states:
                raise ValueError("coverage length does not match state count")

    @property
    def is_dense(self) -> bool:
        return isinstance(self.table, np.ndarray)

    @property
    def n_states(self) -> int:
        return self.grid.n_states

    def covered_mask(self) -> np.ndarray:
        if not self.is_dense:
            raise TypeError("covered_mask is only defined for dense models")
        mask = np.asarray(self.coverage) >= self.min_samples
        if self.crash_flags is not None:
            mask &= ~self.crash_flags
        return mask

    def is_covered(self, flat: int) -> bool:
        if self.is_dense:
            return bool(self.covered_mask()[flat])
        return self.coverage.get(flat, 0) >= self.min_samples

    def row(self, flat: int) -> np.ndarray:
        if self.is_dense:
            return self.table[flat]
        return self.table[flat]

    def lc_prob(self, flat: int) -> float:
        """Total lane-change mass of a row (both LC columns)."""
        r = self.row(flat)
        return float(r[self.actions.lc_left] + r[self.actions.lc_right])

    def validate(self, atol: float = 1e-9) -> None:
        """Check the covered-row PMF invariants; raises on violation."""
        if self.is_dense:
            mask = self.covered_mask()
            rows = self.table[mask]
            if rows.size:
                sums = rows.sum(axis=1)
                if np.any(np.abs(sums - 1.0) > atol):
                    bad = int(np.argmax(np.abs(sums - 1.0)))
                    raise ValueError(f"covered row does not sum to 1 (err {sums[bad]-1:.2e})")
                if rows.min() < 0:
                    raise ValueError("negative probability in covered row")
        else:
            for flat, row in self.table.items():
                if self.coverage.get(flat, 0) < self.min_samples:
                    continue
                if abs(row.sum() - 1.0) > atol or row.min() < 0:
                    raise ValueError(f"invalid PMF at sparse state {flat}")


@dataclass
class Histogram:
    """Binned counts with ascending edges; `normalized` is the PMF over bins."""

    edges: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.float64)
        self.counts = np.asarray(self.counts, dtype=np.float64)
        if len(self.counts) != len(self.edges) - 1:
            raise ValueError("len(counts) must be len(edges) - 1")
        if np.any(np.diff(self.edges) <= 0):
            raise ValueError("edges must be strictly ascending")
        if np.any(self.counts < 0):
            raise ValueError("counts must be non-negative")

    @property
    def normalized(self) -> np.ndarray:
        total = self.counts.sum()
        if total == 0:
            return np.zeros_like(self.counts)
        return self.counts / total
