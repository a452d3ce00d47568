"""Trajectory-data ingestion: segmentation, lane-change detection,
categorization into the six situations, and the synthetic data generator
that stands in for the proprietary naturalistic datasets.

The interchange format is a flat 10 Hz CSV (`RECORD_COLUMNS`); the in-memory
carrier is a pandas DataFrame with the same columns. Missing vehicles are id
-1 with NaN ranges. All neighbor ranges are clear gaps truncated at d_obs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .core import (
    D_OBS,
    LATERAL_SITUATIONS,
    SPEED_MAX,
    SPEED_MIN,
    ActionSpace,
    DiscreteState,
    LateralGrids,
    Situation,
    StateGrid,
    car_following_grid,
    free_driving_grid,
    standard_action_space,
)
from .sim import (
    LEFT,
    RIGHT,
    ActionModels,
    SimConfig,
    StepCollector,
    World,
    init_world,
    step,
)
from .driver_models import FallbackPmfTable

RECORD_COLUMNS = [
    "time", "vehicle_id", "lane_id", "x", "v", "accel",
    "lead_id", "range", "range_rate",
    "dist_left_marking", "dist_right_marking",
    "left_lead_id", "left_lead_range", "left_lead_range_rate",
    "left_rear_id", "left_rear_range", "left_rear_range_rate",
    "right_lead_id", "right_lead_range", "right_lead_range_rate",
    "right_rear_id", "right_rear_range", "right_rear_range_rate",
]

SITUATION_ORDER = [
    Situation.FREE_DRIVING,
    Situation.CAR_FOLLOWING,
    Situation.CUT_IN,
    Situation.LC_ONE_ADJACENT,
    Situation.LC_TWO_ADJACENT,
    Situation.FREE_LANE_CHANGE,
]
SITUATION_CODE = {s: i for i, s in enumerate(SITUATION_ORDER)}


@dataclass(frozen=True)
class TrajectoryRecord:
    """One 10 Hz observation; scalar mirror of a RECORD_COLUMNS row."""

    time: float
    vehicle_id: int
    lane_id: int
    x: float
    v: float
    accel: float
    lead_id: int = -1
    range: float = float("nan")
    range_rate: float = float("nan")
    dist_left_marking: float = float("nan")
    dist_right_marking: float = float("nan")


@dataclass
class TrajectorySegment:
    vehicle_id: int
    records: pd.DataFrame

    @property
    def duration(self) -> float:
        t = self.records["time"].to_numpy()
        return float(t[-1] - t[0]) if len(t) else 0.0


@dataclass(frozen=True)
class LabeledSample:
    situation: Situation
    state: DiscreteState
    action: int


@dataclass
class SampleBatch:
    """Columnar labeled samples: parallel situation-code/state-key/action arrays."""

    situation: np.ndarray  # int8 codes per SITUATION_ORDER
    key: np.ndarray        # int64 flat state index on the situation's grid
    action: np.ndarray     # int16 action index (0..n_actions-1)

    def __len__(self) -> int:
        return len(self.key)

    @classmethod
    def concat(cls, batches) -> "SampleBatch":
        batches = [b for b in batches if len(b)]
        if not batches:
            return cls(np.zeros(0, np.int8), np.zeros(0, np.int64), np.zeros(0, np.int16))
        return cls(np.concatenate([b.situation for b in batches]),
                   np.concatenate([b.key for b in batches]),
                   np.concatenate([b.action for b in batches]))


@dataclass
class PipelineConfig:
    """Knobs of the Appendix-style processing pipeline."""

    max_gap_s: float = 2.0
    min_duration_s: float = 3.0
    noise_dv: float = 4.0           # |dv| between consecutive records [m/s]
    wrap_length: float | None = None  # ring length, to ignore wrap jumps
    lane_width: float = 3.5
    slope_threshold: float = 0.2    # marking-distance slope per sample
    slope_run: int = 3              # consecutive samples above threshold
    lc_duration: float = 1.0
    n_lanes: int = 3
    d_obs: float = D_OBS
    dt: float = 0.1
    lateral_speed_res: float = 1.0  # lane-change context bin widths
    lateral_range_res: float = 1.0

    def lateral_grids(self) -> LateralGrids:
        return LateralGrids(self.lateral_speed_res, self.lateral_range_res)


# ---------------------------------------------------------------------------
# Segmentation


def _clean_raw(df: pd.DataFrame) -> pd.DataFrame:
    """Drop records violating the raw invariants (bad ranges, time dups)."""
    ok = np.ones(len(df), dtype=bool)
    has_lead = df["lead_id"].to_numpy() >= 0
    ok &= ~(has_lead & ~(df["range"].to_numpy() > 0))
    same_veh = np.zeros(len(df), dtype=bool)
    same_veh[1:] = df["vehicle_id"].to_numpy()[1:] == df["vehicle_id"].to_numpy()[:-1]
    non_increasing = np.zeros(len(df), dtype=bool)
    non_increasing[1:] = np.diff(df["time"].to_numpy()) <= 0
    ok &= ~(same_veh & non_increasing)
    return df[ok] if not ok.all() else df


def segment_frame(df: pd.DataFrame, cfg: PipelineConfig | None = None):
    """Vectorised segmentation; returns (kept_frame, segment_ids).

    Splits at vehicle change, time gaps > max_gap_s, and lead-identity
    changes; drops segments shorter than min_duration_s or failing the noise
    rule (speed jumps, position regression).
    """
    cfg = cfg or PipelineConfig()
    if len(df) == 0:
        return df, np.zeros(0, dtype=np.int64)
    veh = df["vehicle_id"].to_numpy()
    t = df["time"].to_numpy()
    if np.any((veh[1:] < veh[:-1]) | ((veh[1:] == veh[:-1]) & (np.diff(t) < 0))):
        raise ValueError("records must be sorted by (vehicle_id, time)")
    df = _clean_raw(df)
    if len(df) == 0:
        return df, np.zeros(0, dtype=np.int64)
    veh = df["vehicle_id"].to_numpy()
    t = df["time"].to_numpy()
    lead = df["lead_id"].to_numpy()
    brk = np.zeros(len(df), dtype=bool)
    brk[0] = True
    brk[1:] |= veh[1:] != veh[:-1]
    brk[1:] |= np.diff(t) > cfg.max_gap_s + 1e-9
    brk[1:] |= lead[1:] != lead[:-1]
    seg = np.cumsum(brk) - 1
    n_seg = seg[-1] + 1
    # Noise rule: discard segments with speed jumps or position regression.
    v = df["v"].to_numpy()
    x = df["x"].to_numpy()
    dv = np.abs(np.diff(v))
    dx = np.diff(x)
    if cfg.wrap_length:
        dx = np.mod(dx, cfg.wrap_length)
    inner = seg[1:] == seg[:-1]
    noisy_step = inner & ((dv > cfg.noise_dv) | (dx < 0))
    noisy = np.zeros(n_seg, dtype=bool)
    np.add.at(noisy, seg[1:][noisy_step], True)
    first = np.zeros(n_seg, dtype=np.int64)
    last = np.zeros(n_seg, dtype=np.int64)
    idx = np.arange(len(df))
    first[seg[::-1]] = idx[::-1]  # reversed write keeps the first index
    last[seg] = idx
    duration = t[last] - t[first]
    keep_seg = (duration > cfg.min_duration_s + 1e-9) & ~noisy
    keep = keep_seg[seg]
    kept = df[keep]
    new_ids = np.cumsum(np.r_[True, np.diff(seg[keep]) != 0]) - 1 if keep.any() \
        else np.zeros(0, dtype=np.int64)
    return kept, new_ids.astype(np.int64)


def segment(df: pd.DataFrame, cfg: PipelineConfig | None = None) -> list[TrajectorySegment]:
    """Object view of segment_frame, one TrajectorySegment per kept segment."""
    kept, seg_ids = segment_frame(df, cfg)
    out = []
    if len(kept) == 0:
        return out
    kept = kept.reset_index(drop=True)
    for sid in range(int(seg_ids.max()) + 1 if len(seg_ids) else 0):
        rows = kept[seg_ids == sid]
        out.append(TrajectorySegment(int(rows["vehicle_id"].iloc[0]), rows))
    return out


# ---------------------------------------------------------------------------
# Lane-change detection


@dataclass(frozen=True)
class LaneChangeEvent:
    vehicle_id: int
    start_time: float
    cross_time: float
    direction: str  # "left" | "right"


def _detect_side(t, dist, sign: float, cfg: PipelineConfig, vehicle_id: int):
    """One side's events; sign=+1 scans dist_left (left LC), -1 dist_right."""
    d = sign * np.asarray(dist, dtype=np.float64)
    events = []
    if len(d) < 2:
        return events
    dd = np.diff(d)
    jumps = np.flatnonzero(dd > cfg.lane_width / 2.0)
    approach = dd <= -cfg.slope_threshold + 1e-12
    half = cfg.lane_width / 2.0
    for k in jumps:
        # Walk back over the monotone approach run ending at the jump.
        j = k - 1
        while j >= 0 and approach[j]:
            j -= 1
        run = (k - 1) - j
        if run < cfg.slope_run:
            continue
        start_idx = j + 1
        # Chained same-direction changes give one continuous diagonal with no
        # slope breakpoint; the start of the final change is where the trace
        # last left the lane-center half-plane.
        beyond = np.flatnonzero(d[start_idx:k + 1] >= half - 1e-9)
        if len(beyond):
            start_idx += int(beyond[-1])
        # Extrapolate the approach slope through zero for the crossing time.
        slope = dd[k - 1] if k >= 1 else 0.0
        step_len = t[k + 1] - t[k]
        cross = t[k] + (d[k] / -slope) * step_len if slope < 0 else t[k]
        events.append(LaneChangeEvent(vehicle_id, float(t[start_idx]), float(cross),
                                      "left" if sign > 0 else "right"))
    return events


def detect_lane_changes(seg: TrajectorySegment,
                        cfg: PipelineConfig | None = None) -> list[LaneChangeEvent]:
    """Lane-change events from the marking-distance traces.

    A left change approaches dist_left_marking monotonically to zero and then
    jumps to the lane width; start is where the slope run begins, cross where
    the distance extrapolates through zero. Right changes mirror on the
    (negative) right-marking distance.
    """
    cfg = cfg or PipelineConfig()
    t = seg.records["time"].to_numpy()
    ev = _detect_side(t, seg.records["dist_left_marking"].to_numpy(), +1.0, cfg,
                      seg.vehicle_id)
    ev += _detect_side(t, seg.records["dist_right_marking"].to_numpy(), -1.0, cfg,
                       seg.vehicle_id)
    return sorted(ev, key=lambda e: e.start_time)


def detect_lane_changes_frame(kept: pd.DataFrame, seg_ids: np.ndarray,
                              cfg: PipelineConfig | None = None) -> list[LaneChangeEvent]:
    """detect_lane_changes over a whole segmented frame without per-segment
    DataFrame materialisation (array slices per segment)."""
    cfg = cfg or PipelineConfig()
    if len(kept) == 0:
        return []
    t = kept["time"].to_numpy()
    dl = kept["dist_left_marking"].to_numpy()
    dr = kept["dist_right_marking"].to_numpy()
    veh = kept["vehicle_id"].to_numpy()
    bounds = np.flatnonzero(np.r_[True, seg_ids[1:] != seg_ids[:-1], True])
    events: list[LaneChangeEvent] = []
    for s, e in zip(bounds[:-1], bounds[1:]):
        vid = int(veh[s])
        events += _detect_side(t[s:e], dl[s:e], +1.0, cfg, vid)
        events += _detect_side(t[s:e], dr[s:e], -1.0, cfg, vid)
    return events


def detect_lane_changes_stream(df: pd.DataFrame,
                               cfg: PipelineConfig | None = None) -> list[LaneChangeEvent]:
    """Lane-change events over raw per-vehicle traces split only at time gaps.

    Detection must NOT run on the fine (lead-constant) segments: a lane
    change switches the lead at the crossing, so the marking-distance jump
    always straddles a fine-segment boundary and would never be seen.
    """
    cfg = cfg or PipelineConfig()
    if len(df) == 0:
        return []
    veh = df["vehicle_id"].to_numpy()
    t = df["time"].to_numpy()
    brk = np.zeros(len(df), dtype=bool)
    brk[0] = True
    brk[1:] |= veh[1:] != veh[:-1]
    brk[1:] |= np.diff(t) > cfg.max_gap_s + 1e-9
    bounds = np.flatnonzero(np.r_[brk, True])
    dl = df["dist_left_marking"].to_numpy()
    dr = df["dist_right_marking"].to_numpy()
    events: list[LaneChangeEvent] = []
    for s, e in zip(bounds[:-1], bounds[1:]):
        vid = int(veh[s])
        events += _detect_side(t[s:e], dl[s:e], +1.0, cfg, vid)
        events += _detect_side(t[s:e], dr[s:e], -1.0, cfg, vid)
    return events


# ---------------------------------------------------------------------------
# Categorization


_FD_GRID = free_driving_grid()
_CF_GRID = car_following_grid()


def categorize_frame(kept: pd.DataFrame, seg_ids: np.ndarray, events,
                     cfg: PipelineConfig | None = None,
                     actions: ActionSpace | None = None) -> SampleBatch:
    """Label every decision point: one longitudinal sample per record plus one
    lateral sample per available direction (the exposure the simulator
    queries). Records strictly inside a lane-change maneuver are dropped; the
    start record carries the LC action."""
    cfg = cfg or PipelineConfig()
    actions = actions or standard_action_space()
    lat_grids = cfg.lateral_grids().grids
    n = len(kept)
    if n == 0:
        return SampleBatch.concat([])
    t = kept["time"].to_numpy()
    veh = kept["vehicle_id"].to_numpy()
    v = kept["v"].to_numpy()
    accel = kept["accel"].to_numpy()
    lead = kept["lead_id"].to_numpy()
    rng_ = kept["range"].to_numpy()
    rr = kept["range_rate"].to_numpy()
    lane = kept["lane_id"].to_numpy()

    lc_action = np.zeros(n, dtype=np.int16) - 1   # -1: not an LC start
    in_mnv = np.zeros(n, dtype=bool)
    by_vehicle: dict[int, list[LaneChangeEvent]] = {}
    for e in events:
        by_vehicle.setdefault(e.vehicle_id, []).append(e)
    # Mark start records and mid-maneuver windows per vehicle.
    veh_starts = np.flatnonzero(np.r_[True, veh[1:] != veh[:-1]])
    veh_bounds = dict(zip(veh[veh_starts], zip(veh_starts, np.r_[veh_starts[1:], n])))
    for vid, evs in by_vehicle.items():
        if vid not in veh_bounds:
            continue
        lo, hi = veh_bounds[vid]
        tv = t[lo:hi]
        for e in evs:
            k = int(np.searchsorted(tv, e.start_time - 1e-9))
            if k < len(tv) and abs(tv[k] - e.start_time) < cfg.dt / 2:
                lc_action[lo + k] = actions.lc_left if e.direction == "left" \
                    else actions.lc_right
            after = (tv > e.start_time + 1e-9) & (tv <= e.start_time + cfg.lc_duration + 1e-9)
            in_mnv[lo:hi] |= after

    use = ~in_mnv & (v >= SPEED_MIN) & (v < SPEED_MAX)
    has_lead = lead >= 0
    base_action = actions.accel_to_action(accel).astype(np.int16)
    action = np.where(lc_action >= 0, lc_action, base_action)

    batches = []
    # Longitudinal: free driving.
    m = use & ~has_lead
    if m.any():
        keys = _FD_GRID.clip_ravel((v[m],))
        batches.append(SampleBatch(
            np.full(m.sum(), SITUATION_CODE[Situation.FREE_DRIVING], np.int8),
            keys, action[m]))
    # Longitudinal: car following.
    m = use & has_lead
    if m.any():
        keys = _CF_GRID.clip_ravel((v[m], rng_[m], rr[m]))
        batches.append(SampleBatch(
            np.full(m.sum(), SITUATION_CODE[Situation.CAR_FOLLOWING], np.int8),
            keys, action[m]))
    # Lateral contexts per direction.
    for d, prefix, lc_idx in ((LEFT, "left", actions.lc_left),
                              (RIGHT, "right", actions.lc_right)):
        lane_ok = (lane + d >= 0) & (lane + d < cfg.n_lanes)
        tl_id = kept[f"{prefix}_lead_id"].to_numpy()
        tr_id = kept[f"{prefix}_rear_id"].to_numpy()
        tl_r = kept[f"{prefix}_lead_range"].to_numpy()
        tl_v = v + kept[f"{prefix}_lead_range_rate"].to_numpy()
        tr_r = kept[f"{prefix}_rear_range"].to_numpy()
        tr_v = v + kept[f"{prefix}_rear_range_rate"].to_numpy()
        cand = use & has_lead & lane_ok
        if not cand.any():
            continue
        has_tl = (tl_id >= 0) & cand
        has_tr = (tr_id >= 0) & cand
        lat_action = np.where(lc_action == lc_idx, lc_action, base_action).astype(np.int16)
        for situation in LATERAL_SITUATIONS:
            if situation is Situation.LC_TWO_ADJACENT:
                m = cand & has_tl & has_tr
                cols = (v, v + rr, rng_, tl_v, tl_r, tr_v, tr_r)
            elif situation is Situation.LC_ONE_ADJACENT:
                m = cand & has_tl & ~has_tr
                cols = (v, v + rr, rng_, tl_v, tl_r)
            elif situation is Situation.CUT_IN:
                m = cand & ~has_tl & has_tr
                cols = (v, v + rr, rng_, tr_v, tr_r)
            else:
                m = cand & ~has_tl & ~has_tr
                cols = (v, v + rr, rng_)
            if not m.any():
                continue
            keys = lat_grids[situation].clip_ravel(tuple(c[m] for c in cols))
            batches.append(SampleBatch(
                np.full(m.sum(), SITUATION_CODE[situation], np.int8),
                keys, lat_action[m]))
    return SampleBatch.concat(batches)


def categorize(segments: list[TrajectorySegment], events,
               cfg: PipelineConfig | None = None) -> list[LabeledSample]:
    """Object view of categorize_frame for small inputs and tests."""
    cfg = cfg or PipelineConfig()
    if not segments:
        return []
    frames = [s.records for s in segments]
    kept = pd.concat(frames, ignore_index=True)
    seg_ids = np.concatenate([np.full(len(s.records), i) for i, s in enumerate(segments)])
    batch = categorize_frame(kept, seg_ids, events, cfg)
    grids = {Situation.FREE_DRIVING: _FD_GRID, Situation.CAR_FOLLOWING: _CF_GRID,
             **cfg.lateral_grids().grids}
    out = []
    for code, key, action in zip(batch.situation, batch.key, batch.action):
        situation = SITUATION_ORDER[code]
        grid = grids[situation]
        out.append(LabeledSample(situation,
                                 DiscreteState(grid, grid.unravel(int(key))),
                                 int(action)))
    return out


# ---------------------------------------------------------------------------
# Synthetic generation


class Recorder:
    """Collects pre-kinematics per-step rows in the RECORD_COLUMNS layout."""

    def __init__(self, cfg: SimConfig, id_offset: int = 0):
        self.cfg = cfg
        self.id_offset = id_offset
        self.chunks: list[dict] = []

    def emit(self, world: World, nb, accel, has_lead, rr_all) -> None:
        cfg = self.cfg
        live = np.flatnonzero(~world.frozen)
        if len(live) == 0:
            return
        w2 = cfg.lane_width / 2.0
        offs = np.zeros(len(live))
        moving = np.flatnonzero(world.mnv_dir[live] != 0)
        for k in moving:
            offs[k] = world.lateral_offset(int(live[k])) * cfg.lane_width
        row = {
            "time": np.full(len(live), world.time),
            "vehicle_id": live + self.id_offset,
            "lane_id": world.lane[live],
            "x": world.x[live].copy(),
            "v": world.v[live].copy(),
            "accel": accel[live].copy(),
            "dist_left_marking": w2 - offs,
            "dist_right_marking": -(w2 + offs),
        }
        lead_ok = has_lead[live]
        row["lead_id"] = np.where(lead_ok, nb.lead[live] + self.id_offset, -1)
        row["range"] = np.where(lead_ok, nb.lead_gap[live], np.nan)
        row["range_rate"] = np.where(lead_ok, rr_all[live], np.nan)
        for d, prefix in ((LEFT, "left"), (RIGHT, "right")):
            for kind, idx_arr, gap_arr in (("lead", nb.tlead[d], nb.tlead_gap[d]),
                                           ("rear", nb.trear[d], nb.trear_gap[d])):
                idx = idx_arr[live]
                gap = gap_arr[live]
                ok = (idx >= 0) & (gap < cfg.d_obs) & (world.mnv_dir[live] == 0)
                vrel = np.where(ok, world.v[np.maximum(idx, 0)] - world.v[live], np.nan)
                row[f"{prefix}_{kind}_id"] = np.where(ok, idx + self.id_offset, -1)
                row[f"{prefix}_{kind}_range"] = np.where(ok, gap, np.nan)
                row[f"{prefix}_{kind}_range_rate"] = vrel
        self.chunks.append(row)

    def frame(self) -> pd.DataFrame:
        if not self.chunks:
            return pd.DataFrame({c: [] for c in RECORD_COLUMNS})
        data = {c: np.concatenate([ch[c] for ch in self.chunks])
                for c in RECORD_COLUMNS}
        return pd.DataFrame(data)[RECORD_COLUMNS]


def episode_plan(hours: float, episode_s: float = 900.0, dt: float = 0.1):
    """Split `hours` of world time into per-episode step counts."""
    if hours <= 0:
        raise ValueError("hours must be > 0")
    total_steps = int(round(hours * 3600.0 / dt))
    steps_per_ep = int(round(episode_s / dt))
    plan = []
    done = 0
    while done < total_steps:
        n = min(steps_per_ep, total_steps - done)
        plan.append(n)
        done += n
    return plan


def generate_episode(models: ActionModels, n_steps: int, seed, episode: int,
                     cfg: SimConfig, init_dists, id_offset: int = 0) -> pd.DataFrame:
    """One seeded episode's records, sorted by (vehicle_id, time)."""
    fallback = FallbackPmfTable(models.actions, cfg.fallback_sigma)
    rng = np.random.default_rng([int(seed), int(episode)])
    world = init_world(cfg, init_dists, rng)
    recorder = Recorder(cfg, id_offset)
    for _ in range(n_steps):
        step(world, models, rng, fallback, recorder=recorder)
    frame = recorder.frame()
    frame.attrs["n_vehicles"] = world.n_vehicles
    frame.attrs["collisions"] = len(world.collisions)
    return frame.sort_values(["vehicle_id", "time"], kind="stable",
                             ignore_index=True)


def generate_synthetic_ndd(models: ActionModels, hours: float, seed: int,
                           cfg: SimConfig | None = None,
                           episode_s: float = 900.0,
                           init_dists=None):
    """Yield per-episode trajectory DataFrames, `hours` of world time total.

    Deterministic given seed: episode e uses the derived stream (seed, e).
    Episodes are independent worlds so incidents cannot pollute more than one
    window. Rows are sorted by (vehicle_id, time) within each episode.
    """
    cfg = cfg or SimConfig()
    if init_dists is None:
        init_dists = models.init_distributions()
    id_offset = 0
    for ep, n_steps in enumerate(episode_plan(hours, episode_s, cfg.dt)):
        frame = generate_episode(models, n_steps, seed, ep, cfg, init_dists,
                                 id_offset)
        yield frame
        id_offset += int(frame.attrs.get("n_vehicles", 0))


def write_csv(frame: pd.DataFrame, path, header: bool = True) -> None:
    frame.to_csv(path, index=False, header=header,
                 float_format="%.6f", na_rep="")


def read_csv(path) -> pd.DataFrame:
    df = pd.read_csv(path)
    missing = [c for c in RECORD_COLUMNS if c not in df.columns]
    if missing:
        raise ValueError(f"trajectory CSV missing columns: {missing}")
    for c in ("vehicle_id", "lane_id", "lead_id", "left_lead_id", "left_rear_id",
              "right_lead_id", "right_rear_id"):
        df[c] = df[c].fillna(-1).astype(np.int64)
    return df[RECORD_COLUMNS]
