"""Multi-lane highway NDE: world state, behavior-driven stepping, data-driven
initialization, collision detection/typing, and episode execution.

The world is a struct-of-arrays over vehicles; one `step` advances everything
with vectorised numpy, which is what sustains the 1e5+ vehicle-steps/s budget.
Behavior comes from an ActionModels bundle (empirical tables or the synthetic
ground truth); states the bundle cannot serve fall back to stochastic IDM for
the longitudinal part and MOBIL for the lateral part.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .core import (
    D_OBS,
    LATERAL_SITUATIONS,
    SPEED_MAX,
    SPEED_MIN,
    ActionSpace,
    LateralGrids,
    Situation,
    StateGrid,
    car_following_grid,
    free_driving_grid,
    lateral_situation,
)
from .driver_models import (
    FallbackPmfTable,
    IdmParams,
    MobilParams,
    MobilView,
    NeighborInfo,
    idm_accel,
    mobil_decision,
)

LEFT, RIGHT = 1, -1  # lane index grows to the left
LATERAL_CODE = {s: i for i, s in enumerate(LATERAL_SITUATIONS)}
V_HI = np.nextafter(SPEED_MAX, 0.0)  # background speeds live in [20, 40)

try:
    from . import _kernels
    _HAVE_KERNELS = True
except Exception:  # pragma: no cover - numba is normally present
    _kernels = None
    _HAVE_KERNELS = False

_STANDARD_LAT = LateralGrids()


class AccidentType(enum.Enum):
    REAR_END = "rear_end"
    SIDESWIPE_SAME_DIRECTION = "sideswipe_same_direction"
    ANGLE = "angle"
    OTHER = "other"


@dataclass
class SimConfig:
    n_lanes: int = 3
    road_length: float = 1700.0
    periodic: bool = True
    lane_width: float = 3.5
    dt: float = 0.1
    veh_len: float = 5.0
    lc_duration: float = 1.0
    d_obs: float = D_OBS
    d0: float = 50.0
    p_cf: float = 0.68
    init_resample_limit: int = 1000
    idm: IdmParams = field(default_factory=IdmParams)
    mobil: MobilParams = field(default_factory=MobilParams)
    fallback_sigma: float = 0.3

    def validate(self) -> None:
        if self.n_lanes < 1 or self.road_length <= 0 or self.dt <= 0:
            raise ValueError("inconsistent simulation config")
        if self.lc_duration <= 0 or self.veh_len <= 0:
            raise ValueError("inconsistent simulation config")


@dataclass
class InitDistributions:
    """Data-driven initialization inputs: speed PMF and g(r, rr | v)."""

    v_pmf: np.ndarray                  # over the free-driving speed grid
    joint_vrr: np.ndarray              # (v, r, rr) joint PMF on the CF grid
    fd_grid: StateGrid = field(default_factory=free_driving_grid)
    cf_grid: StateGrid = field(default_factory=car_following_grid)
    min_gap: float = 6.0               # reject trivially colliding placements
    safety_margin: float = 2.0         # min range under max braking at spawn

    def _v_cdf(self) -> np.ndarray:
        cdf = getattr(self, "_v_cdf_cache", None)
        if cdf is None:
            cdf = np.cumsum(self.v_pmf)
            self._v_cdf_cache = cdf
        return cdf

    def _gap_cdfs(self) -> np.ndarray:
        cdfs = getattr(self, "_gap_cdf_cache", None)
        if cdfs is None:
            flat = self.joint_vrr.reshape(self.joint_vrr.shape[0], -1)
            totals = flat.sum(axis=1, keepdims=True)
            marginal = flat.sum(axis=0)
            msum = marginal.sum()
            if msum > 0:
                marginal = marginal / msum
            rows = np.where(totals > 0, flat / np.where(totals > 0, totals, 1.0),
                            marginal[None, :])
            cdfs = np.cumsum(rows, axis=1)
            self._gap_cdf_cache = cdfs
        return cdfs

    def sample_speed(self, rng: np.random.Generator) -> float:
        ax = self.fd_grid.axes[0]
        cdf = self._v_cdf()
        b = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
        b = min(b, len(cdf) - 1)
        return float(ax.lo + (b + rng.random()) * ax.resolution)

    def sample_gap(self, v: float, rng: np.random.Generator) -> tuple[float, float]:
        """Draw (r, rr) from the conditional joint at this speed's bin."""
        axv, axr, axrr = self.cf_grid.axes
        iv = int(axv.clip_index(v))
        cdf = self._gap_cdfs()[iv]
        flat = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
        flat = min(flat, len(cdf) - 1)
        ir, irr = np.unravel_index(flat, (axr.n_bins, axrr.n_bins))
        r = axr.lo + (ir + rng.random()) * axr.resolution
        rr = axrr.lo + (irr + rng.random()) * axrr.resolution
        return float(r), float(rr)


class ActionModels:
    """What the stepping engine asks of a behavior-model bundle."""

    actions: ActionSpace
    fd_grid: StateGrid
    cf_grid: StateGrid
    lat: LateralGrids

    def longitudinal(self, fd_mask, v, r, rr):
        """Conditional accel PMFs (N, n_accels) plus an ok mask; rows with
        ok=False get the stochastic-IDM fallback in the engine."""
        raise NotImplementedError

    def lateral(self, codes, keys, cols=None, present=None):
        """Lane-change probabilities for (situation-code, flat-key) queries
        plus an ok mask; rows with ok=False get the MOBIL fallback.

        The engine also passes the binned canonical columns
        (v, lv, lr, tlv, tlr, trv, trr) and the target-lane presence masks
        so bundles can avoid decoding keys; both carry the same state."""
        raise NotImplementedError


class IdmBaselineModels(ActionModels):
    """Baseline background bundle: calibrated IDM accelerations (point mass or
    clamped Gaussian) with MOBIL handling every lane-change decision."""

    def __init__(self, actions: ActionSpace | None = None,
                 idm: IdmParams | None = None, stochastic: bool = False,
                 sigma: float = 0.3, lat: LateralGrids = _STANDARD_LAT):
        from .core import standard_action_space
        self.actions = actions or standard_action_space()
        self.fd_grid = free_driving_grid()
        self.cf_grid = car_following_grid()
        self.lat = lat
        self.idm = idm or IdmParams()
        self.stochastic = stochastic
        self.sigma = sigma

    def longitudinal(self, fd_mask, v, r, rr):
        from .driver_models import gaussian_accel_pmf
        n = len(v)
        means = np.empty(n)
        if fd_mask.any():
            means[fd_mask] = idm_accel(v[fd_mask], None, None, self.idm)
        cf = ~fd_mask
        if cf.any():
            means[cf] = idm_accel(v[cf], r[cf], rr[cf], self.idm)
        means = np.clip(means, self.actions.accels[0], self.actions.accels[-1])
        if self.stochastic:
            q = gaussian_accel_pmf(means, self.actions, self.sigma)
        else:
            q = np.zeros((n, self.actions.n_accels))
            q[np.arange(n), self.actions.accel_to_action(means) - 1] = 1.0
        return q, np.ones(n, dtype=bool)

    def lateral(self, codes, keys, cols=None, present=None):
        n = len(keys)
        return np.zeros(n), np.zeros(n, dtype=bool)  # always MOBIL


@dataclass
class CollisionEvent:
    time: float
    first: int
    second: int
    accident_type: AccidentType


@dataclass
class World:
    cfg: SimConfig
    x: np.ndarray
    v: np.ndarray
    lane: np.ndarray
    is_av: np.ndarray
    mnv_dir: np.ndarray = None        # +1 left, -1 right, 0 none
    mnv_progress: np.ndarray = None
    mnv_src: np.ndarray = None
    frozen: np.ndarray = None
    dist: np.ndarray = None
    time: float = 0.0
    steps: int = 0
    collisions: list = field(default_factory=list)
    lc_starts: int = 0

    def __post_init__(self):
        n = len(self.x)
        self.x = np.asarray(self.x, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        self.lane = np.asarray(self.lane, dtype=np.int64)
        self.is_av = np.asarray(self.is_av, dtype=bool)
        if self.mnv_dir is None:
            self.mnv_dir = np.zeros(n, dtype=np.int8)
        if self.mnv_progress is None:
            self.mnv_progress = np.zeros(n)
        if self.mnv_src is None:
            self.mnv_src = self.lane.copy()
        if self.frozen is None:
            self.frozen = np.zeros(n, dtype=bool)
        if self.dist is None:
            self.dist = np.zeros(n)

    @property
    def n_vehicles(self) -> int:
        return len(self.x)

    @property
    def av_index(self) -> int | None:
        idx = np.flatnonzero(self.is_av)
        return int(idx[0]) if len(idx) else None

    def lateral_offset(self, i: int) -> float:
        """Signed offset from the logical lane's center, in lane widths."""
        if self.mnv_dir[i] == 0:
            return 0.0
        p = self.mnv_progress[i]
        d = float(self.mnv_dir[i])
        if self.lane[i] == self.mnv_src[i]:  # not yet crossed
            return d * p
        return d * (p - 1.0)


@dataclass
class Neighbors:
    """Per-vehicle neighbor indices and clear gaps; -1 / +inf mark 'none'.

    Adjacent-lane entries are only valid for non-maneuvering vehicles (the
    only ones that query lateral contexts), which keeps self-occupancy out.
    """

    lead: np.ndarray
    lead_gap: np.ndarray
    rear: np.ndarray
    rear_gap: np.ndarray
    tlead: dict
    tlead_gap: dict
    trear: dict
    trear_gap: dict


@dataclass
class Occupancy:
    """Flat lane-sorted occupancy: one lexsort serves every neighbor query.

    Entries are (vehicle, lane) pairs sorted by (lane, x); maneuvering
    vehicles contribute one entry per straddled lane. `starts[l]:ends[l]`
    slices lane l.
    """

    ids: np.ndarray
    lanes: np.ndarray
    xs: np.ndarray
    starts: np.ndarray
    ends: np.ndarray


def lane_occupancy(world: World) -> Occupancy:
    """Frozen wrecks are on the shoulder: they keep their slot in the vehicle
    arrays (count is conserved) but leave the lanes entirely."""
    cfg = world.cfg
    n = world.n_vehicles
    live = np.flatnonzero(~world.frozen)
    moving = live[world.mnv_dir[live] != 0]
    if len(moving):
        other = np.where(world.lane[moving] != world.mnv_src[moving],
                         world.mnv_src[moving],
                         world.lane[moving] + world.mnv_dir[moving])
        okm = (other >= 0) & (other < cfg.n_lanes)
        ids = np.concatenate([live, moving[okm]])
        lanes = np.concatenate([world.lane[live], other[okm]])
    else:
        ids = live
        lanes = world.lane[live]
    xs = world.x[ids]
    order = np.lexsort((xs, lanes))
    ids, lanes, xs = ids[order], lanes[order], xs[order]
    lane_range = np.arange(cfg.n_lanes)
    starts = np.searchsorted(lanes, lane_range, side="left")
    ends = np.searchsorted(lanes, lane_range, side="right")
    return Occupancy(ids, lanes, xs, starts, ends)


def _wrap_gap(x_from, x_to, road_length, periodic):
    d = np.asarray(x_to) - np.asarray(x_from)
    if periodic:
        d = np.mod(d, road_length)
    return d


def compute_neighbors(world: World, occ: Occupancy | None = None,
                      use_kernels: bool = True) -> Neighbors:
    cfg = world.cfg
    n = world.n_vehicles
    if use_kernels and _HAVE_KERNELS and occ is None:
        (lead, lead_gap, rear, rear_gap, tl, tl_g, tr, tr_g) = \
            _kernels.neighbors_kernel(
                world.x, world.v, world.lane, world.mnv_dir.astype(np.int64),
                world.mnv_src, world.frozen, cfg.n_lanes, cfg.road_length,
                cfg.veh_len, cfg.periodic)
        return Neighbors(lead, lead_gap, rear, rear_gap,
                         {LEFT: tl[0], RIGHT: tl[1]},
                         {LEFT: tl_g[0], RIGHT: tl_g[1]},
                         {LEFT: tr[0], RIGHT: tr[1]},
                         {LEFT: tr_g[0], RIGHT: tr_g[1]})
    if occ is None:
        occ = lane_occupancy(world)
    L = cfg.road_length
    veh_len = cfg.veh_len
    lead = np.full(n, -1, dtype=np.int64)
    lead_gap = np.full(n, np.inf)
    rear = np.full(n, -1, dtype=np.int64)
    rear_gap = np.full(n, np.inf)

    # Same-lane lead/rear: successor/predecessor rank within the lane slice.
    m = len(occ.ids)
    if m:
        pos = np.arange(m)
        s = occ.starts[occ.lanes]
        e = occ.ends[occ.lanes]
        size = e - s
        nxt = pos + 1
        wrap_fwd = nxt == e
        nxt = np.where(wrap_fwd, s, nxt)
        prv = pos - 1
        wrap_bwd = pos == s
        prv = np.where(wrap_bwd, e - 1, prv)
        logical = (occ.lanes == world.lane[occ.ids]) & (size >= 2)
        if not cfg.periodic:
            ok_lead = logical & ~wrap_fwd
            ok_rear = logical & ~wrap_bwd
        else:
            ok_lead = ok_rear = logical
        who = occ.ids[ok_lead]
        lead[who] = occ.ids[nxt[ok_lead]]
        lead_gap[who] = _wrap_gap(occ.xs[ok_lead], occ.xs[nxt[ok_lead]],
                                  L, cfg.periodic) - veh_len
        who = occ.ids[ok_rear]
        rear[who] = occ.ids[prv[ok_rear]]
        rear_gap[who] = _wrap_gap(occ.xs[prv[ok_rear]], occ.xs[ok_rear],
                                  L, cfg.periodic) - veh_len

    # Adjacent-lane lead/rear for non-maneuvering live vehicles, via one
    # composite (lane, x) key search per direction over the sorted occupancy.
    tlead, tlead_gap, trear, trear_gap = {}, {}, {}, {}
    straight = (world.mnv_dir == 0) & ~world.frozen
    K = L + 1.0
    comp = occ.lanes * K + occ.xs
    for d in (LEFT, RIGHT):
        tl = np.full(n, -1, dtype=np.int64)
        tl_g = np.full(n, np.inf)
        tr = np.full(n, -1, dtype=np.int64)
        tr_g = np.full(n, np.inf)
        tgt = world.lane + d
        mine = np.flatnonzero(straight & (tgt >= 0) & (tgt < cfg.n_lanes))
        if len(mine) and len(occ.ids):
            t = tgt[mine]
            s = occ.starts[t]
            e = occ.ends[t]
            size = e - s
            nonempty = size > 0
            mine = mine[nonempty]
            if len(mine):
                t, s, e, size = t[nonempty], s[nonempty], e[nonempty], size[nonempty]
                p = np.searchsorted(comp, t * K + world.x[mine], side="right")
                lp = np.where(p >= e, s, p)                 # wrap to slice start
                rp = np.where(p - 1 < s, e - 1, p - 1)      # wrap to slice end
                li = occ.ids[lp]
                ri = occ.ids[rp]
                gl = _wrap_gap(world.x[mine], occ.xs[lp], L, cfg.periodic) - veh_len
                gr = _wrap_gap(occ.xs[rp], world.x[mine], L, cfg.periodic) - veh_len
                if cfg.periodic:
                    has_lead = np.where(size == 1, gl <= gr, True)
                    has_rear = np.where(size == 1, gl > gr, True)
                else:
                    has_lead = p < e
                    has_rear = p - 1 >= s
                tl[mine] = np.where(has_lead, li, -1)
                tl_g[mine] = np.where(has_lead, gl, np.inf)
                tr[mine] = np.where(has_rear, ri, -1)
                tr_g[mine] = np.where(has_rear, gr, np.inf)
        tlead[d], tlead_gap[d] = tl, tl_g
        trear[d], trear_gap[d] = tr, tr_g
    return Neighbors(lead, lead_gap, rear, rear_gap, tlead, tlead_gap, trear, trear_gap)


# ---------------------------------------------------------------------------
# Situation views


@dataclass
class LateralContext:
    situation: Situation
    values: tuple
    flat: int


@dataclass
class SituationView:
    """A vehicle's classified situation with the grid's continuous tuple."""

    situation: Situation
    values: tuple
    flat: int
    lateral: dict


_FD_GRID = free_driving_grid()
_CF_GRID = car_following_grid()


def _lateral_context_scalar(world: World, nb: Neighbors, i: int, d: int,
                            d_obs: float, lat: LateralGrids) -> LateralContext | None:
    cfg = world.cfg
    tgt = world.lane[i] + d
    if not (0 <= tgt < cfg.n_lanes):
        return None
    if nb.lead[i] < 0 or nb.lead_gap[i] >= d_obs:
        return None  # no lead => no lane change
    v = float(world.v[i])
    lv = float(world.v[nb.lead[i]])
    lr = float(nb.lead_gap[i])
    tl, tr = nb.tlead[d][i], nb.trear[d][i]
    has_tl = tl >= 0 and nb.tlead_gap[d][i] < d_obs
    has_tr = tr >= 0 and nb.trear_gap[d][i] < d_obs
    situation = lateral_situation(has_tl, has_tr)
    vals = [v, lv, lr]
    if has_tl:
        vals += [float(world.v[tl]), float(nb.tlead_gap[d][i])]
    if has_tr:
        vals += [float(world.v[tr]), float(nb.trear_gap[d][i])]
    grid = lat.grids[situation]
    flat = int(grid.clip_ravel([np.asarray([x]) for x in vals])[0])
    return LateralContext(situation, tuple(vals), flat)


def situational_view(world: World, i: int, nb: Neighbors | None = None,
                     lat: LateralGrids = _STANDARD_LAT) -> SituationView:
    """Classify one vehicle exactly as the data pipeline does (train = test)."""
    cfg = world.cfg
    if nb is None:
        nb = compute_neighbors(world)
    has_lead = nb.lead[i] >= 0 and nb.lead_gap[i] < cfg.d_obs
    if not has_lead:
        situation = Situation.FREE_DRIVING
        values = (float(world.v[i]),)
        flat = int(_FD_GRID.clip_ravel([np.asarray([values[0]])])[0])
    else:
        situation = Situation.CAR_FOLLOWING
        rr = float(world.v[nb.lead[i]] - world.v[i])
        values = (float(world.v[i]), float(nb.lead_gap[i]), rr)
        flat = int(_CF_GRID.clip_ravel([np.asarray([c]) for c in values])[0])
    lateral = {}
    if has_lead and world.mnv_dir[i] == 0:
        for d in (LEFT, RIGHT):
            ctx = _lateral_context_scalar(world, nb, i, d, cfg.d_obs, lat)
            if ctx is not None:
                lateral[d] = ctx
    return SituationView(situation, values, flat, lateral)


def _mobil_view(world: World, nb: Neighbors, i: int, d: int) -> MobilView | None:
    cfg = world.cfg
    tgt = world.lane[i] + d
    if not (0 <= tgt < cfg.n_lanes):
        return None

    def info(idx, gap):
        if idx < 0 or not np.isfinite(gap):
            return None
        return NeighborInfo(float(world.v[idx]), float(gap))

    return MobilView(
        v_ego=float(world.v[i]),
        lead=info(nb.lead[i], nb.lead_gap[i]),
        old_rear=info(nb.rear[i], nb.rear_gap[i]),
        target_lead=info(nb.tlead[d][i], nb.tlead_gap[d][i]),
        target_rear=info(nb.trear[d][i], nb.trear_gap[d][i]),
        veh_len=cfg.veh_len,
    )


# ---------------------------------------------------------------------------
# Action distribution


def nde_action_distribution(view: SituationView, models: ActionModels,
                            fallback: FallbackPmfTable,
                            idm: IdmParams, mobil_views=None,
                            mobil_params: MobilParams = MobilParams()) -> np.ndarray:
    """Combined 33-action PMF for one vehicle (reference scalar path).

    P_left/P_right come from the lateral contexts (0 without a lead or target
    lane); the longitudinal PMF is scaled by the leftover mass. Uncovered
    longitudinal states fall back to stochastic IDM; uncovered lateral
    contexts fall back to MOBIL via `mobil_views`.
    """
    acts = models.actions
    fd = view.situation is Situation.FREE_DRIVING
    if fd:
        q, ok = models.longitudinal(np.array([True]), np.array([view.values[0]]),
                                    np.array([np.nan]), np.array([np.nan]))
    else:
        v, r, rr = view.values
        q, ok = models.longitudinal(np.array([False]), np.array([v]),
                                    np.array([r]), np.array([rr]))
    q = q[0]
    if not ok[0]:
        if fd:
            mean = idm_accel(view.values[0], None, None, idm)
        else:
            mean = idm_accel(view.values[0], view.values[1], view.values[2], idm)
        q = fallback.pmf_for_means(np.asarray(mean))
    p_lc = {LEFT: 0.0, RIGHT: 0.0}
    mobil_wanted = []
    for d, ctx in view.lateral.items():
        p, ok_lat = models.lateral(np.array([LATERAL_CODE[ctx.situation]]),
                                   np.array([ctx.flat]))
        if ok_lat[0]:
            p_lc[d] = float(p[0])
        else:
            mobil_wanted.append(d)
    if mobil_wanted and mobil_views:
        choice = mobil_decision(mobil_views.get(LEFT), mobil_views.get(RIGHT),
                                idm, mobil_params)
        for d in mobil_wanted:
            name = "left" if d == LEFT else "right"
            p_lc[d] = 1.0 if choice == name else 0.0
    total = p_lc[LEFT] + p_lc[RIGHT]
    if total > 1.0:
        p_lc[LEFT] /= total
        p_lc[RIGHT] /= total
        total = 1.0
    pmf = np.zeros(acts.n_actions)
    pmf[acts.lc_left] = p_lc[LEFT]
    pmf[acts.lc_right] = p_lc[RIGHT]
    pmf[acts.accel_slice] = q * (1.0 - total)
    return pmf


# ---------------------------------------------------------------------------
# Stepping


@dataclass
class StepCollector:
    """Accumulates collection-window statistics (NDE mode).

    `lc_opportunities` counts (decider, direction) pairs where a lane change
    was possible (lead present, target lane exists), the exposure that turns
    hazards into expected lane-change counts.
    """

    velocity_counts: np.ndarray
    range_counts: np.ndarray
    vehicle_km: float = 0.0
    lane_changes: int = 0
    samples: int = 0
    lc_opportunities: int = 0

    @classmethod
    def empty(cls) -> "StepCollector":
        return cls(np.zeros(100), np.zeros(115))


def _batch_lateral_both(world: World, nb: Neighbors, cand: np.ndarray,
                        models: ActionModels, idm: IdmParams,
                        mobil: MobilParams):
    """Lane-change probabilities for both directions at once.

    Context keys come from one fused binning of the canonical 7-column state
    and a per-situation stride dot product. MOBIL serves every context the
    model bundle cannot, with both directions judged jointly so at most one
    fires (the larger incentive wins, left on ties).
    """
    cfg = world.cfg
    n_c = len(cand)
    out = {LEFT: np.zeros(n_c), RIGHT: np.zeros(n_c)}
    if n_c == 0:
        return out
    lat = models.lat
    strides_tab = lat.stride_templates
    speed_ax = lat.speed_axis
    range_ax = lat.range_axis
    v = world.v[cand]
    lead_idx = nb.lead[cand]
    lv = world.v[lead_idx]
    lr = nb.lead_gap[cand]
    b_v = speed_ax.clip_index(v)
    b_lv = speed_ax.clip_index(lv)
    b_lr = range_ax.clip_index(lr)
    lanes = world.lane[cand]
    mobil_mask = {}
    incentives = {}
    for d in (LEFT, RIGHT):
        lane_ok = (lanes + d >= 0) & (lanes + d < cfg.n_lanes)
        if not lane_ok.any():
            mobil_mask[d] = np.zeros(n_c, dtype=bool)
            incentives[d] = np.full(n_c, -np.inf)
            continue
        tl_idx = nb.tlead[d][cand]
        tr_idx = nb.trear[d][cand]
        tl_gap = nb.tlead_gap[d][cand]
        tr_gap = nb.trear_gap[d][cand]
        has_tl = (tl_idx >= 0) & (tl_gap < cfg.d_obs)
        has_tr = (tr_idx >= 0) & (tr_gap < cfg.d_obs)
        codes = np.where(
            has_tl & has_tr, LATERAL_CODE[Situation.LC_TWO_ADJACENT],
            np.where(has_tl, LATERAL_CODE[Situation.LC_ONE_ADJACENT],
                     np.where(has_tr, LATERAL_CODE[Situation.CUT_IN],
                              LATERAL_CODE[Situation.FREE_LANE_CHANGE])))
        b_tlv = speed_ax.clip_index(world.v[np.maximum(tl_idx, 0)])
        b_tlr = range_ax.clip_index(tl_gap)
        b_trv = speed_ax.clip_index(world.v[np.maximum(tr_idx, 0)])
        b_trr = range_ax.clip_index(tr_gap)
        strides = strides_tab[codes]
        keys = (b_v * strides[:, 0] + b_lv * strides[:, 1] + b_lr * strides[:, 2]
                + b_tlv * strides[:, 3] + b_tlr * strides[:, 4]
                + b_trv * strides[:, 5] + b_trr * strides[:, 6])
        cols = (b_v, b_lv, b_lr, b_tlv, b_tlr, b_trv, b_trr)
        p, ok = models.lateral(codes, keys, cols, (has_tl, has_tr))
        p = np.where(lane_ok, p, 0.0)
        out[d] = np.asarray(p, dtype=np.float64)
        need = lane_ok & ~ok
        mobil_mask[d] = need
        if need.any():
            inc, safe = _mobil_batch(world, nb, cand, d, idm, mobil)
            incentives[d] = np.where(safe & (inc > mobil.threshold), inc, -np.inf)
        else:
            incentives[d] = np.full(n_c, -np.inf)
    any_mobil = mobil_mask[LEFT] | mobil_mask[RIGHT]
    if any_mobil.any():
        left_wins = incentives[LEFT] >= incentives[RIGHT]
        go_left = np.isfinite(incentives[LEFT]) & left_wins
        go_right = np.isfinite(incentives[RIGHT]) & ~left_wins
        out[LEFT] = np.where(mobil_mask[LEFT], np.where(go_left, 1.0, 0.0), out[LEFT])
        out[RIGHT] = np.where(mobil_mask[RIGHT], np.where(go_right, 1.0, 0.0), out[RIGHT])
    return out


def _mobil_batch(world: World, nb: Neighbors, cand: np.ndarray, d: int,
                 idm: IdmParams, mobil: MobilParams, use_kernels: bool = True):
    """Vectorised MOBIL incentive/safety for one direction.

    Mirrors driver_models.mobil_direction_ok on arrays; the batch, kernel and
    scalar paths are cross-checked in tests.
    """
    cfg = world.cfg
    veh_len = cfg.veh_len
    if use_kernels and _HAVE_KERNELS:
        lane_ok = (world.lane[cand] + d >= 0) & (world.lane[cand] + d < cfg.n_lanes)
        return _kernels.mobil_kernel(
            world.v[cand],
            np.isfinite(nb.lead_gap[cand]), world.v[np.maximum(nb.lead[cand], 0)],
            nb.lead_gap[cand],
            np.isfinite(nb.tlead_gap[d][cand]), world.v[np.maximum(nb.tlead[d][cand], 0)],
            nb.tlead_gap[d][cand],
            np.isfinite(nb.trear_gap[d][cand]), world.v[np.maximum(nb.trear[d][cand], 0)],
            nb.trear_gap[d][cand],
            np.isfinite(nb.rear_gap[cand]), world.v[np.maximum(nb.rear[cand], 0)],
            nb.rear_gap[cand], lane_ok, veh_len,
            idm.a_max, idm.v0, idm.delta, idm.b, idm.s0, idm.T,
            mobil.politeness, mobil.threshold, mobil.b_safe)
    v = world.v[cand]

    def acc(ve, gap, lead_v, present):
        free = idm_accel(ve, None, None, idm)
        if not present.any():
            return free
        engaged = idm_accel(ve, np.where(present, gap, 1.0),
                            np.where(present, lead_v - ve, 0.0), idm)
        return np.where(present, engaged, free)

    lead_p = np.isfinite(nb.lead_gap[cand])
    lead_v = world.v[np.maximum(nb.lead[cand], 0)]
    lead_g = nb.lead_gap[cand]
    tl_p = np.isfinite(nb.tlead_gap[d][cand])
    tl_v = world.v[np.maximum(nb.tlead[d][cand], 0)]
    tl_g = nb.tlead_gap[d][cand]
    tr_p = np.isfinite(nb.trear_gap[d][cand])
    tr_v = world.v[np.maximum(nb.trear[d][cand], 0)]
    tr_g = nb.trear_gap[d][cand]
    or_p = np.isfinite(nb.rear_gap[cand])
    or_v = world.v[np.maximum(nb.rear[cand], 0)]
    or_g = nb.rear_gap[cand]

    a_ego_now = acc(v, lead_g, lead_v, lead_p)
    a_ego_after = acc(v, tl_g, tl_v, tl_p)
    incentive = a_ego_after - a_ego_now
    # New follower: gap to ego after the change; safety criterion first.
    a_nf_after = acc(tr_v, tr_g, np.broadcast_to(v, tr_v.shape), tr_p)
    safe = ~tr_p | (a_nf_after >= -mobil.b_safe)
    if mobil.politeness != 0.0:
        nf_old_gap = tr_g + tl_g + veh_len
        a_nf_now = acc(tr_v, nf_old_gap, tl_v, tr_p & tl_p)
        a_nf_now = np.where(tr_p & ~tl_p, idm_accel(tr_v, None, None, idm), a_nf_now)
        delta_nf = np.where(tr_p, a_nf_after - a_nf_now, 0.0)
        a_of_now = acc(or_v, or_g, np.broadcast_to(v, or_v.shape), or_p)
        of_new_gap = or_g + lead_g + veh_len
        a_of_after = acc(or_v, of_new_gap, lead_v, or_p & lead_p)
        a_of_after = np.where(or_p & ~lead_p, idm_accel(or_v, None, None, idm), a_of_after)
        delta_of = np.where(or_p, a_of_after - a_of_now, 0.0)
        incentive = incentive + mobil.politeness * (delta_nf + delta_of)
    lane_ok = (world.lane[cand] + d >= 0) & (world.lane[cand] + d < cfg.n_lanes)
    return np.where(lane_ok, incentive, -np.inf), safe & lane_ok


def step(world: World, models: ActionModels, rng: np.random.Generator,
         fallback: FallbackPmfTable, av_agent=None, collector: StepCollector | None = None,
         recorder=None) -> None:
    """Advance the world by one 0.1 s tick."""
    cfg = world.cfg
    dt = cfg.dt
    n = world.n_vehicles
    acts = models.actions
    nb = compute_neighbors(world)

    alive = ~world.frozen
    has_lead = (nb.lead >= 0) & (nb.lead_gap < cfg.d_obs) & alive
    lead_v = np.where(nb.lead >= 0, world.v[np.maximum(nb.lead, 0)], 0.0)
    rr_all = lead_v - world.v
    r_all = nb.lead_gap

    deciders = np.flatnonzero(alive & (world.mnv_dir == 0) & ~world.is_av)
    accel = np.zeros(n)
    lc_cmd = np.zeros(n, dtype=np.int8)

    if len(deciders):
        fd_mask = ~has_lead[deciders]
        v_d = world.v[deciders]
        r_d = np.where(fd_mask, np.nan, r_all[deciders])
        rr_d = np.where(fd_mask, np.nan, rr_all[deciders])
        q, ok = models.longitudinal(fd_mask, v_d, r_d, rr_d)
        q = np.array(q, dtype=np.float64, copy=True)
        bad = np.flatnonzero(~ok)
        if len(bad):
            means = np.empty(len(bad))
            bfd = fd_mask[bad]
            means[bfd] = idm_accel(v_d[bad][bfd], None, None, cfg.idm)
            means[~bfd] = idm_accel(v_d[bad][~bfd], r_d[bad][~bfd],
                                    rr_d[bad][~bfd], cfg.idm)
            q[bad] = fallback.pmf_for_means(means)
        # Lane-change probabilities per direction; zero without a lead.
        p_left = np.zeros(len(deciders))
        p_right = np.zeros(len(deciders))
        with_lead = np.flatnonzero(has_lead[deciders])
        if len(with_lead):
            probs = _batch_lateral_both(world, nb, deciders[with_lead],
                                        models, cfg.idm, cfg.mobil)
            p_left[with_lead] = probs[LEFT]
            p_right[with_lead] = probs[RIGHT]
        if collector is not None and len(with_lead):
            lanes_wl = world.lane[deciders[with_lead]]
            for d in (LEFT, RIGHT):
                collector.lc_opportunities += int(
                    ((lanes_wl + d >= 0) & (lanes_wl + d < cfg.n_lanes)).sum())
        total = p_left + p_right
        over = total > 1.0
        if over.any():
            p_left[over] /= total[over]
            p_right[over] /= total[over]
            total[over] = 1.0
        pmf = np.empty((len(deciders), acts.n_actions))
        pmf[:, acts.lc_left] = p_left
        pmf[:, acts.lc_right] = p_right
        pmf[:, acts.accel_slice] = q * (1.0 - total)[:, None]
        # Inverse-CDF sampling, one uniform per vehicle.
        cdf = np.cumsum(pmf, axis=1)
        u = rng.random(len(deciders)) * cdf[:, -1]
        choice = (cdf > u[:, None]).argmax(axis=1)
        is_lc = (choice == acts.lc_left) | (choice == acts.lc_right)
        accel_idx = np.clip(choice - 1, 0, acts.n_accels - 1)
        accel[deciders] = np.where(is_lc, 0.0, acts.accels[accel_idx])
        lc_cmd[deciders] = np.where(choice == acts.lc_left, LEFT,
                                    np.where(choice == acts.lc_right, RIGHT, 0))

    # AV decision via its agent interface.
    av = world.av_index
    if av is not None and alive[av] and av_agent is not None:
        if world.mnv_dir[av] == 0:
            view = situational_view(world, av, nb, models.lat)
            views = {d: _mobil_view(world, nb, av, d) for d in (LEFT, RIGHT)}
            a_av, cmd = av_agent(view, views)
            accel[av] = a_av
            lc_cmd[av] = {"stay": 0, "left": LEFT, "right": RIGHT}[cmd]

    # Zero longitudinal acceleration for lane changers (starting or mid-way),
    # then record the pre-decision world so data labels the same contexts the
    # sampler just queried.
    starters = np.flatnonzero(lc_cmd != 0)
    accel[starters] = 0.0
    accel[world.mnv_dir != 0] = 0.0
    accel[world.frozen] = 0.0

    if recorder is not None:
        recorder.emit(world, nb, accel, has_lead, rr_all)

    for i in starters:
        d = int(lc_cmd[i])
        if not (0 <= world.lane[i] + d < cfg.n_lanes):
            continue
        world.mnv_dir[i] = d
        world.mnv_progress[i] = 0.0
        world.mnv_src[i] = world.lane[i]
    world.lc_starts += len(starters)
    if collector is not None:
        collector.lane_changes += len(starters)

    # Kinematics.
    disp = np.where(alive, world.v * dt + 0.5 * accel * dt * dt, 0.0)
    world.x += disp
    if cfg.periodic:
        world.x = np.mod(world.x, cfg.road_length)
    world.dist += disp
    v_next = world.v + accel * dt
    bg = alive & ~world.is_av
    world.v[bg] = np.clip(v_next[bg], SPEED_MIN, V_HI)
    av_alive = alive & world.is_av
    world.v[av_alive] = np.clip(v_next[av_alive], 0.0, V_HI)

    # Maneuver progression; logical lane switches at the crossing point.
    moving = np.flatnonzero((world.mnv_dir != 0) & alive)
    if len(moving):
        world.mnv_progress[moving] += dt / cfg.lc_duration
        crossed = moving[(world.mnv_progress[moving] >= 0.5)
                         & (world.lane[moving] == world.mnv_src[moving])]
        world.lane[crossed] = world.lane[crossed] + world.mnv_dir[crossed]
        done = moving[world.mnv_progress[moving] >= 1.0 - 1e-9]
        world.mnv_dir[done] = 0
        world.mnv_progress[done] = 0.0
        world.mnv_src[done] = world.lane[done]

    _detect_collisions(world)

    if collector is not None:
        live_bg = ~world.frozen & ~world.is_av
        vs = world.v[live_bg]
        vbins = np.clip(((vs - SPEED_MIN) / 0.2).astype(np.int64), 0, 99)
        collector.velocity_counts += np.bincount(vbins, minlength=100)
        cf = live_bg & has_lead
        if cf.any():
            rbins = np.clip(nb.lead_gap[cf].astype(np.int64), 0, 114)
            collector.range_counts += np.bincount(rbins, minlength=115)
        collector.vehicle_km += float(disp[live_bg].sum()) / 1000.0
        collector.samples += int(live_bg.sum())

    world.time += dt
    world.steps += 1


def _freeze_pair(world: World, i: int, j: int) -> None:
    if i == j or (world.frozen[i] and world.frozen[j]):
        return
    world.collisions.append(
        CollisionEvent(world.time, i, j, _classify_collision(world, i, j)))
    world.frozen[i] = True
    world.frozen[j] = True
    world.v[i] = world.v[j] = 0.0  # wrecks are cleared to the shoulder


def _detect_collisions(world: World, use_kernels: bool = True) -> None:
    """Longitudinal overlap within any occupied lane; freeze both parties."""
    cfg = world.cfg
    if use_kernels and _HAVE_KERNELS:
        ii, jj = _kernels.collisions_kernel(
            world.x, world.lane, world.mnv_dir.astype(np.int64), world.mnv_src,
            world.frozen, cfg.n_lanes, cfg.road_length, cfg.veh_len, cfg.periodic)
        for i, j in zip(ii, jj):
            _freeze_pair(world, int(i), int(j))
        return
    occ = lane_occupancy(world)
    m = len(occ.ids)
    if m < 2:
        return
    pos = np.arange(m)
    s = occ.starts[occ.lanes]
    e = occ.ends[occ.lanes]
    size = e - s
    nxt = pos + 1
    at_end = nxt == e
    nxt = np.where(at_end, s, nxt)
    valid = size >= 2
    if not cfg.periodic:
        valid &= ~at_end
    gap = _wrap_gap(occ.xs, occ.xs[nxt], cfg.road_length, cfg.periodic) - cfg.veh_len
    hits = np.flatnonzero(valid & (gap < 0.0))
    for h in hits:
        _freeze_pair(world, int(occ.ids[h]), int(occ.ids[nxt[h]]))


def _classify_collision(world: World, i: int, j: int) -> AccidentType:
    mi, mj = world.mnv_dir[i] != 0, world.mnv_dir[j] != 0
    if mi and mj and world.mnv_dir[i] == -world.mnv_dir[j]:
        return AccidentType.ANGLE
    if mi or mj:
        return AccidentType.SIDESWIPE_SAME_DIRECTION
    if world.lane[i] == world.lane[j]:
        return AccidentType.REAR_END
    return AccidentType.OTHER


# ---------------------------------------------------------------------------
# Initialization


def init_world(cfg: SimConfig, dists: InitDistributions, seed,
               with_av: bool = False) -> World:
    """Sequential per-lane data-driven placement (Bernoulli car-following)."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    resamples = 0
    xs, vs, lanes = [], [], []
    for lane_idx in range(cfg.n_lanes):
        x = rng.uniform(0.0, cfg.d0)
        v = dists.sample_speed(rng)
        lane_xs = [x]
        lane_vs = [v]
        limit = cfg.road_length - cfg.d0
        while True:
            if rng.random() < cfg.p_cf:
                while True:
                    r, rr = dists.sample_gap(v, rng)
                    # Reject placements that collide immediately: overlapping
                    # gaps and pairs already doomed under maximum braking.
                    safe = (r >= dists.min_gap
                            and r - max(0.0, -rr) ** 2 / 8.0 >= dists.safety_margin)
                    if SPEED_MIN <= v + rr < SPEED_MAX and safe:
                        break
                    resamples += 1
                    if resamples > cfg.init_resample_limit:
                        raise RuntimeError("init resample limit exceeded")
                x_new = x + cfg.veh_len + r
                v_new = v + rr
            else:
                x_new = x + cfg.veh_len + cfg.d_obs + rng.uniform(0.0, cfg.d0)
                v_new = dists.sample_speed(rng)
            if x_new >= limit:
                break
            x, v = x_new, v_new
            lane_xs.append(x)
            lane_vs.append(v)
        xs.extend(lane_xs)
        vs.extend(lane_vs)
        lanes.extend([lane_idx] * len(lane_xs))
    x = np.asarray(xs)
    v = np.asarray(vs)
    lane = np.asarray(lanes)
    is_av = np.zeros(len(x), dtype=bool)
    world = World(cfg, x, v, lane, is_av)
    if with_av:
        mid = cfg.n_lanes // 2
        in_mid = np.flatnonzero(lane == mid)
        pick_from = in_mid if len(in_mid) else np.arange(len(x))
        target = pick_from[np.argmin(np.abs(x[pick_from] - cfg.road_length / 2))]
        world.is_av[target] = True
    return world


# ---------------------------------------------------------------------------
# Episodes


@dataclass
class EpisodeResult:
    seed: tuple
    accident: bool
    accident_type: str | None
    distance_driven: float
    velocity_counts: np.ndarray
    range_counts: np.ndarray
    vehicle_km: float
    lane_changes: int
    steps: int
    n_vehicles: int
    lc_opportunities: int = 0

    def validate(self) -> None:
        if self.accident and self.accident_type is None:
            raise ValueError("accident without a type")
        if not self.accident and self.accident_type is not None:
            raise ValueError("type without an accident")


class IdmMobilAgent:
    """Default AV agent: calibrated IDM for speed, MOBIL for lane choice."""

    def __init__(self, idm: IdmParams = IdmParams(), mobil: MobilParams = MobilParams()):
        self.idm = idm
        self.mobil = mobil

    def __call__(self, view: SituationView, mobil_views: dict) -> tuple[float, str]:
        if view.situation is Situation.FREE_DRIVING:
            a = float(idm_accel(view.values[0], None, None, self.idm))
        else:
            v, r, rr = view.values
            a = float(idm_accel(v, r, rr, self.idm))
        a = float(np.clip(a, -4.0, 2.0))
        lv = mobil_views.get(LEFT)
        rv = mobil_views.get(RIGHT)
        # The no-lead rule applies to the AV as well: without a car in front
        # there is nothing to gain, and data-driven contexts never fire.
        if view.situation is Situation.FREE_DRIVING:
            return a, "stay"
        return a, mobil_decision(lv, rv, self.idm, self.mobil)


def run_episode(cfg: SimConfig, models: ActionModels, dists: InitDistributions,
                seed: int, mode: str = "nde", warmup_s: float = 600.0,
                collect_s: float = 300.0, av_agent=None, av_distance: float = 400.0,
                max_steps: int | None = None) -> EpisodeResult:
    """One seeded episode; NDE statistics mode or AV testing mode."""
    if mode not in ("nde", "av"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "nde" and collect_s <= 0:
        raise ValueError("NDE mode needs a collection window")
    if mode == "av" and av_agent is None:
        av_agent = IdmMobilAgent(cfg.idm, cfg.mobil)
    fallback = FallbackPmfTable(models.actions, cfg.fallback_sigma)
    seed_key = tuple(int(s) for s in np.atleast_1d(seed))
    rng = np.random.default_rng([*seed_key, 0xD5])
    world = init_world(cfg, dists, rng, with_av=(mode == "av"))
    av = world.av_index
    collector = StepCollector.empty()
    if mode == "nde":
        n_warm = int(round(warmup_s / cfg.dt))
        n_collect = int(round(collect_s / cfg.dt))
        for _ in range(n_warm):
            step(world, models, rng, fallback)
        for _ in range(n_collect):
            step(world, models, rng, fallback, collector=collector)
        result = EpisodeResult(
            seed=seed_key, accident=False, accident_type=None,
            distance_driven=float(world.dist.sum()),
            velocity_counts=collector.velocity_counts,
            range_counts=collector.range_counts,
            vehicle_km=collector.vehicle_km,
            lane_changes=collector.lane_changes,
            steps=world.steps, n_vehicles=world.n_vehicles,
            lc_opportunities=collector.lc_opportunities)
        result.validate()
        return result
    # AV mode: run until the AV covers the test distance or crashes.
    limit = max_steps or int(10 * av_distance / (SPEED_MIN * cfg.dt))
    accident = False
    atype = None
    while world.dist[av] < av_distance and world.steps < limit:
        step(world, models, rng, fallback, av_agent=av_agent)
        hit = next((c for c in world.collisions
                    if av in (c.first, c.second)), None)
        if hit is not None:
            accident = True
            atype = hit.accident_type.value
            break
    result = EpisodeResult(
        seed=seed_key, accident=accident, accident_type=atype,
        distance_driven=float(world.dist[av]),
        velocity_counts=np.zeros(100), range_counts=np.zeros(115),
        vehicle_km=float(world.dist.sum()) / 1000.0,
        lane_changes=world.lc_starts, steps=world.steps,
        n_vehicles=world.n_vehicles)
    result.validate()
    return result


def single_vehicle_speed_rollout(F, n_steps: int, seed, dt_mc: float = 1.0,
                                 v0: float | None = None) -> np.ndarray:
    """Free-driving chain rollout: sample one action per decision interval
    and hold it, realising exactly the chain the refinement optimises.

    Lane-change mass folds into the nearest-zero acceleration column (an LC
    holds speed), and speeds clamp to the center lattice like the kernel's
    edge-bin allocation. Returns per-step speed-bin counts over F's grid.
    """
    rng = np.random.default_rng(seed)
    ax = F.grid.axes[0]
    acts = F.actions
    eff = F.table[:, acts.accel_slice].copy()
    zero_k = int(np.argmin(np.abs(acts.accels)))
    eff[:, zero_k] += F.table[:, acts.lc_left] + F.table[:, acts.lc_right]
    cdf = np.cumsum(eff, axis=1)
    counts = np.zeros(ax.n_bins)
    v = float(ax.center(ax.n_bins // 2)) if v0 is None else v0
    us = rng.random(n_steps)
    c_lo, c_hi = float(ax.centers[0]), float(ax.centers[-1])
    accels = acts.accels
    res = ax.resolution
    lo = ax.lo
    n_hi = ax.n_bins - 1
    for t in range(n_steps):
        b = min(int((v - lo) / res), n_hi)
        counts[b] += 1
        row = cdf[b]
        k = int(np.searchsorted(row, us[t] * row[-1], side="right"))
        a = float(accels[min(k, len(accels) - 1)])
        v = min(max(v + a * dt_mc, c_lo), c_hi)
    return counts
