"""Build the six empirical behavior models from labeled samples: counting,
inevitable-crash exclusion, moving-average smoothing, normalization, and the
versioned model artifacts.

Longitudinal tables are dense; lane-change contexts live in sparse
pair-encoded counts (state key * n_actions + action), which keeps tens of
millions of lateral samples in a few flat arrays.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field

import numpy as np

from .core import (
    ActionSpace,
    Axis,
    BehaviorModel,
    GridKind,
    LateralGrids,
    Situation,
    StateGrid,
    car_following_grid,
    free_driving_grid,
    standard_action_space,
)
from .driver_models import IdmParams, gaussian_accel_pmf, idm_accel
from .ndd import SITUATION_CODE, SITUATION_ORDER, SampleBatch
from .sim import LATERAL_CODE, InitDistributions

SCHEMA_VERSION = 1


@dataclass
class SparseCounts:
    """Pair-encoded sparse action counts for one lane-change context."""

    pair_code: np.ndarray   # sorted unique key * n_actions + action
    pair_count: np.ndarray
    n_actions: int

    @classmethod
    def from_arrays(cls, keys: np.ndarray, actions: np.ndarray, n_actions: int):
        code = keys.astype(np.int64) * n_actions + actions.astype(np.int64)
        uniq, counts = np.unique(code, return_counts=True)
        return cls(uniq, counts.astype(np.int64), n_actions)

    def state_totals(self) -> tuple[np.ndarray, np.ndarray]:
        keys = self.pair_code // self.n_actions
        uniq, inverse = np.unique(keys, return_inverse=True)
        totals = np.zeros(len(uniq), dtype=np.int64)
        np.add.at(totals, inverse, self.pair_count)
        return uniq, totals

    def covered_rows(self, min_samples: int) -> dict[int, np.ndarray]:
        """Raw count rows (n_actions,) for states with enough samples."""
        keys = self.pair_code // self.n_actions
        acts = self.pair_code % self.n_actions
        uniq, inverse = np.unique(keys, return_inverse=True)
        totals = np.zeros(len(uniq), dtype=np.int64)
        np.add.at(totals, inverse, self.pair_count)
        keep = totals >= min_samples
        rows: dict[int, np.ndarray] = {}
        kept_idx = np.flatnonzero(keep)
        sel = keep[inverse]
        for k in kept_idx:
            rows[int(uniq[k])] = np.zeros(self.n_actions)
        for code, cnt, inv in zip(self.pair_code[sel], self.pair_count[sel],
                                  inverse[sel]):
            rows[int(uniq[inv])][int(code % self.n_actions)] = cnt
        return rows


@dataclass
class CountTables:
    dense: dict[Situation, np.ndarray] = field(default_factory=dict)
    sparse: dict[Situation, SparseCounts] = field(default_factory=dict)
    grids: dict[Situation, StateGrid] = field(default_factory=dict)
    actions: ActionSpace = field(default_factory=standard_action_space)

    def merge(self, other: "CountTables") -> "CountTables":
        for s, tab in other.dense.items():
            if s in self.dense:
                self.dense[s] = self.dense[s] + tab
            else:
                self.dense[s] = tab.copy()
        for s, sp in other.sparse.items():
            if s in self.sparse:
                mine = self.sparse[s]
                code = np.concatenate([mine.pair_code, sp.pair_code])
                cnt = np.concatenate([mine.pair_count, sp.pair_count])
                uniq, inverse = np.unique(code, return_inverse=True)
                totals = np.zeros(len(uniq), dtype=np.int64)
                np.add.at(totals, inverse, cnt)
                self.sparse[s] = SparseCounts(uniq, totals, sp.n_actions)
            else:
                self.sparse[s] = sp
        return self


def count_actions(samples, actions: ActionSpace | None = None,
                  grids: dict[Situation, StateGrid] | None = None) -> CountTables:
    """Tally counts[situation][state][action] from labeled samples.

    Accepts a columnar SampleBatch (the pipeline path) or an iterable of
    LabeledSample (tests, small data).
    """
    actions = actions or standard_action_space()
    if grids is None:
        grids = {Situation.FREE_DRIVING: free_driving_grid(),
                 Situation.CAR_FOLLOWING: car_following_grid(),
                 **LateralGrids().grids}
    if not isinstance(samples, SampleBatch):
        samples = list(samples)
        if not samples:
            batch = SampleBatch(np.zeros(0, np.int8), np.zeros(0, np.int64),
                                np.zeros(0, np.int16))
        else:
            batch = SampleBatch(
                np.array([SITUATION_CODE[s.situation] for s in samples], np.int8),
                np.array([s.state.flat for s in samples], np.int64),
                np.array([s.action for s in samples], np.int16))
    else:
        batch = samples
    tables = CountTables(actions=actions, grids=grids)
    for situation in (Situation.FREE_DRIVING, Situation.CAR_FOLLOWING):
        grid = grids[situation]
        table = np.zeros((grid.n_states, actions.n_actions))
        m = batch.situation == SITUATION_CODE[situation]
        if m.any():
            np.add.at(table, (batch.key[m], batch.action[m]), 1.0)
        tables.dense[situation] = table
    for situation in SITUATION_ORDER[2:]:
        m = batch.situation == SITUATION_CODE[situation]
        tables.sparse[situation] = SparseCounts.from_arrays(
            batch.key[m], batch.action[m], actions.n_actions)
    return tables


def inevitable_crash_mask(grid: StateGrid, brake: float = 4.0) -> np.ndarray:
    """States where even max braking cannot stop the gap from closing.

    With the lead at constant speed and the ego braking at `brake`, the
    minimum range is r - rr^2 / (2 * brake) (reached when rr hits 0); the
    state is doomed iff rr < 0 and that minimum is <= 0. Evaluated at bin
    centers.
    """
    if grid.kind is not GridKind.CAR_FOLLOWING:
        raise ValueError("crash mask is defined on the car-following grid")
    axv, axr, axrr = grid.axes
    iv, ir, irr = np.unravel_index(np.arange(grid.n_states), grid.shape)
    r = axr.center(ir)
    rr = axrr.center(irr)
    return (rr < 0) & (r - rr * rr / (2.0 * brake) <= 0.0)


def exclude_crash_states(tables: CountTables, brake: float = 4.0) -> np.ndarray:
    """Zero the car-following rows of inevitable-crash states; returns mask."""
    grid = tables.grids[Situation.CAR_FOLLOWING]
    mask = inevitable_crash_mask(grid, brake)
    tab = tables.dense.get(Situation.CAR_FOLLOWING)
    if tab is not None:
        tab[mask] = 0.0
    return mask


def smoothing_kernel(n: int, window: int) -> np.ndarray:
    """Mass-preserving moving-average kernel with truncated edge windows.

    K[k, j] spreads bin k's mass uniformly over its window clipped to the
    action range; every row sums to 1, so total mass is conserved exactly.
    """
    if window % 2 != 1 or window < 1:
        raise ValueError("window must be odd and >= 1")
    half = window // 2
    K = np.zeros((n, n))
    for k in range(n):
        lo = max(0, k - half)
        hi = min(n, k + half + 1)
        K[k, lo:hi] = 1.0 / (hi - lo)
    return K


def smooth_and_normalize(counts_row_or_table, actions: ActionSpace,
                         window: int = 5) -> np.ndarray:
    """MA-smooth the acceleration block, keep LC mass, renormalize full rows.

    Rows with zero mass stay zero (uncovered). Works on a single row or a
    (n_states, n_actions) table.
    """
    arr = np.atleast_2d(np.asarray(counts_row_or_table, dtype=np.float64))
    K = smoothing_kernel(actions.n_accels, window)
    out = arr.copy()
    out[:, actions.accel_slice] = arr[:, actions.accel_slice] @ K
    sums = out.sum(axis=1)
    nz = sums > 0
    out[nz] /= sums[nz, None]
    if np.ndim(counts_row_or_table) == 1:
        return out[0]
    return out


def build_model(situation: Situation, tables: CountTables, window: int = 5,
                min_samples: int = 50, crash_mask: np.ndarray | None = None) -> BehaviorModel:
    """Empirical BehaviorModel for one situation from raw counts."""
    actions = tables.actions
    grid = tables.grids[situation]
    if situation in tables.dense:
        counts = tables.dense[situation]
        coverage = counts.sum(axis=1)
        table = smooth_and_normalize(counts, actions, window)
        table[coverage < min_samples] = 0.0
        flags = crash_mask if situation is Situation.CAR_FOLLOWING else None
        return BehaviorModel(situation, grid, actions, table, coverage,
                             min_samples, flags)
    sparse = tables.sparse[situation]
    rows = sparse.covered_rows(min_samples)
    table = {k: smooth_and_normalize(v, actions, window) for k, v in rows.items()}
    coverage = {k: int(v.sum()) for k, v in rows.items()}
    return BehaviorModel(situation, grid, actions, table, coverage, min_samples)


def build_all_models(tables: CountTables, window: int = 5, min_samples: int = 50,
                     brake: float = 4.0) -> dict[Situation, BehaviorModel]:
    crash = exclude_crash_states(tables, brake)
    out = {}
    for situation in SITUATION_ORDER:
        out[situation] = build_model(situation, tables, window, min_samples,
                                     crash if situation is Situation.CAR_FOLLOWING
                                     else None)
    return out


# ---------------------------------------------------------------------------
# Fallback filling (for kernel assembly and refinement preconditions)


def idm_fallback_filler(grid: StateGrid, actions: ActionSpace,
                        idm: IdmParams = IdmParams(), sigma: float = 0.3):
    """Row filler: discretised stochastic-IDM PMFs at uncovered bin centers."""

    def fill(flat: np.ndarray) -> np.ndarray:
        centers = grid.centers_of(flat)
        if grid.kind is GridKind.FREE_DRIVING:
            means = idm_accel(centers[0], None, None, idm)
        else:
            means = idm_accel(centers[0], centers[1], centers[2], idm)
        means = np.clip(means, actions.accels[0], actions.accels[-1])
        return gaussian_accel_pmf(means, actions, sigma)

    return fill


def fill_uncovered(model: BehaviorModel, filler) -> BehaviorModel:
    """Replace uncovered rows with fallback PMFs (LC columns zero).

    Returns a new model whose every non-crash row passes the covered check;
    `filled_mask` marks the synthetic rows.
    """
    if not model.is_dense:
        raise TypeError("fill_uncovered applies to dense longitudinal models")
    coverage = np.asarray(model.coverage).copy()
    table = model.table.copy()
    crash = model.crash_flags if model.crash_flags is not None \
        else np.zeros(model.n_states, dtype=bool)
    need = (coverage < model.min_samples) & ~crash
    idx = np.flatnonzero(need)
    if len(idx):
        rows = filler(idx)
        table[idx] = 0.0
        accel_cols = np.arange(1, model.actions.n_accels + 1)
        table[np.ix_(idx, accel_cols)] = rows
        coverage[idx] = model.min_samples
    out = BehaviorModel(model.situation, model.grid, model.actions, table,
                        coverage, model.min_samples,
                        None if model.crash_flags is None else model.crash_flags.copy())
    out.filled_mask = need
    return out


# ---------------------------------------------------------------------------
# Targets for refinement and validation


@dataclass
class Targets:
    """Data-derived distributions: refinement targets and init inputs."""

    pi_v: np.ndarray          # free-driving speed PMF (strictly positive)
    cf_pi: np.ndarray         # joint (v, r, rr) PMF, zero on crash states
    crash_mask: np.ndarray
    init: InitDistributions
    range_pmf: np.ndarray     # marginal range PMF over [0, d_obs)


def estimate_targets(tables: CountTables, crash_mask: np.ndarray | None = None) -> Targets:
    """Empirical stationary targets with Laplace smoothing on empty bins."""
    fd_grid = tables.grids[Situation.FREE_DRIVING]
    cf_grid = tables.grids[Situation.CAR_FOLLOWING]
    fd_counts = tables.dense[Situation.FREE_DRIVING].sum(axis=1)
    pi_v = fd_counts.copy()
    pi_v[pi_v == 0] = 1.0  # add-one on empties keeps the target positive
    pi_v /= pi_v.sum()
    cf_counts = tables.dense[Situation.CAR_FOLLOWING].sum(axis=1)
    if crash_mask is None:
        crash_mask = inevitable_crash_mask(cf_grid)
    cf_pi = cf_counts.copy()
    cf_pi[(cf_pi == 0) & ~crash_mask] = 1.0
    cf_pi[crash_mask] = 0.0
    cf_pi /= cf_pi.sum()
    joint = cf_counts.reshape(cf_grid.shape)
    total = joint.sum()
    init_joint = joint / total if total > 0 else joint
    v_init = fd_counts / fd_counts.sum() if fd_counts.sum() > 0 else \
        np.full(fd_grid.n_states, 1.0 / fd_grid.n_states)
    rng_pmf = joint.sum(axis=(0, 2))
    rng_pmf = rng_pmf / rng_pmf.sum() if rng_pmf.sum() > 0 else rng_pmf
    return Targets(pi_v, cf_pi, crash_mask,
                   InitDistributions(v_init, init_joint, fd_grid, cf_grid),
                   rng_pmf)


# ---------------------------------------------------------------------------
# Serialization (deterministic zip of .npy members + JSON metadata)


def _axis_meta(ax: Axis) -> dict:
    return {"name": ax.name, "lo": ax.lo, "hi": ax.hi, "resolution": ax.resolution}


def _grid_meta(grid: StateGrid) -> dict:
    return {"kind": grid.kind.value, "axes": [_axis_meta(a) for a in grid.axes]}


def _grid_from_meta(meta: dict) -> StateGrid:
    axes = tuple(Axis(a["name"], a["lo"], a["hi"], a["resolution"])
                 for a in meta["axes"])
    return StateGrid(GridKind(meta["kind"]), axes)


def _write_zip(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Byte-reproducible container: fixed timestamps, sorted members."""
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        items = [("meta.json", json.dumps(meta, sort_keys=True).encode())]
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.save(buf, arrays[name])
            items.append((name + ".npy", buf.getvalue()))
        for name, payload in items:
            info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, payload)


def _read_zip(path) -> tuple[dict[str, np.ndarray], dict]:
    arrays = {}
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        for name in zf.namelist():
            if name.endswith(".npy"):
                arrays[name[:-4]] = np.load(io.BytesIO(zf.read(name)),
                                            allow_pickle=False)
    return arrays, meta


def save_model(path, model: BehaviorModel, provenance: dict | None = None) -> None:
    meta = {
        "schema_version": SCHEMA_VERSION,
        "situation": model.situation.value,
        "grid": _grid_meta(model.grid),
        "min_samples": model.min_samples,
        "dense": model.is_dense,
        "provenance": provenance or {},
    }
    arrays = {"accels": model.actions.accels}
    if model.is_dense:
        arrays["table"] = model.table
        arrays["coverage"] = np.asarray(model.coverage)
        if model.crash_flags is not None:
            arrays["crash_flags"] = model.crash_flags
    else:
        keys = np.array(sorted(model.table), dtype=np.int64)
        arrays["keys"] = keys
        arrays["rows"] = np.stack([model.table[int(k)] for k in keys]) \
            if len(keys) else np.zeros((0, model.actions.n_actions))
        arrays["coverage"] = np.array([model.coverage[int(k)] for k in keys],
                                      dtype=np.int64)
    _write_zip(path, arrays, meta)


def load_model(path) -> BehaviorModel:
    arrays, meta = _read_zip(path)
    if meta["schema_version"] != SCHEMA_VERSION:
        raise ValueError(f"unsupported model schema {meta['schema_version']}")
    grid = _grid_from_meta(meta["grid"])
    actions = ActionSpace(accels=arrays["accels"])
    situation = Situation(meta["situation"])
    if meta["dense"]:
        return BehaviorModel(situation, grid, actions, arrays["table"],
                             arrays["coverage"], meta["min_samples"],
                             arrays.get("crash_flags"))
    table = {int(k): row for k, row in zip(arrays["keys"], arrays["rows"])}
    coverage = {int(k): int(c) for k, c in zip(arrays["keys"], arrays["coverage"])}
    return BehaviorModel(situation, grid, actions, table, coverage,
                         meta["min_samples"])


def save_targets(path, targets: Targets) -> None:
    arrays = {
        "pi_v": targets.pi_v,
        "cf_pi": targets.cf_pi,
        "crash_mask": targets.crash_mask,
        "init_v_pmf": targets.init.v_pmf,
        "init_joint": targets.init.joint_vrr,
        "range_pmf": targets.range_pmf,
    }
    meta = {"schema_version": SCHEMA_VERSION,
            "fd_grid": _grid_meta(targets.init.fd_grid),
            "cf_grid": _grid_meta(targets.init.cf_grid)}
    _write_zip(path, arrays, meta)


def load_targets(path) -> Targets:
    arrays, meta = _read_zip(path)
    fd_grid = _grid_from_meta(meta["fd_grid"])
    cf_grid = _grid_from_meta(meta["cf_grid"])
    init = InitDistributions(arrays["init_v_pmf"], arrays["init_joint"],
                             fd_grid, cf_grid)
    return Targets(arrays["pi_v"], arrays["cf_pi"], arrays["crash_mask"],
                   init, arrays["range_pmf"])


# ---------------------------------------------------------------------------
# Runtime bundle over empirical models


class EmpiricalModels:
    """ActionModels bundle backed by the six empirical tables.

    Longitudinal queries read precomputed conditional-acceleration PMFs;
    lane-change queries look up precomputed LC probabilities; anything
    uncovered (or crash-flagged) reports ok=False so the engine falls back.
    """

    def __init__(self, models: dict[Situation, BehaviorModel]):
        fd = models[Situation.FREE_DRIVING]
        cf = models[Situation.CAR_FOLLOWING]
        self.actions = fd.actions
        self.fd_grid = fd.grid
        self.cf_grid = cf.grid
        # The lateral grids travel with the models; train/test keys agree.
        cut_in = models[Situation.CUT_IN].grid
        self.lat = LateralGrids(cut_in.axes[0].resolution,
                                cut_in.axes[2].resolution)
        self._fd_q, self._fd_ok = self._conditional(fd)
        self._cf_q, self._cf_ok = self._conditional(cf)
        if cf.crash_flags is not None:
            self._cf_ok &= ~cf.crash_flags
        # Per-situation sorted key/probability arrays: lateral lookups become
        # one searchsorted instead of a Python dict scan.
        self._lat_keys: dict[int, np.ndarray] = {}
        self._lat_p: dict[int, np.ndarray] = {}
        for situation, code in LATERAL_CODE.items():
            model = models.get(situation)
            pairs = []
            if model is not None:
                for k, row in model.table.items():
                    if model.coverage.get(k, 0) >= model.min_samples:
                        pairs.append((int(k), float(row[model.actions.lc_left]
                                                    + row[model.actions.lc_right])))
            pairs.sort()
            self._lat_keys[code] = np.array([k for k, _ in pairs], dtype=np.int64)
            self._lat_p[code] = np.array([p for _, p in pairs])

    def _conditional(self, model: BehaviorModel):
        accel = model.table[:, model.actions.accel_slice]
        mass = accel.sum(axis=1)
        ok = (np.asarray(model.coverage) >= model.min_samples) & (mass > 0)
        q = np.zeros_like(accel)
        q[ok] = accel[ok] / mass[ok, None]
        return q, ok

    def longitudinal(self, fd_mask, v, r, rr):
        n = len(v)
        q = np.zeros((n, self.actions.n_accels))
        ok = np.zeros(n, dtype=bool)
        if fd_mask.any():
            bins = self.fd_grid.axes[0].clip_index(v[fd_mask])
            q[fd_mask] = self._fd_q[bins]
            ok[fd_mask] = self._fd_ok[bins]
        cfm = ~fd_mask
        if cfm.any():
            flat = self.cf_grid.clip_ravel((v[cfm], r[cfm], rr[cfm]))
            q[cfm] = self._cf_q[flat]
            ok[cfm] = self._cf_ok[flat]
        return q, ok

    def lateral(self, codes, keys, cols=None, present=None):
        n = len(keys)
        p = np.zeros(n)
        ok = np.zeros(n, dtype=bool)
        for code in np.unique(codes):
            table_keys = self._lat_keys[int(code)]
            m = codes == code
            if len(table_keys) == 0:
                continue
            pos = np.searchsorted(table_keys, keys[m])
            pos = np.minimum(pos, len(table_keys) - 1)
            hit = table_keys[pos] == keys[m]
            idx = np.flatnonzero(m)
            ok[idx[hit]] = True
            p[idx[hit]] = self._lat_p[int(code)][pos[hit]]
        return p, ok
