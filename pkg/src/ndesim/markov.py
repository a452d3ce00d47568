"""Markov kernel assembly P = G(F), stationary distributions, chain diagnostics.

G allocates each action's successor state onto the grid with proportional
two-bin weights per axis, so P is linear in the behavior model F and reduces
to exact single-bin transitions whenever successors land on bin centers
(which they do for the default 1 s decision interval on the 0.2 m/s grid).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .core import Axis, BehaviorModel, GridKind, StateGrid

DT_MC_DEFAULT = 1.0  # Markov decision interval [s]; decoupled from the 10 Hz sim step


@dataclass
class TransitionMatrix:
    """Row-stochastic |S| x |S| kernel (CSR) with its decision interval."""

    P: sp.csr_matrix
    dt_mc: float

    @property
    def n_states(self) -> int:
        return self.P.shape[0]

    def validate(self, atol: float = 1e-9) -> None:
        sums = np.asarray(self.P.sum(axis=1)).ravel()
        if np.any(np.abs(sums - 1.0) > atol):
            raise ValueError(f"row sums deviate from 1 by up to {np.abs(sums-1).max():.2e}")
        if self.P.nnz and self.P.data.min() < -atol:
            raise ValueError("negative transition probability")

    def dense(self) -> np.ndarray:
        return self.P.toarray()


@dataclass
class StationaryDistribution:
    pi: np.ndarray
    residual: float
    converged: bool
    iterations: int

    def validate(self, atol: float = 1e-9) -> None:
        if abs(self.pi.sum() - 1.0) > atol or self.pi.min() < -atol:
            raise ValueError("stationary vector is not a PMF")


class UncoveredStateError(ValueError):
    """Kernel assembly hit rows without data; fallback-fill the model first."""

    def __init__(self, states):
        self.states = list(states)
        preview = ", ".join(str(s) for s in self.states[:10])
        more = "" if len(self.states) <= 10 else f" (+{len(self.states)-10} more)"
        super().__init__(f"uncovered states: {preview}{more}")


def _axis_allocation(axis: Axis, values: np.ndarray):
    """Proportional two-bin split of continuous values onto bin centers.

    Mass outside the center range goes to the edge bin, matching the
    simulator's clamping. Returns (lo_idx, hi_idx, w_lo, w_hi).
    """
    pos = (values - axis.lo) / axis.resolution - 0.5  # fractional center index
    lo = np.floor(pos).astype(np.int64)
    frac = pos - lo
    # Snap float crumbs so center-aligned successors stay single-bin exact.
    snap_hi = frac > 1.0 - 1e-9
    lo = np.where(snap_hi, lo + 1, lo)
    frac = np.where(snap_hi, 0.0, np.where(frac < 1e-9, 0.0, frac))
    hi = lo + 1
    w_lo = 1.0 - frac
    w_hi = frac
    below = hi <= 0
    above = lo >= axis.n_bins - 1
    lo = np.clip(lo, 0, axis.n_bins - 1)
    hi = np.clip(hi, 0, axis.n_bins - 1)
    w_lo = np.where(below, 1.0, np.where(above, 1.0, w_lo))
    w_hi = np.where(below | above, 0.0, w_hi)
    return lo, hi, w_lo, w_hi


@dataclass
class ActionAllocation:
    """Sparse linear map from (state, accel-action) pairs to successor states.

    For each state i and acceleration index k, the successor mass lands on
    `idx[i, k, :]` with weights `w[i, k, :]` (weights sum to 1). Shared by
    kernel assembly and by the refinement LP constraint builder; `lc_self`
    marks rows where lane-change mass self-loops.
    """

    idx: np.ndarray  # (n_states, n_accels, n_targets) int64
    w: np.ndarray    # same shape, float64
    crash_mask: np.ndarray | None = None  # states forced to absorbing self-loops


def free_driving_allocation(grid: StateGrid, accels: np.ndarray,
                            dt_mc: float = DT_MC_DEFAULT) -> ActionAllocation:
    """Successor allocation for the speed chain: v' = center(v) + a*dt."""
    ax = grid.axes[0]
    centers = ax.centers
    v_next = centers[:, None] + accels[None, :] * dt_mc  # (nS, nK)
    lo, hi, w_lo, w_hi = _axis_allocation(ax, v_next)
    idx = np.stack([lo, hi], axis=-1)
    w = np.stack([w_lo, w_hi], axis=-1)
    return ActionAllocation(idx, w)


def car_following_allocation(grid: StateGrid, accels: np.ndarray,
                             dt_mc: float = DT_MC_DEFAULT,
                             crash_mask: np.ndarray | None = None) -> ActionAllocation:
    """Successor allocation for the (v, r, rr) chain with the lead in steady state.

    (v', r', rr') = (v + a*dt, r + rr*dt, rr - a*dt); each axis clamps to its
    grid and splits proportionally, giving up to 8 weighted successor states.
    """
    ax_v, ax_r, ax_rr = grid.axes
    n_states, n_k = grid.n_states, len(accels)
    iv, ir, irr = np.unravel_index(np.arange(n_states), grid.shape)
    v_c, r_c, rr_c = ax_v.center(iv), ax_r.center(ir), ax_rr.center(irr)
    a = accels[None, :]
    v_next = v_c[:, None] + a * dt_mc
    r_next = np.broadcast_to((r_c + rr_c * dt_mc)[:, None], (n_states, n_k))
    rr_next = rr_c[:, None] - a * dt_mc
    lo_v, hi_v, wl_v, wh_v = _axis_allocation(ax_v, v_next)
    lo_r, hi_r, wl_r, wh_r = _axis_allocation(ax_r, np.ascontiguousarray(r_next))
    lo_rr, hi_rr, wl_rr, wh_rr = _axis_allocation(ax_rr, rr_next)
    shape = grid.shape
    idx = np.empty((n_states, n_k, 8), dtype=np.int64)
    w = np.empty((n_states, n_k, 8), dtype=np.float64)
    t = 0
    for bv, jv, wv in ((0, lo_v, wl_v), (1, hi_v, wh_v)):
        for br, jr, wr in ((0, lo_r, wl_r), (1, hi_r, wh_r)):
            for brr, jrr, wrr in ((0, lo_rr, wl_rr), (1, hi_rr, wh_rr)):
                idx[:, :, t] = np.ravel_multi_index((jv, jr, jrr), shape)
                w[:, :, t] = wv * wr * wrr
                t += 1
    return ActionAllocation(idx, w, crash_mask=crash_mask)


def assemble_kernel(F: BehaviorModel, alloc: ActionAllocation,
                    dt_mc: float = DT_MC_DEFAULT) -> TransitionMatrix:
    """Build P = G(F) from a fully covered behavior model.

    Lane-change actions contribute to the self-transition (zero longitudinal
    acceleration during the 1 s maneuver); crash-masked states become
    absorbing self-loops regardless of their rows.
    """
    if not F.is_dense:
        raise TypeError("kernel assembly needs a dense longitudinal model")
    covered = np.asarray(F.coverage) >= F.min_samples
    if alloc.crash_mask is not None:
        covered |= alloc.crash_mask
    if not covered.all():
        raise UncoveredStateError(np.flatnonzero(~covered))
    n = F.n_states
    accel_block = F.table[:, F.actions.accel_slice]  # (nS, nK)
    lc_mass = F.table[:, F.actions.lc_left] + F.table[:, F.actions.lc_right]
    n_targets = alloc.idx.shape[2]
    rows = np.repeat(np.arange(n), F.actions.n_accels * n_targets)
    cols = alloc.idx.reshape(-1)
    vals = (accel_block[:, :, None] * alloc.w).reshape(-1)
    # Self-loops: lane-change mass, plus absorbing crash states.
    rows = np.concatenate([rows, np.arange(n)])
    cols = np.concatenate([cols, np.arange(n)])
    vals = np.concatenate([vals, lc_mass])
    if alloc.crash_mask is not None and alloc.crash_mask.any():
        keep = ~alloc.crash_mask[rows]
        crash = np.flatnonzero(alloc.crash_mask)
        rows = np.concatenate([rows[keep], crash])
        cols = np.concatenate([cols[keep], crash])
        vals = np.concatenate([vals[keep], np.ones(len(crash))])
    P = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    P.sum_duplicates()
    return TransitionMatrix(P, dt_mc)


def assemble_free_driving(F: BehaviorModel, dt_mc: float = DT_MC_DEFAULT) -> TransitionMatrix:
    if F.grid.kind is not GridKind.FREE_DRIVING:
        raise ValueError("expected a free-driving model")
    alloc = free_driving_allocation(F.grid, F.actions.accels, dt_mc)
    return assemble_kernel(F, alloc, dt_mc)


def assemble_car_following(F: BehaviorModel, dt_mc: float = DT_MC_DEFAULT,
                           crash_mask: np.ndarray | None = None) -> TransitionMatrix:
    if F.grid.kind is not GridKind.CAR_FOLLOWING:
        raise ValueError("expected a car-following model")
    if crash_mask is None:
        crash_mask = F.crash_flags
    alloc = car_following_allocation(F.grid, F.actions.accels, dt_mc, crash_mask)
    return assemble_kernel(F, alloc, dt_mc)


def stationary(P: TransitionMatrix, tol: float = 1e-10,
               max_iters: int = 100_000) -> StationaryDistribution:
    """Power iteration from the uniform vector until ||pi'P - pi'||_1 <= tol.

    Non-convergence returns the best iterate with converged=False rather than
    raising; callers inspect the flag.
    """
    n = P.n_states
    pi = np.full(n, 1.0 / n)
    PT = P.P.T.tocsr()
    residual = np.inf
    for it in range(1, max_iters + 1):
        nxt = PT @ pi
        residual = float(np.abs(nxt - pi).sum())
        pi = nxt / nxt.sum()  # guard drift; row-stochastic P keeps sum at 1
        if residual <= tol:
            return StationaryDistribution(pi, residual, True, it)
    return StationaryDistribution(pi, residual, False, max_iters)


def stationary_direct(P: TransitionMatrix) -> np.ndarray:
    """Direct linear solve of pi'(P - I) = 0 with sum(pi) = 1 (dense; test-scale)."""
    n = P.n_states
    A = P.dense().T - np.eye(n)
    A[-1, :] = 1.0
    b = np.zeros(n)
    b[-1] = 1.0
    return np.linalg.solve(A, b)


def _scc_period(P_csr: sp.csr_matrix, nodes: np.ndarray) -> int:
    """Period of one strongly connected component: gcd over BFS level jumps."""
    sub = P_csr[nodes][:, nodes]
    n = len(nodes)
    if n == 1:
        return 1 if sub[0, 0] > 0 else 0
    level = np.full(n, -1)
    level[0] = 0
    frontier = [0]
    indptr, indices = sub.indptr, sub.indices
    g = 0
    while frontier:
        nxt = []
        for u in frontier:
            for v in indices[indptr[u]:indptr[u + 1]]:
                if level[v] < 0:
                    level[v] = level[u] + 1
                    nxt.append(v)
                else:
                    g = math.gcd(g, level[u] + 1 - level[v])
        frontier = nxt
    return abs(g)


@dataclass
class ChainDiagnosis:
    irreducible: bool
    aperiodic: bool
    reachable_sets: list[np.ndarray]
    periods: list[int]


def diagnose(P: TransitionMatrix, support_tol: float = 0.0) -> ChainDiagnosis:
    """SCC structure and periodicity of the support graph."""
    support = P.P.copy()
    if support_tol > 0:
        support.data = np.where(support.data > support_tol, support.data, 0.0)
        support.eliminate_zeros()
    n_comp, labels = connected_components(support, directed=True, connection="strong")
    sets = [np.flatnonzero(labels == k) for k in range(n_comp)]
    periods = [_scc_period(support, nodes) for nodes in sets]
    irreducible = n_comp == 1
    aperiodic = all(p == 1 for p in periods)
    return ChainDiagnosis(irreducible, aperiodic, sets, periods)
