"""Stationary-distribution matching: refine empirical models so the induced
chain's fixed point equals the data-derived target.

The bilinear pi'P = pi' constraint becomes linear by substituting the target
for pi, so the L1 objective yields a plain LP over the longitudinal block of
the behavior model. Lane-change columns stay untouched and self-loop in the
kernel, matching the assembler. The squared-Frobenius objective is solved by
projection (Dykstra) onto the same feasible set.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import lp as lpmod
from .core import BehaviorModel, GridKind
from .markov import (
    DT_MC_DEFAULT,
    ActionAllocation,
    assemble_kernel,
    car_following_allocation,
    free_driving_allocation,
    stationary,
)
from .metrics import hellinger


class Objective(enum.Enum):
    L1 = "l1"
    SQUARED_FROBENIUS = "squared_frobenius"


class ConstraintMode(enum.Enum):
    HARD = "hard"
    SOFT = "soft"


class RefinementInfeasibleError(RuntimeError):
    """Hard-mode stationarity cannot be met (bounded accelerations restrict
    one-step reachability); retry with ConstraintMode.SOFT."""


@dataclass
class RefinementProblem:
    F_star: BehaviorModel
    pi_star: np.ndarray
    objective: Objective = Objective.L1
    constraint: ConstraintMode = ConstraintMode.HARD
    soft_penalty: float = 100.0
    dt_mc: float = DT_MC_DEFAULT

    def __post_init__(self):
        self.pi_star = np.asarray(self.pi_star, dtype=np.float64)
        if self.pi_star.shape != (self.F_star.n_states,):
            raise ValueError("pi_star length does not match the model's state count")
        if abs(self.pi_star.sum() - 1.0) > 1e-6 or self.pi_star.min() < 0:
            raise ValueError("pi_star is not a PMF")
        if self.constraint is ConstraintMode.SOFT and self.soft_penalty <= 0:
            raise ValueError("soft_penalty must be > 0")


@dataclass
class RefinementReport:
    objective_value: float
    stationarity_residual_l1: float
    stationary_l1_to_target: float
    stationary_hellinger_to_target: float
    lp_status: str
    iterations: int
    objective: str
    constraint: str
    soft_penalty: float | None
    dt_mc: float
    n_states: int
    n_matched_states: int


def _stationarity_system(alloc: ActionAllocation, pi_star: np.ndarray,
                         lc_mass: np.ndarray, active: np.ndarray):
    """Rows of pi*' G(F) = pi*' restricted to the matching set, as a sparse
    matrix over the flattened longitudinal block F[i, k]."""
    n_states, n_k, n_t = alloc.w.shape
    var_of = np.arange(n_states * n_k).reshape(n_states, n_k)
    cols = np.broadcast_to(var_of[:, :, None], alloc.idx.shape).reshape(-1)
    rows = alloc.idx.reshape(-1)
    data = (pi_star[:, None, None] * alloc.w).reshape(-1)
    if alloc.crash_mask is not None and alloc.crash_mask.any():
        keep = ~alloc.crash_mask[np.repeat(np.arange(n_states), n_k * n_t)]
        rows, cols, data = rows[keep], cols[keep], data[keep]
    A = sp.csr_matrix((data, (rows, cols)), shape=(n_states, n_states * n_k))
    b = pi_star * (1.0 - lc_mass)  # LC mass self-loops at weight pi*_j
    return A[active], b[active]


def _active_and_blocks(problem: RefinementProblem, alloc: ActionAllocation):
    F = problem.F_star
    table = F.table
    sl = F.actions.accel_slice
    lc_mass = table[:, F.actions.lc_left] + table[:, F.actions.lc_right]
    crash = alloc.crash_mask if alloc.crash_mask is not None else np.zeros(F.n_states, bool)
    active = ~crash
    covered = np.asarray(F.coverage) >= F.min_samples
    if not covered[active].all():
        bad = np.flatnonzero(active & ~covered)
        raise ValueError(f"F_star must be covered on every non-crash state "
                         f"(fallback-fill first); missing: {bad[:10].tolist()}")
    if np.any(problem.pi_star[active] <= 0):
        raise ValueError("pi_star must be strictly positive on matched states")
    if crash.any() and np.any(problem.pi_star[crash] != 0):
        raise ValueError("pi_star must be zero on inevitable-crash states")
    return active, lc_mass, table[:, sl].copy()


def _solve_l1(problem: RefinementProblem, alloc: ActionAllocation):
    F = problem.F_star
    active, lc_mass, f_long = _active_and_blocks(problem, alloc)
    n_states = F.n_states
    n_k = F.actions.n_accels
    act_idx = np.flatnonzero(active)
    n_act = len(act_idx)
    A_stat, b_stat = _stationarity_system(alloc, problem.pi_star, lc_mass, active)
    # Variables live only on active states' rows.
    var_mask = np.repeat(active, n_k)
    A_stat = A_stat[:, var_mask].toarray()
    f_act = f_long[active].reshape(-1)
    rhs_stat = b_stat - A_stat @ f_act
    # Row normalization: sum_k u - sum_k w = 0 per active state.
    R = np.zeros((n_act, n_act * n_k))
    for r in range(n_act):
        R[r, r * n_k:(r + 1) * n_k] = 1.0
    soft = problem.constraint is ConstraintMode.SOFT
    n_var = n_act * n_k
    blocks_top = [A_stat, -A_stat]
    blocks_bot = [R, -R]
    c = np.concatenate([np.ones(2 * n_var)])
    ub = np.concatenate([np.full(n_var, np.inf), f_act])
    if soft:
        m_stat = A_stat.shape[0]
        blocks_top += [-np.eye(m_stat), np.eye(m_stat)]
        blocks_bot += [np.zeros((n_act, m_stat)), np.zeros((n_act, m_stat))]
        c = np.concatenate([c, np.full(2 * m_stat, problem.soft_penalty)])
        ub = np.concatenate([ub, np.full(2 * m_stat, np.inf)])
    A = np.vstack([np.hstack(blocks_top), np.hstack(blocks_bot)])
    b = np.concatenate([rhs_stat, np.zeros(n_act)])
    sol = lpmod.solve(lpmod.LinearProgram(c=c, A=A, b=b, ub=ub))
    if sol.status is lpmod.LpStatus.INFEASIBLE:
        raise RefinementInfeasibleError(
            "hard stationarity constraints are infeasible for this target; "
            "bounded accelerations restrict one-step reachability. "
            "Retry with ConstraintMode.SOFT (penalized stationarity)."
        )
    if sol.status not in (lpmod.LpStatus.OPTIMAL,):
        raise RuntimeError(f"LP solver returned {sol.status.value}")
    u = sol.x[:n_var]
    w = sol.x[n_var:2 * n_var]
    new_long = f_long.copy()
    new_long[active] = (f_act + u - w).reshape(n_act, n_k)
    return new_long, sol.status.value, sol.iterations


def _project_affine_box(z0, E, q, max_iters=5000, tol=1e-12):
    """Dykstra projection of z0 onto {Ez = q, z >= 0}."""
    EE = E @ E.T
    EE_inv = np.linalg.pinv(EE)

    def proj_affine(z):
        return z - E.T @ (EE_inv @ (E @ z - q))

    z = z0.copy()
    p = np.zeros_like(z0)
    q_corr = np.zeros_like(z0)
    for _ in range(max_iters):
        y = proj_affine(z + p)
        p = z + p - y
        z_new = np.maximum(y + q_corr, 0.0)
        q_corr = y + q_corr - z_new
        if np.abs(z_new - z).max() < tol and np.abs(E @ z_new - q).max() < 1e-10:
            z = z_new
            break
        z = z_new
    return z


def _solve_squared_frobenius(problem: RefinementProblem, alloc: ActionAllocation):
    """Projection of F* onto the feasible set (hard), or projected gradient on
    the penalized objective (soft). Minimizing ||F - F*||^2 over a convex set
    is exactly the Euclidean projection, so hard mode needs no line search."""
    F = problem.F_star
    active, lc_mass, f_long = _active_and_blocks(problem, alloc)
    n_k = F.actions.n_accels
    act_idx = np.flatnonzero(active)
    n_act = len(act_idx)
    A_stat, b_stat = _stationarity_system(alloc, problem.pi_star, lc_mass, active)
    var_mask = np.repeat(active, n_k)
    A_stat = A_stat[:, var_mask].toarray()
    f_act = f_long[active].reshape(-1)
    R = np.zeros((n_act, n_act * n_k))
    for r in range(n_act):
        R[r, r * n_k:(r + 1) * n_k] = 1.0
    row_rhs = 1.0 - lc_mass[active]
    if problem.constraint is ConstraintMode.HARD:
        E = np.vstack([A_stat, R])
        q = np.concatenate([b_stat, row_rhs])
        z = _project_affine_box(f_act, E, q)
        iters = 1
    else:
        lam = problem.soft_penalty
        z = f_act.copy()
        L = 1.0 + lam * np.linalg.norm(A_stat, 2) ** 2
        step = 1.0 / L
        iters = 0
        for iters in range(1, 20_000 + 1):
            grad = (z - f_act) + lam * (A_stat.T @ (A_stat @ z - b_stat))
            z_next = _project_affine_box(z - step * grad, R, row_rhs, max_iters=200)
            if np.abs(z_next - z).max() < 1e-10:
                z = z_next
                break
            z = z_next
    new_long = f_long.copy()
    new_long[active] = z.reshape(n_act, n_k)
    return new_long, "projection", iters


def _finalize(problem: RefinementProblem, alloc: ActionAllocation, new_long,
              status: str, iterations: int):
    F = problem.F_star
    table = F.table.copy()
    table[:, F.actions.accel_slice] = np.maximum(new_long, 0.0)
    # Kill solver-tolerance crumbs; renormalization moves entries by O(1e-12).
    sums = table.sum(axis=1)
    good = sums > 0
    table[good] /= sums[good, None]
    refined = BehaviorModel(F.situation, F.grid, F.actions, table,
                            np.asarray(F.coverage).copy(), F.min_samples,
                            None if F.crash_flags is None else F.crash_flags.copy())
    tm = assemble_kernel(refined, alloc, problem.dt_mc)
    pi_pmf = problem.pi_star
    resid = float(np.abs(tm.P.T @ pi_pmf - pi_pmf).sum())
    st = stationary(tm, tol=1e-12)
    active = (~alloc.crash_mask) if alloc.crash_mask is not None else np.ones(F.n_states, bool)
    objective_value = float(
        np.abs(table[:, F.actions.accel_slice] - F.table[:, F.actions.accel_slice])[active].sum())
    report = RefinementReport(
        objective_value=objective_value,
        stationarity_residual_l1=resid,
        stationary_l1_to_target=float(np.abs(st.pi - pi_pmf).sum()),
        stationary_hellinger_to_target=hellinger(st.pi, pi_pmf),
        lp_status=status,
        iterations=iterations,
        objective=problem.objective.value,
        constraint=problem.constraint.value,
        soft_penalty=problem.soft_penalty if problem.constraint is ConstraintMode.SOFT else None,
        dt_mc=problem.dt_mc,
        n_states=F.n_states,
        n_matched_states=int(active.sum()),
    )
    return refined, report


def _refine(problem: RefinementProblem, alloc: ActionAllocation):
    if problem.objective is Objective.L1:
        new_long, status, iters = _solve_l1(problem, alloc)
    else:
        new_long, status, iters = _solve_squared_frobenius(problem, alloc)
    return _finalize(problem, alloc, new_long, status, iters)


def refine_free_driving(problem: RefinementProblem):
    if problem.F_star.grid.kind is not GridKind.FREE_DRIVING:
        raise ValueError("expected a free-driving model")
    alloc = free_driving_allocation(problem.F_star.grid, problem.F_star.actions.accels,
                                    problem.dt_mc)
    return _refine(problem, alloc)


def refine_car_following(problem: RefinementProblem):
    if problem.F_star.grid.kind is not GridKind.CAR_FOLLOWING:
        raise ValueError("expected a car-following model")
    alloc = car_following_allocation(problem.F_star.grid, problem.F_star.actions.accels,
                                     problem.dt_mc, problem.F_star.crash_flags)
    return _refine(problem, alloc)
