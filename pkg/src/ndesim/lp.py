"""Self-contained dense LP solver: revised simplex, Phase I/II, anti-cycling.

Standard form: minimize c'x subject to Ax = b, 0 <= x (<= ub, optionally).
Upper bounds default to +inf, so the plain standard form is the default
surface; the bounded extension keeps the refinement LPs' bases small.
Deterministic: identical inputs produce bit-identical solutions.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lu_factor, lu_solve

PIVOT_TOL = 1e-9
STALL_LIMIT = 30  # degenerate iterations before switching to Bland's rule


class LpStatus(enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    ITER_LIMIT = "iter_limit"


@dataclass
class LinearProgram:
    c: np.ndarray
    A: np.ndarray
    b: np.ndarray
    ub: np.ndarray | None = None
    var_names: list[str] | None = None
    con_names: list[str] | None = None

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=np.float64)
        self.A = np.atleast_2d(np.asarray(self.A, dtype=np.float64))
        self.b = np.asarray(self.b, dtype=np.float64)
        m, n = self.A.shape
        if self.c.shape != (n,):
            raise ValueError(f"c has shape {self.c.shape}, expected ({n},)")
        if self.b.shape != (m,):
            raise ValueError(f"b has shape {self.b.shape}, expected ({m},)")
        if self.ub is None:
            self.ub = np.full(n, np.inf)
        else:
            self.ub = np.asarray(self.ub, dtype=np.float64)
            if self.ub.shape != (n,):
                raise ValueError(f"ub has shape {self.ub.shape}, expected ({n},)")
        if not (np.all(np.isfinite(self.b)) and np.all(np.isfinite(self.A))):
            raise ValueError("A and b must be finite")

    @property
    def shape(self) -> tuple[int, int]:
        return self.A.shape


@dataclass
class LpSolution:
    status: LpStatus
    x: np.ndarray
    objective: float
    iterations: int
    residual: float = 0.0


class _Tableau:
    """Working state of the bounded-variable revised simplex."""

    def __init__(self, A, b, c, lb, ub):
        self.A, self.b, self.c = A, b, c
        self.lb, self.ub = lb, ub
        self.m, self.n = A.shape
        self.basis = None          # array of m basic variable indices
        self.at_upper = None       # bool per variable: nonbasic at upper bound
        self.iterations = 0

    def x_full(self):
        x = np.where(self.at_upper, self.ub, self.lb).astype(np.float64)
        x[self.basis] = 0.0
        lu = lu_factor(self.A[:, self.basis])
        xb = lu_solve(lu, self.b - self.A @ x)
        x[self.basis] = xb
        return x, lu

    def iterate(self, max_iters, tol):
        """Run simplex pivots until optimal/unbounded/limit. Returns LpStatus."""
        fixed = self.ub - self.lb <= tol  # e.g. retired artificials
        stall = 0
        last_obj = np.inf
        while self.iterations < max_iters:
            x, lu = self.x_full()
            obj = float(self.c @ x)
            if obj < last_obj - 1e-12:
                stall = 0
            else:
                stall += 1
            last_obj = obj
            y = lu_solve(lu, self.c[self.basis], trans=1)
            d = self.c - self.A.T @ y
            in_basis = np.zeros(self.n, dtype=bool)
            in_basis[self.basis] = True
            # Improving nonbasic moves: up from lower bound, down from upper.
            cand_lo = (~in_basis) & (~self.at_upper) & (~fixed) & (d < -tol)
            cand_hi = (~in_basis) & self.at_upper & (~fixed) & (d > tol)
            cand = np.flatnonzero(cand_lo | cand_hi)
            if cand.size == 0:
                return LpStatus.OPTIMAL
            if stall > STALL_LIMIT:
                j = int(cand[0])  # Bland: smallest index
            else:
                j = int(cand[np.argmax(np.abs(d[cand]))])  # Dantzig
            sign = -1.0 if self.at_upper[j] else 1.0
            w = lu_solve(lu, self.A[:, j]) * sign  # x_B moves by -t*w
            xb = x[self.basis]
            # Ratio test: keep every basic variable inside its bounds.
            t_best = self.ub[j] - self.lb[j]  # bound flip of the entering var
            leave = -1
            dec = w > tol
            if np.any(dec):
                ratios = (xb - self.lb[self.basis]) / np.where(dec, w, 1.0)
                ratios[~dec] = np.inf
                r = int(np.argmin(ratios))
                if ratios[r] < t_best - 1e-12:
                    t_best, leave = ratios[r], r
            inc = w < -tol
            if np.any(inc):
                ub_b = self.ub[self.basis]
                room = np.where(inc, (ub_b - xb) / np.where(inc, -w, 1.0), np.inf)
                room[~np.isfinite(ub_b)] = np.inf
                room[~inc] = np.inf
                r = int(np.argmin(room))
                if room[r] < t_best - 1e-12:
                    t_best, leave = room[r], r
            if not np.isfinite(t_best):
                return LpStatus.UNBOUNDED
            self.iterations += 1
            t_best = max(t_best, 0.0)
            if leave < 0:
                self.at_upper[j] = ~self.at_upper[j]  # pure bound flip
                continue
            out = int(self.basis[leave])
            # Leaving variable lands on whichever bound it hit.
            hit_upper = w[leave] < 0
            self.at_upper[out] = bool(hit_upper)
            self.basis[leave] = j
            self.at_upper[j] = False
        return LpStatus.ITER_LIMIT


def solve(lp: LinearProgram, max_iters: int = 50_000, tol: float = PIVOT_TOL) -> LpSolution:
    """Two-phase bounded-variable revised simplex with Bland anti-cycling."""
    m, n = lp.shape
    # Phase I: artificial variables with unit cost make b reachable trivially.
    sign = np.where(lp.b < 0, -1.0, 1.0)
    A1 = np.hstack([lp.A, np.diag(sign)])
    c1 = np.concatenate([np.zeros(n), np.ones(m)])
    lb1 = np.zeros(n + m)
    ub1 = np.concatenate([lp.ub, np.full(m, np.inf)])
    tab = _Tableau(A1, lp.b, c1, lb1, ub1)
    tab.basis = np.arange(n, n + m)
    tab.at_upper = np.zeros(n + m, dtype=bool)
    # Start structurals at the bound nearer feasibility is fine; lower is standard.
    status = tab.iterate(max_iters, tol)
    x1, _ = tab.x_full()
    phase1_cost = float(x1[n:].sum())
    if status is LpStatus.ITER_LIMIT:
        return LpSolution(LpStatus.ITER_LIMIT, x1[:n], float(lp.c @ x1[:n]),
                          tab.iterations)
    if phase1_cost > 1e-7 * (1.0 + np.abs(lp.b).max(initial=0.0)):
        return LpSolution(LpStatus.INFEASIBLE, x1[:n], np.nan, tab.iterations)
    # Phase II: retire the artificials by fixing them at zero.
    tab.c = np.concatenate([lp.c, np.zeros(m)])
    tab.ub = np.concatenate([lp.ub, np.zeros(m)])
    tab.at_upper[n:] = False
    status = tab.iterate(max_iters, tol)
    x2, _ = tab.x_full()
    x = x2[:n]
    residual = float(np.abs(lp.A @ x - lp.b).max(initial=0.0))
    if status is LpStatus.OPTIMAL and residual > 1e-7 * (1.0 + np.abs(lp.b).max(initial=0.0)):
        # Should not happen on well-scaled PMF data; report honestly if it does.
        status = LpStatus.ITER_LIMIT
    return LpSolution(status, x, float(lp.c @ x), tab.iterations, residual)


def export_lp_text(lp: LinearProgram) -> str:
    """Render the program in CPLEX LP text format for external cross-checks."""
    names = lp.var_names or [f"x{j}" for j in range(lp.shape[1])]
    cons = lp.con_names or [f"c{i}" for i in range(lp.shape[0])]
    out = ["Minimize", " obj: " + " + ".join(
        f"{lp.c[j]:.17g} {names[j]}" for j in range(lp.shape[1]) if lp.c[j] != 0)]
    out.append("Subject To")
    for i in range(lp.shape[0]):
        terms = " + ".join(f"{lp.A[i, j]:.17g} {names[j]}"
                           for j in range(lp.shape[1]) if lp.A[i, j] != 0)
        out.append(f" {cons[i]}: {terms or '0 ' + names[0]} = {lp.b[i]:.17g}")
    out.append("Bounds")
    for j in range(lp.shape[1]):
        hi = "+inf" if not np.isfinite(lp.ub[j]) else f"{lp.ub[j]:.17g}"
        out.append(f" 0 <= {names[j]} <= {hi}")
    out.append("End")
    return "\n".join(out) + "\n"
