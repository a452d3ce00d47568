"""Distributional validation and Monte Carlo accident-rate estimation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import beta as beta_dist
from scipy.stats import norm

from .core import D_OBS, Histogram, SPEED_MAX, SPEED_MIN


def velocity_edges() -> np.ndarray:
    return np.round(np.arange(SPEED_MIN, SPEED_MAX + 1e-9, 0.2), 10)


def range_edges() -> np.ndarray:
    return np.arange(0.0, D_OBS + 1e-9, 1.0)


def hellinger(p, q) -> float:
    """H(p, q) = sqrt(sum (sqrt(p_i) - sqrt(q_i))^2) / sqrt(2), in [0, 1]."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"PMF grids differ: {p.shape} vs {q.shape}")
    for name, arr in (("p", p), ("q", q)):
        if abs(arr.sum() - 1.0) > 1e-6:
            raise ValueError(f"{name} does not sum to 1 (sum={arr.sum():.8f})")
    return float(np.sqrt(np.sum((np.sqrt(p) - np.sqrt(q)) ** 2)) / math.sqrt(2.0))


def collect_histograms(episodes) -> dict[str, Histogram]:
    """Pool velocity/range counts over episodes' collection windows.

    Velocity bins are 0.2 m/s over [20, 40); range bins 1 m over [0, 115).
    Range samples only exist for vehicles in a car-following relation.
    """
    episodes = list(episodes)
    if not episodes:
        raise ValueError("no episodes to pool")
    v_edges, r_edges = velocity_edges(), range_edges()
    v_counts = np.zeros(len(v_edges) - 1)
    r_counts = np.zeros(len(r_edges) - 1)
    for ep in episodes:
        v_counts += ep.velocity_counts
        r_counts += ep.range_counts
    return {
        "velocity": Histogram(v_edges, v_counts),
        "range": Histogram(r_edges, r_counts),
    }


@dataclass
class LaneChangeRate:
    km_per_lane_change: float
    total_vehicle_km: float
    total_lane_changes: int
    no_lane_changes: bool


def lane_change_rate(episodes) -> LaneChangeRate:
    """Vehicle-kilometres per lane-change start over the collection windows."""
    total_km = 0.0
    total_lcs = 0
    for ep in episodes:
        total_km += ep.vehicle_km
        total_lcs += ep.lane_changes
    if total_lcs == 0:
        return LaneChangeRate(math.inf, total_km, 0, True)
    return LaneChangeRate(total_km / total_lcs, total_km, total_lcs, False)


@dataclass
class AccidentRateEstimate:
    estimate: float
    ci_low: float
    ci_high: float
    m: int
    n: int
    confidence: float
    method: str


def accident_rate(outcomes, confidence: float = 0.90,
                  method: str = "normal") -> AccidentRateEstimate:
    """Monte Carlo event-rate estimate m/n with a two-sided confidence interval.

    `normal` uses p +- z*sqrt(p(1-p)/n); `clopper-pearson` is exact and
    preferable for small m.
    """
    outcomes = np.asarray(list(outcomes), dtype=bool)
    n = len(outcomes)
    if n == 0:
        raise ValueError("no outcomes")
    m = int(outcomes.sum())
    p = m / n
    alpha = 1.0 - confidence
    if method == "normal":
        z = float(norm.ppf(1.0 - alpha / 2.0))
        half = z * math.sqrt(p * (1.0 - p) / n)
        lo, hi = p - half, p + half
    elif method == "clopper-pearson":
        lo = 0.0 if m == 0 else float(beta_dist.ppf(alpha / 2.0, m, n - m + 1))
        hi = 1.0 if m == n else float(beta_dist.ppf(1.0 - alpha / 2.0, m + 1, n - m))
    else:
        raise ValueError(f"unknown CI method {method!r}")
    return AccidentRateEstimate(p, max(lo, 0.0), min(hi, 1.0), m, n, confidence, method)
