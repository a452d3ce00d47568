"""IDM and MOBIL baselines: the fallback for data-uncovered states and the AV agent.

IDM parameters default to the naturalistic-data calibration used throughout;
the stochastic variant adds clamped zero-mean Gaussian noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .core import ACCEL_MAX, ACCEL_MIN, ActionSpace


@dataclass(frozen=True)
class IdmParams:
    a_max: float = 0.8        # maximum acceleration [m/s^2]
    v0: float = 37.0          # desired speed [m/s]
    delta: float = 3.0        # free-flow exponent
    b: float = 1.3            # comfortable deceleration [m/s^2]
    s0: float = 0.1           # standstill gap [m]
    T: float = 0.8            # desired time headway [s]


@dataclass(frozen=True)
class MobilParams:
    politeness: float = 0.1
    threshold: float = 0.2    # incentive threshold [m/s^2]
    b_safe: float = 3.0       # maximum braking imposed on the new follower [m/s^2]


def idm_accel(v, r=None, rr=None, params: IdmParams = IdmParams()):
    """IDM acceleration; vectorised. r is the clear gap, rr = v_lead - v_ego.

    With no lead (r is None) only the free-flow term applies. The output is
    unbounded here; callers clamp to the simulation's [-4, 2] range.
    """
    v = np.asarray(v, dtype=np.float64)
    free = params.a_max * (1.0 - (v / params.v0) ** params.delta)
    if r is None:
        return free
    r = np.asarray(r, dtype=np.float64)
    rr = np.asarray(rr, dtype=np.float64)
    dv = -rr  # approach rate v_ego - v_lead
    s_star = params.s0 + np.maximum(
        0.0, v * params.T + v * dv / (2.0 * np.sqrt(params.a_max * params.b))
    )
    gap = np.maximum(r, 1e-6)
    return free - params.a_max * (s_star / gap) ** 2


def stochastic_idm_accel(v, r, rr, rng: np.random.Generator,
                         params: IdmParams = IdmParams(), sigma: float = 0.3):
    """IDM plus zero-mean Gaussian noise, clamped to the action range."""
    base = idm_accel(v, r, rr, params)
    noisy = base + rng.normal(0.0, sigma, size=np.shape(base))
    return np.clip(noisy, ACCEL_MIN, ACCEL_MAX)


def gaussian_accel_pmf(mean, actions: ActionSpace, sigma: float = 0.3) -> np.ndarray:
    """Discretised clamped Gaussian over the acceleration bins.

    Bin k of width `res` is centred on accels[k]; the two edge bins absorb the
    tails, which realises the [-4, 2] clamping of the continuous variant.
    Accepts scalar or array means; returns (..., n_accels).
    """
    mean = np.asarray(mean, dtype=np.float64)
    accels = actions.accels
    res = float(accels[1] - accels[0]) if actions.n_accels > 1 else 1.0
    inner = accels[:-1] + res / 2.0  # interior bin edges
    cdf = ndtr((inner - mean[..., None]) / sigma)
    pmf = np.empty(mean.shape + (actions.n_accels,))
    pmf[..., 0] = cdf[..., 0]
    if actions.n_accels > 2:
        pmf[..., 1:-1] = np.diff(cdf, axis=-1)
    pmf[..., -1] = 1.0 - cdf[..., -1]
    return pmf


class FallbackPmfTable:
    """Precomputed stochastic-IDM action PMFs indexed by the IDM mean.

    Means are snapped to a fine grid so the hot simulation path is a single
    table lookup instead of 31 Gaussian integrals per vehicle per step.
    """

    def __init__(self, actions: ActionSpace, sigma: float = 0.3, mean_step: float = 0.01):
        self.actions = actions
        self.sigma = sigma
        self.mean_step = mean_step
        lo, hi = float(actions.accels[0]), float(actions.accels[-1])
        self._lo = lo
        self._means = np.arange(lo, hi + mean_step / 2, mean_step)
        self.table = gaussian_accel_pmf(self._means, actions, sigma)

    def pmf_for_means(self, means) -> np.ndarray:
        idx = np.rint((np.clip(means, self._lo, self._means[-1]) - self._lo)
                      / self.mean_step).astype(np.int64)
        return self.table[idx]


@dataclass
class NeighborInfo:
    """Clear gap and speed of one neighbor; None fields mean no such vehicle."""

    v: float | None = None
    gap: float | None = None  # clear gap between the pair, always positive


@dataclass
class MobilView:
    """Everything MOBIL needs to judge one candidate direction.

    All gaps are clear gaps to/from the ego; gaps between two non-ego
    vehicles are reconstructed with the vehicle length.
    """

    v_ego: float
    lead: NeighborInfo = None            # current-lane lead
    old_rear: NeighborInfo = None        # current-lane follower
    target_lead: NeighborInfo = None     # target-lane lead
    target_rear: NeighborInfo = None     # target-lane follower
    veh_len: float = 5.0


def _accel(v, other: NeighborInfo | None, idm: IdmParams):
    if other is None or other.gap is None:
        return float(idm_accel(v, None, None, idm))
    return float(idm_accel(v, other.gap, other.v - v, idm))


def mobil_direction_ok(view: MobilView, idm: IdmParams = IdmParams(),
                       mobil: MobilParams = MobilParams()):
    """Evaluate MOBIL for one direction; returns (passes, incentive).

    Safety first: the target-lane follower must not be forced below -b_safe.
    Then the politeness-weighted incentive must clear the threshold.
    """
    # Safety criterion for the new follower.
    if view.target_rear is not None and view.target_rear.gap is not None:
        nf = view.target_rear
        a_nf_after = float(idm_accel(nf.v, nf.gap, view.v_ego - nf.v, idm))
        if a_nf_after < -mobil.b_safe:
            return False, -np.inf
    a_ego_now = _accel(view.v_ego, view.lead, idm)
    a_ego_after = _accel(view.v_ego, view.target_lead, idm)
    incentive = a_ego_after - a_ego_now
    if mobil.politeness != 0.0:
        # New follower: its lead changes from target_lead to ego.
        if view.target_rear is not None and view.target_rear.gap is not None:
            nf = view.target_rear
            if view.target_lead is not None and view.target_lead.gap is not None:
                old = NeighborInfo(view.target_lead.v,
                                   nf.gap + view.target_lead.gap + view.veh_len)
            else:
                old = None
            a_nf_now = _accel(nf.v, old, idm)
            a_nf_after = float(idm_accel(nf.v, nf.gap, view.v_ego - nf.v, idm))
            incentive += mobil.politeness * (a_nf_after - a_nf_now)
        # Old follower: its lead changes from ego to ego's current lead.
        if view.old_rear is not None and view.old_rear.gap is not None:
            of = view.old_rear
            a_of_now = float(idm_accel(of.v, of.gap, view.v_ego - of.v, idm))
            if view.lead is not None and view.lead.gap is not None:
                new = NeighborInfo(view.lead.v,
                                   of.gap + view.lead.gap + view.veh_len)
            else:
                new = None
            a_of_after = _accel(of.v, new, idm)
            incentive += mobil.politeness * (a_of_after - a_of_now)
    return incentive > mobil.threshold, incentive


def mobil_decision(left: MobilView | None, right: MobilView | None,
                   idm: IdmParams = IdmParams(),
                   mobil: MobilParams = MobilParams()) -> str:
    """Standard MOBIL over the available directions: 'stay', 'left' or 'right'.

    When both directions pass, the larger incentive wins (left on ties).
    """
    best, best_inc = "stay", -np.inf
    for name, view in (("left", left), ("right", right)):
        if view is None:
            continue
        ok, inc = mobil_direction_ok(view, idm, mobil)
        if ok and inc > best_inc:
            best, best_inc = name, inc
    return best
