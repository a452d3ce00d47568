"""Synthetic ground truth: closed-form conditional action PMFs per situation.

Stands in for the proprietary naturalistic datasets. Longitudinal behavior is
a discretised two-component Gaussian mixture centred on an IDM-style mean;
lane-change probabilities are logistic in the context's bin centers (or a
constant hazard for calibration experiments). Every PMF is exactly computable
per state bin, so empirical recovery can be checked against a known answer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import (
    LATERAL_SITUATIONS,
    ActionSpace,
    LateralGrids,
    Situation,
    StateGrid,
    car_following_grid,
    free_driving_grid,
    standard_action_space,
)
from .driver_models import IdmParams, gaussian_accel_pmf, idm_accel
from .sim import LATERAL_CODE, ActionModels, InitDistributions


@dataclass(frozen=True)
class GroundTruthSpec:
    """Parameters of the synthetic driver population."""

    idm: IdmParams = field(default_factory=lambda: IdmParams(
        a_max=1.0, v0=33.0, delta=4.0, b=1.5, s0=2.0, T=1.2))
    mix_weights: tuple = (0.85, 0.15)
    mix_offsets: tuple = (0.0, 0.2)
    mix_sigmas: tuple = (0.18, 0.55)
    lc_mode: str = "logistic"          # logistic | constant | none
    lc_rho_per_s: float = 0.0066       # constant mode: LC hazard per second
    lc_base_logit: float = -7.9
    lc_slow_coef: float = 0.35         # bolder when the lead is slower
    lc_close_coef: float = 1.2         # bolder when the lead is closer
    lc_safety_slope: float = 1.5       # sharpness of the kinematic-safety gate
    lc_safety_margin: float = 3.0     # required min range under max braking [m]
    dt: float = 0.1
    init_v_mean: float = 31.0
    init_v_std: float = 3.0
    init_r_scale: float = 32.0         # exponential-ish mean clear gap
    init_rr_std: float = 1.8

    def accel_means(self, v, r=None, rr=None) -> np.ndarray:
        """IDM-style mean acceleration at bin centers, clamped to the range."""
        return np.clip(idm_accel(v, r, rr, self.idm), -4.0, 2.0)

    def accel_pmf(self, actions: ActionSpace, v, r=None, rr=None) -> np.ndarray:
        means = np.asarray(self.accel_means(v, r, rr), dtype=np.float64)
        pmf = np.zeros(means.shape + (actions.n_accels,))
        for wgt, off, sig in zip(self.mix_weights, self.mix_offsets, self.mix_sigmas):
            pmf += wgt * gaussian_accel_pmf(means + off, actions, sig)
        return pmf / pmf.sum(axis=-1, keepdims=True)

    def incentive_prob(self, v, lv, lr) -> np.ndarray:
        """Base hazard: slower and closer leads raise the LC probability."""
        if self.lc_mode == "none":
            return np.zeros(np.broadcast(v, lv, lr).shape)
        if self.lc_mode == "constant":
            return np.full(np.broadcast(v, lv, lr).shape, self.lc_rho_per_s * self.dt)
        logit = (self.lc_base_logit
                 + self.lc_slow_coef * np.clip(np.asarray(v) - lv, -5.0, 5.0)
                 + self.lc_close_coef * (1.0 - np.asarray(lr) / 115.0))
        return 1.0 / (1.0 + np.exp(-logit))

    def _gate(self, gap, closing) -> np.ndarray:
        """Kinematic-safety factor: fades as the post-change configuration
        approaches an unavoidable collision under maximum braking."""
        if self.lc_mode in ("none", "constant"):
            return np.ones(np.broadcast(gap, closing).shape)
        margin = np.asarray(gap) - np.maximum(0.0, np.asarray(closing)) ** 2 / 8.0
        z = self.lc_safety_slope * (margin - self.lc_safety_margin)
        return 1.0 / (1.0 + np.exp(-z))

    def lead_gate(self, v, tlv, tlr) -> np.ndarray:
        return self._gate(tlr, np.asarray(v) - tlv)

    def rear_gate(self, v, trv, trr) -> np.ndarray:
        return self._gate(trr, np.asarray(trv) - v)

    def lc_prob(self, situation: Situation, centers: list[np.ndarray]) -> np.ndarray:
        """Per-step lane-change probability at lateral-context bin centers:
        the incentive hazard times the applicable safety gates."""
        v, lv, lr = centers[0], centers[1], centers[2]
        p = self.incentive_prob(v, lv, lr)
        if situation in (Situation.LC_ONE_ADJACENT, Situation.LC_TWO_ADJACENT):
            p = p * self.lead_gate(v, centers[3], centers[4])
        if situation in (Situation.CUT_IN, Situation.LC_TWO_ADJACENT):
            p = p * self.rear_gate(v, centers[-2], centers[-1])
        return p


def aggressive_truth() -> GroundTruthSpec:
    """A crash-prone population for the AV-testing experiments."""
    return GroundTruthSpec(
        idm=IdmParams(a_max=1.2, v0=34.0, delta=4.0, b=1.8, s0=1.0, T=0.7),
        mix_weights=(0.6, 0.4),
        mix_offsets=(0.0, 0.45),
        mix_sigmas=(0.3, 1.1),
        lc_base_logit=-5.6,
        lc_slow_coef=0.5,
        lc_close_coef=1.6,
        lc_safety_slope=0.8,
        lc_safety_margin=0.5,
    )


class TruthModels(ActionModels):
    """ActionModels bundle that serves the closed-form ground truth.

    Longitudinal tables are prebuilt densely on the standard grids; lateral
    probabilities are evaluated analytically from the queried bin centers, so
    every state is covered and no fallback ever triggers.
    """

    def __init__(self, spec: GroundTruthSpec,
                 actions: ActionSpace | None = None,
                 fd_grid: StateGrid | None = None,
                 cf_grid: StateGrid | None = None,
                 lat: LateralGrids | None = None):
        self.spec = spec
        self.actions = actions or standard_action_space()
        self.fd_grid = fd_grid or free_driving_grid()
        self.cf_grid = cf_grid or car_following_grid()
        self.lat = lat or LateralGrids()
        self._lat_grids = {LATERAL_CODE[s]: self.lat.grids[s]
                           for s in LATERAL_SITUATIONS}
        v_centers = self.fd_grid.axes[0].centers
        self.fd_table = spec.accel_pmf(self.actions, v_centers)
        axv, axr, axrr = self.cf_grid.axes
        iv, ir, irr = np.unravel_index(np.arange(self.cf_grid.n_states),
                                       self.cf_grid.shape)
        self.cf_table = spec.accel_pmf(self.actions, axv.center(iv),
                                       axr.center(ir), axrr.center(irr))
        # The lateral closed form factors into incentive * lead-gate *
        # rear-gate, each over a (speed, speed, range) box; tabulating the
        # three factors makes lateral queries pure fancy indexing.
        sp_ax = self.lat.speed_axis
        rg_ax = self.lat.range_axis
        vc = sp_ax.centers[:, None, None]
        wc = sp_ax.centers[None, :, None]
        rc = rg_ax.centers[None, None, :]
        self._t_incentive = spec.incentive_prob(vc, wc, rc).reshape(-1)
        self._t_lead_gate = spec.lead_gate(vc, wc, rc).reshape(-1)
        self._t_rear_gate = spec.rear_gate(vc, wc, rc).reshape(-1)
        self._n_speed = sp_ax.n_bins
        self._n_range = rg_ax.n_bins

    def longitudinal(self, fd_mask, v, r, rr):
        n = len(v)
        q = np.empty((n, self.actions.n_accels))
        if fd_mask.any():
            bins = self.fd_grid.axes[0].clip_index(v[fd_mask])
            q[fd_mask] = self.fd_table[bins]
        cf = ~fd_mask
        if cf.any():
            flat = self.cf_grid.clip_ravel((v[cf], r[cf], rr[cf]))
            q[cf] = self.cf_table[flat]
        return q, np.ones(n, dtype=bool)

    def lateral(self, codes, keys, cols=None, present=None):
        n = len(keys)
        if cols is None:
            # Decode the flat keys (reference path, used by tests/scalar API).
            p = np.zeros(n)
            for code in np.unique(codes):
                grid = self._lat_grids[int(code)]
                m = codes == code
                centers = list(grid.centers_of(keys[m]))
                situation = LATERAL_SITUATIONS[int(code)]
                p[m] = np.atleast_1d(self.spec.lc_prob(situation, centers))
            return p, np.ones(n, dtype=bool)
        # Binned columns are always in range (clip_index), so absent
        # neighbors index harmlessly and are masked out by `present`.
        b_v, b_lv, b_lr, b_tlv, b_tlr, b_trv, b_trr = cols
        has_tl, has_tr = present
        nr = self._n_range
        ns = self._n_speed
        p = self._t_incentive[(b_v * ns + b_lv) * nr + b_lr]
        if has_tl.any():
            gate = self._t_lead_gate[(b_v * ns + b_tlv) * nr + b_tlr]
            p = p * np.where(has_tl, gate, 1.0)
        if has_tr.any():
            gate = self._t_rear_gate[(b_v * ns + b_trv) * nr + b_trr]
            p = p * np.where(has_tr, gate, 1.0)
        return p, np.ones(n, dtype=bool)

    def init_distributions(self) -> InitDistributions:
        """Analytic initialization tables on the standard grids."""
        fd_ax = self.fd_grid.axes[0]
        z = (fd_ax.centers - self.spec.init_v_mean) / self.spec.init_v_std
        v_pmf = np.exp(-0.5 * z * z)
        v_pmf /= v_pmf.sum()
        axv, axr, axrr = self.cf_grid.axes
        r_pmf = np.exp(-axr.centers / self.spec.init_r_scale)
        r_pmf[axr.centers < 4.0] = 0.0  # no spawning inside crash range
        r_pmf /= r_pmf.sum()
        zrr = axrr.centers / self.spec.init_rr_std
        rr_pmf = np.exp(-0.5 * zrr * zrr)
        rr_pmf /= rr_pmf.sum()
        joint = np.einsum("r,s->rs", r_pmf, rr_pmf)[None, :, :]
        joint = np.repeat(joint, axv.n_bins, axis=0)
        vq = np.ones(axv.n_bins) / axv.n_bins
        joint = joint * vq[:, None, None]
        return InitDistributions(v_pmf, joint, self.fd_grid, self.cf_grid)
