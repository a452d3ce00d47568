"""Jitted hot loops of the stepping engine.

These mirror the pure-numpy reference implementations in `sim` exactly; the
test suite cross-checks both paths on randomized worlds. Import is optional:
`sim` falls back to the reference path when numba is unavailable.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _occupancy(x, lane, mnv_dir, mnv_src, frozen, n_lanes, road_len):
    n = x.shape[0]
    ids = np.empty(2 * n, np.int64)
    lanes = np.empty(2 * n, np.int64)
    m = 0
    for i in range(n):
        if frozen[i]:
            continue
        ids[m] = i
        lanes[m] = lane[i]
        m += 1
        if mnv_dir[i] != 0:
            other = mnv_src[i] if lane[i] != mnv_src[i] else lane[i] + mnv_dir[i]
            if 0 <= other < n_lanes:
                ids[m] = i
                lanes[m] = other
                m += 1
    ids = ids[:m]
    lanes = lanes[:m]
    keys = np.empty(m, np.float64)
    big = road_len + 1.0
    for k in range(m):
        keys[k] = lanes[k] * big + x[ids[k]]
    order = np.argsort(keys)
    ids_s = np.empty(m, np.int64)
    lanes_s = np.empty(m, np.int64)
    xs = np.empty(m, np.float64)
    for k in range(m):
        j = order[k]
        ids_s[k] = ids[j]
        lanes_s[k] = lanes[j]
        xs[k] = x[ids[j]]
    starts = np.zeros(n_lanes + 1, np.int64)
    for k in range(m):
        starts[lanes_s[k] + 1] += 1
    for l in range(n_lanes):
        starts[l + 1] += starts[l]
    return ids_s, lanes_s, xs, starts


@njit(cache=True)
def neighbors_kernel(x, v, lane, mnv_dir, mnv_src, frozen,
                     n_lanes, road_len, veh_len, periodic):
    n = x.shape[0]
    ids_s, lanes_s, xs, starts = _occupancy(x, lane, mnv_dir, mnv_src, frozen,
                                            n_lanes, road_len)
    m = ids_s.shape[0]
    INF = np.inf
    lead = np.full(n, -1, np.int64)
    lead_gap = np.full(n, INF)
    rear = np.full(n, -1, np.int64)
    rear_gap = np.full(n, INF)
    # Same-lane neighbors by rank; only the logical-lane entry scatters back.
    for k in range(m):
        i = ids_s[k]
        l = lanes_s[k]
        if l != lane[i]:
            continue
        s, e = starts[l], starts[l + 1]
        size = e - s
        if size < 2:
            continue
        nk = k + 1
        if nk == e:
            nk = s if periodic else -1
        if nk >= 0:
            gap = xs[nk] - xs[k]
            if periodic:
                gap = gap % road_len
            lead[i] = ids_s[nk]
            lead_gap[i] = gap - veh_len
        pk = k - 1
        if pk < s:
            pk = e - 1 if periodic else -1
        if pk >= 0:
            gap = xs[k] - xs[pk]
            if periodic:
                gap = gap % road_len
            rear[i] = ids_s[pk]
            rear_gap[i] = gap - veh_len
    # Adjacent-lane neighbors for non-maneuvering vehicles.
    tl = np.full((2, n), -1, np.int64)
    tl_g = np.full((2, n), INF)
    tr = np.full((2, n), -1, np.int64)
    tr_g = np.full((2, n), INF)
    for di in range(2):
        d = 1 if di == 0 else -1
        for i in range(n):
            if frozen[i] or mnv_dir[i] != 0:
                continue
            t = lane[i] + d
            if t < 0 or t >= n_lanes:
                continue
            s, e = starts[t], starts[t + 1]
            size = e - s
            if size == 0:
                continue
            # rightmost entry with xs <= x[i]  (binary search, side='right')
            lo, hi = s, e
            xi = x[i]
            while lo < hi:
                mid = (lo + hi) // 2
                if xs[mid] <= xi:
                    lo = mid + 1
                else:
                    hi = mid
            p = lo
            lp = p if p < e else (s if periodic else -1)
            rp = p - 1 if p - 1 >= s else (e - 1 if periodic else -1)
            gl = INF
            gr = INF
            if lp >= 0:
                gl = xs[lp] - xi
                if periodic:
                    gl = gl % road_len
                gl -= veh_len
            if rp >= 0:
                gr = xi - xs[rp]
                if periodic:
                    gr = gr % road_len
                gr -= veh_len
            if periodic and size == 1:
                if gl <= gr:
                    rp = -1
                else:
                    lp = -1
            if lp >= 0:
                tl[di, i] = ids_s[lp]
                tl_g[di, i] = gl
            if rp >= 0:
                tr[di, i] = ids_s[rp]
                tr_g[di, i] = gr
    return lead, lead_gap, rear, rear_gap, tl, tl_g, tr, tr_g


@njit(cache=True, inline="always")
def _idm(v, gap, dv, a_max, v0, delta, b, s0, T):
    free = a_max * (1.0 - (v / v0) ** delta)
    s_star = s0 + v * T + v * dv / (2.0 * np.sqrt(a_max * b))
    if s_star < s0:
        s_star = s0
    g = gap if gap > 1e-6 else 1e-6
    return free - a_max * (s_star / g) ** 2


@njit(cache=True)
def mobil_kernel(v, lead_p, lead_v, lead_g, tl_p, tl_v, tl_g,
                 tr_p, tr_v, tr_g, or_p, or_v, or_g, lane_ok, veh_len,
                 a_max, v0, delta, b, s0, T, politeness, threshold, b_safe):
    """Vectorised MOBIL incentive and safety; mirrors sim._mobil_batch."""
    n = v.shape[0]
    incentive = np.empty(n)
    safe = np.empty(n, np.bool_)
    for i in range(n):
        if not lane_ok[i]:
            incentive[i] = -np.inf
            safe[i] = False
            continue
        free_i = a_max * (1.0 - (v[i] / v0) ** delta)
        a_now = _idm(v[i], lead_g[i], v[i] - lead_v[i], a_max, v0, delta, b, s0, T) \
            if lead_p[i] else free_i
        a_after = _idm(v[i], tl_g[i], v[i] - tl_v[i], a_max, v0, delta, b, s0, T) \
            if tl_p[i] else free_i
        inc = a_after - a_now
        ok = True
        if tr_p[i]:
            a_nf_after = _idm(tr_v[i], tr_g[i], tr_v[i] - v[i],
                              a_max, v0, delta, b, s0, T)
            if a_nf_after < -b_safe:
                ok = False
            if politeness != 0.0:
                if tl_p[i]:
                    a_nf_now = _idm(tr_v[i], tr_g[i] + tl_g[i] + veh_len,
                                    tr_v[i] - tl_v[i], a_max, v0, delta, b, s0, T)
                else:
                    a_nf_now = a_max * (1.0 - (tr_v[i] / v0) ** delta)
                inc += politeness * (a_nf_after - a_nf_now)
        if politeness != 0.0 and or_p[i]:
            a_of_now = _idm(or_v[i], or_g[i], or_v[i] - v[i],
                            a_max, v0, delta, b, s0, T)
            if lead_p[i]:
                a_of_after = _idm(or_v[i], or_g[i] + lead_g[i] + veh_len,
                                  or_v[i] - lead_v[i], a_max, v0, delta, b, s0, T)
            else:
                a_of_after = a_max * (1.0 - (or_v[i] / v0) ** delta)
            inc += politeness * (a_of_after - a_of_now)
        incentive[i] = inc
        safe[i] = ok
    return incentive, safe


@njit(cache=True)
def collisions_kernel(x, lane, mnv_dir, mnv_src, frozen,
                      n_lanes, road_len, veh_len, periodic):
    ids_s, lanes_s, xs, starts = _occupancy(x, lane, mnv_dir, mnv_src, frozen,
                                            n_lanes, road_len)
    m = ids_s.shape[0]
    out_i = np.empty(m, np.int64)
    out_j = np.empty(m, np.int64)
    cnt = 0
    for k in range(m):
        l = lanes_s[k]
        s, e = starts[l], starts[l + 1]
        if e - s < 2:
            continue
        nk = k + 1
        if nk == e:
            if not periodic:
                continue
            nk = s
        gap = xs[nk] - xs[k]
        if periodic:
            gap = gap % road_len
        gap -= veh_len
        if gap < 0.0 and ids_s[nk] != ids_s[k]:
            out_i[cnt] = ids_s[k]
            out_j[cnt] = ids_s[nk]
            cnt += 1
    return out_i[:cnt], out_j[:cnt]
