"""End-to-end pipeline helpers and the parallel episode runners.

Episodes (both data generation and NDE/AV simulation) are embarrassingly
parallel: every episode derives its RNG stream from (master_seed, index), and
results merge in index order, so outputs are identical for any worker count.
"""

from __future__ import annotations

import multiprocessing as mp
from dataclasses import dataclass

import numpy as np

from . import empirical, ndd
from .sim import EpisodeResult, SimConfig, run_episode
from .truth import GroundTruthSpec, TruthModels

_worker_state: dict = {}


def label_frame(frame, pcfg: ndd.PipelineConfig) -> ndd.SampleBatch:
    """Detect lane changes on raw traces, segment, and categorize one frame.

    Detection runs before fine segmentation because crossings always split
    the lead-constant segments.
    """
    events = ndd.detect_lane_changes_stream(frame, pcfg)
    kept, seg_ids = ndd.segment_frame(frame, pcfg)
    return ndd.categorize_frame(kept, seg_ids, events, pcfg)


def pipeline_grids(pcfg: ndd.PipelineConfig) -> dict:
    from .core import Situation, car_following_grid, free_driving_grid
    return {Situation.FREE_DRIVING: free_driving_grid(),
            Situation.CAR_FOLLOWING: car_following_grid(),
            **pcfg.lateral_grids().grids}


def tables_from_frame(frame, pcfg: ndd.PipelineConfig) -> empirical.CountTables:
    return empirical.count_actions(label_frame(frame, pcfg),
                                   grids=pipeline_grids(pcfg))


def _gen_init(spec, sim_cfg, pcfg):
    _worker_state["models"] = TruthModels(spec, lat=pcfg.lateral_grids())
    _worker_state["dists"] = _worker_state["models"].init_distributions()
    _worker_state["sim_cfg"] = sim_cfg
    _worker_state["pcfg"] = pcfg


def _gen_episode_tables(args):
    ep, n_steps, seed = args
    models = _worker_state["models"]
    frame = ndd.generate_episode(models, n_steps, seed, ep,
                                 _worker_state["sim_cfg"],
                                 _worker_state["dists"])
    return tables_from_frame(frame, _worker_state["pcfg"])


def build_tables_from_synthetic(spec: GroundTruthSpec, hours: float, seed: int,
                                sim_cfg: SimConfig | None = None,
                                pcfg: ndd.PipelineConfig | None = None,
                                episode_s: float = 900.0,
                                workers: int = 1) -> empirical.CountTables:
    """Generate `hours` of synthetic data and count labeled samples.

    Per-episode vehicle-id offsets are irrelevant to counting, so workers
    label their own episodes and only the count tables travel back.
    """
    sim_cfg = sim_cfg or SimConfig()
    pcfg = pcfg or ndd.PipelineConfig(wrap_length=sim_cfg.road_length,
                                      lane_width=sim_cfg.lane_width,
                                      lc_duration=sim_cfg.lc_duration,
                                      n_lanes=sim_cfg.n_lanes,
                                      dt=sim_cfg.dt)
    plan = ndd.episode_plan(hours, episode_s, sim_cfg.dt)
    jobs = [(ep, n, seed) for ep, n in enumerate(plan)]
    tables = None
    if workers <= 1:
        _gen_init(spec, sim_cfg, pcfg)
        results = map(_gen_episode_tables, jobs)
        for t in results:
            tables = t if tables is None else tables.merge(t)
    else:
        ctx = mp.get_context("spawn")
        with ctx.Pool(workers, initializer=_gen_init,
                      initargs=(spec, sim_cfg, pcfg)) as pool:
            for t in pool.imap(_gen_episode_tables, jobs):
                tables = t if tables is None else tables.merge(t)
    return tables


def _sim_init(state):
    _worker_state["sim"] = state


def _sim_episode(args):
    idx, seed = args
    st = _worker_state["sim"]
    return run_episode(st["cfg"], st["models"], st["dists"], seed,
                       mode=st["mode"], warmup_s=st["warmup_s"],
                       collect_s=st["collect_s"], av_agent=st.get("av_agent"),
                       av_distance=st["av_distance"])


def run_episodes(cfg: SimConfig, models, dists, master_seed: int, n_episodes: int,
                 mode: str = "nde", warmup_s: float = 600.0, collect_s: float = 300.0,
                 av_agent=None, av_distance: float = 400.0,
                 workers: int = 1) -> list[EpisodeResult]:
    """Run seeded episodes, optionally across worker processes.

    Episode i uses seed (master_seed, i) regardless of scheduling; results
    return in index order, so outputs are reproducible for any worker count.
    """
    state = {"cfg": cfg, "models": models, "dists": dists, "mode": mode,
             "warmup_s": warmup_s, "collect_s": collect_s,
             "av_agent": av_agent, "av_distance": av_distance}
    jobs = [(i, (int(master_seed), i)) for i in range(n_episodes)]
    if workers <= 1:
        _sim_init(state)
        return [_sim_episode(j) for j in jobs]
    ctx = mp.get_context("spawn")
    with ctx.Pool(workers, initializer=_sim_init, initargs=(state,)) as pool:
        return list(pool.imap(_sim_episode, jobs, chunksize=max(1, n_episodes // (workers * 8))))
