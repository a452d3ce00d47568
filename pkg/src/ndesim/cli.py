"""Command-line pipeline: gen-data, build-models, refine, simulate.

Every output embeds the config hash and master seed; reruns with identical
inputs are byte-identical. Exit codes: 0 success, 2 usage, 3 hard-refinement
infeasible (advisory), 1 other failures.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import empirical, metrics, ndd, pipeline
from .config import ENV_CONFIG, ExperimentConfig, config_hash, load_config
from .core import Situation
from .driver_models import IdmParams
from .markov import assemble_free_driving, stationary
from .refine import (
    ConstraintMode,
    Objective,
    RefinementInfeasibleError,
    RefinementProblem,
    refine_car_following,
    refine_free_driving,
)
from .sim import EpisodeResult, IdmBaselineModels, SimConfig
from .truth import TruthModels

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_INFEASIBLE = 3

MODEL_FILES = {s: f"{s.value}.model" for s in Situation}
TARGETS_FILE = "targets.npz"


def _json_dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2, default=repr) + "\n")


def _meta(cfg: ExperimentConfig, seed: int) -> dict:
    return {"config_hash": config_hash(cfg), "master_seed": int(seed),
            "road": {"length_m": cfg.sim.road_length, "lanes": cfg.sim.n_lanes,
                     "periodic_ring": cfg.sim.periodic}}


def cmd_gen_data(args, cfg: ExperimentConfig) -> int:
    if args.hours <= 0:
        print("error: --hours must be > 0", file=sys.stderr)
        return EXIT_USAGE
    seed = args.seed if args.seed is not None else cfg.master_seed
    spec = cfg.truth_spec()
    models = TruthModels(spec, lat=cfg.pipeline.lateral_grids())
    dists = models.init_distributions()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    episodes = []
    first = True
    with open(out, "w") as fh:
        for frame in ndd.generate_synthetic_ndd(
                models, args.hours, seed, cfg.sim,
                cfg.synthetic.episode_seconds, dists):
            frame.to_csv(fh, index=False, header=first)
            first = False
            episodes.append({"n_vehicles": int(frame.attrs["n_vehicles"]),
                             "rows": int(len(frame)),
                             "collisions": int(frame.attrs["collisions"])})
    meta = _meta(cfg, seed)
    meta.update({"hours": args.hours, "episodes": episodes,
                 "rows_total": int(sum(e["rows"] for e in episodes)),
                 "steps_per_hour": int(round(3600.0 / cfg.sim.dt))})
    _json_dump(meta, out.with_suffix(out.suffix + ".meta.json"))
    print(f"wrote {meta['rows_total']} rows to {out}")
    return EXIT_OK


def cmd_build_models(args, cfg: ExperimentConfig) -> int:
    frame = ndd.read_csv(args.trajectories)
    events = ndd.detect_lane_changes_stream(frame, cfg.pipeline)
    kept, seg_ids = ndd.segment_frame(frame, cfg.pipeline)
    if len(kept) == 0:
        print("error: no segments survive the trajectory rules", file=sys.stderr)
        return EXIT_FAILURE
    batch = ndd.categorize_frame(kept, seg_ids, events, cfg.pipeline)
    tables = empirical.count_actions(batch, grids=pipeline.pipeline_grids(cfg.pipeline))
    models = empirical.build_all_models(tables, cfg.empirical.window,
                                        cfg.empirical.min_samples,
                                        cfg.empirical.brake)
    targets = empirical.estimate_targets(tables)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    provenance = {"config_hash": config_hash(cfg), "source": str(args.trajectories),
                  "samples": int(len(batch))}
    coverage = {}
    for situation, model in models.items():
        empirical.save_model(out_dir / MODEL_FILES[situation], model, provenance)
        if model.is_dense:
            cov = np.asarray(model.coverage)
            coverage[situation.value] = {
                "states": int(model.n_states),
                "covered": int((cov >= model.min_samples).sum()),
                "samples": int(cov.sum()),
            }
        else:
            coverage[situation.value] = {
                "visited": len(model.coverage),
                "covered": sum(1 for c in model.coverage.values()
                               if c >= model.min_samples),
            }
    empirical.save_targets(out_dir / TARGETS_FILE, targets)
    report = _meta(cfg, cfg.master_seed)
    report.update({"coverage": coverage, "lane_change_events": len(events),
                   "records_kept": int(len(kept))})
    _json_dump(report, out_dir / "coverage_report.json")
    print(f"wrote six models + targets to {out_dir}")
    return EXIT_OK


def _load_models_dir(path) -> dict[Situation, object]:
    models = {}
    for situation, name in MODEL_FILES.items():
        f = Path(path) / name
        if f.exists():
            models[situation] = empirical.load_model(f)
    return models


def cmd_refine(args, cfg: ExperimentConfig) -> int:
    in_dir = Path(args.models)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    models = _load_models_dir(in_dir)
    targets = empirical.load_targets(in_dir / TARGETS_FILE)
    objective = Objective(cfg.refine.objective)
    constraint = ConstraintMode(cfg.refine.constraint)
    reports = {}
    situations = [s.strip() for s in args.situations.split(",") if s.strip()]
    try:
        for name in situations:
            situation = Situation(name)
            model = models[situation]
            filler = empirical.idm_fallback_filler(model.grid, model.actions,
                                                   cfg.sim.idm, cfg.sim.fallback_sigma)
            filled = empirical.fill_uncovered(model, filler)
            if situation is Situation.FREE_DRIVING:
                problem = RefinementProblem(filled, targets.pi_v, objective,
                                            constraint, cfg.refine.soft_penalty,
                                            cfg.refine.dt_mc)
                refined, report = refine_free_driving(problem)
            elif situation is Situation.CAR_FOLLOWING:
                n_states = model.n_states
                if n_states > cfg.refine.cf_state_cap:
                    print(f"error: car-following grid has {n_states} states, above "
                          f"refine.cf_state_cap={cfg.refine.cf_state_cap}; "
                          "refinement at this size needs an HPC-scale solver. "
                          "Configure a coarser grid or raise the cap.",
                          file=sys.stderr)
                    return EXIT_USAGE
                problem = RefinementProblem(filled, targets.cf_pi, objective,
                                            constraint, cfg.refine.soft_penalty,
                                            cfg.refine.dt_mc)
                refined, report = refine_car_following(problem)
            else:
                print(f"error: only longitudinal models are refined, got {name}",
                      file=sys.stderr)
                return EXIT_USAGE
            prov = {"config_hash": config_hash(cfg), "refined": True,
                    "objective": report.objective, "constraint": report.constraint,
                    "stationarity_residual_l1": report.stationarity_residual_l1,
                    "iterations": report.iterations}
            empirical.save_model(out_dir / MODEL_FILES[situation], refined, prov)
            reports[name] = report.__dict__
    except RefinementInfeasibleError as err:
        print(f"refinement infeasible: {err}", file=sys.stderr)
        return EXIT_INFEASIBLE
    # Lateral models pass through unchanged (longitudinal-only refinement).
    for situation, model in models.items():
        target_file = out_dir / MODEL_FILES[situation]
        if not target_file.exists():
            empirical.save_model(target_file, model,
                                 {"config_hash": config_hash(cfg), "refined": False})
    empirical.save_targets(out_dir / TARGETS_FILE, targets)
    out = _meta(cfg, cfg.master_seed)
    out["reports"] = reports
    _json_dump(out, out_dir / "refinement_report.json")
    print(f"wrote refined models to {out_dir}")
    return EXIT_OK


def _histogram_csv(hist, path: Path) -> None:
    df = pd.DataFrame({
        "edge_lo": hist.edges[:-1],
        "edge_hi": hist.edges[1:],
        "count": hist.counts,
        "normalized": hist.normalized,
    })
    df.to_csv(path, index=False)


def cmd_simulate(args, cfg: ExperimentConfig) -> int:
    seed = args.seed if args.seed is not None else cfg.master_seed
    workers = args.workers if args.workers is not None else cfg.workers
    episodes = args.episodes
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    in_dir = Path(args.models)
    targets = empirical.load_targets(in_dir / TARGETS_FILE)
    background = args.background or cfg.av.background
    if background == "empirical":
        bundle = empirical.EmpiricalModels(_load_models_dir(in_dir))
    elif background == "idm":
        bundle = IdmBaselineModels(idm=cfg.sim.idm, stochastic=False,
                                   lat=cfg.pipeline.lateral_grids())
    elif background == "stochastic_idm":
        bundle = IdmBaselineModels(idm=cfg.sim.idm, stochastic=True,
                                   sigma=cfg.sim.fallback_sigma,
                                   lat=cfg.pipeline.lateral_grids())
    else:
        print(f"error: unknown background {background!r}", file=sys.stderr)
        return EXIT_USAGE
    if episodes <= 0:
        print("error: --episodes must be > 0", file=sys.stderr)
        return EXIT_USAGE
    if args.mode == "nde":
        results = pipeline.run_episodes(cfg.sim, bundle, targets.init, seed,
                                        episodes, mode="nde",
                                        warmup_s=cfg.nde.warmup_s,
                                        collect_s=cfg.nde.collect_s,
                                        workers=workers)
        hists = metrics.collect_histograms(results)
        _histogram_csv(hists["velocity"], out_dir / "velocity_hist.csv")
        _histogram_csv(hists["range"], out_dir / "range_hist.csv")
        rate = metrics.lane_change_rate(results)
        out = _meta(cfg, seed)
        out.update({
            "mode": "nde", "episodes": episodes, "background": background,
            "hellinger_velocity_vs_target": metrics.hellinger(
                hists["velocity"].normalized, targets.pi_v)
            if hists["velocity"].counts.sum() else None,
            "hellinger_range_vs_target": metrics.hellinger(
                hists["range"].normalized, targets.range_pmf)
            if hists["range"].counts.sum() and targets.range_pmf.sum() else None,
            "km_per_lane_change": rate.km_per_lane_change,
            "no_lane_changes": rate.no_lane_changes,
            "vehicle_km": rate.total_vehicle_km,
            "lane_changes": rate.total_lane_changes,
        })
        _json_dump(out, out_dir / "nde_metrics.json")
        print(f"wrote NDE statistics to {out_dir}")
        return EXIT_OK
    # AV testing mode.
    results = pipeline.run_episodes(cfg.sim, bundle, targets.init, seed,
                                    episodes, mode="av",
                                    av_distance=cfg.av.distance_m,
                                    workers=workers)
    outcomes = [r.accident for r in results]
    est = metrics.accident_rate(outcomes, confidence=0.90,
                                method="clopper-pearson" if sum(outcomes) < 10
                                else "normal")
    types: dict[str, int] = {}
    for r in results:
        if r.accident:
            types[r.accident_type] = types.get(r.accident_type, 0) + 1
    out = _meta(cfg, seed)
    out.update({
        "mode": "av", "episodes": episodes, "background": background,
        "accident_rate": est.estimate, "ci_low": est.ci_low, "ci_high": est.ci_high,
        "ci_method": est.method, "confidence": est.confidence,
        "accidents": est.m, "tests": est.n, "accident_types": types,
        "av_distance_m": cfg.av.distance_m,
    })
    _json_dump(out, out_dir / "accident_rate.json")
    log = pd.DataFrame({
        "episode": np.arange(episodes),
        "accident": [int(r.accident) for r in results],
        "accident_type": [r.accident_type or "" for r in results],
        "distance_m": [r.distance_driven for r in results],
        "steps": [r.steps for r in results],
    })
    log.to_csv(out_dir / "av_outcomes.csv", index=False)
    print(f"wrote AV testing results to {out_dir} "
          f"(rate {est.estimate:.3g}, {est.m}/{est.n})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ndesim",
                                description="Distributionally consistent NDE toolkit")
    p.add_argument("--config", default=None,
                   help=f"TOML config path (default: ${ENV_CONFIG} or built-ins)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate synthetic trajectory CSV")
    g.add_argument("--hours", type=float, required=True)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--out", required=True)

    b = sub.add_parser("build-models", help="build the six empirical models")
    b.add_argument("--trajectories", required=True)
    b.add_argument("--out-dir", required=True)

    r = sub.add_parser("refine", help="stationary-distribution refinement")
    r.add_argument("--models", required=True)
    r.add_argument("--out-dir", required=True)
    r.add_argument("--situations", default="free_driving",
                   help="comma list: free_driving[,car_following]")

    s = sub.add_parser("simulate", help="run NDE statistics or AV testing")
    s.add_argument("--models", required=True)
    s.add_argument("--mode", choices=("nde", "av"), required=True)
    s.add_argument("--episodes", type=int, required=True)
    s.add_argument("--workers", type=int, default=None)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--background", default=None,
                   choices=("empirical", "idm", "stochastic_idm"))
    s.add_argument("--out-dir", required=True)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
    except (OSError, KeyError, ValueError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_USAGE
    handlers = {
        "gen-data": cmd_gen_data,
        "build-models": cmd_build_models,
        "refine": cmd_refine,
        "simulate": cmd_simulate,
    }
    try:
        return handlers[args.command](args, cfg)
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_FAILURE
    except Exception as err:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
