"""Experiment configuration: one TOML file, sections mirroring the modules.

Defaults reproduce the desk-scale experiments (calibrated IDM/MOBIL, 0.68
car-following probability, 115 m observation range, 1700 m ring at roughly
1360 vehicles/hour/lane). Every output artifact embeds `config_hash` so runs
are traceable to their exact configuration.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field

from .driver_models import IdmParams, MobilParams
from .ndd import PipelineConfig
from .sim import SimConfig
from .truth import GroundTruthSpec, aggressive_truth

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

ENV_CONFIG = "NDESIM_CONFIG"


@dataclass
class EmpiricalConfig:
    window: int = 5
    min_samples: int = 50
    brake: float = 4.0


@dataclass
class RefineConfig:
    objective: str = "l1"             # l1 | squared_frobenius
    constraint: str = "hard"          # hard | soft
    soft_penalty: float = 100.0
    dt_mc: float = 1.0
    cf_state_cap: int = 2000          # full CF grids exceed desk scale


@dataclass
class SyntheticConfig:
    profile: str = "default"          # default | aggressive
    hours: float = 10.0
    episode_seconds: float = 900.0
    lc_mode: str | None = None        # override: logistic | constant | none
    lc_rho_per_s: float | None = None


@dataclass
class NdeRunConfig:
    episodes: int = 100
    warmup_s: float = 600.0
    collect_s: float = 300.0


@dataclass
class AvRunConfig:
    episodes: int = 10_000
    distance_m: float = 400.0
    background: str = "empirical"     # empirical | idm | stochastic_idm


@dataclass
class ExperimentConfig:
    master_seed: int = 1
    workers: int = 1
    sim: SimConfig = field(default_factory=SimConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    empirical: EmpiricalConfig = field(default_factory=EmpiricalConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    nde: NdeRunConfig = field(default_factory=NdeRunConfig)
    av: AvRunConfig = field(default_factory=AvRunConfig)

    def __post_init__(self):
        # The pipeline must agree with the simulated road geometry.
        self.pipeline.wrap_length = self.sim.road_length
        self.pipeline.lane_width = self.sim.lane_width
        self.pipeline.lc_duration = self.sim.lc_duration
        self.pipeline.n_lanes = self.sim.n_lanes
        self.pipeline.dt = self.sim.dt

    def truth_spec(self) -> GroundTruthSpec:
        spec = aggressive_truth() if self.synthetic.profile == "aggressive" \
            else GroundTruthSpec()
        overrides = {}
        if self.synthetic.lc_mode is not None:
            overrides["lc_mode"] = self.synthetic.lc_mode
        if self.synthetic.lc_rho_per_s is not None:
            overrides["lc_rho_per_s"] = self.synthetic.lc_rho_per_s
        if overrides:
            spec = dataclasses.replace(spec, **overrides)
        return spec


def _apply(obj, data: dict, path: str) -> None:
    for key, val in data.items():
        if not hasattr(obj, key):
            raise KeyError(f"unknown config key {path}.{key}")
        cur = getattr(obj, key)
        if dataclasses.is_dataclass(cur) and isinstance(val, dict):
            _apply(cur, val, f"{path}.{key}")
        else:
            setattr(obj, key, val)


def load_config(path=None) -> ExperimentConfig:
    """Parse the TOML config; missing file or None yields pure defaults."""
    cfg = ExperimentConfig()
    if path is None:
        path = os.environ.get(ENV_CONFIG)
    if path is None:
        return cfg
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    sim_data = data.pop("sim", {})
    idm = sim_data.pop("idm", None)
    mobil = sim_data.pop("mobil", None)
    _apply(cfg.sim, sim_data, "sim")
    if idm:
        cfg.sim.idm = IdmParams(**{**dataclasses.asdict(cfg.sim.idm), **idm})
    if mobil:
        cfg.sim.mobil = MobilParams(**{**dataclasses.asdict(cfg.sim.mobil), **mobil})
    for section in ("pipeline", "empirical", "refine", "synthetic", "nde", "av"):
        if section in data:
            _apply(getattr(cfg, section), data.pop(section), section)
    for key in ("master_seed", "workers"):
        if key in data:
            setattr(cfg, key, data.pop(key))
    if data:
        raise KeyError(f"unknown config sections: {sorted(data)}")
    cfg.__post_init__()
    return cfg


def config_hash(cfg: ExperimentConfig) -> str:
    """Stable digest of the full configuration tree."""
    blob = json.dumps(dataclasses.asdict(cfg), sort_keys=True, default=repr)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
