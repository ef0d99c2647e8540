"""Structured run configuration: one JSON file drives everything.

Every section maps onto the dataclass that owns those knobs.  Loading is
strict (unknown keys are errors, so typos cannot silently fall back to
defaults) and the resolved config has a canonical JSON form whose SHA-256
is stamped into reports and checkpoints.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .biped import BipedModel
from .env import EnvConfig
from .policy import PolicyArch, PolicyMode
from .ppo import PPOConfig
from .refmotion import ClipParams
from .rewards import RewardConfig

CONFIG_FORMAT_VERSION = 1


@dataclass
class TerrainConfig:
    kinds: tuple = ("flat", "rough", "gap", "step", "stair")
    track_length: float = 14.0
    cell_size: float = 0.05
    start_clear: float = 2.0


@dataclass
class CommandConfig:
    v_range: tuple = (0.2, 1.0)
    w_range: tuple = (-0.5, 0.5)


@dataclass
class AmpConfig:
    alpha_gp: float = 10.0
    disc_hidden: tuple = (64, 32)
    disc_lr: float = 3e-4
    buffer_size: int = 4096
    batch_size: int = 256
    updates_per_iter: int = 1


@dataclass
class GaitConfig:
    period_s: float = 4.0
    distribution: tuple = (1 / 3, 1 / 3, 1 / 3)
    transitions: bool = True
    clip_params: ClipParams = field(default_factory=ClipParams)
    clip_seed: int = 0


@dataclass
class CurriculumConfig:
    enabled: bool = True
    promote: float = 0.8
    demote: float = 0.4
    delta: float = 0.1
    init_difficulty: float = 0.0


@dataclass
class BenchConfig:
    trials: int = 200
    timeout_s: float = 40.0
    goal_m: float = 14.0


@dataclass
class TrainConfig:
    dr_enabled: bool = True
    blind: bool = False
    checkpoint_every: int = 100
    divergence_floor: float = 0.2  # of the max tracking term
    divergence_patience: int = 80
    divergence_warmup: int = 120


@dataclass
class RunConfig:
    model: BipedModel = field(default_factory=BipedModel)
    env: EnvConfig = field(default_factory=EnvConfig)
    terrain: TerrainConfig = field(default_factory=TerrainConfig)
    commands: CommandConfig = field(default_factory=CommandConfig)
    arch: PolicyArch = field(default_factory=PolicyArch)
    mode: PolicyMode = field(default_factory=PolicyMode)
    ppo: PPOConfig = field(default_factory=PPOConfig)
    amp: AmpConfig = field(default_factory=AmpConfig)
    gaits: GaitConfig = field(default_factory=GaitConfig)
    rewards: RewardConfig = field(default_factory=RewardConfig)
    curriculum: CurriculumConfig = field(default_factory=CurriculumConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


_SECTIONS = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _to_jsonable(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: _to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return [_to_jsonable(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _to_jsonable(v) for k, v in obj.items()}
    return obj


def _fill_dataclass(cls, data: dict, path: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ValueError(f"unknown config keys in {path}: {sorted(unknown)}")
    defaults = cls()
    kwargs = {}
    for name, f in fields.items():
        if name not in data:
            kwargs[name] = getattr(defaults, name)
            continue
        value = data[name]
        current = getattr(defaults, name)
        if dataclasses.is_dataclass(current) and isinstance(value, dict):
            kwargs[name] = _fill_dataclass(type(current), value, f"{path}.{name}")
        elif isinstance(current, dict):
            kwargs[name] = {**current, **value}  # partial dicts override defaults
        elif isinstance(current, tuple):
            kwargs[name] = tuple(
                tuple(v) if isinstance(v, list) else v for v in value
            )
        else:
            kwargs[name] = value
    return cls(**kwargs)


def config_to_dict(cfg: RunConfig) -> dict:
    d = _to_jsonable(cfg)
    d["format_version"] = CONFIG_FORMAT_VERSION
    return d


def config_from_dict(data: dict) -> RunConfig:
    data = dict(data)
    version = data.pop("format_version", CONFIG_FORMAT_VERSION)
    if version != CONFIG_FORMAT_VERSION:
        raise ValueError(f"unsupported config version: {version}")
    unknown = set(data) - set(_SECTIONS)
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    kwargs = {}
    for name in _SECTIONS:
        section = data.get(name, {})
        default = getattr(RunConfig(), name)
        kwargs[name] = _fill_dataclass(type(default), section, name)
    return RunConfig(**kwargs)


def canonical_json(cfg: RunConfig) -> str:
    return json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()


def load_config(path) -> RunConfig:
    with open(path) as f:
        return config_from_dict(json.load(f))


def save_config(cfg: RunConfig, path) -> None:
    with open(path, "w") as f:
        json.dump(config_to_dict(cfg), f, indent=2, sort_keys=True)


def apply_ablation(cfg: RunConfig, ablation: str | None) -> RunConfig:
    """The documented ablation switches; anything else is untouched."""
    if not ablation:
        return cfg
    cfg = config_from_dict(config_to_dict(cfg))  # deep copy through the schema
    if ablation == "more2":
        cfg.mode.n_experts = 2
    elif ablation == "more3":
        cfg.mode.n_experts = 3
    elif ablation == "more4":
        cfg.mode.n_experts = 4
    elif ablation == "more-a":
        cfg.mode.residual_fusion = "action"
    elif ablation == "more-os":
        cfg.mode.one_stage = True
    elif ablation == "blind":
        cfg.train.blind = True
        cfg.env.blind = True
    else:
        raise ValueError(f"unknown ablation: {ablation!r}")
    return cfg
