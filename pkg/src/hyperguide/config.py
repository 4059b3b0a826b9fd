"""Experiment configuration: nested dataclasses loaded from YAML.

Every block has working defaults, so a config file only lists overrides.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .basenet import BaseNetConfig
from .diffusion import LDMConfig
from .hvae import VAEConfig
from .hyperclip import CLIPConfig, GuidanceConfig
from .hypernet import HyperConfig
from .metatrain import VARIANTS, AdaptConfig, TrainerConfig, default_trainer
from .universe import UniverseConfig

OUT_ENV = "HYPERGUIDE_OUT"

METHODS = (
    "untrained",
    "mnet-multitask",
    "hnet-multitask-cond",
    "mnet-maml",
    "mnet-fomaml",
    "hnet-maml-uncond",
    "hnet-maml-cond",
    "hnet-hyperclip",
    "hvae-hyperclip",
    "hnet-hyperldm",
    "hvae-hyperldm",
)

# which trained artifacts each evaluated method needs
NEEDS = {
    "untrained": (),
    "hnet-hyperclip": ("hnet-maml-uncond", "corpus", "hyperclip"),
    "hvae-hyperclip": ("hnet-maml-uncond", "corpus", "hvae", "hyperclip"),
    "hnet-hyperldm": ("hnet-maml-uncond", "corpus", "hyperldm"),
    "hvae-hyperldm": ("hnet-maml-uncond", "corpus", "hvae", "hyperldm"),
    **{v: (v,) for v in VARIANTS},
}

STAGES = ("universe", "train", "corpus", "hvae", "hyperclip", "hyperldm", "eval", "sweep-gamma", "sweep-fraction")


@dataclass(frozen=True)
class CorpusConfig:
    n_repeats: int = 4
    steps: int = 50
    lr: float = 0.1
    n_support: int = 40
    heldout_repeats: int = 2

    def __post_init__(self):
        if self.n_repeats < 1 or self.steps < 0 or self.n_support < 1:
            raise ValueError("invalid corpus settings")


@dataclass(frozen=True)
class EvalConfig:
    n_support: int = 20
    n_query: int = 200
    steps: int = 50
    query_seed: int = 20240
    gammas: tuple = (0.0, 0.5, 1.0, 1.5, 2.0, 3.0)
    ldm_gamma: float = 1.5
    fractions: tuple = (1.0, 0.5, 0.1)
    fraction_methods: tuple = ("mnet-multitask", "hnet-multitask-cond", "hnet-hyperldm")
    n_way: int = 16

    def __post_init__(self):
        if self.n_query < 1 or self.n_support < 0 or self.steps < 0:
            raise ValueError("invalid evaluation sizes")
        if any(not 0 < f <= 1 for f in self.fractions):
            raise ValueError("fractions must lie in (0, 1]")
        if any(g < 0 for g in self.gammas):
            raise ValueError("gammas must be non-negative")


def _desk_ldm() -> LDMConfig:
    return LDMConfig(hidden=(128, 256, 128), steps=2000)


@dataclass(frozen=True)
class ExperimentConfig:
    out_dir: str = "runs/default"
    seeds: tuple = (0, 1, 2, 3, 4)
    methods: tuple = METHODS
    stages: tuple = STAGES
    latent_source: str = "hnet"
    universe: UniverseConfig = UniverseConfig()
    base: BaseNetConfig = BaseNetConfig()
    hyper: HyperConfig = HyperConfig()
    trainers: dict = field(default_factory=lambda: {v: default_trainer(v) for v in VARIANTS})
    corpus: CorpusConfig = CorpusConfig()
    vae: VAEConfig = VAEConfig()
    hyperclip: CLIPConfig = CLIPConfig()
    guidance: GuidanceConfig = GuidanceConfig()
    hyperldm: LDMConfig = field(default_factory=_desk_ldm)
    eval: EvalConfig = EvalConfig()

    def __post_init__(self):
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown methods: {sorted(unknown)}")
        bad = set(self.stages) - set(STAGES)
        if bad:
            raise ValueError(f"unknown stages: {sorted(bad)}")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if self.latent_source not in ("hnet", "hvae"):
            raise ValueError("latent_source must be 'hnet' or 'hvae'")
        if self.universe.d_embed != self.hyperclip.d_embed:
            raise ValueError("descriptor and HyperCLIP embedding dimensions differ")

    def output_dir(self) -> Path:
        return Path(os.environ.get(OUT_ENV) or self.out_dir)

    def trainer(self, variant: str) -> TrainerConfig:
        return self.trainers.get(variant, default_trainer(variant))

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("out_dir")
        return d


def _tuplify(value, default):
    if isinstance(default, tuple) and isinstance(value, list):
        return tuple(value)
    return value


def _build(cls, base, overrides: dict):
    if overrides is None:
        return base
    if not isinstance(overrides, dict):
        raise ValueError(f"expected a mapping for {cls.__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(overrides) - names
    if unknown:
        raise ValueError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    kw = {}
    for k, v in overrides.items():
        current = getattr(base, k)
        if dataclasses.is_dataclass(current):
            kw[k] = _build(type(current), current, v)
        else:
            kw[k] = _tuplify(v, current)
    return dataclasses.replace(base, **kw)


def config_from_dict(d: dict | None) -> ExperimentConfig:
    d = dict(d or {})
    base = ExperimentConfig()
    trainers = dict(base.trainers)
    for variant, block in (d.pop("trainers", None) or {}).items():
        if variant not in VARIANTS:
            raise ValueError(f"unknown trainer variant {variant!r}")
        block = dict(block)
        adapt = block.pop("adapt", None)
        t = _build(TrainerConfig, trainers[variant], block)
        if adapt is not None:
            t = dataclasses.replace(t, adapt=_build(AdaptConfig, t.adapt, adapt))
        trainers[variant] = t
    cfg = _build(ExperimentConfig, base, d)
    return dataclasses.replace(cfg, trainers=trainers)


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return config_from_dict(yaml.safe_load(fh))
