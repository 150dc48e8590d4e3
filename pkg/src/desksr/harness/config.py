"""Experiment configuration: one JSON document, per-stage sections.

Every run writes its resolved config next to its outputs so the exact
settings (and their hash) travel with the artifacts.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

CONDITIONINGS = ("feature", "label", "null")


@dataclass(frozen=True)
class CodecStage:
    steps: int = 4000
    batch: int = 8
    lr: float = 2e-3
    patch_count: int = 2000


@dataclass(frozen=True)
class FeatureStage:
    steps: int = 1000
    batch: int = 16
    lr: float = 5e-4


@dataclass(frozen=True)
class FMStage:
    steps: int = 2000
    batch: int = 16
    lr: float = 1e-4
    cond_dropout_p: float = 0.1
    ema_decay: float = 0.999
    pool_size: int = 400


@dataclass(frozen=True)
class SRStage:
    steps: int = 1200
    batch: int = 8
    lr: float = 5e-5
    lambda_mse: float = 1.0
    lambda_percep: float = 0.5
    lambda_vsd: float = 0.1
    lora_rank: int = 4
    lora_alpha: float = 4.0
    t_star: int = 999
    pool_size: int = 400


@dataclass(frozen=True)
class EvalStage:
    max_images: int = 100
    border: int = 4


@dataclass(frozen=True)
class ExperimentConfig:
    data_dir: str
    out_dir: str = "runs/experiment"
    seed: int = 0
    variant: str = "full"  # full | eff
    conditionings: tuple = CONDITIONINGS
    scale_factor: int = 4
    patch: int = 64
    codec: CodecStage = field(default_factory=CodecStage)
    features: FeatureStage = field(default_factory=FeatureStage)
    fm: FMStage = field(default_factory=FMStage)
    sr: SRStage = field(default_factory=SRStage)
    eval: EvalStage = field(default_factory=EvalStage)

    def __post_init__(self):
        if self.variant not in ("full", "eff"):
            raise ValueError(f"unknown variant {self.variant!r}")
        for cond in self.conditionings:
            if cond not in CONDITIONINGS:
                raise ValueError(f"unknown conditioning {cond!r}")


_SECTIONS = {"codec": CodecStage, "features": FeatureStage, "fm": FMStage,
             "sr": SRStage, "eval": EvalStage}


def config_to_json(config: ExperimentConfig) -> str:
    return json.dumps(asdict(config), indent=2, sort_keys=True)


def config_from_json(text: str) -> ExperimentConfig:
    raw = json.loads(text)
    for name, cls in _SECTIONS.items():
        if name in raw:
            raw[name] = cls(**raw[name])
    if "conditionings" in raw:
        raw["conditionings"] = tuple(raw["conditionings"])
    return ExperimentConfig(**raw)


def load_config(path) -> ExperimentConfig:
    return config_from_json(Path(path).read_text())


def config_hash(config: ExperimentConfig) -> str:
    return hashlib.sha256(config_to_json(config).encode("utf-8")).hexdigest()[:16]
