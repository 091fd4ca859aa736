"""Run configuration: one JSON document defines a whole pipeline run."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .guidance import FEATURE_GRID, IMAGE_GRID


@dataclass
class DataConfig:
    num_classes: int = 8           # seen (ID) classes
    held_out_classes: int = 4      # extra ring classes, never shown to the classifier
    n_train_per_class: int = 500
    n_val_per_class: int = 100
    radius: float = 4.0
    sigma: float = 0.35
    n_ood_test: int = 800
    far_ring_jitter: float = 0.0

    @property
    def ring_classes(self) -> int:
        return self.num_classes + self.held_out_classes

    def ring_params(self) -> dict:
        return {"num_classes": self.ring_classes, "radius": self.radius, "sigma": self.sigma,
                "seen": list(range(self.num_classes)), "ring_jitter": self.far_ring_jitter}


@dataclass
class DiffusionConfig:
    T: int = 200
    beta_1: float = 1e-4
    beta_T: float = 0.02
    hidden: list = field(default_factory=lambda: [128, 128])
    time_dim: int = 16
    class_dim: int = 8
    epochs: int = 150
    batch: int = 128
    lr: float = 1e-3
    cond_dropout: float = 0.1


@dataclass
class ClassifierConfig:
    hidden: int = 64
    embed: int = 16
    epochs: int = 100
    batch: int = 128
    lr: float = 1e-3
    k: int = 10


@dataclass
class GuidanceGridConfig:
    gamma_bar: float = 0.1
    n_smooth: int = 4
    n_recur: int = 1
    n_iter: int = 1
    # guidance acts on raw energy, whose ID spread is ~25 here, so k-NN gets
    # a matching multiplier to keep the two targets at comparable strength
    feat_scale: float = 100.0
    cfg_beta: float = 0.0
    eta: float = 1.0
    image_grid: list = field(default_factory=lambda: list(IMAGE_GRID))
    image_per_class: int = 5
    feature_grid: list = field(default_factory=lambda: list(FEATURE_GRID))
    feature_per_class: int = 15


@dataclass
class OeConfig:
    lam: float = 2.5
    lr: float = 1e-2
    epochs: int = 50
    batch_id: int = 128
    batch_ood: int = 128
    momentum: float = 0.9
    weight_decay: float = 5e-4
    grad_clip: float = 1.0
    psi_hidden: int = 16


@dataclass
class EvalConfig:
    a: float = 1.0
    bins: int = 50
    eps: float = 1e-6


_SECTIONS = {"data": DataConfig, "diffusion": DiffusionConfig, "classifier": ClassifierConfig,
             "guidance": GuidanceGridConfig, "oe": OeConfig, "eval": EvalConfig}


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "run"
    data: DataConfig = field(default_factory=DataConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    guidance: GuidanceGridConfig = field(default_factory=GuidanceGridConfig)
    oe: OeConfig = field(default_factory=OeConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        for k, v in d.items():
            if k in _SECTIONS:
                sec = _SECTIONS[k]
                bad = set(v) - {f.name for f in fields(sec)}
                if bad:
                    raise ValueError(f"unknown keys in [{k}]: {sorted(bad)}")
                kw[k] = sec(**v)
            else:
                kw[k] = v
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"
