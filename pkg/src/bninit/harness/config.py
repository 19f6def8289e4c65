"""Experiment configuration: YAML files, CLI overrides, stable hashing.

A config file is YAML with an optional nested ``dataset`` mapping::

    label: ours
    gamma_init: 0.1
    c: 100
    base_lr: 0.1
    epochs: 20
    batch_size: 128
    input_norm: bn          # fixed | offline | bn
    affine_variant: standard
    num_seeds: 5
    dataset:
      kind: cifar10_bin     # or synthetic
      path: /data/cifar-10-batches-bin
      train_cap: 5000
      test_cap: 1000

Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from ..batchnorm import DEFAULT_EPS, DEFAULT_MOMENTUM, Variant
from ..nn import INPUT_NORM_MODES, LayerSpec


@dataclass
class DatasetConfig:
    kind: str = "synthetic"
    path: str | None = None
    train_cap: int | None = 5000
    test_cap: int | None = 1000
    # synthetic generator only
    num_classes: int = 10
    image_shape: tuple[int, ...] = (3, 32, 32)
    noise_std: float = 1.0
    # seeds the synthetic data and the validation split; shared by all runs
    data_seed: int = 0

    def __post_init__(self):
        if self.kind not in ("synthetic", "cifar10_bin"):
            raise ValueError(f"dataset kind must be synthetic or cifar10_bin, got {self.kind!r}")
        self.image_shape = tuple(int(s) for s in self.image_shape)


@dataclass
class ExperimentConfig:
    label: str = "ours"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    gamma_init: float = 0.1
    c: float = 100.0
    base_lr: float = 0.1
    epochs: int = 20
    batch_size: int = 128
    momentum: float = 0.9
    weight_decay: float = 1e-4
    input_norm: str = "bn"
    affine_variant: str = "standard"
    num_seeds: int = 15
    seeds: list[int] | None = None
    architecture: str | list = "tiny_bn_net"
    val_fraction: float = 0.1
    augment: bool = True
    bn_eps: float = DEFAULT_EPS
    bn_momentum: float = DEFAULT_MOMENTUM
    # caps the number of training batches per epoch (smoke runs)
    max_batches: int | None = None

    def __post_init__(self):
        if isinstance(self.dataset, dict):
            self.dataset = DatasetConfig(**self.dataset)
        if not 0 < self.gamma_init <= 1:
            raise ValueError(f"gamma_init must lie in (0, 1], got {self.gamma_init}")
        if self.c < 1:
            raise ValueError(f"c must be >= 1, got {self.c}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 for BN training")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.input_norm not in INPUT_NORM_MODES:
            raise ValueError(f"input_norm must be one of {INPUT_NORM_MODES}")
        Variant(self.affine_variant)
        if self.seeds is not None:
            self.seeds = [int(s) for s in self.seeds]
        if not isinstance(self.architecture, str):
            self.architecture = [s if isinstance(s, LayerSpec) else LayerSpec.from_dict(s)
                                 for s in self.architecture]

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["dataset"]["image_shape"] = list(self.dataset.image_shape)
        if not isinstance(self.architecture, str):
            d["architecture"] = [s.to_dict() for s in self.architecture]
        return d

    def replace(self, **changes) -> "ExperimentConfig":
        ds_changes = changes.pop("dataset", None) or {}
        d = self.to_dict()
        d.update(changes)
        d["dataset"].update(ds_changes)
        return ExperimentConfig(**d)


def config_hash(cfg: ExperimentConfig) -> str:
    """Hash of every setting that affects a run (label and seed list excluded)."""
    d = cfg.to_dict()
    for k in ("label", "seeds", "num_seeds"):
        d.pop(k)
    blob = json.dumps(d, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def load_config(path: str | Path) -> ExperimentConfig:
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: top level must be a mapping")
    return ExperimentConfig(**data)


def base_config(cfg: ExperimentConfig) -> ExperimentConfig:
    """The same experiment with default BN settings (gamma = 1, c = 1)."""
    return cfg.replace(label="BASE", gamma_init=1.0, c=1.0)
