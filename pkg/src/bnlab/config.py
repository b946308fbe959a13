"""Run configuration files (YAML) and their defaults.

Defaults follow the CIFAR-10 ResNet recipe: 160 epochs, batch 128, SGD with
momentum 0.9, LR 0.1 dropping 10x at epochs 80 and 120, weight decay 1e-4,
flip + 4-pixel translation augmentation, five replicates.

Example::

    arch: {family: cifar_resnet, depth: 14, width: "1/4"}
    selector: batchnorm
    hyperparams: {epochs: 5, batch_size: 32, augment: false}
    dataset: {source: synthetic, n_train: 2000, image_size: 16, separation: 1.0}
    replicates: 3
    output_dir: runs/smoke
"""
from __future__ import annotations

import copy
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .architectures import ArchSpec, ConfigError, Network, build_plan
from .datasets import DATA_DIR_ENV, load_cifar10, synthetic_splits
from .rng import Prng
from .trainability import GroupSelector, select
from .training import Hyperparams

SYNTHETIC_DEFAULTS = {"classes": 10, "n_train": 2000, "n_test": 1000, "image_size": 16, "separation": 1.0,
                      "clusters_per_class": 2, "noise": 0.2, "seed": 0}


@dataclass
class RunConfig:
    arch: ArchSpec = field(default_factory=ArchSpec)
    selector: str = "batchnorm"
    hyperparams: Hyperparams = field(default_factory=Hyperparams)
    dataset: dict = field(default_factory=lambda: {"source": "cifar10", "path": None})
    replicates: int = 5
    output_dir: str = "runs/default"

    def validate(self) -> "RunConfig":
        build_plan(self.arch)
        GroupSelector.parse(self.selector)
        src = self.dataset.get("source")
        if src == "synthetic":
            unknown = set(self.dataset) - set(SYNTHETIC_DEFAULTS) - {"source"}
            if unknown:
                raise ConfigError(f"unknown synthetic dataset fields {sorted(unknown)}")
            for k, v in SYNTHETIC_DEFAULTS.items():
                self.dataset.setdefault(k, v)
            if self.dataset["n_train"] % self.dataset["classes"] or self.dataset["n_test"] % self.dataset["classes"]:
                raise ConfigError("synthetic n_train and n_test must be divisible by classes")
        elif src != "cifar10":
            raise ConfigError(f"dataset source must be 'cifar10' or 'synthetic', got {src!r}")
        if self.replicates < 1:
            raise ConfigError("replicates must be >= 1")
        return self

    def hyperparams_for(self, offset: int) -> Hyperparams:
        hp = copy.deepcopy(self.hyperparams)
        hp.seeds = tuple(s + offset for s in hp.seeds)
        return hp

    def to_dict(self) -> dict:
        a = self.arch.to_dict()
        return {
            "arch": {"family": a["family"], "depth": a["depth"], "width": a["width_scale"],
                     "feature_init": a["feature_init"], "bn_init": a["bn_init"]},
            "selector": self.selector,
            "hyperparams": self.hyperparams.to_dict(),
            "dataset": dict(self.dataset),
            "replicates": self.replicates,
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d or {})
        unknown = set(d) - {"arch", "selector", "hyperparams", "dataset", "replicates", "output_dir"}
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}")
        try:
            arch = dict(d.get("arch") or {})
            if "width" in arch:
                arch["width_scale"] = arch.pop("width")
            spec = ArchSpec(**arch)
            hp = dict(d.get("hyperparams") or {})
            hyper = Hyperparams(**hp)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        ds = dict(d.get("dataset") or {"source": "cifar10", "path": None})
        cfg = cls(spec, str(d.get("selector", "batchnorm")), hyper, ds, int(d.get("replicates", 5)),
                  str(d.get("output_dir", "runs/default")))
        return cfg.validate()


def load_config(path: str | os.PathLike) -> RunConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return RunConfig.from_dict(raw or {})


def load_dataset(spec: dict):
    if spec.get("source") == "synthetic":
        s = {**SYNTHETIC_DEFAULTS, **{k: v for k, v in spec.items() if k != "source"}}
        return synthetic_splits(**s)
    return load_cifar10(spec.get("path") or os.environ.get(DATA_DIR_ENV))


def prepare_run(config: RunConfig, hp: Hyperparams | None = None):
    hp = hp or config.hyperparams
    net = Network(build_plan(config.arch), Prng(hp.seeds[0]))
    mask = select(net, config.selector, seed=hp.mask_seed)
    return net, mask, load_dataset(config.dataset)
