"""Experiment configuration read from TOML with strict key checking.

Every section and key is optional; missing ones take the defaults below.
Unknown sections or keys raise :class:`ConfigError` naming the key.

.. code-block:: toml

    [dataset]
    kind = "mnist"            # "mnist" or "blobs"
    images = "data/train-images-idx3-ubyte"
    labels = "data/train-labels-idx1-ubyte"
    test_images = ""          # empty: hold out n_test samples of the train files
    test_labels = ""
    n_train = 10000
    n_test = 2000
    split_seed = 0
    seed = 0                  # blobs only
    n = 2000
    classes = 4
    dim = 16
    spread = 0.5

    [model]
    kind = "conv"             # "mlp", "conv" or "vit"
    hidden = [100, 100]
    channels = [8, 8, 16, 16]
    patch = 7
    layers = 6
    embed_dim = 128
    heads = 4
    mlp_ratio = 4
    attention = "l2"          # "l2" or "dp"

    [pretrain]
    epochs = 20
    batch_size = 128
    lr = 0.02
    momentum = 0.9
    seed = 0

    [constrain]
    beta = 0.1
    eta = 0.01
    lam = 1.2
    dr_epochs = 5
    proj_epochs = 2
    T = 100
    trace_samples = 1000      # 0: all training samples
    workers = 1
    finetune_epochs = 10
    finetune_lr = 0.01
    finetune_momentum = 0.0
    finetune_batch = 128
    gelu = "computed"         # "computed" or "rounded"

    [adapt]
    epochs = 50
    lr = 0.01

    [evaluate]
    eps = 1.58
    pgd_steps = 50
    restarts = 1
    n_pairs = 1000
    samples = 0               # 0: the whole test set

    [output]
    dir = "runs"
    report = "report.csv"
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Union, get_args, get_origin

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .constrain import ConstrainConfig

__all__ = [
    "ConfigError",
    "DatasetConfig",
    "ModelConfig",
    "PretrainConfig",
    "ConstrainSection",
    "AdaptConfig",
    "EvaluateConfig",
    "OutputConfig",
    "ExperimentConfig",
    "load_config",
    "parse_config",
]


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    kind: str = "mnist"
    images: str = "data/train-images-idx3-ubyte"
    labels: str = "data/train-labels-idx1-ubyte"
    test_images: str = ""
    test_labels: str = ""
    n_train: int = 10000
    n_test: int = 2000
    split_seed: int = 0
    seed: int = 0
    n: int = 2000
    classes: int = 4
    dim: int = 16
    spread: float = 0.5

    def validate(self):
        if self.kind not in ("mnist", "blobs"):
            raise ConfigError(f"dataset.kind: unknown dataset {self.kind!r}")
        if self.n_train < 1 or self.n_test < 1:
            raise ConfigError("dataset.n_train and dataset.n_test must be >= 1")


@dataclass
class ModelConfig:
    kind: str = "conv"
    hidden: list = field(default_factory=lambda: [100, 100])
    channels: list = field(default_factory=lambda: [8, 8, 16, 16])
    patch: int = 7
    layers: int = 6
    embed_dim: int = 128
    heads: int = 4
    mlp_ratio: int = 4
    attention: str = "l2"

    def validate(self):
        if self.kind not in ("mlp", "conv", "vit"):
            raise ConfigError(f"model.kind: unknown model {self.kind!r}")
        if self.attention not in ("l2", "dp"):
            raise ConfigError(f"model.attention: unknown attention {self.attention!r}")


@dataclass
class PretrainConfig:
    epochs: int = 20
    batch_size: int = 128
    lr: float = 0.02
    momentum: float = 0.9
    seed: int = 0


@dataclass
class ConstrainSection:
    beta: float = 0.1
    eta: float = 0.01
    lam: float = 1.2
    dr_epochs: int = 5
    proj_epochs: int = 2
    T: int = 100
    trace_samples: int = 1000
    workers: int = 1
    finetune_epochs: int = 10
    finetune_lr: float = 0.01
    finetune_momentum: float = 0.0
    finetune_batch: int = 128
    gelu: str = "computed"

    def validate(self):
        if self.gelu not in ("computed", "rounded"):
            raise ConfigError(f"constrain.gelu: expected 'computed' or 'rounded', got {self.gelu!r}")
        try:
            self.algorithm()
        except ValueError as exc:
            raise ConfigError(f"constrain: {exc}") from None

    def algorithm(self) -> ConstrainConfig:
        return ConstrainConfig(beta=self.beta, eta=self.eta, lam=self.lam, dr_epochs=self.dr_epochs,
                               proj_epochs=self.proj_epochs, workers=self.workers)


@dataclass
class AdaptConfig:
    epochs: int = 50
    lr: float = 0.01


@dataclass
class EvaluateConfig:
    eps: float = 1.58
    pgd_steps: int = 50
    restarts: int = 1
    n_pairs: int = 1000
    samples: int = 0


@dataclass
class OutputConfig:
    dir: str = "runs"
    report: str = "report.csv"


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    constrain: ConstrainSection = field(default_factory=ConstrainSection)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    evaluate: EvaluateConfig = field(default_factory=EvaluateConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def validate(self) -> "ExperimentConfig":
        for f in fields(self):
            section = getattr(self, f.name)
            if hasattr(section, "validate"):
                section.validate()
        return self

    def out_path(self, name: str) -> Path:
        return Path(self.output.dir) / name


def _coerce(section: str, key: str, value, typ):
    where = f"{section}.{key}"
    if typ is float or typ == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if typ is int or typ == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if typ is str or typ == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if typ is list or typ == "list" or get_origin(typ) is list:
        if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{where}: expected a list of integers, got {value!r}")
        return list(value)
    raise ConfigError(f"{where}: unsupported field type {typ!r}")


def parse_config(data: Union[dict, str]) -> ExperimentConfig:
    """Build a validated config from a TOML string or an already parsed dict."""
    if isinstance(data, str):
        try:
            data = tomllib.loads(data)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"malformed config: {exc}") from None
    cfg = ExperimentConfig()
    sections = {f.name: f for f in fields(cfg)}
    for name, values in data.items():
        if name not in sections:
            raise ConfigError(f"unknown section {name!r}")
        if not isinstance(values, dict):
            raise ConfigError(f"section {name!r} must be a table")
        section = getattr(cfg, name)
        known = {f.name: f.type for f in fields(section)}
        for key, value in values.items():
            if key not in known:
                raise ConfigError(f"unknown key {name}.{key!s}")
            setattr(section, key, _coerce(name, key, value, known[key]))
    return cfg.validate()


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"))
