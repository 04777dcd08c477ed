"""
Experiment configuration: one JSON document, strict about unknown keys.

Each block is validated by the module that owns it (``AttackConfig``,
``TrainConfig``, ``DistillConfig``, ``ModelSpec``).
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .attacks import AttackConfig
from .distill import STRATEGIES, DistillConfig
from .errors import ConfigError
from .nn import ModelSpec
from .training import TrainConfig

SEED_ENV = "ADVTRUST_SEED"


def _strict(cls, doc, where):
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected an object, got {type(doc).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**doc)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


@dataclass
class DatasetBlock:
    kind: str = "synth_shapes"
    classes: int = 3
    n_per_class: int = 167
    side: int = 16
    lf_strength: float = 0.4
    hf_strength: float = 0.6
    noise: float = 0.2
    splits: list = field(default_factory=lambda: [0.6, 0.2, 0.2])
    dir: str | None = None
    train_per_class: int | None = None
    test_per_class: int | None = None

    def __post_init__(self):
        if self.kind not in ("synth_shapes", "cifar10"):
            raise ConfigError(f"dataset.kind must be synth_shapes or cifar10, got {self.kind!r}")
        if self.kind == "cifar10" and not self.dir:
            raise ConfigError("dataset.dir is required for cifar10")
        if len(self.splits) != 3:
            raise ConfigError("dataset.splits needs three fractions")


@dataclass
class ModelBlock:
    preset: str | None = "small_cnn"
    layers: list | None = None
    width: int = 8
    hidden: int = 32

    def __post_init__(self):
        if self.layers is None and self.preset not in ("small_cnn", "tiny_cnn", "mlp"):
            raise ConfigError(f"model.preset must be small_cnn, tiny_cnn or mlp, got {self.preset!r}")

    def build(self, input_shape, num_classes):
        c, h, w = input_shape
        if self.layers is not None:
            return ModelSpec(tuple(self.layers), input_shape, num_classes)
        k = self.width
        if self.preset == "small_cnn":
            layers = [
                {"kind": "conv2d", "in_ch": c, "out_ch": k, "kernel": 3, "pad": 1},
                {"kind": "relu"},
                {"kind": "maxpool2d", "k": 2},
                {"kind": "conv2d", "in_ch": k, "out_ch": 2 * k, "kernel": 3, "pad": 1},
                {"kind": "relu"},
                {"kind": "maxpool2d", "k": 2},
                {"kind": "flatten"},
                {"kind": "dense", "in": 2 * k * (h // 4) * (w // 4), "out": num_classes},
            ]
        elif self.preset == "tiny_cnn":
            layers = [
                {"kind": "conv2d", "in_ch": c, "out_ch": k, "kernel": 3, "pad": 1},
                {"kind": "relu"},
                {"kind": "maxpool2d", "k": 2},
                {"kind": "flatten"},
                {"kind": "dense", "in": k * (h // 2) * (w // 2), "out": num_classes},
            ]
        else:
            layers = [
                {"kind": "flatten"},
                {"kind": "dense", "in": c * h * w, "out": self.hidden},
                {"kind": "relu"},
                {"kind": "dense", "in": self.hidden, "out": num_classes},
            ]
        return ModelSpec(tuple(layers), input_shape, num_classes)


@dataclass
class AttackBlock:
    pgd: dict = field(default_factory=dict)
    deepfool: dict = field(default_factory=dict)
    adversarial_training: dict = field(default_factory=lambda: {"max_steps": 7})
    kinds: list = field(default_factory=lambda: ["pgd", "deepfool"])
    model_file: str = "model_robust.advt"

    def __post_init__(self):
        bad = [k for k in self.kinds if k not in ("pgd", "deepfool")]
        if bad or not self.kinds:
            raise ConfigError(f"attack.kinds must list pgd and/or deepfool, got {self.kinds}")
        self.pgd_cfg = _attack(self.pgd, "pgd", "attack.pgd")
        self.deepfool_cfg = _attack(self.deepfool, "deepfool", "attack.deepfool")
        self.adv_cfg = _attack(self.adversarial_training, "pgd", "attack.adversarial_training")

    def for_kind(self, kind):
        return self.pgd_cfg if kind == "pgd" else self.deepfool_cfg


def _attack(doc, kind, where):
    doc = dict(doc or {})
    if doc.get("kind", kind) != kind:
        raise ConfigError(f"{where}: kind must be {kind}")
    doc["kind"] = kind
    if kind == "deepfool":
        doc.setdefault("max_steps", 50)
    known = {f.name for f in fields(AttackConfig)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    try:
        return AttackConfig.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


@dataclass
class TrainBlock:
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 0.02
    optimizer: str = "sgd-momentum"
    momentum: float = 0.9

    def __post_init__(self):
        self.config(0)

    def config(self, seed, adversarial=None):
        return TrainConfig(
            self.epochs, self.batch_size, self.learning_rate, self.optimizer, self.momentum,
            seed, adversarial,
        )


@dataclass
class SpectralBlock:
    model_file: str = "model_robust.advt"
    correct_only: bool = False
    split: str = "test"

    def __post_init__(self):
        if self.split not in ("train", "calibration", "test"):
            raise ConfigError(f"spectral.split must be train, calibration or test, got {self.split!r}")


@dataclass
class TrustBlock:
    model_file: str = "model_robust.advt"
    ddb_attack: str = "pgd"

    def __post_init__(self):
        if self.ddb_attack not in ("pgd", "deepfool"):
            raise ConfigError(f"trust.ddb_attack must be pgd or deepfool, got {self.ddb_attack!r}")


@dataclass
class DistillBlock:
    teacher_file: str = "model_robust.advt"
    ddb_attack: str = "pgd"
    student: dict = field(default_factory=lambda: {"preset": "tiny_cnn", "width": 4})
    budgets: list = field(default_factory=lambda: [10, 20])
    strategies: list = field(default_factory=lambda: list(STRATEGIES))
    temperature: float = 8.0
    lam: float = 0.2
    epochs: int = 60
    learning_rate: float = 0.02
    batch_size: int = 16
    momentum: float = 0.9

    def __post_init__(self):
        bad = [s for s in self.strategies if s not in STRATEGIES]
        if bad or not self.strategies:
            raise ConfigError(f"distill.strategies must be drawn from {STRATEGIES}, got {self.strategies}")
        if not self.budgets:
            raise ConfigError("distill.budgets is empty")
        if self.ddb_attack not in ("pgd", "deepfool"):
            raise ConfigError(f"distill.ddb_attack must be pgd or deepfool, got {self.ddb_attack!r}")
        self.student_block = _strict(ModelBlock, self.student, "distill.student")
        for b in self.budgets:
            self.config(b, self.strategies[0], 0)

    def config(self, budget, strategy, seed):
        return DistillConfig(
            self.temperature, self.lam, budget, strategy, seed, self.epochs,
            self.learning_rate, self.batch_size, self.momentum,
        )


_BLOCKS = {
    "dataset": DatasetBlock,
    "model": ModelBlock,
    "train": TrainBlock,
    "attack": AttackBlock,
    "spectral": SpectralBlock,
    "trust": TrustBlock,
    "distill": DistillBlock,
}


@dataclass
class ExperimentConfig:
    seed: int
    output_dir: str
    dataset: DatasetBlock
    model: ModelBlock
    train: TrainBlock
    attack: AttackBlock
    spectral: SpectralBlock
    trust: TrustBlock
    distill: DistillBlock
    raw: dict

    @property
    def out(self):
        return Path(self.output_dir)

    def resolve(self, name):
        path = Path(name)
        return path if path.is_absolute() else self.out / path


def parse_config(doc, env=None):
    """Validate a config mapping; ``ADVTRUST_SEED`` in ``env`` overrides ``seed``."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    doc = copy.deepcopy(doc)
    allowed = set(_BLOCKS) | {"seed", "output_dir"}
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ConfigError(f"unknown top-level keys {unknown}")
    env = os.environ if env is None else env
    seed = doc.get("seed", 0)
    if env.get(SEED_ENV) not in (None, ""):
        try:
            seed = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer") from None
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")
    doc["seed"] = seed
    blocks = {name: _strict(cls, doc.get(name), name) for name, cls in _BLOCKS.items()}
    return ExperimentConfig(
        seed=seed, output_dir=str(doc.get("output_dir", "runs/default")), raw=doc, **blocks
    )


def load_config(path, env=None):
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from None
    return parse_config(doc, env=env)
