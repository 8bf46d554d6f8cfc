"""Dataclass configs, JSON (de)serialization with field-path validation, and shipped presets."""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .nn_core import ConfigError


@dataclass
class MixerConfig:
    kind: str = "mlp"
    hidden_ratio: int = 4
    bits: int = 8
    widths: list = field(default_factory=lambda: [768, 192])
    fan_in: int = 6
    efd_mode: str = "global"
    latent_lr_mult: float = 10.0
    encoded_bits: int = 4
    per_channel: bool = False

    def validate(self, dim: int, path: str = "model.mixer"):
        if self.kind not in ("mlp", "lut"):
            raise ConfigError(f"kind must be 'mlp' or 'lut', got {self.kind!r}", f"{path}.kind")
        if self.kind == "mlp":
            if self.hidden_ratio < 1:
                raise ConfigError("hidden_ratio must be >= 1", f"{path}.hidden_ratio")
            return
        if self.bits < 1:
            raise ConfigError("bits must be >= 1", f"{path}.bits")
        if not self.widths or any(int(w) < 1 for w in self.widths):
            raise ConfigError("widths must be a non-empty list of positive ints", f"{path}.widths")
        if not 1 <= self.fan_in <= 6:
            raise ConfigError("fan_in must be in 1..6", f"{path}.fan_in")
        widths_in = [dim * self.bits] + list(self.widths[:-1])
        for k, w in enumerate(widths_in):
            if w < self.fan_in:
                raise ConfigError(f"layer {k} input width {w} < fan_in", f"{path}.widths")
        if self.efd_mode not in ("global", "local"):
            raise ConfigError("efd_mode must be 'global' or 'local'", f"{path}.efd_mode")
        if not 2 <= self.encoded_bits <= 8:
            raise ConfigError("encoded_bits must be in 2..8", f"{path}.encoded_bits")


@dataclass
class ModelConfig:
    image_size: int = 224
    patch_size: int = 16
    channels: int = 3
    dim: int = 192
    heads: int = 3
    depth: int = 12
    num_classes: int = 10
    ln_eps: float = 1e-6
    mixer: MixerConfig = field(default_factory=MixerConfig)

    @property
    def tokens(self) -> int:
        return (self.image_size // self.patch_size) ** 2 + 1

    def validate(self, path: str = "model"):
        for name in ("image_size", "patch_size", "channels", "dim", "heads", "num_classes"):
            if getattr(self, name) < 1:
                raise ConfigError("must be >= 1", f"{path}.{name}")
        if self.depth < 0:
            raise ConfigError("must be >= 0", f"{path}.depth")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size "
                              f"{self.patch_size}", f"{path}.patch_size")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}", f"{path}.heads")
        self.mixer.validate(self.dim, f"{path}.mixer")


@dataclass
class OptimConfig:
    kind: str = "adamw"
    lr: float = 5e-4
    min_lr: float = 1e-5
    weight_decay: float = 0.05
    betas: list = field(default_factory=lambda: [0.9, 0.999])
    momentum: float = 0.9
    warmup_epochs: float = 1.0
    batch_size: int = 128
    epochs: int = 30

    def validate(self, path: str = "optim"):
        if self.kind not in ("adamw", "sgd"):
            raise ConfigError("kind must be 'adamw' or 'sgd'", f"{path}.kind")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0", f"{path}.lr")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1", f"{path}.batch_size")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0", f"{path}.epochs")


@dataclass
class HwConfig:
    P: int = 32
    clock_mhz: float = 200.0
    nonlinear_lanes: int = 0  # 0 means one lane per channel (D lanes)

    def validate(self, path: str = "hw"):
        if self.P < 1:
            raise ConfigError("P must be >= 1", f"{path}.P")
        if self.clock_mhz <= 0:
            raise ConfigError("clock_mhz must be > 0", f"{path}.clock_mhz")
        if self.nonlinear_lanes < 0:
            raise ConfigError("nonlinear_lanes must be >= 0", f"{path}.nonlinear_lanes")


@dataclass
class DataConfig:
    name: str = "mnist"
    root: str = ""
    augment: bool = False
    resize: int = 0
    calib_samples: int = 512
    train_subset: int = 0

    def validate(self, path: str = "data"):
        if self.name not in ("mnist", "cifar10", "cifar100"):
            raise ConfigError(f"unknown dataset {self.name!r}", f"{path}.name")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    hw: HwConfig = field(default_factory=HwConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0
    output_dir: str = "runs/default"

    def validate(self):
        self.model.validate()
        self.optim.validate()
        self.hw.validate()
        self.data.validate()
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _coerce(tp, value, path):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError("expected an object", path)
        return from_dict(tp, value, path)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"expected bool, got {value!r}", path)
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected int, got {value!r}", path)
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected number, got {value!r}", path)
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"expected string, got {value!r}", path)
        return value
    if tp is list or origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"expected list, got {value!r}", path)
        return list(value)
    return value


def from_dict(cls, data: dict, path: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError("unknown field", f"{path}.{key}" if path else key)
    kwargs = {}
    for key, value in data.items():
        kwargs[key] = _coerce(hints[key], value, f"{path}.{key}" if path else key)
    return cls(**kwargs)


def load_run_config(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON in {path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError("top-level config must be an object")
    return from_dict(RunConfig, data).validate()


def run_config_from_dict(data: dict) -> RunConfig:
    return from_dict(RunConfig, data).validate()


def _lut(widths, **kw):
    return MixerConfig(kind="lut", widths=list(widths), **kw)


def preset(name: str) -> RunConfig:
    """Shipped configurations. ``ivit-t``/``llvit-t`` are the 224x224 D=192 geometry."""
    if name in ("tiny-mnist", "tiny-mnist-mlp"):
        mixer = MixerConfig(kind="mlp") if name.endswith("mlp") else _lut([256, 64])
        return RunConfig(
            model=ModelConfig(image_size=28, patch_size=4, channels=1, dim=64, heads=4, depth=4,
                              num_classes=10, mixer=mixer),
            optim=OptimConfig(lr=1e-3, min_lr=1e-5, weight_decay=0.05, warmup_epochs=0.5,
                              batch_size=128, epochs=5),
            data=DataConfig(name="mnist", augment=False),
            seed=7, output_dir=f"runs/{name}").validate()
    if name in ("cifar-small", "cifar-small-mlp"):
        mixer = MixerConfig(kind="mlp") if name.endswith("mlp") else _lut([384, 96])
        return RunConfig(
            model=ModelConfig(image_size=32, patch_size=4, channels=3, dim=96, heads=3, depth=6,
                              num_classes=10, mixer=mixer),
            optim=OptimConfig(lr=1e-3, epochs=30),
            data=DataConfig(name="cifar10", augment=True),
            seed=7, output_dir=f"runs/{name}").validate()
    if name in ("ivit-t", "llvit-t"):
        mixer = MixerConfig(kind="mlp") if name == "ivit-t" else _lut([768, 192])
        return RunConfig(
            model=ModelConfig(image_size=224, patch_size=16, channels=3, dim=192, heads=3, depth=12,
                              num_classes=10, mixer=mixer),
            optim=OptimConfig(epochs=300),
            data=DataConfig(name="cifar10", augment=True, resize=224),
            seed=0, output_dir=f"runs/{name}").validate()
    raise ConfigError(f"unknown preset {name!r}")


PRESETS = ("tiny-mnist", "tiny-mnist-mlp", "cifar-small", "cifar-small-mlp", "ivit-t", "llvit-t")
