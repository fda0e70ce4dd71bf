"""Line-oriented ``key = value`` configuration.

Blank lines and ``#`` comments are ignored. Unknown keys are rejected. Every
key has a default, so an empty file yields the default desk configuration.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    # images and base tokenizer
    image_size: int = 32
    patch: int = 4
    base_dim: int = 128
    base_codes: int = 512
    base_depth: int = 2
    base_heads: int = 4
    # latent distillation
    d_model: int = 64
    heads: int = 4
    enc_depth: int = 3
    dec_depth: int = 3
    mlp_ratio: int = 2
    factor_dim: int = 12
    latent_codes: int = 256
    atomic: int = 8
    iterations: int = 8
    # optimisation
    stage: str = "stage1"
    seed: int = 0
    batch_size: int = 8
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.95
    base_steps: int = 600
    base_batch_size: int = 16
    base_lr: float = 1e-3
    stage1_steps: int = 3000
    stage2_steps: int = 2000
    stage2_base_lr_scale: float = 0.1
    # loss weights
    ce_weight: float = 1.0
    pixel_weight: float = 1.0
    commit_beta: float = 0.25
    codebook_weight: float = 1.0
    adversarial_weight: float = 0.0
    label_smoothing: float = 0.1
    # behaviour
    halting: bool = True
    revive_every: int = 200
    latent_revive_every: int = 100
    quant_warmup: int = 300
    dataset: str = ""
    n_train: int = 500
    log_every: int = 100

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    @property
    def n_image_tokens(self) -> int:
        return self.grid * self.grid

    @property
    def max_tokens(self) -> int:
        return self.atomic * self.iterations

    def validate(self) -> "TrainConfig":
        positive = ["image_size", "patch", "base_dim", "base_codes", "base_depth", "base_heads",
                    "d_model", "heads", "enc_depth", "dec_depth", "mlp_ratio", "factor_dim",
                    "latent_codes", "atomic", "iterations", "batch_size", "base_batch_size", "base_steps",
                    "stage1_steps", "stage2_steps", "revive_every", "latent_revive_every", "n_train", "log_every"]
        for key in positive:
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1, got {getattr(self, key)}")
        if self.quant_warmup < 0:
            raise ConfigError(f"quant_warmup must be >= 0, got {self.quant_warmup}")
        for key in ["lr", "base_lr", "stage2_base_lr_scale", "ce_weight", "pixel_weight", "commit_beta",
                    "codebook_weight", "adversarial_weight"]:
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be >= 0, got {getattr(self, key)}")
        if self.image_size % self.patch:
            raise ConfigError(f"patch {self.patch} does not divide image_size {self.image_size}")
        if self.d_model % self.heads or self.base_dim % self.base_heads:
            raise ConfigError("model width must be divisible by the head count")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("label_smoothing must lie in [0, 1)")
        if self.stage not in ("base", "stage1", "stage2"):
            raise ConfigError(f"unknown stage {self.stage!r}")
        return self

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes).validate()

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _convert(key: str, raw: str, lineno: int):
    kind = _TYPES[key]
    try:
        if kind == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"line {lineno}: cannot read {raw!r} as {kind} for key {key!r}") from None


def parse_config_text(text: str, base: TrainConfig | None = None) -> TrainConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _convert(key, raw, lineno)
    cfg = dataclasses.replace(base or TrainConfig(), **values)
    return cfg.validate()


def parse_config(path: str | Path) -> TrainConfig:
    return parse_config_text(Path(path).read_text())
