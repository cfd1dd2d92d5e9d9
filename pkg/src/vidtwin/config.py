"""Configuration dataclasses, validation and JSON round-tripping."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError


@dataclass
class BackboneConfig:
    hidden_c: int = 64
    layers: int = 4
    heads: int = 4
    spatial_patch: int = 4
    temporal_patch: int = 1
    mlp_ratio: float = 4.0
    frames: int = 8
    height: int = 32
    width: int = 32
    channels: int = 3
    causal_decoder: bool = True

    @property
    def grid(self) -> tuple[int, int, int]:
        """Latent (f, h, w)."""
        return (
            self.frames // self.temporal_patch,
            self.height // self.spatial_patch,
            self.width // self.spatial_patch,
        )

    def problems(self) -> list[str]:
        out = []
        if self.hidden_c % self.heads:
            out.append(f"backbone.hidden_c={self.hidden_c} not divisible by heads={self.heads}")
        if self.temporal_patch != 1:
            out.append(f"backbone.temporal_patch must be 1, got {self.temporal_patch}")
        if self.spatial_patch < 1:
            out.append(f"backbone.spatial_patch must be >= 1, got {self.spatial_patch}")
        for name in ("height", "width"):
            v = getattr(self, name)
            if self.spatial_patch >= 1 and v % self.spatial_patch:
                out.append(f"backbone.{name}={v} not divisible by spatial_patch={self.spatial_patch}")
        if min(self.frames, self.height, self.width, self.layers, self.heads) < 1:
            out.append("backbone frames/height/width/layers/heads must be positive")
        return out


STRUCTURE_MODES = ("qformer", "conv_ablation", "hidden_ablation")
DYNAMICS_MODES = ("average", "sqf_ablation")


@dataclass
class StructureConfig:
    n_q: int = 4
    d_q: int = 32
    qformer_layers: int = 2
    qformer_heads: int = 4
    d_S: int = 4
    n_down: int = 1
    mode: str = "qformer"

    def problems(self, bb: BackboneConfig) -> list[str]:
        out = []
        f, h, w = bb.grid
        if self.mode not in STRUCTURE_MODES:
            out.append(f"structure.mode={self.mode!r} not in {STRUCTURE_MODES}")
        if not 1 <= self.n_q <= f:
            out.append(f"structure.n_q={self.n_q} must lie in [1, f={f}]")
        if self.d_q % self.qformer_heads:
            out.append(f"structure.d_q={self.d_q} not divisible by qformer_heads={self.qformer_heads}")
        if self.n_down < 0:
            out.append(f"structure.n_down={self.n_down} must be >= 0")
        elif h % 2**self.n_down or w % 2**self.n_down:
            out.append(f"latent grid {h}x{w} not divisible by 2^structure.n_down={2**self.n_down}")
        if self.mode == "conv_ablation" and self.n_q >= 1 and f % self.n_q:
            out.append(f"conv_ablation needs f={f} divisible by n_q={self.n_q}")
        if min(self.d_q, self.d_S, self.qformer_layers, self.qformer_heads) < 1:
            out.append("structure d_q/d_S/qformer_layers/qformer_heads must be positive")
        return out


@dataclass
class DynamicsConfig:
    c_mid: int = 32
    n_down: int = 1
    d_D: int = 4
    mode: str = "average"
    sqf_heads: int = 4
    sqf_layers: int = 1

    def problems(self, bb: BackboneConfig) -> list[str]:
        out = []
        _, h, w = bb.grid
        if self.mode not in DYNAMICS_MODES:
            out.append(f"dynamics.mode={self.mode!r} not in {DYNAMICS_MODES}")
        if self.n_down < 1:
            out.append(f"dynamics.n_down={self.n_down} must be >= 1")
        elif h % 2**self.n_down or w % 2**self.n_down:
            out.append(f"latent grid {h}x{w} not divisible by 2^dynamics.n_down={2**self.n_down}")
        if self.d_D > self.c_mid:
            out.append(f"dynamics.d_D={self.d_D} exceeds c_mid={self.c_mid}")
        if self.mode == "sqf_ablation" and self.c_mid % self.sqf_heads:
            out.append(f"dynamics.c_mid={self.c_mid} not divisible by sqf_heads={self.sqf_heads}")
        return out


@dataclass
class LossWeights:
    lambda_p: float = 1.0
    lambda_gan: float = 0.1
    lambda_kl: float = 1e-6
    gan_start_step: int = 1000

    def problems(self) -> list[str]:
        out = []
        for k in ("lambda_p", "lambda_gan", "lambda_kl"):
            v = getattr(self, k)
            if not (v >= 0 and v != float("inf")):
                out.append(f"loss.{k}={v} must be finite and >= 0")
        if self.gan_start_step < 0:
            out.append(f"loss.gan_start_step={self.gan_start_step} must be >= 0")
        return out


@dataclass
class TrainConfig:
    lr: float = 1.6e-4
    betas: tuple[float, float] = (0.9, 0.999)
    batch: int = 4
    steps: int = 2000
    seed: int = 0
    dataset_size: int = 64
    log_every: int = 50
    use_gan: bool = True
    weights: LossWeights = field(default_factory=LossWeights)

    def problems(self) -> list[str]:
        out = self.weights.problems()
        if self.lr <= 0:
            out.append(f"train.lr={self.lr} must be positive")
        if min(self.batch, self.dataset_size) < 1 or self.steps < 0:
            out.append("train.batch/dataset_size must be >= 1 and steps >= 0")
        return out


@dataclass
class DiffusionConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    steps: int = 50
    guidance: float = 5.0
    drop_prob: float = 0.2
    patch: int = 2
    layers: int = 6
    heads: int = 8
    hidden: int = 512
    mlp_ratio: float = 4.0
    num_classes: int = 16
    class_dim: int = 256
    projection: str = "identity"
    lr: float = 1e-4
    seed: int = 0

    def problems(self) -> list[str]:
        out = []
        if self.T < 1 or not 1 <= self.steps <= self.T:
            out.append(f"diffusion steps={self.steps} must lie in [1, T={self.T}]")
        if not 0 <= self.drop_prob <= 1:
            out.append(f"diffusion.drop_prob={self.drop_prob} outside [0, 1]")
        if not 0 < self.beta_start < self.beta_end < 1:
            out.append("diffusion betas must satisfy 0 < beta_start < beta_end < 1")
        if self.hidden % self.heads:
            out.append(f"diffusion.hidden={self.hidden} not divisible by heads={self.heads}")
        if self.patch < 1:
            out.append(f"diffusion.patch={self.patch} must be >= 1")
        if self.projection not in ("identity", "orthogonal"):
            out.append(f"diffusion.projection={self.projection!r} not in (identity, orthogonal)")
        return out


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    structure: StructureConfig = field(default_factory=StructureConfig)
    dynamics: DynamicsConfig = field(default_factory=DynamicsConfig)
    single_latent: bool = False

    def problems(self) -> list[str]:
        return (
            self.backbone.problems()
            + self.structure.problems(self.backbone)
            + self.dynamics.problems(self.backbone)
        )

    def validate(self) -> "ModelConfig":
        problems = self.problems()
        if problems:
            raise ConfigError("invalid model config:\n  - " + "\n  - ".join(problems))
        return self

    def fingerprint(self) -> bytes:
        """SHA-256 over the branch configs; identifies compatible latent bundles."""
        payload = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(payload).digest()


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    seed: int = 0
    paths: dict[str, str] = field(default_factory=dict)

    def problems(self) -> list[str]:
        return self.model.problems() + self.train.problems() + self.diffusion.problems()

    def validate(self) -> "RunConfig":
        problems = self.problems()
        if problems:
            raise ConfigError("invalid run config:\n  - " + "\n  - ".join(problems))
        return self

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunConfig":
        return _build(cls, data)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        return cls.from_dict(data)


def _build(cls, data: dict[str, Any]):
    """Recursively rebuild nested dataclasses, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(f"expected an object for {cls.__name__}, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    hints = {f.name: f.type for f in dataclasses.fields(cls)}
    for name, value in data.items():
        sub = _NESTED.get((cls.__name__, name))
        if sub is not None:
            kwargs[name] = _build(sub, value)
        elif hints[name] == "tuple[float, float]":
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


_NESTED = {
    ("RunConfig", "model"): ModelConfig,
    ("RunConfig", "train"): TrainConfig,
    ("RunConfig", "diffusion"): DiffusionConfig,
    ("ModelConfig", "backbone"): BackboneConfig,
    ("ModelConfig", "structure"): StructureConfig,
    ("ModelConfig", "dynamics"): DynamicsConfig,
    ("TrainConfig", "weights"): LossWeights,
}


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``section.key=value`` overrides (values parsed as JSON, else string)."""
    data = cfg.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node, dict) or p not in node:
                raise ConfigError(f"override key {key!r} does not exist")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"override key {key!r} does not exist")
        node[parts[-1]] = value
    return RunConfig.from_dict(data)


def paper_model_config(layers: int = 16) -> ModelConfig:
    """The 224x224x16 configuration with 768-wide, 12-head backbones."""
    return ModelConfig(
        backbone=BackboneConfig(
            hidden_c=768, layers=layers, heads=12, spatial_patch=16,
            frames=16, height=224, width=224,
        ),
        structure=StructureConfig(n_q=16, d_q=64, qformer_layers=6, qformer_heads=8, d_S=4, n_down=1),
        dynamics=DynamicsConfig(c_mid=64, n_down=1, d_D=8),
    )


def desk_model_config() -> ModelConfig:
    return ModelConfig()


def tiny_model_config() -> ModelConfig:
    """Clip 3x4x8x8, hidden 16: small enough for finite-difference gradient checks."""
    return ModelConfig(
        backbone=BackboneConfig(hidden_c=16, layers=1, heads=2, spatial_patch=2, frames=4, height=8, width=8),
        structure=StructureConfig(n_q=2, d_q=8, qformer_layers=1, qformer_heads=2, d_S=2, n_down=1),
        dynamics=DynamicsConfig(c_mid=8, n_down=1, d_D=2, sqf_heads=2),
    )
