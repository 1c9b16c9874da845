"""Model and training hyperparameters with their production-scale defaults."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .errors import ConfigError


@dataclass(frozen=True)
class ModelConfig:
    """Every architectural knob of the cross-modal transformer.

    Defaults correspond to the full-scale setup (512-wide model over
    stacked 200-dim audio, 4096-dim visual and 300-dim text embedding
    inputs); tests and the synthetic pipeline override them downward.
    """

    vocab_size: int
    model_dim: int = 512
    encoder_layers: int = 4
    attention_heads: int = 4
    feedforward_dim: int = 200
    audio_input_dim: int = 200
    visual_input_dim: int = 4096
    text_embedding_dim: int = 300
    fusion_weights: tuple[float, float, float] = (0.33, 0.33, 0.33)
    num_emotions: int = 6
    mask_fraction: float = 0.15
    layer_norm_eps: float = 1e-5
    dropout: float = 0.0
    max_positions: int = 1024
    # "value": residual into the first LayerNorm comes from the value
    # projection (query projection in cross-modal blocks). "input": the
    # standard variant, residual from the block input.
    residual_source: str = "value"

    def __post_init__(self):
        if self.vocab_size < 1:
            raise ConfigError("vocab_size must be positive")
        if self.model_dim % self.attention_heads != 0:
            raise ConfigError(
                f"model_dim {self.model_dim} not divisible by "
                f"attention_heads {self.attention_heads}"
            )
        if not 0.0 < self.mask_fraction < 1.0:
            raise ConfigError("mask_fraction must lie in (0, 1)")
        if len(self.fusion_weights) != 3 or any(w < 0 for w in self.fusion_weights):
            raise ConfigError("fusion_weights must be three non-negative scalars")
        if self.layer_norm_eps <= 0:
            raise ConfigError("layer_norm_eps must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.residual_source not in ("value", "input"):
            raise ConfigError("residual_source must be 'value' or 'input'")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.attention_heads

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["fusion_weights"] = list(self.fusion_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        d = dict(d)
        if "fusion_weights" in d:
            d["fusion_weights"] = tuple(d["fusion_weights"])
        return cls(**d)


@dataclass(frozen=True)
class TrainParams:
    """Optimization settings shared by pre-training and fine-tuning."""

    epochs: int = 20
    batch_size: int = 8
    warmup_steps: int = 4000
    lr_scale: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-9
    grad_clip: float = 0.0  # 0 disables clipping
    k_noise: int = 64
    holdout_fraction: float = 0.05
    runs: int = 10

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.warmup_steps < 1:
            raise ConfigError("warmup_steps must be positive")
        if self.k_noise < 1:
            raise ConfigError("k_noise must be at least 1")
        if not 0.0 < self.holdout_fraction < 1.0:
            raise ConfigError("holdout_fraction must lie in (0, 1)")
        if self.runs < 1:
            raise ConfigError("runs must be at least 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainParams":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**d)


def load_config_file(path) -> tuple[dict, dict]:
    """Read a JSON config file with optional "model" and "train" sections."""
    with open(path, "r", encoding="utf-8") as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}")
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    model = raw.get("model", {})
    train = raw.get("train", {})
    extra = set(raw) - {"model", "train"}
    if extra:
        raise ConfigError(f"config file {path}: unknown sections {sorted(extra)}")
    return model, train
