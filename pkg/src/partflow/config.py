"""Run configuration: one flat record covering data, model, and training knobs.

The JSON on disk must contain only known keys; unknown keys are rejected so a
typo cannot silently fall back to a default.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError

MAX_SLOT_CAPACITY = 16


@dataclass
class TrainConfig:
    seed: int = 0

    # slot / latent geometry
    p_max: int = 8
    k_tokens: int = 8
    c_dim: int = 32
    m_protos: int = 12
    d_feat: int = 128

    # synthetic data
    points_per_part: int = 256
    render_size: int = 32
    min_parts: int = 2
    max_parts: int = 6
    iou_cap: float = 0.1

    # loss weights and gating
    beta: float = 0.1
    tau: float = 0.5
    lambda_ce: float = 1.0
    lambda_count: float = 0.1
    lambda_ent: float = 0.01
    lambda_flow: float = 1.0

    # optimization
    lr_stage0: float = 1e-3
    lr_stage1: float = 1e-3
    lr_stage2: float = 3e-4
    epochs_stage0: int = 50
    epochs_stage1: int = 30
    epochs_stage2: int = 80
    batch_size: int = 32
    codec_noise_std: float = 0.01

    # backbone
    backbone_blocks: int = 4
    backbone_hidden: int = 128
    backbone_heads: int = 4
    freeze_backbone_lower: bool = False

    # sampling
    sample_steps: int = 32

    # ablation toggles
    disable_gate: bool = False
    disable_bank: bool = False
    disable_warmup: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        positive = [
            "p_max", "k_tokens", "c_dim", "m_protos", "d_feat",
            "points_per_part", "render_size", "min_parts", "max_parts",
            "batch_size", "sample_steps",
            "backbone_blocks", "backbone_hidden", "backbone_heads",
        ]
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        nonneg = [
            "beta", "lambda_ce", "lambda_count", "lambda_ent", "lambda_flow",
            "lr_stage0", "lr_stage1", "lr_stage2",
            "epochs_stage0", "epochs_stage1", "epochs_stage2",
            "codec_noise_std",
        ]
        for name in nonneg:
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.p_max > MAX_SLOT_CAPACITY:
            raise ConfigError(f"p_max must be <= {MAX_SLOT_CAPACITY}, got {self.p_max}")
        if self.min_parts > self.max_parts:
            raise ConfigError("min_parts must be <= max_parts")
        if self.max_parts > self.p_max:
            raise ConfigError("max_parts must be <= p_max")
        if not 0.0 < self.tau < 1.0:
            raise ConfigError(f"tau must lie in (0, 1), got {self.tau}")
        if not 0.0 < self.iou_cap <= 1.0:
            raise ConfigError(f"iou_cap must lie in (0, 1], got {self.iou_cap}")
        if self.backbone_hidden % self.backbone_heads != 0:
            raise ConfigError("backbone_hidden must be divisible by backbone_heads")
        if self.backbone_hidden % 2 != 0:
            raise ConfigError("backbone_hidden must be even (sinusoidal time embedding)")
        for name in ("disable_gate", "disable_bank", "disable_warmup",
                     "freeze_backbone_lower"):
            if not isinstance(getattr(self, name), bool):
                raise ConfigError(f"{name} must be a boolean")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**raw)

    def save(self, path: str | Path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            raw = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config file must contain a JSON object")
        return cls.from_dict(raw)
