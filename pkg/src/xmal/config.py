"""Configuration dataclasses and the JSON config-file schema.

All dimensions default to desk scale and may be raised toward production
values (d_global 512, c_regional 256, d_text 768, d_shared 256).
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


@dataclass
class ModelConfig:
    image_size: int = 112          # H = W of training renders
    d_global: int = 64             # global image feature length
    c_regional: int = 32           # channels of the 14x14 regional map
    region_grid: int = 14          # fixed spatial grid (196 regions)
    d_text: int = 96               # token feature width of the text encoder
    d_shared: int = 32             # shared multimodal space
    d_fused: int = 64              # fused embedding length
    t_max: int = 24                # tokens per caption incl. leading class token
    vocab_size: int = 0            # filled in after the vocabulary is built
    text_layers: int = 2
    text_heads: int = 4
    fusion_heads: int = 4

    def validate(self) -> None:
        if self.image_size < 28:
            raise ConfigError("image_size must be >= 28")
        if self.region_grid != 14:
            raise ConfigError("region grid is fixed at 14x14")
        if self.t_max < 2 or self.t_max > 64:
            raise ConfigError("t_max must be in [2, 64]")
        if self.d_shared % self.fusion_heads != 0:
            raise ConfigError("d_shared must be divisible by fusion_heads")
        if self.d_text % self.text_heads != 0:
            raise ConfigError("d_text must be divisible by text_heads")
        for name in ("d_global", "c_regional", "d_text", "d_shared", "d_fused"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    @property
    def n_regions(self) -> int:
        return self.region_grid * self.region_grid


@dataclass
class LossConfig:
    # weighted total = lambda_word_region * word-region
    #                + lambda_identity    * identity
    #                + lambda_caption_image * caption-image
    #                + lambda_intra_modal * intra-modal
    lambda_identity: float = 100.0
    lambda_caption_image: float = 2.0
    lambda_intra_modal: float = 1.0
    lambda_word_region: float = 1.0
    tau_regions: float = 0.25      # region-attention sharpness
    tau_match: float = 0.2         # smooth-max sharpness of the matching score
    tau_pairs: float = 0.1         # batch softmax of the word-region loss
    tau_init: float = 0.07         # initial value of the learnable temperature
    tau_min: float = 0.01
    tau_max: float = 1.0
    share_temperature: bool = True  # one learnable tau for both InfoNCE losses
    margin: float = 0.5            # additive angular margin
    scale: float = 30.0            # logit scale of the identity head

    def validate(self) -> None:
        for name in ("lambda_identity", "lambda_caption_image",
                     "lambda_intra_modal", "lambda_word_region"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        for name in ("tau_regions", "tau_match", "tau_pairs", "tau_init"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not (0 < self.tau_min <= self.tau_init <= self.tau_max):
            raise ConfigError("need 0 < tau_min <= tau_init <= tau_max")


@dataclass
class Stage1Config:
    epochs: int = 20
    batch_size: int = 16
    text_lr: float = 1e-3
    text_weight_decay: float = 0.01
    proj_lr: float = 1e-3
    grad_clip: float = 5.0
    token_dropout: float = 0.1     # caption-view fallback when only one caption exists

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError("stage1.epochs must be >= 1")
        if self.text_lr <= 0 or self.proj_lr <= 0:
            raise ConfigError("stage1 learning rates must be positive")
        if self.batch_size < 1:
            raise ConfigError("stage1.batch_size must be >= 1")


@dataclass
class Stage2Config:
    epochs: int = 36
    batch_size: int = 16
    lr: float = 0.1
    weight_decay: float = 1e-4
    momentum: float = 0.9
    milestones: tuple[int, ...] = (6, 24)  # lr / 10 after these epochs
    fusion: str = "tgfr"                   # "tgfr" (attention fusion) or "flf" (linear)

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError("stage2.epochs must be >= 1")
        if self.lr <= 0:
            raise ConfigError("stage2.lr must be positive")
        if any(m >= self.epochs for m in self.milestones):
            raise ConfigError("stage2 milestones must be < epochs")
        if self.fusion not in ("tgfr", "flf"):
            raise ConfigError("stage2.fusion must be 'tgfr' or 'flf'")


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    seed: int = 0
    deterministic: bool = False
    device: str = "cpu"

    def validate(self) -> None:
        self.model.validate()
        self.loss.validate()
        self.stage1.validate()
        self.stage2.validate()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        cfg = cls()
        for section in ("model", "loss", "stage1", "stage2"):
            sub = raw.get(section, {})
            target = getattr(cfg, section)
            known = {f.name for f in dataclasses.fields(target)}
            unknown = set(sub) - known
            if unknown:
                raise ConfigError(f"unknown {section} keys: {sorted(unknown)}")
            for key, value in sub.items():
                if key == "milestones":
                    value = tuple(value)
                setattr(target, key, value)
        for key in ("seed", "deterministic", "device"):
            if key in raw:
                setattr(cfg, key, raw[key])
        extra = set(raw) - {"model", "loss", "stage1", "stage2",
                            "seed", "deterministic", "device"}
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def digest(self) -> str:
        """Stable hash of the full configuration, used to guard resumes."""
        canon = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canon.encode()).hexdigest()[:16]
