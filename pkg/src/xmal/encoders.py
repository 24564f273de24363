"""Image and text encoders.

The image encoder is a frozen feature extractor with two tap points: a
regional map on a fixed 14x14 grid from an intermediate stage, and a pooled
global vector from the final stage. The text encoder is a small trainable
transformer producing contextual per-token features. Both are desk-scale
stand-ins behind stable interfaces, so larger backbones can be dropped in.
"""
from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .config import ModelConfig
from .data import PAD_ID, TokenSequence


class EncoderNotLoadedError(RuntimeError):
    """Encoder used before weights were initialized or loaded."""


class ShapeMismatchError(ValueError):
    """Input dimensions incompatible with the encoder configuration."""


def _require_loaded(encoder: nn.Module) -> None:
    if not getattr(encoder, "loaded", False):
        raise EncoderNotLoadedError(f"{type(encoder).__name__} has no weights loaded")


class ToyImageEncoder(nn.Module):
    """Four conv blocks with stride-2 reductions; regional tap pinned to 14x14.

    The regional map comes from a 1x1 conv on the intermediate stage (the
    grid is normalized by adaptive pooling so any input >= 28px works), the
    global vector from average pooling the final stage.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.loaded = False
        self.frozen = False

        def block(c_in, c_out, stride):
            return nn.Sequential(
                nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1),
                nn.BatchNorm2d(c_out),
                nn.ReLU(),
            )

        self.stage1 = block(3, 16, 2)
        self.stage2 = block(16, 32, 2)
        self.stage3 = block(32, 64, 2)
        self.to_grid = nn.AdaptiveAvgPool2d((cfg.region_grid, cfg.region_grid))
        self.regional_tap = nn.Conv2d(64, cfg.c_regional, 1)
        self.stage4 = block(64, cfg.d_global, 2)
        self.global_pool = nn.AdaptiveAvgPool2d(1)

    @classmethod
    def create(cls, cfg: ModelConfig, seed: int) -> "ToyImageEncoder":
        """Deterministically initialized encoder, marked loaded."""
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            enc = cls(cfg)
        enc.loaded = True
        return enc

    def freeze(self) -> None:
        """Permanently freeze: no grads, batch-norm stats pinned."""
        self.requires_grad_(False)
        self.frozen = True
        self.eval()

    def train(self, mode: bool = True):
        # a frozen extractor must never re-enter training mode, or its
        # batch-norm running statistics would drift
        return super().train(mode and not self.frozen)

    def _check_input(self, x: torch.Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeMismatchError(f"expected Bx3xHxW input, got {tuple(x.shape)}")
        if x.shape[2] < 28 or x.shape[3] < 28:
            raise ShapeMismatchError("image sides must be >= 28 pixels")

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Bx3xHxW -> (B x d_global, B x c_regional x 14 x 14)."""
        _require_loaded(self)
        self._check_input(x)
        h = self.stage3(self.stage2(self.stage1(x)))
        grid = self.to_grid(h)
        regional = self.regional_tap(grid)
        pooled = self.global_pool(self.stage4(grid))
        return pooled.flatten(1), regional


class ToyTextEncoder(nn.Module):
    """Token + position embeddings followed by residual self-attention layers."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        if cfg.vocab_size < 3:
            raise ShapeMismatchError("vocab_size must be set before building the text encoder")
        self.cfg = cfg
        self.loaded = False
        self.token_embed = nn.Embedding(cfg.vocab_size, cfg.d_text)
        self.pos_embed = nn.Embedding(cfg.t_max, cfg.d_text)
        self.norms = nn.ModuleList(nn.LayerNorm(cfg.d_text) for _ in range(cfg.text_layers))
        self.attn = nn.ModuleList(
            nn.MultiheadAttention(cfg.d_text, cfg.text_heads, batch_first=True)
            for _ in range(cfg.text_layers)
        )

    @classmethod
    def create(cls, cfg: ModelConfig, seed: int) -> "ToyTextEncoder":
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            enc = cls(cfg)
        enc.loaded = True
        return enc

    def forward(self, ids: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        """BxT padded ids + true lengths -> B x d_text x T contextual features."""
        _require_loaded(self)
        if ids.ndim != 2:
            raise ShapeMismatchError(f"expected BxT ids, got {tuple(ids.shape)}")
        if ids.shape[1] > self.cfg.t_max:
            raise ShapeMismatchError(f"sequence length {ids.shape[1]} exceeds t_max")
        if int(ids.min()) < 0 or int(ids.max()) >= self.cfg.vocab_size:
            raise ShapeMismatchError("token id outside vocabulary range")
        if int(lengths.min()) < 2:
            raise ShapeMismatchError("need at least one word beyond the class token")

        T = ids.shape[1]
        positions = torch.arange(T, device=ids.device)
        x = self.token_embed(ids) + self.pos_embed(positions)[None, :, :]
        pad_mask = positions[None, :] >= lengths[:, None]
        for norm, attn in zip(self.norms, self.attn):
            h = norm(x)
            mixed, _ = attn(h, h, h, key_padding_mask=pad_mask, need_weights=False)
            x = x + mixed
        return x.transpose(1, 2)


def _to_image_batch(image: np.ndarray | torch.Tensor) -> torch.Tensor:
    arr = torch.as_tensor(np.asarray(image), dtype=torch.float32)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ShapeMismatchError(f"expected HxWx3 image, got {tuple(arr.shape)}")
    if not torch.isfinite(arr).all():
        raise ShapeMismatchError("image contains non-finite values")
    if float(arr.min()) < 0.0 or float(arr.max()) > 1.0:
        raise ShapeMismatchError("image values must lie in [0, 1]")
    return arr.permute(2, 0, 1)[None]


def encode_image(encoder: ToyImageEncoder,
                 image: np.ndarray | torch.Tensor) -> tuple[np.ndarray, np.ndarray]:
    """Encode one HxWx3 image in [0,1] to (global vector, regional map)."""
    batch = _to_image_batch(image)
    with torch.no_grad():
        pooled, regional = encoder(batch)
    return pooled[0].numpy(), regional[0].numpy()


def encode_text(encoder: ToyTextEncoder, tokens: TokenSequence) -> np.ndarray:
    """Encode one token sequence to a d_text x T contextual word matrix.

    T is the true token count (class token included); padding columns are
    never returned.
    """
    if tokens.length < 2:
        raise ShapeMismatchError("caption must contain at least one word")
    ids = torch.as_tensor(tokens.ids[None, :], dtype=torch.long)
    lengths = torch.as_tensor([tokens.length])
    with torch.no_grad():
        out = encoder(ids, lengths)
    return out[0, :, :tokens.length].numpy()


def pad_token_id() -> int:
    return PAD_ID
