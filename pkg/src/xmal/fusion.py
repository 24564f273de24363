"""Attention-guided fusion of caption and face features.

The fine branch lets each word attend over image regions, refines the
result with two residual self-attention blocks, and max-pools over words.
The coarse branch is a single-token cross-attention from the caption onto
the global image embedding followed by layer normalization. Both branch
outputs are concatenated and mapped to the fused embedding. A plain linear
fusion over the global embeddings serves as the comparison baseline.
"""
from __future__ import annotations

import torch
from torch import nn

from .config import ModelConfig


class _SelfAttentionBlock(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.norm(x)
        mixed, _ = self.attn(h, h, h, need_weights=False)
        return x + mixed


class AttentionFusion(nn.Module):
    """Cross- and self-attention fusion producing the joint embedding."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_shared
        self.norm_words = nn.LayerNorm(d)
        self.norm_regions = nn.LayerNorm(d)
        self.cross = nn.MultiheadAttention(d, cfg.fusion_heads, batch_first=True)
        self.block1 = _SelfAttentionBlock(d, cfg.fusion_heads)
        self.block2 = _SelfAttentionBlock(d, cfg.fusion_heads)
        self.fine_fc = nn.Linear(d, d)
        self.coarse_cross = nn.MultiheadAttention(d, cfg.fusion_heads, batch_first=True)
        self.coarse_norm = nn.LayerNorm(d, eps=1e-6)
        self.out = nn.Linear(2 * d, cfg.d_fused)

    def fine_grained(self, words: torch.Tensor, regions: torch.Tensor) -> torch.Tensor:
        """Word features (d x n_words) attend over regions (d x n_regions)."""
        tokens = words.T[None]
        region_seq = self.norm_regions(regions.T[None])
        mixed, _ = self.cross(self.norm_words(tokens), region_seq, region_seq,
                              need_weights=False)
        x = tokens + mixed
        x = self.block2(self.block1(x))
        return self.fine_fc(x[0].amax(dim=0))

    def coarse_grained(self, v: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        """Caption embedding queries the global image embedding."""
        q, kv = c[None, None, :], v[None, None, :]
        mixed, _ = self.coarse_cross(q, kv, kv, need_weights=False)
        return self.coarse_norm(c + mixed[0, 0])

    def forward(self, words: torch.Tensor, regions: torch.Tensor,
                v: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        """One face-caption pair -> fused embedding of length d_fused."""
        joint = torch.cat([self.fine_grained(words, regions),
                           self.coarse_grained(v, c)])
        return self.out(joint)


class LinearFusion(nn.Module):
    """Feature-level fusion baseline: concatenate globals, one affine layer."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.out = nn.Linear(2 * cfg.d_shared, cfg.d_fused)

    def forward(self, v: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        return self.out(torch.cat([v, c], dim=-1))


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
