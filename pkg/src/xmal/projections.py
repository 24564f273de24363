"""Projection networks mapping uni-modal features into the shared space.

Text: four parallel 1D convolutions (kernels 2..5) capture phrase-level
patterns; branch maps are reduced by element-wise max so each word keeps its
own embedding, then columns are L2-normalized and max-pooled into a caption
vector. Images: an affine+tanh projector for the global vector, a
self-attention refiner for the regional map, and a per-region affine map.
"""
from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .config import ModelConfig

L2_EPS = 1e-12


def l2norm(x: torch.Tensor, dim: int) -> torch.Tensor:
    return x / x.norm(dim=dim, keepdim=True).clamp_min(L2_EPS)


class WordProjector(nn.Module):
    """Phrase-level projection of contextual word features.

    Drops the leading class-token column, applies kernel-2..5 convolutions
    with length-preserving padding, takes the element-wise max across
    branches, and L2-normalizes each word column. The caption embedding is
    the max over word columns.
    """

    KERNELS = (2, 3, 4, 5)

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.convs = nn.ModuleList(
            nn.Conv1d(cfg.d_text, cfg.d_shared, k) for k in self.KERNELS
        )

    def project(self, words: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """d_text x T -> (d_shared x (T-1) word embeddings, d_shared caption)."""
        if words.ndim != 2 or words.shape[1] < 2:
            raise ValueError("word matrix needs a class token plus at least one word")
        x = words[None, :, 1:]  # drop the class-token column
        branches = []
        for k, conv in zip(self.KERNELS, self.convs):
            padded = F.pad(x, ((k - 1) // 2, k // 2))
            branches.append(conv(padded))
        merged = torch.stack(branches).amax(dim=0)[0]
        embeddings = l2norm(merged, dim=0)
        return embeddings, embeddings.amax(dim=1)

    def forward(self, word_matrix: torch.Tensor,
                lengths: torch.Tensor) -> tuple[list[torch.Tensor], torch.Tensor]:
        """Batched projection over true lengths; words come back as a list."""
        words, captions = [], []
        for b in range(word_matrix.shape[0]):
            emb, cap = self.project(word_matrix[b, :, : int(lengths[b])])
            words.append(emb)
            captions.append(cap)
        return words, torch.stack(captions)


class GlobalImageProjector(nn.Module):
    """Affine map to the shared space, bounded by tanh, then L2-normalized."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.fc = nn.Linear(cfg.d_global, cfg.d_shared)

    def forward(self, v: torch.Tensor) -> torch.Tensor:
        single = v.ndim == 1
        out = l2norm(torch.tanh(self.fc(v[None] if single else v)), dim=-1)
        return out[0] if single else out


class RegionRefiner(nn.Module):
    """Self-attention refinement of the regional map.

    Normalizes the input, computes queries/keys/values with 1x1 convolutions,
    attends across all grid positions, and adds the result back onto the
    input. No positional encoding, so the block is equivariant to spatial
    permutations.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = cfg.c_regional
        self.norm = nn.BatchNorm2d(c)
        self.query = nn.Conv2d(c, c, 1)
        self.key = nn.Conv2d(c, c, 1)
        self.value = nn.Conv2d(c, c, 1)
        self.out = nn.Conv2d(c, c, 1)
        self.scale = c ** -0.5

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        single = x.ndim == 3
        if single:
            x = x[None]
        b, c, h, w = x.shape
        n = self.norm(x)
        q = self.query(n).reshape(b, c, h * w)
        k = self.key(n).reshape(b, c, h * w)
        v = self.value(n).reshape(b, c, h * w)
        attn = torch.softmax(torch.einsum("bcp,bcj->bpj", q, k) * self.scale, dim=-1)
        mixed = torch.einsum("bcj,bpj->bcp", v, attn).reshape(b, c, h, w)
        out = x + self.out(mixed)
        return out[0] if single else out


class RegionProjector(nn.Module):
    """Flatten the 14x14 grid row-major and map each region to the shared space."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.fc = nn.Linear(cfg.c_regional, cfg.d_shared)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        single = x.ndim == 3
        if single:
            x = x[None]
        b, c, h, w = x.shape
        flat = x.reshape(b, c, h * w)                  # (i, j) -> column i*w + j
        out = self.fc(flat.transpose(1, 2)).transpose(1, 2)
        return out[0] if single else out
