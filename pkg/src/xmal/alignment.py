"""Contrastive alignment objectives and the weighted training loss.

Four terms:
  * caption-image: bidirectional InfoNCE over global embeddings (cosine).
  * word-region: per-word attention over image regions, a smooth-max
    matching score per pair, and a bidirectional batch softmax over scores.
  * intra-modal: InfoNCE between two views within each modality.
  * identity: additive-angular-margin softmax over subject classes.

All loss functions are pure in their tensor inputs and preserve dtype, so
they can be evaluated in float64 for finite-difference verification.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import torch
from torch import nn

from .config import LossConfig
from .projections import l2norm


def cosine_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Rows of `a` against rows of `b`: out[i, k] = cos(a_i, b_k)."""
    return l2norm(a, dim=1) @ l2norm(b, dim=1).T


def contrastive_probs(sim: torch.Tensor, tau: torch.Tensor | float,
                      dim: int) -> torch.Tensor:
    """Temperature softmax shared by every InfoNCE-style term."""
    return torch.softmax(sim / tau, dim=dim)


def _diag_nll(sim: torch.Tensor, tau: torch.Tensor | float, dim: int) -> torch.Tensor:
    """Mean -log P(match) where matches sit on the diagonal."""
    logp = torch.log_softmax(sim / tau, dim=dim)
    return -logp.diagonal().mean()


def caption_image_contrastive(
    v: torch.Tensor, c: torch.Tensor, tau: torch.Tensor | float
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Bidirectional global contrastive loss.

    v, c: B x d_shared image / caption embeddings of matched pairs.
    Returns (sum, face-to-caption term, caption-to-face term); each
    direction is a mean over the batch.
    """
    if v.shape != c.shape or v.ndim != 2:
        raise ValueError("expected matching BxD embedding matrices")
    sim = cosine_matrix(v, c)
    f2c = _diag_nll(sim, tau, dim=1)
    c2f = _diag_nll(sim, tau, dim=0)
    return f2c + c2f, f2c, c2f


def normalize_similarities(words: torch.Tensor, regions: torch.Tensor) -> torch.Tensor:
    """Dot-product word/region similarities, softmax-normalized over words.

    words: d x n_words, regions: d x n_regions. Each region column of the
    result is a distribution over words.
    """
    return torch.softmax(words.T @ regions, dim=0)


def attend_regions(sbar: torch.Tensor, regions: torch.Tensor,
                   tau_regions: float, return_weights: bool = False):
    """Per-word attention pooling of region features.

    For word i the weights are softmax(sbar[i, :] / tau) over regions and
    the output column is the weighted sum of region columns.
    """
    if tau_regions <= 0:
        raise ValueError("region-attention temperature must be positive")
    alpha = torch.softmax(sbar / tau_regions, dim=1)     # n_words x n_regions
    attended = regions @ alpha.T                          # d x n_words
    return (attended, alpha) if return_weights else attended


def matching_score(attended: torch.Tensor, words: torch.Tensor,
                   tau_match: float) -> torch.Tensor:
    """Smooth maximum of per-word cosine matches:

        f = tau * log(sum_i exp(cos(r_i, w_i) / tau))

    which is sandwiched between max_i cos_i and max_i cos_i + tau*log(n).
    """
    if tau_match <= 0:
        raise ValueError("matching temperature must be positive")
    num = (attended * words).sum(dim=0)
    den = attended.norm(dim=0).clamp_min(1e-12) * words.norm(dim=0).clamp_min(1e-12)
    cos = num / den
    return tau_match * torch.logsumexp(cos / tau_match, dim=0)


def pairwise_matching_scores(words: list[torch.Tensor], regions: torch.Tensor,
                             tau_regions: float, tau_match: float) -> torch.Tensor:
    """Matrix of matching scores: entry [i, k] pairs image i with caption k."""
    b = regions.shape[0]
    if len(words) != b:
        raise ValueError("need one word matrix per region matrix")
    rows = []
    for i in range(b):
        row = []
        for k in range(b):
            sbar = normalize_similarities(words[k], regions[i])
            attended = attend_regions(sbar, regions[i], tau_regions)
            row.append(matching_score(attended, words[k], tau_match))
        rows.append(torch.stack(row))
    return torch.stack(rows)


def word_region_contrastive(
    words: list[torch.Tensor], regions: torch.Tensor,
    tau_regions: float, tau_match: float, tau_pairs: float,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Bidirectional contrastive loss over pairwise matching scores.

    words: length-B list of d x n_words_k matrices (true lengths, no pads);
    regions: B x d x n_regions. Returns (sum, regions-given-words term,
    words-given-regions term); each direction is a mean over the batch.
    """
    if tau_pairs <= 0:
        raise ValueError("pair softmax temperature must be positive")
    scores = pairwise_matching_scores(words, regions, tau_regions, tau_match)
    r_given_w = _diag_nll(scores, tau_pairs, dim=1)
    w_given_r = _diag_nll(scores, tau_pairs, dim=0)
    return r_given_w + w_given_r, r_given_w, w_given_r


def intra_modal_contrastive(z1: torch.Tensor, z2: torch.Tensor,
                            tau: torch.Tensor | float) -> torch.Tensor:
    """InfoNCE within one modality: view 1 of each subject against all view 2s."""
    if z1.shape != z2.shape or z1.ndim != 2:
        raise ValueError("expected matching BxD view matrices")
    return _diag_nll(cosine_matrix(z1, z2), tau, dim=1)


def intra_modal_pair_loss(v1, v2, c1, c2, tau) -> torch.Tensor:
    """Mean of the visual and textual intra-modal terms."""
    return 0.5 * (intra_modal_contrastive(v1, v2, tau)
                  + intra_modal_contrastive(c1, c2, tau))


def identity_margin_loss(embeddings: torch.Tensor, labels: torch.Tensor,
                         class_weights: torch.Tensor, scale: float,
                         margin: float) -> torch.Tensor:
    """Normalized cross-entropy with an additive angular margin.

    The true-class logit is cos(theta + m) = cos t * cos m - sin t * sin m,
    every logit is scaled by `scale`, and the result is the mean
    cross-entropy over the batch. margin = 0 reduces to plain normalized
    softmax cross-entropy.
    """
    if labels.min() < 0 or labels.max() >= class_weights.shape[0]:
        raise ValueError("label outside [0, n_classes)")
    cos = (l2norm(embeddings, dim=1) @ l2norm(class_weights, dim=1).T)
    cos = cos.clamp(-1 + 1e-7, 1 - 1e-7)
    sin = torch.sqrt(1.0 - cos * cos)
    with_margin = cos * math.cos(margin) - sin * math.sin(margin)
    one_hot = torch.zeros_like(cos)
    one_hot.scatter_(1, labels.view(-1, 1), 1.0)
    logits = scale * (one_hot * with_margin + (1.0 - one_hot) * cos)
    return nn.functional.cross_entropy(logits, labels)


class IdentityHead(nn.Module):
    """Class-weight matrix for the margin loss, shared across modalities."""

    def __init__(self, n_classes: int, dim: int, scale: float = 30.0, margin: float = 0.5):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(n_classes, dim))
        nn.init.xavier_uniform_(self.weight)
        self.scale = scale
        self.margin = margin

    def forward(self, embeddings: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        return identity_margin_loss(embeddings, labels, self.weight,
                                    self.scale, self.margin)


class Temperatures(nn.Module):
    """Learnable InfoNCE temperature (kept positive via log parametrization)
    plus the three fixed temperatures of the word-region loss."""

    def __init__(self, cfg: LossConfig):
        super().__init__()
        self.log_tau = nn.Parameter(torch.tensor(math.log(cfg.tau_init)))
        if cfg.share_temperature:
            self.log_tau_intra = None
        else:
            self.log_tau_intra = nn.Parameter(torch.tensor(math.log(cfg.tau_init)))
        self.tau_regions = cfg.tau_regions
        self.tau_match = cfg.tau_match
        self.tau_pairs = cfg.tau_pairs
        self._bounds = (math.log(cfg.tau_min), math.log(cfg.tau_max))

    @property
    def tau(self) -> torch.Tensor:
        return self.log_tau.exp()

    @property
    def tau_intra(self) -> torch.Tensor:
        p = self.log_tau if self.log_tau_intra is None else self.log_tau_intra
        return p.exp()

    @torch.no_grad()
    def clamp_(self) -> None:
        lo, hi = self._bounds
        self.log_tau.clamp_(lo, hi)
        if self.log_tau_intra is not None:
            self.log_tau_intra.clamp_(lo, hi)


@dataclass
class LossReport:
    """Per-term values for one batch; `total` carries the weights applied."""
    word_region: float
    identity: float
    caption_image: float
    intra_modal: float
    total: float
    face_to_caption: float = 0.0
    caption_to_face: float = 0.0
    region_given_word: float = 0.0
    word_given_region: float = 0.0

    def to_json_line(self, **extra) -> str:
        payload = {**extra,
                   "word_region": self.word_region,
                   "identity": self.identity,
                   "caption_image": self.caption_image,
                   "intra_modal": self.intra_modal,
                   "total": self.total,
                   "face_to_caption": self.face_to_caption,
                   "caption_to_face": self.caption_to_face,
                   "region_given_word": self.region_given_word,
                   "word_given_region": self.word_given_region}
        return json.dumps(payload, sort_keys=True)


def weighted_total(word_region: torch.Tensor, identity: torch.Tensor,
                   caption_image: torch.Tensor, intra_modal: torch.Tensor,
                   cfg: LossConfig) -> torch.Tensor:
    return (cfg.lambda_word_region * word_region
            + cfg.lambda_identity * identity
            + cfg.lambda_caption_image * caption_image
            + cfg.lambda_intra_modal * intra_modal)
