"""Model assembly, bundle persistence, and embedding extraction.

A "bundle" is one checkpoint container holding the frozen image encoder,
the alignment stack (text encoder, projections, refiner, temperatures,
identity head), optionally a fusion module, optimizer state, and the
vocabulary — everything needed to resume training or evaluate.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .alignment import IdentityHead, Temperatures
from .checkpoint import (ConfigMismatchError, load_container, load_module_arrays,
                         module_arrays, save_container, state_checksum)
from .config import TrainConfig
from .data import FaceCaptionRecord, TokenSequence, Vocabulary, tokenize
from .encoders import ToyImageEncoder, ToyTextEncoder
from .fusion import AttentionFusion, LinearFusion
from .projections import (GlobalImageProjector, RegionProjector, RegionRefiner,
                          WordProjector, l2norm)


class MissingComponentError(ValueError):
    """Checkpoint lacks a component required for the requested operation."""


class AlignmentStack(nn.Module):
    """Every parameter trained in the first stage, in one module."""

    def __init__(self, cfg: TrainConfig, n_classes: int):
        super().__init__()
        self.text_encoder = ToyTextEncoder(cfg.model)
        self.word_proj = WordProjector(cfg.model)
        self.image_proj = GlobalImageProjector(cfg.model)
        self.region_refiner = RegionRefiner(cfg.model)
        self.region_proj = RegionProjector(cfg.model)
        self.temperatures = Temperatures(cfg.loss)
        self.identity_head = IdentityHead(n_classes, cfg.model.d_shared,
                                          cfg.loss.scale, cfg.loss.margin)


def _seeded(builder, seed: int):
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        module = builder()
    return module


def build_image_encoder(cfg: TrainConfig) -> ToyImageEncoder:
    encoder = ToyImageEncoder.create(cfg.model, seed=cfg.seed)
    encoder.freeze()
    return encoder


def build_alignment_stack(cfg: TrainConfig, n_classes: int) -> AlignmentStack:
    stack = _seeded(lambda: AlignmentStack(cfg, n_classes), cfg.seed + 1)
    stack.text_encoder.loaded = True
    return stack


def build_fusion(cfg: TrainConfig) -> nn.Module:
    maker = AttentionFusion if cfg.stage2.fusion == "tgfr" else LinearFusion
    return _seeded(lambda: maker(cfg.model), cfg.seed + 2)


def build_fusion_head(cfg: TrainConfig, n_classes: int) -> IdentityHead:
    return _seeded(lambda: IdentityHead(n_classes, cfg.model.d_fused,
                                        cfg.loss.scale, cfg.loss.margin), cfg.seed + 3)


@dataclass
class ModelBundle:
    cfg: TrainConfig
    vocab: Vocabulary
    subjects: list[str]
    image_encoder: ToyImageEncoder
    stack: AlignmentStack | None = None
    fusion: nn.Module | None = None
    fusion_head: IdentityHead | None = None
    stage: int = 0
    epoch: int = 0
    extra_meta: dict = field(default_factory=dict)

    @property
    def n_classes(self) -> int:
        return len(self.subjects)

    def components(self) -> list[str]:
        out = ["image_encoder"]
        if self.stack is not None:
            out.append("alignment")
        if self.fusion is not None:
            out.append("fusion")
        return out


def save_bundle(path, bundle: ModelBundle,
                optimizer_arrays: dict[str, np.ndarray] | None = None,
                optimizer_meta: dict | None = None) -> None:
    meta = {
        "kind": "bundle",
        "stage": bundle.stage,
        "epoch": bundle.epoch,
        "config": bundle.cfg.to_dict(),
        "config_digest": bundle.cfg.digest(),
        "vocab": list(bundle.vocab.tokens),
        "subjects": bundle.subjects,
        "components": bundle.components(),
        "fusion_kind": bundle.cfg.stage2.fusion if bundle.fusion is not None else None,
        "image_encoder_checksum": state_checksum(bundle.image_encoder),
        "optimizers": optimizer_meta or {},
        **bundle.extra_meta,
    }
    arrays = module_arrays(bundle.image_encoder, "image_encoder")
    if bundle.stack is not None:
        arrays.update(module_arrays(bundle.stack, "alignment"))
    if bundle.fusion is not None:
        arrays.update(module_arrays(bundle.fusion, "fusion"))
    if bundle.fusion_head is not None:
        arrays.update(module_arrays(bundle.fusion_head, "fusion_head"))
    if optimizer_arrays:
        arrays.update(optimizer_arrays)
    save_container(path, meta, arrays)


def load_bundle(path, expect_cfg: TrainConfig | None = None
                ) -> tuple[ModelBundle, dict, dict[str, np.ndarray]]:
    """Rebuild models from a container; returns (bundle, meta, raw arrays)."""
    meta, arrays = load_container(path)
    if meta.get("kind") != "bundle":
        raise MissingComponentError(
            f"checkpoint holds {meta.get('kind')!r}, not a training bundle")
    cfg = TrainConfig.from_dict(meta["config"])
    if expect_cfg is not None and expect_cfg.digest() != meta["config_digest"]:
        raise ConfigMismatchError("checkpoint was written under a different configuration")
    vocab = Vocabulary(meta["vocab"])
    subjects = list(meta["subjects"])

    image_encoder = ToyImageEncoder(cfg.model)
    load_module_arrays(image_encoder, "image_encoder", arrays)
    image_encoder.loaded = True
    image_encoder.freeze()

    bundle = ModelBundle(cfg=cfg, vocab=vocab, subjects=subjects,
                         image_encoder=image_encoder,
                         stage=meta["stage"], epoch=meta["epoch"])
    if "alignment" in meta["components"]:
        stack = AlignmentStack(cfg, len(subjects))
        load_module_arrays(stack, "alignment", arrays)
        stack.text_encoder.loaded = True
        bundle.stack = stack
    if "fusion" in meta["components"]:
        maker = AttentionFusion if meta["fusion_kind"] == "tgfr" else LinearFusion
        fusion = maker(cfg.model)
        load_module_arrays(fusion, "fusion", arrays)
        bundle.fusion = fusion
        head = IdentityHead(len(subjects), cfg.model.d_fused,
                            cfg.loss.scale, cfg.loss.margin)
        load_module_arrays(head, "fusion_head", arrays)
        bundle.fusion_head = head
    return bundle, meta, arrays


class Embedder:
    """Embedding extraction for every method the evaluator compares.

    Methods: "image-only" (raw frozen global feature), "tgfr" / "flf"
    (fused embeddings), plus "global" (shared-space image embedding) and
    "caption" extraction targets. All outputs are L2-normalized.
    """

    def __init__(self, bundle: ModelBundle):
        self.bundle = bundle
        self.cfg = bundle.cfg
        bundle.image_encoder.eval()
        if bundle.stack is not None:
            bundle.stack.eval()
        if bundle.fusion is not None:
            bundle.fusion.eval()

    @classmethod
    def from_path(cls, path) -> "Embedder":
        bundle, _, _ = load_bundle(path)
        return cls(bundle)

    def _image_tensor(self, image: np.ndarray) -> torch.Tensor:
        return torch.as_tensor(np.ascontiguousarray(image), dtype=torch.float32
                               ).permute(2, 0, 1)[None]

    def _require_stack(self) -> AlignmentStack:
        if self.bundle.stack is None:
            raise MissingComponentError(
                "checkpoint has no text/alignment components (image-only checkpoint)")
        return self.bundle.stack

    def _tokens(self, caption: str) -> TokenSequence:
        return tokenize(caption, self.bundle.vocab, self.cfg.model.t_max)

    @torch.no_grad()
    def image_features(self, image: np.ndarray) -> tuple[torch.Tensor, torch.Tensor]:
        pooled, regional = self.bundle.image_encoder(self._image_tensor(image))
        return pooled[0], regional[0]

    @torch.no_grad()
    def embed_image_only(self, image: np.ndarray) -> np.ndarray:
        pooled, _ = self.image_features(image)
        return l2norm(pooled, dim=0).numpy()

    @torch.no_grad()
    def embed_global(self, image: np.ndarray) -> np.ndarray:
        stack = self._require_stack()
        pooled, _ = self.image_features(image)
        return stack.image_proj(pooled).numpy()

    @torch.no_grad()
    def embed_caption(self, caption: str) -> np.ndarray:
        stack = self._require_stack()
        tok = self._tokens(caption)
        ids = torch.as_tensor(tok.ids[None], dtype=torch.long)
        lengths = torch.as_tensor([tok.length])
        words = stack.text_encoder(ids, lengths)
        _, cap = stack.word_proj.project(words[0, :, : tok.length])
        return l2norm(cap, dim=0).numpy()

    @torch.no_grad()
    def _shared_features(self, image: np.ndarray, caption: str):
        stack = self._require_stack()
        pooled, regional = self.image_features(image)
        v = stack.image_proj(pooled)
        regions = stack.region_proj(stack.region_refiner(regional[None]))[0]
        tok = self._tokens(caption)
        ids = torch.as_tensor(tok.ids[None], dtype=torch.long)
        lengths = torch.as_tensor([tok.length])
        word_mat = stack.text_encoder(ids, lengths)
        words, cap = stack.word_proj.project(word_mat[0, :, : tok.length])
        return words, regions, v, cap

    @torch.no_grad()
    def embed_fused(self, image: np.ndarray, caption: str) -> np.ndarray:
        if self.bundle.fusion is None:
            raise MissingComponentError("checkpoint has no fusion component")
        words, regions, v, cap = self._shared_features(image, caption)
        if isinstance(self.bundle.fusion, LinearFusion):
            fused = self.bundle.fusion(v, cap)
        else:
            fused = self.bundle.fusion(words, regions, v, cap)
        return l2norm(fused, dim=0).numpy()

    def embed_record(self, method: str, record: FaceCaptionRecord,
                     image: np.ndarray) -> np.ndarray:
        if method == "image-only":
            return self.embed_image_only(image)
        if method in ("tgfr", "flf"):
            fusion_kind = ("tgfr" if isinstance(self.bundle.fusion, AttentionFusion)
                           else "flf" if isinstance(self.bundle.fusion, LinearFusion)
                           else None)
            if fusion_kind != method:
                raise MissingComponentError(
                    f"checkpoint holds fusion kind {fusion_kind!r}, not {method!r}")
            return self.embed_fused(image, record.captions[0])
        raise ValueError(f"unknown method {method!r}")
