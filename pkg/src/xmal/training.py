"""Two-stage training harness.

Stage 1 trains the text encoder, projections, refiner, temperatures, and
identity head while the image encoder stays frozen (verified by checksum).
Stage 2 trains only the fusion module (plus its classification head) on
identity loss over fused embeddings, with the step-wise learning-rate drop.

Every random draw funnels through per-epoch generators derived from the
master seed, so runs are reproducible and resume is exact at epoch
boundaries.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .alignment import (LossReport, caption_image_contrastive, intra_modal_pair_loss,
                        weighted_total, word_region_contrastive)
from .fusion import AttentionFusion
from .checkpoint import state_checksum
from .config import TrainConfig
from .data import (CLS_ID, PAD_ID, FaceCaptionRecord, TokenSequence, Vocabulary,
                   build_vocab, by_split, load_image, subject_labels, tokenize)
from .pipeline import (ModelBundle, build_alignment_stack, build_fusion,
                       build_fusion_head, build_image_encoder, load_bundle,
                       save_bundle)


class TrainingError(RuntimeError):
    pass


class FrozenViolationError(TrainingError):
    """A parameter that must stay frozen changed during training."""


def _mix(seed: int, epoch: int, salt: int = 0) -> int:
    return (seed * 1_000_003 + epoch * 9_176 + salt * 31) % (2**31 - 1)


def set_determinism(deterministic: bool) -> None:
    if deterministic:
        torch.use_deterministic_algorithms(True)


# ---------------------------------------------------------------------------
# Views and augmentation
# ---------------------------------------------------------------------------

def augment_image(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Horizontal flip, random crop-resize (0.8..1.0 area), brightness jitter."""
    out = image
    if rng.random() < 0.5:
        out = out[:, ::-1, :]
    h, w, _ = out.shape
    area = rng.uniform(0.8, 1.0)
    side_h, side_w = max(1, int(round(h * math.sqrt(area)))), max(1, int(round(w * math.sqrt(area))))
    top = int(rng.integers(0, h - side_h + 1))
    left = int(rng.integers(0, w - side_w + 1))
    crop = out[top:top + side_h, left:left + side_w, :]
    t = torch.as_tensor(np.ascontiguousarray(crop), dtype=torch.float64).permute(2, 0, 1)[None]
    resized = F.interpolate(t, size=(h, w), mode="bilinear", align_corners=False)
    out = resized[0].permute(1, 2, 0).numpy()
    out = out + rng.uniform(-0.2, 0.2)
    return np.clip(out, 0.0, 1.0)


def token_dropout(tokens: TokenSequence, p: float, rng: np.random.Generator) -> TokenSequence:
    """Drop non-class tokens with probability p, keeping at least one word."""
    words = [int(t) for t in tokens.ids[1:tokens.length]]
    kept = [wid for wid in words if rng.random() >= p]
    if not kept:
        kept = [words[0]]
    ids = [CLS_ID] + kept
    length = len(ids)
    padded = ids + [PAD_ID] * (len(tokens.ids) - length)
    return TokenSequence(np.asarray(padded, dtype=np.int64), length)


@dataclass
class ViewPair:
    image_a: np.ndarray
    image_b: np.ndarray
    tokens_a: TokenSequence
    tokens_b: TokenSequence
    label: int


def make_views(record: FaceCaptionRecord, sibling_images: list[np.ndarray],
               image: np.ndarray, vocab: Vocabulary, t_max: int,
               rng: np.random.Generator, label: int = 0,
               dropout_p: float = 0.1) -> ViewPair:
    """Two image views and two caption views of one subject.

    Distinct same-subject images and distinct captions are used verbatim
    when available; otherwise views come from augmentation (images) or
    token dropout (captions).
    """
    if sibling_images:
        image_a = image
        image_b = sibling_images[int(rng.integers(len(sibling_images)))]
    else:
        image_a = augment_image(image, rng)
        image_b = augment_image(image, rng)

    captions = record.captions
    if len(captions) >= 2:
        first, second = rng.choice(len(captions), size=2, replace=False)
        tokens_a = tokenize(captions[int(first)], vocab, t_max)
        tokens_b = tokenize(captions[int(second)], vocab, t_max)
    else:
        tokens_a = tokenize(captions[0], vocab, t_max)
        tokens_b = token_dropout(tokens_a, dropout_p, rng)
    return ViewPair(image_a, image_b, tokens_a, tokens_b, label)


# ---------------------------------------------------------------------------
# In-memory training set
# ---------------------------------------------------------------------------

class TrainingData:
    """Train-split records with cached images and same-subject lookups."""

    def __init__(self, records: list[FaceCaptionRecord], root: str | Path):
        self.records = by_split(records, "train")
        if not self.records:
            raise TrainingError("training split is empty")
        self.labels = subject_labels(self.records)
        self.images = {r.record_id: load_image(r, root) for r in self.records}
        self.siblings: dict[str, list[str]] = {}
        for rec in self.records:
            self.siblings[rec.record_id] = [
                r.record_id for r in self.records
                if r.subject_id == rec.subject_id and r.record_id != rec.record_id
            ]

    def __len__(self) -> int:
        return len(self.records)

    def views(self, index: int, vocab: Vocabulary, t_max: int,
              rng: np.random.Generator, dropout_p: float) -> ViewPair:
        rec = self.records[index]
        sibs = [self.images[rid] for rid in self.siblings[rec.record_id]]
        return make_views(rec, sibs, self.images[rec.record_id], vocab, t_max,
                          rng, label=self.labels[rec.subject_id], dropout_p=dropout_p)


def _image_batch(images: list[np.ndarray]) -> torch.Tensor:
    return torch.stack([
        torch.as_tensor(np.ascontiguousarray(im), dtype=torch.float32).permute(2, 0, 1)
        for im in images
    ])


def _token_batch(tokens: list[TokenSequence]) -> tuple[torch.Tensor, torch.Tensor]:
    ids = torch.stack([torch.as_tensor(t.ids, dtype=torch.long) for t in tokens])
    lengths = torch.as_tensor([t.length for t in tokens], dtype=torch.long)
    return ids, lengths


# ---------------------------------------------------------------------------
# Optimizer state <-> arrays
# ---------------------------------------------------------------------------

def _optimizer_arrays(opt: torch.optim.Optimizer, prefix: str
                      ) -> tuple[dict[str, np.ndarray], dict]:
    sd = opt.state_dict()
    arrays = {}
    for idx, state in sd["state"].items():
        for key, value in state.items():
            arrays[f"opt.{prefix}.{idx}.{key}"] = value.detach().cpu().numpy()
    meta = {"param_groups": sd["param_groups"],
            "state_keys": {str(i): sorted(st) for i, st in sd["state"].items()}}
    return arrays, meta


def _load_optimizer(opt: torch.optim.Optimizer, prefix: str, meta: dict,
                    arrays: dict[str, np.ndarray]) -> None:
    state = {}
    for idx_str, keys in meta["state_keys"].items():
        idx = int(idx_str)
        state[idx] = {key: torch.as_tensor(arrays[f"opt.{prefix}.{idx}.{key}"].copy())
                      for key in keys}
    opt.load_state_dict({"state": state, "param_groups": meta["param_groups"]})


# ---------------------------------------------------------------------------
# Stage 1
# ---------------------------------------------------------------------------

def _stage1_step(encoder, stack, batch: list[ViewPair], cfg: TrainConfig) -> tuple[torch.Tensor, LossReport]:
    loss_cfg = cfg.loss
    imgs_a = _image_batch([v.image_a for v in batch])
    imgs_b = _image_batch([v.image_b for v in batch])
    ids_a, len_a = _token_batch([v.tokens_a for v in batch])
    ids_b, len_b = _token_batch([v.tokens_b for v in batch])
    labels = torch.as_tensor([v.label for v in batch], dtype=torch.long)

    with torch.no_grad():
        pooled_a, regional_a = encoder(imgs_a)
        pooled_b, _ = encoder(imgs_b)

    v_a = stack.image_proj(pooled_a)
    v_b = stack.image_proj(pooled_b)
    words_a, caps_a = stack.word_proj(stack.text_encoder(ids_a, len_a), len_a)
    _, caps_b = stack.word_proj(stack.text_encoder(ids_b, len_b), len_b)

    temps = stack.temperatures
    zero = torch.zeros(())
    cicl = f2c = c2f = zero
    if loss_cfg.lambda_caption_image > 0:
        cicl, f2c, c2f = caption_image_contrastive(v_a, caps_a, temps.tau)
    wrcl = rgw = wgr = zero
    if loss_cfg.lambda_word_region > 0:
        regions_a = stack.region_proj(stack.region_refiner(regional_a))
        wrcl, rgw, wgr = word_region_contrastive(
            words_a, regions_a, temps.tau_regions, temps.tau_match, temps.tau_pairs)
    imcl = zero
    if loss_cfg.lambda_intra_modal > 0:
        imcl = intra_modal_pair_loss(v_a, v_b, caps_a, caps_b, temps.tau_intra)
    idl = zero
    if loss_cfg.lambda_identity > 0:
        idl = stack.identity_head(v_a, labels) + stack.identity_head(caps_a, labels)

    total = weighted_total(wrcl, idl, cicl, imcl, loss_cfg)

    def _f(t: torch.Tensor) -> float:
        return float(t.detach())

    report = LossReport(
        word_region=_f(wrcl), identity=_f(idl), caption_image=_f(cicl),
        intra_modal=_f(imcl), total=_f(total),
        face_to_caption=_f(f2c), caption_to_face=_f(c2f),
        region_given_word=_f(rgw), word_given_region=_f(wgr))
    return total, report


def train_stage1(cfg: TrainConfig, records: list[FaceCaptionRecord], root: str | Path,
                 out_dir: str | Path, resume: str | Path | None = None,
                 log_name: str = "train_stage1.log") -> Path:
    """Run the first stage and write the bundle; returns the bundle path."""
    cfg.validate()
    set_determinism(cfg.deterministic)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(cfg.seed)

    data = TrainingData(records, root)
    vocab = build_vocab([c for r in records for c in r.captions])
    cfg.model.vocab_size = vocab.size
    subjects = sorted({r.subject_id for r in data.records})

    start_epoch = 0
    if resume is not None:
        bundle, meta, arrays = load_bundle(resume, expect_cfg=cfg)
        if bundle.stage != 1:
            raise TrainingError("can only resume stage 1 from a stage-1 bundle")
        encoder, stack = bundle.image_encoder, bundle.stack
        subjects = bundle.subjects
        vocab = bundle.vocab
        start_epoch = bundle.epoch
    else:
        encoder = build_image_encoder(cfg)
        stack = build_alignment_stack(cfg, len(subjects))

    if subjects != sorted({r.subject_id for r in data.records}):
        raise TrainingError("dataset subjects changed since the resumed checkpoint")

    frozen_before = state_checksum(encoder)
    text_params = list(stack.text_encoder.parameters())
    other_params = [p for name, p in stack.named_parameters()
                    if not name.startswith("text_encoder.")]
    text_opt = torch.optim.Adam(text_params, lr=cfg.stage1.text_lr,
                                weight_decay=cfg.stage1.text_weight_decay)
    proj_opt = torch.optim.Adam(other_params, lr=cfg.stage1.proj_lr)
    if resume is not None:
        _load_optimizer(text_opt, "text", meta["optimizers"]["text"], arrays)
        _load_optimizer(proj_opt, "proj", meta["optimizers"]["proj"], arrays)

    log_path = out / log_name
    log_mode = "a" if resume is not None else "w"
    stack.train()
    latest = out / "stage1_latest.xmal"
    with open(log_path, log_mode, encoding="utf-8") as log:
        for epoch in range(start_epoch + 1, cfg.stage1.epochs + 1):
            order_rng = torch.Generator().manual_seed(_mix(cfg.seed, epoch, 1))
            view_rng = np.random.default_rng(_mix(cfg.seed, epoch, 2))
            perm = torch.randperm(len(data), generator=order_rng).tolist()
            epoch_totals = []
            for step, lo in enumerate(range(0, len(perm), cfg.stage1.batch_size)):
                batch = [data.views(i, vocab, cfg.model.t_max, view_rng,
                                    cfg.stage1.token_dropout)
                         for i in perm[lo:lo + cfg.stage1.batch_size]]
                total, report = _stage1_step(encoder, stack, batch, cfg)
                text_opt.zero_grad()
                proj_opt.zero_grad()
                if total.requires_grad:
                    total.backward()
                    torch.nn.utils.clip_grad_norm_(stack.parameters(), cfg.stage1.grad_clip)
                    text_opt.step()
                    proj_opt.step()
                    stack.temperatures.clamp_()
                epoch_totals.append(report.total)
                log.write(report.to_json_line(
                    stage=1, epoch=epoch, step=step,
                    lr_text=cfg.stage1.text_lr, lr_proj=cfg.stage1.proj_lr) + "\n")
            log.write(json.dumps({"stage": 1, "epoch": epoch, "summary": True,
                                  "mean_total": float(np.mean(epoch_totals))},
                                 sort_keys=True) + "\n")

            if state_checksum(encoder) != frozen_before:
                raise FrozenViolationError("image encoder changed during stage 1")
            arrays_t, meta_t = _optimizer_arrays(text_opt, "text")
            arrays_p, meta_p = _optimizer_arrays(proj_opt, "proj")
            bundle = ModelBundle(cfg=cfg, vocab=vocab, subjects=subjects,
                                 image_encoder=encoder, stack=stack,
                                 stage=1, epoch=epoch)
            save_bundle(latest, bundle, {**arrays_t, **arrays_p},
                        {"text": meta_t, "proj": meta_p})

    if state_checksum(encoder) != frozen_before:
        raise FrozenViolationError("image encoder changed during stage 1")
    final = out / "stage1.xmal"
    final.write_bytes(latest.read_bytes())
    return final


# ---------------------------------------------------------------------------
# Stage 2
# ---------------------------------------------------------------------------

def stage2_lr(epoch: int, cfg: TrainConfig) -> float:
    """Learning rate for a 1-indexed epoch: divided by 10 after each milestone."""
    drops = sum(epoch > m for m in cfg.stage2.milestones)
    return cfg.stage2.lr * (0.1 ** drops)


def train_stage2(cfg: TrainConfig, records: list[FaceCaptionRecord], root: str | Path,
                 stage1_path: str | Path, out_dir: str | Path,
                 log_name: str = "train_stage2.log") -> Path:
    """Train the fusion module on identity loss; everything else stays frozen."""
    cfg.validate()
    set_determinism(cfg.deterministic)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(cfg.seed)

    if not Path(stage1_path).exists():
        raise TrainingError(f"stage-1 checkpoint not found: {stage1_path}")
    bundle, _, _ = load_bundle(stage1_path)
    if bundle.stack is None or bundle.stage < 1:
        raise TrainingError("stage 2 requires a stage-1 bundle")
    cfg.model.vocab_size = bundle.cfg.model.vocab_size
    encoder, stack, vocab = bundle.image_encoder, bundle.stack, bundle.vocab

    data = TrainingData(records, root)
    if sorted({r.subject_id for r in data.records}) != bundle.subjects:
        raise TrainingError("dataset subjects do not match the stage-1 checkpoint")

    stack.requires_grad_(False)
    stack.eval()
    frozen_before = {"image_encoder": state_checksum(encoder),
                     "alignment": state_checksum(stack)}

    fusion = build_fusion(cfg)
    head = build_fusion_head(cfg, bundle.n_classes)
    opt = torch.optim.SGD(list(fusion.parameters()) + list(head.parameters()),
                          lr=cfg.stage2.lr, momentum=cfg.stage2.momentum,
                          weight_decay=cfg.stage2.weight_decay)

    log_path = out / log_name
    with open(log_path, "w", encoding="utf-8") as log:
        for epoch in range(1, cfg.stage2.epochs + 1):
            lr = stage2_lr(epoch, cfg)
            for group in opt.param_groups:
                group["lr"] = lr
            order_rng = torch.Generator().manual_seed(_mix(cfg.seed, epoch, 11))
            pick_rng = np.random.default_rng(_mix(cfg.seed, epoch, 12))
            perm = torch.randperm(len(data), generator=order_rng).tolist()
            for step, lo in enumerate(range(0, len(perm), cfg.stage2.batch_size)):
                rows = [data.records[i] for i in perm[lo:lo + cfg.stage2.batch_size]]
                images = _image_batch([data.images[r.record_id] for r in rows])
                tokens = [tokenize(r.captions[int(pick_rng.integers(len(r.captions)))],
                                   vocab, cfg.model.t_max) for r in rows]
                ids, lengths = _token_batch(tokens)
                labels = torch.as_tensor([data.labels[r.subject_id] for r in rows])

                with torch.no_grad():
                    pooled, regional = encoder(images)
                    v = stack.image_proj(pooled)
                    words, caps = stack.word_proj(stack.text_encoder(ids, lengths), lengths)
                    regions = stack.region_proj(stack.region_refiner(regional))

                if isinstance(fusion, AttentionFusion):
                    fused = torch.stack([fusion(words[b], regions[b], v[b], caps[b])
                                         for b in range(len(rows))])
                else:
                    fused = fusion(v, caps)
                loss = head(fused, labels)
                opt.zero_grad()
                loss.backward()
                opt.step()
                value = float(loss.detach())
                log.write(json.dumps({"stage": 2, "epoch": epoch, "step": step,
                                      "identity": value, "total": value, "lr": lr},
                                     sort_keys=True) + "\n")

    after = {"image_encoder": state_checksum(encoder), "alignment": state_checksum(stack)}
    if after != frozen_before:
        raise FrozenViolationError("stage-1 parameters changed during stage 2")

    bundle.fusion = fusion
    bundle.fusion_head = head
    bundle.cfg = cfg
    bundle.stage = 2
    bundle.epoch = cfg.stage2.epochs
    arrays_o, meta_o = _optimizer_arrays(opt, "fusion")
    final = out / f"stage2_{cfg.stage2.fusion}.xmal"
    save_bundle(final, bundle, arrays_o, {"fusion": meta_o})
    return final
