"""Biometric evaluation: 1:1 verification, rank-1 identification, and the
image-quality degradation study.

Scores are cosine similarities. TAR@FAR uses conservative step-function
interpolation (the best TAR whose FAR does not exceed the target), EER is
found by bisecting FAR(t) - FRR(t) over thresholds.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

FAR_TARGETS = (1e-3, 1e-4, 1e-5)

QUALITY_LABELS = {1: "very bad", 2: "bad", 3: "poor", 4: "normal"}
# level -> (downsample factor, blur sigma, noise sigma)
_DEGRADE_PARAMS = {3: (2, 0.5, 0.02), 2: (4, 1.0, 0.05), 1: (8, 2.0, 0.10)}


class ProtocolError(ValueError):
    """Invalid pair list or insufficient data for a metric."""


@dataclass(frozen=True)
class ProtocolPair:
    probe_id: str
    ref_id: str
    genuine: bool


def build_protocol(probe_records, gallery_records) -> list[ProtocolPair]:
    """All probe x reference pairs, flagged genuine when subjects match."""
    pairs = []
    for p in probe_records:
        for g in gallery_records:
            if p.record_id == g.record_id:
                continue
            pairs.append(ProtocolPair(p.record_id, g.record_id,
                                      p.subject_id == g.subject_id))
    if not pairs:
        raise ProtocolError("protocol is empty")
    return pairs


def write_protocol(pairs: list[ProtocolPair], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            fh.write(f"{p.probe_id}\t{p.ref_id}\t{'G' if p.genuine else 'I'}\n")


def read_protocol(path: str | Path) -> list[ProtocolPair]:
    pairs = []
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 3 or fields[2] not in ("G", "I"):
            raise ProtocolError(f"{path}:{line_no}: expected 'probe<TAB>ref<TAB>G|I'")
        if fields[0] == fields[1]:
            raise ProtocolError(f"{path}:{line_no}: self-pair {fields[0]}")
        pairs.append(ProtocolPair(fields[0], fields[1], fields[2] == "G"))
    return pairs


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a) * np.linalg.norm(b), 1e-12)
    return float(np.dot(a, b) / denom)


def score_pairs(pairs: list[ProtocolPair],
                embeddings: dict[str, np.ndarray],
                ref_embeddings: dict[str, np.ndarray] | None = None) -> np.ndarray:
    """Cosine similarity per pair, order preserved.

    `ref_embeddings` lets the reference side come from a different embedding
    source (probe-only captioning); it defaults to the probe side's map.
    """
    refs = embeddings if ref_embeddings is None else ref_embeddings
    scores = []
    for p in pairs:
        if p.probe_id not in embeddings:
            raise ProtocolError(f"missing embedding for probe {p.probe_id}")
        if p.ref_id not in refs:
            raise ProtocolError(f"missing embedding for reference {p.ref_id}")
        scores.append(cosine(embeddings[p.probe_id], refs[p.ref_id]))
    return np.asarray(scores, dtype=np.float64)


@dataclass
class VerificationReport:
    roc: list[tuple[float, float]]                 # (FAR, TAR), FAR ascending
    tar_at_far: dict[float, float | None]          # None = unsupported target
    eer: float
    rank1: float | None = None
    n_genuine: int = 0
    n_impostor: int = 0
    notes: list[str] = field(default_factory=list)

    def write_roc_csv(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("far,tar\n")
            for far, tar in self.roc:
                fh.write(f"{far:.10g},{tar:.10g}\n")


def _split_scores(scores: np.ndarray, genuine_flags) -> tuple[np.ndarray, np.ndarray]:
    flags = np.asarray(genuine_flags, dtype=bool)
    if flags.shape != scores.shape:
        raise ProtocolError("scores and flags must align")
    gen, imp = scores[flags], scores[~flags]
    if gen.size == 0 or imp.size == 0:
        raise ProtocolError("need at least one genuine and one impostor pair")
    return gen, imp


def _eer_bisect(gen: np.ndarray, imp: np.ndarray) -> float:
    def rates(t):
        return float(np.mean(imp >= t)), float(np.mean(gen < t))

    lo = float(min(gen.min(), imp.min())) - 1.0
    hi = float(max(gen.max(), imp.max())) + 1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        far, frr = rates(mid)
        if far == frr:
            return far
        if far > frr:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-13:
            break
    far_lo, frr_lo = rates(lo)
    far_hi, frr_hi = rates(hi)
    d_lo, d_hi = abs(far_lo - frr_lo), abs(far_hi - frr_hi)
    if d_lo < d_hi:
        return 0.5 * (far_lo + frr_lo)
    if d_hi < d_lo:
        return 0.5 * (far_hi + frr_hi)
    return 0.5 * (0.5 * (far_lo + frr_lo) + 0.5 * (far_hi + frr_hi))


def compute_roc(scores: np.ndarray, genuine_flags,
                far_targets=FAR_TARGETS) -> VerificationReport:
    """ROC sweep over unique scores, TAR at fixed FARs, and the EER."""
    gen, imp = _split_scores(np.asarray(scores, dtype=np.float64), genuine_flags)

    thresholds = np.unique(np.concatenate([gen, imp]))[::-1]
    roc = []
    for t in thresholds:
        far = float(np.mean(imp >= t))
        tar = float(np.mean(gen >= t))
        roc.append((far, tar))

    report = VerificationReport(roc=roc, tar_at_far={}, eer=_eer_bisect(gen, imp),
                                n_genuine=int(gen.size), n_impostor=int(imp.size))
    for target in far_targets:
        if imp.size < round(1.0 / target):
            report.tar_at_far[target] = None
            report.notes.append(
                f"FAR {target:g} unsupported: needs >= {round(1.0 / target)} impostor pairs, "
                f"have {imp.size}")
            continue
        feasible = [tar for far, tar in roc if far <= target]
        report.tar_at_far[target] = max(feasible) if feasible else 0.0
    return report


def rank1_identify(gallery_subjects: list[str], gallery_embeddings: np.ndarray,
                   probe_subjects: list[str], probe_embeddings: np.ndarray) -> float:
    """Fraction of probes whose nearest gallery embedding shares the subject."""
    if len(gallery_subjects) == 0:
        raise ProtocolError("gallery is empty")
    if len(set(gallery_subjects)) != len(gallery_subjects):
        raise ProtocolError("gallery must hold exactly one entry per subject")
    if len(probe_subjects) == 0:
        raise ProtocolError("no probes to identify")
    g = np.asarray(gallery_embeddings, dtype=np.float64)
    p = np.asarray(probe_embeddings, dtype=np.float64)
    g = g / np.clip(np.linalg.norm(g, axis=1, keepdims=True), 1e-12, None)
    p = p / np.clip(np.linalg.norm(p, axis=1, keepdims=True), 1e-12, None)
    nearest = np.argmax(p @ g.T, axis=1)
    hits = sum(probe_subjects[i] == gallery_subjects[j] for i, j in enumerate(nearest))
    return hits / len(probe_subjects)


def degrade(image: np.ndarray, level: int, seed: int) -> np.ndarray:
    """Apply the quality-degradation recipe for `level` in {1..4}.

    Level 4 returns the input unchanged; lower levels apply increasingly
    aggressive downsample-upsample, Gaussian blur, and additive noise.
    """
    if level not in QUALITY_LABELS:
        raise ValueError("quality level must be in {1, 2, 3, 4}")
    if level == 4:
        return image.copy()
    factor, blur_sigma, noise_sigma = _DEGRADE_PARAMS[level]
    h, w, _ = image.shape

    pad_h, pad_w = (-h) % factor, (-w) % factor
    padded = np.pad(image, ((0, pad_h), (0, pad_w), (0, 0)), mode="edge")
    ph, pw = padded.shape[:2]
    small = padded.reshape(ph // factor, factor, pw // factor, factor, 3).mean(axis=(1, 3))
    coarse = np.repeat(np.repeat(small, factor, axis=0), factor, axis=1)[:h, :w]

    blurred = gaussian_filter(coarse, sigma=(blur_sigma, blur_sigma, 0.0))
    rng = np.random.default_rng(seed)
    noisy = blurred + rng.normal(0.0, noise_sigma, size=blurred.shape)
    return np.clip(noisy, 0.0, 1.0)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(np.mean((a - b) ** 2))
    return float("inf") if mse == 0 else float(10.0 * np.log10(1.0 / mse))


def quality_study(probe_records, gallery_records, embed_probe: dict, embed_gallery: dict,
                  image_loader, far_targets=FAR_TARGETS,
                  seed: int = 0) -> dict[tuple[str, int], VerificationReport]:
    """Verification and rank-1 per (method, quality level).

    embed_probe / embed_gallery map a method name to a callable
    (record, image) -> embedding; probe images are degraded per level,
    gallery images stay clean.
    """
    if set(embed_probe) != set(embed_gallery):
        raise ProtocolError("probe and gallery methods must match")
    pairs = build_protocol(probe_records, gallery_records)
    flags = [p.genuine for p in pairs]
    results: dict[tuple[str, int], VerificationReport] = {}

    gallery_subjects = [r.subject_id for r in gallery_records]
    clean_probe = {r.record_id: image_loader(r) for r in probe_records}
    clean_gallery = {r.record_id: image_loader(r) for r in gallery_records}

    for method, probe_fn in embed_probe.items():
        gallery_emb = {r.record_id: embed_gallery[method](r, clean_gallery[r.record_id])
                       for r in gallery_records}
        gallery_mat = np.stack([gallery_emb[r.record_id] for r in gallery_records])
        for level in sorted(QUALITY_LABELS):
            probe_emb = {}
            for idx, rec in enumerate(probe_records):
                img = degrade(clean_probe[rec.record_id], level, seed=seed * 100003 + idx)
                probe_emb[rec.record_id] = probe_fn(rec, img)
            scores = score_pairs(pairs, probe_emb, gallery_emb)
            report = compute_roc(scores, flags, far_targets)
            probe_mat = np.stack([probe_emb[r.record_id] for r in probe_records])
            report.rank1 = rank1_identify(gallery_subjects, gallery_mat,
                                          [r.subject_id for r in probe_records], probe_mat)
            results[(method, level)] = report
    return results
