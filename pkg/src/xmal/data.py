"""Dataset plumbing: synthetic face-caption generation, manifest IO, tokenization.

The generator renders procedural "faces" (colored geometric heads with
optional markings on distinct backgrounds) and writes captions that name a
random subset of the subject's attributes with synonym variation, so the
text carries tunable identity information without any real face data.
"""
from __future__ import annotations

import colorsys
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

CLS_ID = 0
PAD_ID = 1
UNK_ID = 2
N_RESERVED = 3

SPLITS = ("train", "gallery", "probe")

# identity attribute slots: hue x8, head shape x4, marking position x5,
# marking presence x2, background x3  (capacity 8*4*5*2*3 = 960 subjects)
ATTRIBUTE_CARDINALITIES = (8, 4, 5, 2, 3)

HUE_WORDS = (
    ("red", "crimson", "scarlet"),
    ("orange", "amber", "tangerine"),
    ("yellow", "golden", "sandy"),
    ("green", "emerald", "jade"),
    ("teal", "turquoise", "aqua"),
    ("blue", "azure", "sapphire"),
    ("purple", "violet", "mauve"),
    ("pink", "magenta", "rosy"),
)
SHAPE_WORDS = (
    ("round", "circular"),
    ("square", "boxy"),
    ("angular", "pointed"),
    ("oval", "elongated"),
)
MARK_POS_WORDS = (
    ("forehead", "brow"),
    ("chin", "jaw"),
    ("left cheek",),
    ("right cheek",),
    ("nose", "snout"),
)
NO_MARK_WORDS = ("unmarked", "unblemished", "spotless")
MARK_NOUNS = ("mark", "freckle", "spot")
BACKGROUND_WORDS = (
    ("dark", "dim", "shadowy"),
    ("cool", "frosty"),
    ("warm", "earthy"),
)

_BACKGROUND_RGB = ((0.16, 0.16, 0.18), (0.18, 0.24, 0.32), (0.30, 0.26, 0.16))
_MARK_OFFSETS = ((0.0, -0.45), (0.0, 0.52), (-0.42, 0.12), (0.42, 0.12), (0.0, 0.05))


class DatasetError(ValueError):
    """Malformed manifest or unsatisfiable generation request."""


@dataclass(frozen=True)
class AttributeVector:
    """Discrete identity slots of one synthetic subject."""
    hue: int
    shape: int
    mark_pos: int
    mark_present: int
    background: int

    def __post_init__(self):
        slots = (self.hue, self.shape, self.mark_pos, self.mark_present, self.background)
        for value, card in zip(slots, ATTRIBUTE_CARDINALITIES):
            if not 0 <= value < card:
                raise DatasetError(f"attribute value {value} outside cardinality {card}")

    @classmethod
    def from_index(cls, index: int) -> "AttributeVector":
        values = []
        for card in reversed(ATTRIBUTE_CARDINALITIES):
            values.append(index % card)
            index //= card
        return cls(*reversed(values))


@dataclass(frozen=True)
class FaceCaptionRecord:
    """One image of one subject with its captions; the dataset atom."""
    record_id: str
    subject_id: str
    image_path: str          # relative to the manifest directory
    split: str
    captions: tuple[str, ...]

    def __post_init__(self):
        if not self.captions or any(not c.strip() for c in self.captions):
            raise DatasetError(f"record {self.record_id} has an empty caption")
        if self.split not in SPLITS:
            raise DatasetError(f"record {self.record_id} has unknown split {self.split!r}")


class Vocabulary:
    """Token to id map with reserved class/pad/unknown ids 0/1/2."""

    def __init__(self, tokens: list[str] | tuple[str, ...]):
        self.tokens = tuple(tokens)
        self._index = {tok: N_RESERVED + i for i, tok in enumerate(self.tokens)}
        if len(self._index) != len(self.tokens):
            raise DatasetError("vocabulary contains duplicate tokens")

    @property
    def size(self) -> int:
        return N_RESERVED + len(self.tokens)

    def get(self, token: str) -> int:
        return self._index.get(token, UNK_ID)

    def save(self, path: str | Path) -> None:
        # one token per line; line number = id - 3
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln for ln in lines if ln])


@dataclass(frozen=True)
class TokenSequence:
    """Padded token ids plus the true length (class token included)."""
    ids: np.ndarray
    length: int

    def __post_init__(self):
        if self.length < 1 or self.length > len(self.ids):
            raise DatasetError("token length outside [1, t_max]")


_TOKEN_RE = re.compile(r"[a-z0-9]+")


def caption_words(caption: str) -> list[str]:
    """Lowercase and split on anything that is not alphanumeric."""
    return _TOKEN_RE.findall(caption.lower())


def build_vocab(captions: list[str]) -> Vocabulary:
    """Frequency-ordered vocabulary; ties broken lexicographically."""
    if not captions:
        raise DatasetError("cannot build a vocabulary from zero captions")
    counts: dict[str, int] = {}
    for cap in captions:
        for word in caption_words(cap):
            counts[word] = counts.get(word, 0) + 1
    ordered = sorted(counts, key=lambda w: (-counts[w], w))
    return Vocabulary(ordered)


def tokenize(caption: str, vocab: Vocabulary, t_max: int) -> TokenSequence:
    """Class token + word ids, truncated/padded to t_max; OOV maps to unknown."""
    ids = [CLS_ID] + [vocab.get(w) for w in caption_words(caption)]
    ids = ids[:t_max]
    length = len(ids)
    ids = ids + [PAD_ID] * (t_max - length)
    return TokenSequence(np.asarray(ids, dtype=np.int64), length)


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def _hue_rgb(bucket: int, jitter: float) -> tuple[float, float, float]:
    hue = ((bucket * 45.0 + jitter) % 360.0) / 360.0
    return colorsys.hsv_to_rgb(hue, 0.78, 0.88)


def render_face(attrs: AttributeVector, rng: np.random.Generator, size: int = 112) -> np.ndarray:
    """Render one float image in [0, 1], shape (size, size, 3), with per-render jitter."""
    img = np.empty((size, size, 3), dtype=np.float64)
    bg = np.array(_BACKGROUND_RGB[attrs.background])
    bg = np.clip(bg + rng.uniform(-0.04, 0.04), 0.0, 1.0)
    img[:] = bg

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cx = size / 2 + rng.uniform(-0.03, 0.03) * size
    cy = size / 2 + rng.uniform(-0.03, 0.03) * size
    radius = size * rng.uniform(0.30, 0.34)
    dx, dy = xx - cx, yy - cy

    if attrs.shape == 0:        # round
        mask = dx * dx + dy * dy <= radius * radius
    elif attrs.shape == 1:      # square
        mask = np.maximum(np.abs(dx), np.abs(dy)) <= radius
    elif attrs.shape == 2:      # angular (diamond)
        mask = np.abs(dx) + np.abs(dy) <= 1.25 * radius
    else:                       # oval
        mask = (dx / (0.78 * radius)) ** 2 + (dy / (1.22 * radius)) ** 2 <= 1.0

    face_rgb = np.array(_hue_rgb(attrs.hue, rng.uniform(-8.0, 8.0)))
    face_rgb = np.clip(face_rgb + rng.uniform(-0.03, 0.03, size=3), 0.0, 1.0)
    img[mask] = face_rgb

    # shared non-discriminative detail: every face gets the same pair of eyes
    eye_r = 0.065 * radius + 1.5
    for ex in (-0.30, 0.30):
        exc, eyc = cx + ex * radius, cy - 0.22 * radius
        eye = (xx - exc) ** 2 + (yy - eyc) ** 2 <= eye_r * eye_r
        img[eye] = (0.08, 0.08, 0.08)

    if attrs.mark_present:
        ox, oy = _MARK_OFFSETS[attrs.mark_pos]
        mxc = cx + (ox + rng.uniform(-0.03, 0.03)) * radius
        myc = cy + (oy + rng.uniform(-0.03, 0.03)) * radius
        mark_r = radius * rng.uniform(0.10, 0.13)
        mark = (xx - mxc) ** 2 + (yy - myc) ** 2 <= mark_r * mark_r
        img[mark] = (0.05, 0.03, 0.03)

    return np.clip(img, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Captioning
# ---------------------------------------------------------------------------

def _pick(rng: np.random.Generator, options) -> str:
    return options[int(rng.integers(len(options)))]


def make_caption(attrs: AttributeVector, rng: np.random.Generator) -> str:
    """One caption naming a random subset (>= 2) of the subject's attributes."""
    fragments: dict[str, str] = {
        "hue": _pick(rng, HUE_WORDS[attrs.hue]),
        "shape": _pick(rng, SHAPE_WORDS[attrs.shape]),
        "background": _pick(rng, BACKGROUND_WORDS[attrs.background]),
    }
    if attrs.mark_present:
        fragments["mark"] = (f"a {_pick(rng, MARK_NOUNS)} on the "
                             f"{_pick(rng, MARK_POS_WORDS[attrs.mark_pos])}")
    else:
        fragments["mark"] = f"{_pick(rng, NO_MARK_WORDS)} skin"

    names = ["hue", "shape", "mark", "background"]
    k = int(rng.integers(2, len(names) + 1))
    chosen = [names[i] for i in sorted(rng.choice(len(names), size=k, replace=False))]

    parts = []
    if "shape" in chosen and "hue" in chosen:
        parts.append(f"a {fragments['shape']} face with {fragments['hue']} skin")
    elif "shape" in chosen:
        parts.append(f"a {fragments['shape']} face")
    elif "hue" in chosen:
        parts.append(f"a face with {fragments['hue']} skin")
    if "mark" in chosen:
        parts.append(fragments["mark"])
    if "background" in chosen:
        parts.append(f"a {fragments['background']} background")

    style = int(rng.integers(3))
    if style == 0:
        return ", ".join(parts)
    if style == 1:
        return " and ".join(parts)
    return "this person has " + ", ".join(parts)


# ---------------------------------------------------------------------------
# Generation and manifest IO
# ---------------------------------------------------------------------------

def _splits_for(n_images: int) -> list[str]:
    # index 0 stays in train so stage-1 data is never empty; one gallery and
    # one probe image per subject when the count allows it
    splits = ["train"]
    if n_images >= 2:
        splits.append("gallery")
    if n_images >= 3:
        splits.append("probe")
    while len(splits) < n_images:
        splits.append("train")
    return splits


@dataclass(frozen=True)
class DatasetSummary:
    n_subjects: int
    n_images: int
    n_captions: int
    vocab_size: int
    manifest_path: str


def generate_synthetic(n_subjects: int, images_per_subject: int, captions_per_image: int,
                       seed: int, out_dir: str | Path, image_size: int = 112) -> DatasetSummary:
    """Write a deterministic synthetic dataset (images, manifest, vocabulary)."""
    capacity = int(np.prod(ATTRIBUTE_CARDINALITIES))
    if n_subjects > capacity:
        raise DatasetError(f"at most {capacity} distinct subjects are available")
    if n_subjects < 1 or images_per_subject < 1 or captions_per_image < 1:
        raise DatasetError("subject, image, and caption counts must be >= 1")

    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    identity_indices = rng.choice(capacity, size=n_subjects, replace=False)
    records: list[FaceCaptionRecord] = []
    attr_rows = []
    for subj_no, identity in enumerate(identity_indices):
        subject_id = f"s{subj_no:04d}"
        attrs = AttributeVector.from_index(int(identity))
        attr_rows.append((subject_id, attrs))
        splits = _splits_for(images_per_subject)
        for img_no in range(images_per_subject):
            record_id = f"{subject_id}-{img_no:02d}"
            rel_path = f"images/{record_id}.png"
            pixels = render_face(attrs, rng, size=image_size)
            Image.fromarray((pixels * 255.0).round().astype(np.uint8)).save(out / rel_path)
            captions = tuple(make_caption(attrs, rng) for _ in range(captions_per_image))
            records.append(FaceCaptionRecord(record_id, subject_id, rel_path,
                                             splits[img_no], captions))

    write_manifest(records, out / "manifest.tsv")
    vocab = build_vocab([c for r in records for c in r.captions])
    vocab.save(out / "vocab.txt")
    with open(out / "attributes.tsv", "w", encoding="utf-8") as fh:
        fh.write("subject_id\thue\tshape\tmark_pos\tmark_present\tbackground\n")
        for subject_id, a in attr_rows:
            fh.write(f"{subject_id}\t{a.hue}\t{a.shape}\t{a.mark_pos}"
                     f"\t{a.mark_present}\t{a.background}\n")

    return DatasetSummary(n_subjects, len(records), len(records) * captions_per_image,
                          vocab.size, str(out / "manifest.tsv"))


def write_manifest(records: list[FaceCaptionRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in sorted(records, key=lambda r: r.record_id):
            caps = " || ".join(rec.captions)
            fh.write(f"{rec.record_id}\t{rec.subject_id}\t{rec.image_path}"
                     f"\t{rec.split}\t{caps}\n")


def load_manifest(path: str | Path) -> list[FaceCaptionRecord]:
    """Read and validate a manifest; records come back sorted by record id."""
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"manifest not found: {path}")
    root = path.parent
    records = []
    seen = set()
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 5:
            raise DatasetError(f"{path}:{line_no}: expected 5 tab-separated fields")
        record_id, subject_id, image_path, split, caps = fields
        if record_id in seen:
            raise DatasetError(f"{path}:{line_no}: duplicate record id {record_id}")
        seen.add(record_id)
        if not (root / image_path).exists():
            raise DatasetError(f"record {record_id}: missing image {image_path}")
        captions = tuple(c.strip() for c in caps.split("||"))
        records.append(FaceCaptionRecord(record_id, subject_id, image_path, split, captions))
    records.sort(key=lambda r: r.record_id)
    return records


def load_image(record: FaceCaptionRecord, root: str | Path) -> np.ndarray:
    """Decode a record's image to float64 HxWx3 in [0, 1]."""
    with Image.open(Path(root) / record.image_path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr


def by_split(records: list[FaceCaptionRecord], split: str) -> list[FaceCaptionRecord]:
    if split not in SPLITS:
        raise DatasetError(f"unknown split {split!r}")
    return [r for r in records if r.split == split]


def subject_labels(records: list[FaceCaptionRecord]) -> dict[str, int]:
    """Dense label index per subject id, ordered by subject id."""
    subjects = sorted({r.subject_id for r in records})
    return {sid: i for i, sid in enumerate(subjects)}
