"""Document data model, dataset file format, IOB tooling, synthetic corpora,
and entity-level metrics.

A document is an ordered list of text segments, each with a bounding box, a
character transcript, an optional image crop, and an optional entity
annotation.  Everything here is pure and thread-safe.
"""

from __future__ import annotations

import base64
import io
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

FORMAT_VERSION = "pick-kie/1"

# Glyph rendering geometry: each character occupies a 5x7 cell plus 1px spacing.
GLYPH_W, GLYPH_H = 5, 7
CELL_W = GLYPH_W + 1
CROP_H = GLYPH_H + 5


class DataError(ValueError):
    """Malformed dataset files or invalid document structure."""


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in pixels; (x, y) is the top-left corner."""

    x: float
    y: float
    w: float
    h: float

    def validate(self) -> None:
        if not (self.w > 0 and self.h > 0):
            raise DataError(f"bbox must have positive size, got w={self.w}, h={self.h}")


@dataclass
class Segment:
    """One text segment: transcript, box, crop, and optional gold entity.

    ``char_labels`` can override the derived one-entity-per-segment tagging
    with an explicit per-character IOB sequence.
    """

    chars: str
    bbox: BBox
    image: np.ndarray | None = None
    entity: str | None = None
    char_labels: list[str] | None = None

    def validate(self) -> None:
        if len(self.chars) < 1:
            raise DataError("segment transcript must be non-empty")
        self.bbox.validate()
        if self.image is not None:
            if self.image.ndim != 3 or self.image.shape[2] != 3:
                raise DataError(f"segment image must be HxWx3, got {self.image.shape}")
        if self.char_labels is not None:
            if len(self.char_labels) != len(self.chars):
                raise DataError("char_labels length must equal transcript length")
            _validate_iob(self.char_labels)

    def crop(self) -> np.ndarray:
        """The image crop, or a uniform gray placeholder of the bbox aspect."""
        if self.image is not None:
            return self.image
        return placeholder_crop(self.bbox)


@dataclass
class Document:
    """Ordered segments plus an identifier; ordering is reading order."""

    segments: list[Segment]
    id: str = ""

    def validate(self) -> None:
        if len(self.segments) < 1:
            raise DataError("empty document")
        for i, seg in enumerate(self.segments):
            try:
                seg.validate()
            except DataError as e:
                raise DataError(f"segment {i}: {e}") from None

    def gold_spans(self) -> list["EntitySpan"]:
        return [
            EntitySpan(seg.entity, seg.chars, i)
            for i, seg in enumerate(self.segments)
            if seg.entity is not None
        ]


@dataclass(frozen=True)
class EntitySpan:
    entity: str
    text: str
    segment_index: int


@dataclass(frozen=True)
class PRF:
    """Precision / recall / F1 triple for entity-level matching."""

    mEP: float
    mER: float
    mEF: float


@dataclass
class MetricsReport:
    per_entity: dict[str, PRF]
    overall_micro: PRF

    def as_dict(self) -> dict:
        return {
            "format": "pick-kie-metrics/1",
            "per_entity": {
                name: {"mEP": p.mEP, "mER": p.mER, "mEF": p.mEF}
                for name, p in sorted(self.per_entity.items())
            },
            "overall_micro": {
                "mEP": self.overall_micro.mEP,
                "mER": self.overall_micro.mER,
                "mEF": self.overall_micro.mEF,
            },
        }


def placeholder_crop(bbox: BBox) -> np.ndarray:
    """Uniform gray 0.5 crop matching the bbox aspect ratio."""
    h = 16
    w = int(np.clip(round(h * bbox.w / bbox.h), 2, 256))
    return np.full((h, w, 3), 0.5)


def reading_order(segments: list[Segment]) -> list[Segment]:
    """Sort top-to-bottom then left-to-right by the bbox top-left corner."""
    return sorted(segments, key=lambda s: (s.bbox.y, s.bbox.x))


# -- dataset file format --------------------------------------------------------


def _encode_png(image: np.ndarray) -> str:
    arr = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="RGB").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def _decode_png(b64: str) -> np.ndarray:
    raw = base64.b64decode(b64.encode("ascii"))
    img = Image.open(io.BytesIO(raw)).convert("RGB")
    return np.asarray(img, dtype=np.float64) / 255.0


def load_document(path: str | Path) -> Document:
    """Read one document file; segments come back sorted in reading order.

    Missing image crops are synthesized as uniform gray so text-only corpora
    stay usable.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise DataError(f"{path}: {e}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: malformed JSON at line {e.lineno}, column {e.colno}: {e.msg}") from None

    if not isinstance(raw, dict):
        raise DataError(f"{path}: expected a JSON object")
    if raw.get("format") != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported format {raw.get('format')!r}, expected {FORMAT_VERSION!r}")
    if "segments" not in raw:
        raise DataError(f"{path}: missing 'segments'")

    segments = []
    for i, seg_raw in enumerate(raw["segments"]):
        where = f"{path}: segment {i}"
        for key in ("bbox", "text"):
            if key not in seg_raw:
                raise DataError(f"{where}: missing {key!r}")
        bbox_raw = seg_raw["bbox"]
        if not (isinstance(bbox_raw, list) and len(bbox_raw) == 4):
            raise DataError(f"{where}: bbox must be [x, y, w, h]")
        bbox = BBox(*map(float, bbox_raw))
        if not (bbox.w > 0 and bbox.h > 0):
            raise DataError(f"{where}: bbox must have positive w and h, got {bbox_raw}")
        chars = seg_raw["text"]
        if not isinstance(chars, str) or len(chars) < 1:
            raise DataError(f"{where}: text must be a non-empty string")
        image = None
        if seg_raw.get("image") is not None:
            try:
                image = _decode_png(seg_raw["image"])
            except Exception as e:
                raise DataError(f"{where}: bad image data ({e})") from None
        else:
            image = placeholder_crop(bbox)
        segments.append(Segment(chars=chars, bbox=bbox, image=image, entity=seg_raw.get("entity")))

    if not segments:
        raise DataError(f"{path}: empty document")
    doc = Document(segments=reading_order(segments), id=str(raw.get("id", path.stem)))
    doc.validate()
    return doc


def save_document(doc: Document, path: str | Path) -> None:
    doc.validate()
    payload = {
        "format": FORMAT_VERSION,
        "id": doc.id,
        "segments": [
            {
                "bbox": [seg.bbox.x, seg.bbox.y, seg.bbox.w, seg.bbox.h],
                "text": seg.chars,
                "entity": seg.entity,
                "image": None if seg.image is None else _encode_png(seg.image),
            }
            for seg in doc.segments
        ],
    }
    Path(path).write_text(json.dumps(payload, ensure_ascii=False), encoding="utf-8")


def load_dir(path: str | Path) -> list[Document]:
    """Load every *.json document in a directory, sorted by filename."""
    files = sorted(Path(path).glob("*.json"))
    if not files:
        raise DataError(f"{path}: no *.json documents found")
    return [load_document(f) for f in files]


# -- IOB tagging -----------------------------------------------------------------


def tag_names(entities: list[str] | tuple[str, ...]) -> list[str]:
    """Ordered tag vocabulary: O first, then B-/I- per entity, entities sorted."""
    names = ["O"]
    for ent in sorted(set(entities)):
        names.append(f"B-{ent}")
        names.append(f"I-{ent}")
    return names


def _validate_iob(tags: list[str]) -> None:
    prev_entity = None
    for tag in tags:
        if tag == "O":
            prev_entity = None
            continue
        kind, dash, entity = tag.partition("-")
        if kind not in ("B", "I") or not dash or not entity:
            raise DataError(f"invalid IOB tag {tag!r}")
        if kind == "I" and prev_entity != entity:
            raise DataError(f"I-{entity} does not continue an open {entity} span")
        prev_entity = entity


def to_iob(segment: Segment) -> list[str]:
    """Per-character tags: B-E then I-E... when annotated, else all O."""
    if segment.char_labels is not None:
        return list(segment.char_labels)
    if segment.entity is None:
        return ["O"] * len(segment.chars)
    return [f"B-{segment.entity}"] + [f"I-{segment.entity}"] * (len(segment.chars) - 1)


def decode_iob(tags: list[str], chars: str, segment_index: int = 0) -> list[EntitySpan]:
    """Lenient span decoding: a stray I-X (no matching open span) starts one."""
    if len(tags) != len(chars):
        raise DataError(f"tags ({len(tags)}) and chars ({len(chars)}) differ in length")
    spans: list[EntitySpan] = []
    open_entity: str | None = None
    start = 0
    for i, tag in enumerate(tags):
        if tag == "O":
            if open_entity is not None:
                spans.append(EntitySpan(open_entity, chars[start:i], segment_index))
                open_entity = None
            continue
        kind, _, entity = tag.partition("-")
        if kind == "I" and open_entity == entity:
            continue
        if open_entity is not None:
            spans.append(EntitySpan(open_entity, chars[start:i], segment_index))
        open_entity = entity
        start = i
    if open_entity is not None:
        spans.append(EntitySpan(open_entity, chars[start:], segment_index))
    return spans


# -- metrics ---------------------------------------------------------------------


def _prf(tp: int, n_pred: int, n_gold: int) -> PRF:
    p = tp / n_pred if n_pred else 0.0
    r = tp / n_gold if n_gold else 0.0
    f = 0.0 if p + r == 0 else 2 * p * r / (p + r)
    return PRF(p, r, f)


def compute_metrics(
    predicted: list[list[EntitySpan]], gold: list[list[EntitySpan]]
) -> MetricsReport:
    """Entity-level precision/recall/F1 over parallel per-document span lists.

    A predicted span is correct iff its entity type and exact text both match
    a gold span of the same document, each gold span matched at most once.
    """
    if len(predicted) != len(gold):
        raise DataError(f"{len(predicted)} prediction lists vs {len(gold)} gold lists")

    tp: dict[str, int] = {}
    n_pred: dict[str, int] = {}
    n_gold: dict[str, int] = {}
    for pred_spans, gold_spans in zip(predicted, gold):
        by_key_pred: dict[tuple[str, str], int] = {}
        by_key_gold: dict[tuple[str, str], int] = {}
        for s in pred_spans:
            n_pred[s.entity] = n_pred.get(s.entity, 0) + 1
            key = (s.entity, s.text)
            by_key_pred[key] = by_key_pred.get(key, 0) + 1
        for s in gold_spans:
            n_gold[s.entity] = n_gold.get(s.entity, 0) + 1
            key = (s.entity, s.text)
            by_key_gold[key] = by_key_gold.get(key, 0) + 1
        for key, count in by_key_pred.items():
            matched = min(count, by_key_gold.get(key, 0))
            if matched:
                tp[key[0]] = tp.get(key[0], 0) + matched

    entities = sorted(set(n_pred) | set(n_gold))
    per_entity = {
        ent: _prf(tp.get(ent, 0), n_pred.get(ent, 0), n_gold.get(ent, 0)) for ent in entities
    }
    overall = _prf(sum(tp.values()), sum(n_pred.values()), sum(n_gold.values()))
    return MetricsReport(per_entity=per_entity, overall_micro=overall)


# -- synthetic corpus ------------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for the synthetic document generator.

    ``fixed`` mode pins every entity to a constant grid cell; ``variable``
    mode jitters positions and inserts distractor segments.  With
    ``ambiguity_probe`` on (variable mode), each document carries two
    segments with identical text but different entities, distinguishable
    only by layout structure or by rendered ink color.
    """

    mode: str = "fixed"
    entities: tuple[str, ...] = ("DATE", "TOTAL", "COMPANY")
    vocab: str = "ABCDEFGHIJKLMNOPQRSTUVWXYZ"
    count: int = 10
    render_glyphs: bool = True
    ambiguity_probe: bool = False
    probe_pair: tuple[str, str] = ("TOTAL", "SUBTOTAL")
    distractors: tuple[int, int] = (2, 5)

    def validate(self) -> None:
        if self.mode not in ("fixed", "variable"):
            raise DataError(f"unknown layout mode {self.mode!r}")
        if not self.entities:
            raise DataError("entity schema must not be empty")
        if len(set(self.entities)) != len(self.entities):
            raise DataError("entity schema contains duplicates")
        if self.count < 0:
            raise DataError("document count must be >= 0")
        if self.ambiguity_probe:
            if self.mode != "variable":
                raise DataError("ambiguity probe requires variable layout mode")
            missing = [e for e in self.probe_pair if e not in self.entities]
            if missing:
                raise DataError(f"probe pair entities {missing} missing from schema")
        if not self.vocab:
            raise DataError("vocabulary must not be empty")


INK_DEFAULT = (0.15, 0.15, 0.15)
INK_RED = (0.75, 0.08, 0.08)
INK_BLUE = (0.08, 0.08, 0.75)


def _glyph_bitmap(ch: str) -> np.ndarray:
    """Deterministic 7x5 pseudo-glyph derived from the codepoint alone."""
    state = (ord(ch) * 2654435761 + 97) & 0x7FFFFFFF
    bits = np.empty(GLYPH_H * GLYPH_W, dtype=bool)
    for i in range(bits.size):
        state = (state * 1103515245 + 12345) & 0x7FFFFFFF
        bits[i] = (state >> 16) & 1
    return bits.reshape(GLYPH_H, GLYPH_W)


def render_text_crop(text: str, ink=INK_DEFAULT) -> np.ndarray:
    """Render a transcript to a small white crop with per-character glyphs."""
    w = CELL_W * len(text) + 2
    img = np.ones((CROP_H, w, 3))
    y0 = (CROP_H - GLYPH_H) // 2
    for k, ch in enumerate(text):
        x0 = 1 + k * CELL_W
        mask = _glyph_bitmap(ch)
        region = img[y0 : y0 + GLYPH_H, x0 : x0 + GLYPH_W]
        region[mask] = ink
    return img


def _seg(text: str, x: float, y: float, entity=None, ink=INK_DEFAULT, render=True) -> Segment:
    bbox = BBox(x=x, y=y, w=4.0 + 6.0 * len(text), h=14.0)
    image = render_text_crop(text, ink) if render else None
    return Segment(chars=text, bbox=bbox, image=image, entity=entity)


def _value_text(entity: str, rng: np.random.Generator, vocab: str) -> str:
    digits = "0123456789"
    if entity == "DATE":
        d = rng.integers(1, 29)
        m = rng.integers(1, 13)
        y = rng.integers(2015, 2026)
        return f"{d:02d}/{m:02d}/{y}"
    if any(entity.startswith(p) for p in ("TOTAL", "SUBTOTAL", "AMOUNT", "TAX")):
        units = rng.integers(1, 1000)
        cents = rng.integers(0, 100)
        return f"{units}.{cents:02d}"
    length = int(rng.integers(4, 9))
    return "".join(vocab[i] for i in rng.integers(0, len(vocab), size=length))


def _rand_word(rng: np.random.Generator, vocab: str, lo=3, hi=10) -> str:
    length = int(rng.integers(lo, hi + 1))
    return "".join(vocab[i] for i in rng.integers(0, len(vocab), size=length))


def _amount_like(rng: np.random.Generator) -> str:
    return f"{rng.integers(1, 1000)}.{rng.integers(0, 100):02d}"


def generate_synthetic(config: SynthConfig, seed: int) -> list[Document]:
    """Deterministic synthetic corpus; a pure function of (config, seed)."""
    config.validate()
    rng = np.random.default_rng(np.random.PCG64(seed))
    docs = []
    for n in range(config.count):
        if config.mode == "fixed":
            doc = _gen_fixed(config, rng, n)
        else:
            doc = _gen_variable(config, rng, n)
        doc.segments = reading_order(doc.segments)
        doc.validate()
        docs.append(doc)
    return docs


def _gen_fixed(config: SynthConfig, rng: np.random.Generator, n: int) -> Document:
    render = config.render_glyphs
    segs = [_seg(f"RECEIPT {rng.integers(1000, 10000)}", 16.0, 12.0, render=render)]
    for k, ent in enumerate(config.entities):
        y = 44.0 + 36.0 * k
        segs.append(_seg(f"{ent}:", 16.0, y, render=render))
        segs.append(_seg(_value_text(ent, rng, config.vocab), 140.0, y, entity=ent, render=render))
    segs.append(_seg("THANK YOU", 16.0, 44.0 + 36.0 * len(config.entities), render=render))
    return Document(segments=segs, id=f"fixed-{n:05d}")


def _gen_variable(config: SynthConfig, rng: np.random.Generator, n: int) -> Document:
    render = config.render_glyphs
    segs = [_seg(f"RECEIPT {rng.integers(1000, 10000)}", 16.0 + rng.uniform(-6, 6), 12.0 + rng.uniform(-4, 4), render=render)]

    probe_entities = set(config.probe_pair) if config.ambiguity_probe else set()
    row = 0
    for ent in config.entities:
        if ent in probe_entities:
            continue
        y = 44.0 + 36.0 * row + rng.uniform(-10, 10)
        x_label = 16.0 + rng.uniform(-6, 6)
        segs.append(_seg(f"{ent}:", x_label, y, render=render))
        segs.append(_seg(_value_text(ent, rng, config.vocab), 140.0 + rng.uniform(-12, 12), y + rng.uniform(-2, 2), entity=ent, render=render))
        row += 1

    if config.ambiguity_probe:
        segs.extend(_gen_probe(config, rng, 44.0 + 36.0 * row))
        row += 2

    lo, hi = config.distractors
    n_distr = int(rng.integers(lo, hi + 1))
    for _ in range(n_distr):
        text = _amount_like(rng) if rng.random() < 0.4 else _rand_word(rng, config.vocab)
        x = rng.uniform(10.0, 240.0)
        y = rng.uniform(10.0, 60.0 + 40.0 * (row + 1))
        segs.append(_seg(text, x, y, render=render))
    return Document(segments=segs, id=f"variable-{n:05d}")


def _gen_probe(config: SynthConfig, rng: np.random.Generator, y_base: float) -> list[Segment]:
    """Two segments with identical text but different entities.

    Color docs mark the pair by ink color alone (spatial order random,
    labels absent).  Structure docs place each value's label directly above
    it (default ink, spatial order random); the label is a geometric
    neighbor but not a sequence neighbor, so resolving it rewards pairwise
    layout reasoning over reading-order recency.
    """
    render = config.render_glyphs
    first, second = config.probe_pair
    text = _amount_like(rng)
    order = [first, second] if rng.random() < 0.5 else [second, first]
    cue_color = render and rng.random() < 0.5
    segs = []
    for slot, ent in enumerate(order):
        y = y_base + 44.0 * slot + rng.uniform(-6, 6)
        x_val = 80.0 + 110.0 * slot + rng.uniform(-12, 12)
        if cue_color:
            ink = INK_RED if ent == first else INK_BLUE
            segs.append(_seg(text, x_val, y, entity=ent, ink=ink, render=render))
        else:
            segs.append(_seg(f"{ent}:", x_val + rng.uniform(-4, 4), y - 17.0, render=render))
            segs.append(_seg(text, x_val, y, entity=ent, render=render))
    return segs
