"""Dataset types, annotation ingestion, and deterministic toy data.

Annotation files from the two supported benchmark layouts are reduced to a
single canonical sample format: one image, one OCR token (the answer), one
ground-truth question.  Question-answer pairs whose answer does not match
any OCR token of the image are dropped and logged, never silently
discarded.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .features import FeatureStore, build_feature_store
from .seeding import stable_digest, substream
from .text import match_words, tokenize

ANGLE_FIELDS = ("rotation", "yaw", "roll", "pitch")
SPLITS = ("train", "test")
SOURCES = ("stvqa", "textvqa", "toy")


class IngestError(Exception):
    """Raised for malformed annotation or OCR files."""


@dataclass(frozen=True)
class BoxGeometry:
    """Axis-aligned box in pixels, optionally with orientation angles."""

    x: float
    y: float
    w: float
    h: float
    rotation: float | None = None
    yaw: float | None = None
    roll: float | None = None
    pitch: float | None = None

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box needs positive size, got w={self.w}, h={self.h}")
        if self.x < 0 or self.y < 0:
            raise ValueError(f"box origin must be non-negative, got ({self.x}, {self.y})")
        angles = [getattr(self, f) for f in ANGLE_FIELDS]
        if any(a is None for a in angles) and any(a is not None for a in angles):
            raise ValueError("angle fields must be all present or all absent")

    @property
    def has_angles(self) -> bool:
        return self.rotation is not None

    def angles(self) -> tuple[float, float, float, float] | None:
        if not self.has_angles:
            return None
        return (self.rotation, self.yaw, self.roll, self.pitch)


@dataclass(frozen=True)
class OcrToken:
    """A recognized text string and where it sits in the image."""

    text: str
    box: BoxGeometry

    def __post_init__(self):
        if not match_words(self.text):
            raise ValueError(f"OCR token text normalizes to nothing: {self.text!r}")

    def words(self) -> tuple[str, ...]:
        return match_words(self.text)


@dataclass(frozen=True)
class Sample:
    """One (image, OCR token, question) unit."""

    image_id: str
    image_w: float
    image_h: float
    ocr: OcrToken
    question: tuple[str, ...]
    answer: str
    split: str

    def __post_init__(self):
        if self.image_w <= 0 or self.image_h <= 0:
            raise ValueError(f"image dims must be positive for {self.image_id!r}")
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        if self.split == "train" and not self.question:
            raise ValueError(f"train sample {self.image_id!r} has an empty question")
        box = self.ocr.box
        if box.x + box.w > self.image_w + 1e-6 or box.y + box.h > self.image_h + 1e-6:
            raise ValueError(f"box exceeds image bounds for {self.image_id!r}")

    def answer_word_count(self) -> int:
        return len(match_words(self.answer))


@dataclass
class DatasetManifest:
    """Ordered, filtered samples from one source."""

    name: str
    source: str
    samples: tuple[Sample, ...]

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"unknown source {self.source!r}")
        self.samples = tuple(self.samples)

    def __len__(self) -> int:
        return len(self.samples)

    def split(self, name: str) -> list[Sample]:
        return [s for s in self.samples if s.split == name]

    def image_ids(self) -> list[str]:
        seen = dict.fromkeys(s.image_id for s in self.samples)
        return list(seen)

    def save_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for s in self.samples:
                fh.write(json.dumps(_sample_to_record(s), sort_keys=True) + "\n")

    @classmethod
    def load_jsonl(cls, path, name=None, source="toy") -> "DatasetManifest":
        samples = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    samples.append(_sample_from_record(json.loads(line)))
                except (KeyError, ValueError, TypeError) as exc:
                    raise IngestError(f"{path}:{lineno}: bad manifest record: {exc}") from exc
        return cls(name=name or Path(path).stem, source=source, samples=tuple(samples))


def _sample_to_record(s: Sample) -> dict:
    box = {"x": s.ocr.box.x, "y": s.ocr.box.y, "w": s.ocr.box.w, "h": s.ocr.box.h}
    if s.ocr.box.has_angles:
        box.update({f: getattr(s.ocr.box, f) for f in ANGLE_FIELDS})
    return {
        "image_id": s.image_id,
        "image_w": s.image_w,
        "image_h": s.image_h,
        "ocr": {"text": s.ocr.text, "box": box},
        "question": " ".join(s.question),
        "answer": s.answer,
        "split": s.split,
    }


def _sample_from_record(rec: dict) -> Sample:
    box = rec["ocr"]["box"]
    return Sample(
        image_id=rec["image_id"],
        image_w=rec["image_w"],
        image_h=rec["image_h"],
        ocr=OcrToken(text=rec["ocr"]["text"], box=BoxGeometry(**box)),
        question=tuple(rec["question"].split()),
        answer=rec["answer"],
        split=rec["split"],
    )


def clamp_box(box: BoxGeometry, image_w: float, image_h: float) -> BoxGeometry | None:
    """Clip a box to the image; None when nothing remains."""
    x = min(max(box.x, 0.0), image_w)
    y = min(max(box.y, 0.0), image_h)
    w = min(box.w, image_w - x)
    h = min(box.h, image_h - y)
    if w <= 0 or h <= 0:
        return None
    return replace(box, x=x, y=y, w=w, h=h)


def _merge_run(tokens: list[OcrToken]) -> OcrToken:
    if len(tokens) == 1:
        return tokens[0]
    x = min(t.box.x for t in tokens)
    y = min(t.box.y for t in tokens)
    x2 = max(t.box.x + t.box.w for t in tokens)
    y2 = max(t.box.y + t.box.h for t in tokens)
    angles = {t.box.angles() for t in tokens}
    kept = angles.pop() if len(angles) == 1 else None
    angle_kwargs = dict(zip(ANGLE_FIELDS, kept)) if kept else {}
    box = BoxGeometry(x=x, y=y, w=x2 - x, h=y2 - y, **angle_kwargs)
    return OcrToken(text=" ".join(t.text for t in tokens), box=box)


def answer_matches_ocr(answer: str, ocr_tokens) -> OcrToken | None:
    """First OCR token (or contiguous reading-order run) matching the answer.

    Comparison is on case-folded words with surrounding punctuation
    stripped.  A run of tokens is merged into one token covering their
    joint bounding box; angles survive only when identical across the run.
    """
    target = match_words(answer)
    if not target:
        return None
    tokens = list(ocr_tokens)
    token_words = [t.words() for t in tokens]
    for start in range(len(tokens)):
        acc: list[str] = []
        for end in range(start, len(tokens)):
            acc.extend(token_words[end])
            if tuple(acc) == target:
                return _merge_run(tokens[start:end + 1])
            if len(acc) >= len(target) or tuple(acc) != target[:len(acc)]:
                break
    return None


@dataclass
class IngestResult:
    manifest: DatasetManifest
    skipped: list[dict] = field(default_factory=list)

    def write_skip_log(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.skipped:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _load_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise IngestError(f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise IngestError(f"{path}:{exc.lineno}: not valid JSON: {exc.msg}") from exc


def _as_box(raw: dict, image_w, image_h, where: str) -> BoxGeometry | None:
    """Box from a raw record; fractional coordinates are scaled to pixels."""
    try:
        x, y, w, h = (float(raw[k]) for k in ("x", "y", "w", "h"))
    except (KeyError, TypeError, ValueError) as exc:
        raise IngestError(f"{where}: bad box geometry: {exc}") from exc
    if max(x, y, w, h) <= 1.0 and image_w and image_h:
        x, w = x * image_w, w * image_w
        y, h = y * image_h, h * image_h
    angles = {}
    present = [f for f in ANGLE_FIELDS if raw.get(f) is not None]
    if len(present) == len(ANGLE_FIELDS):
        angles = {f: float(raw[f]) for f in ANGLE_FIELDS}
    if w <= 0 or h <= 0:
        return None
    return BoxGeometry(x=max(x, 0.0), y=max(y, 0.0), w=w, h=h, **angles)


def _read_ocr_file(path) -> dict[str, dict]:
    """OCR records keyed by image id.

    Accepts the package's sidecar layout ({"images": [{image_id, width,
    height, tokens: [{text, x, y, w, h, angles...}]}]}) and the Rosetta
    release layout ({"data": [{image_id, image_width, image_height,
    ocr_info: [{word, bounding_box: {top_left_x, ...}}]}]}, fractional
    coordinates).
    """
    doc = _load_json(path)
    records: dict[str, dict] = {}
    if isinstance(doc, dict) and "images" in doc:
        for i, rec in enumerate(doc["images"]):
            where = f"{path}: images[{i}]"
            try:
                records[str(rec["image_id"])] = {
                    "width": rec.get("width"),
                    "height": rec.get("height"),
                    "tokens": list(rec.get("tokens", ())),
                }
            except KeyError as exc:
                raise IngestError(f"{where}: missing {exc}") from exc
        return records
    if isinstance(doc, dict) and "data" in doc:
        for i, rec in enumerate(doc["data"]):
            where = f"{path}: data[{i}]"
            image_id = rec.get("image_id")
            if image_id is None:
                raise IngestError(f"{where}: missing image_id")
            tokens = []
            for info in rec.get("ocr_info", ()):
                bb = info.get("bounding_box", {})
                tokens.append({
                    "text": info.get("word", ""),
                    "x": bb.get("top_left_x"),
                    "y": bb.get("top_left_y"),
                    "w": bb.get("width"),
                    "h": bb.get("height"),
                    **{f: bb.get(f) for f in ANGLE_FIELDS},
                })
            records[str(image_id)] = {
                "width": rec.get("image_width"),
                "height": rec.get("image_height"),
                "tokens": tokens,
            }
        return records
    raise IngestError(f"{path}: unrecognized OCR file layout")


def _ranked_answers(answers, by_frequency: bool) -> list[str]:
    answers = [a for a in answers if isinstance(a, str) and a.strip()]
    if by_frequency:
        counts = Counter(answers)
        order = sorted(counts, key=lambda a: (-counts[a], answers.index(a)))
        return order
    return list(dict.fromkeys(answers))


def _ingest(records, ocr_map, *, name, source, image_key, default_split,
            rank_answers_by_frequency) -> IngestResult:
    samples = []
    skipped = []

    def skip(i, image_id, reason):
        skipped.append({"record": i, "image_id": image_id, "reason": reason})

    for i, rec in enumerate(records):
        image_id = rec.get(image_key)
        if image_id is None:
            skip(i, None, f"missing {image_key}")
            continue
        image_id = str(image_id)
        question = rec.get("question", "")
        answers = _ranked_answers(rec.get("answers", ()), rank_answers_by_frequency)
        # One annotation file covers one split; the caller names it.
        split = default_split
        ocr_rec = ocr_map.get(image_id)
        if ocr_rec is None:
            skip(i, image_id, "no OCR record for image")
            continue
        image_w = rec.get("image_width") or rec.get("width") or ocr_rec.get("width")
        image_h = rec.get("image_height") or rec.get("height") or ocr_rec.get("height")
        if not image_w or not image_h:
            skip(i, image_id, "unknown image size")
            continue
        image_w, image_h = float(image_w), float(image_h)
        tokens = []
        for raw in ocr_rec["tokens"]:
            where = f"{name}: record {i} image {image_id}"
            box = _as_box(raw, image_w, image_h, where)
            if box is None:
                continue
            box = clamp_box(box, image_w, image_h)
            if box is None or not match_words(str(raw.get("text", ""))):
                continue
            tokens.append(OcrToken(text=str(raw["text"]), box=box))
        if not tokens:
            skip(i, image_id, "image has no usable OCR tokens")
            continue
        matched = None
        matched_answer = None
        for answer in answers:
            matched = answer_matches_ocr(answer, tokens)
            if matched is not None:
                matched_answer = answer
                break
        if matched is None:
            skip(i, image_id, "answer does not match any OCR token")
            continue
        question_words = tuple(tokenize(question))
        if split == "train" and not question_words:
            skip(i, image_id, "empty question in train split")
            continue
        box = clamp_box(matched.box, image_w, image_h)
        if box is None:
            skip(i, image_id, "matched token outside image bounds")
            continue
        samples.append(Sample(
            image_id=image_id,
            image_w=image_w,
            image_h=image_h,
            ocr=OcrToken(text=matched.text, box=box),
            question=question_words,
            answer=matched_answer,
            split=split,
        ))
    manifest = DatasetManifest(name=name, source=source, samples=tuple(samples))
    return IngestResult(manifest=manifest, skipped=skipped)


def ingest_stvqa(annotation_path, ocr_path, split: str = "train") -> IngestResult:
    """Samples from an ST-VQA style annotation file plus an OCR sidecar.

    Keeps only question-answer pairs whose answer matches an OCR token of
    the image.  The image key is the record's file_path (or image_id).
    """
    doc = _load_json(annotation_path)
    data = doc.get("data") if isinstance(doc, dict) else None
    if data is None:
        raise IngestError(f"{annotation_path}: expected a top-level 'data' list")
    records = []
    for i, rec in enumerate(data):
        if not isinstance(rec, dict):
            raise IngestError(f"{annotation_path}: data[{i}] is not an object")
        rec = dict(rec)
        rec.setdefault("file_path", rec.get("file_name", rec.get("image_id")))
        rec["__key"] = rec.get("file_path")
        records.append(rec)
    ocr_map = _read_ocr_file(ocr_path)
    return _ingest(
        records, ocr_map,
        name=Path(annotation_path).stem, source="stvqa", image_key="__key",
        default_split=split, rank_answers_by_frequency=False,
    )


def ingest_textvqa(annotation_path, rosetta_ocr_path, split: str = "train") -> IngestResult:
    """Samples from a TextVQA annotation file plus Rosetta OCR records.

    Answers (ten crowd answers per question) are tried most-frequent
    first.  Rosetta records carry all four orientation angles.
    """
    doc = _load_json(annotation_path)
    data = doc.get("data") if isinstance(doc, dict) else None
    if data is None:
        raise IngestError(f"{annotation_path}: expected a top-level 'data' list")
    for i, rec in enumerate(data):
        if not isinstance(rec, dict):
            raise IngestError(f"{annotation_path}: data[{i}] is not an object")
    ocr_map = _read_ocr_file(rosetta_ocr_path)
    return _ingest(
        list(data), ocr_map,
        name=Path(annotation_path).stem, source="textvqa", image_key="image_id",
        default_split=split, rank_answers_by_frequency=True,
    )


# --- deterministic toy data ------------------------------------------------

_TOY_OBJECTS = ("bus", "train", "sign", "shop", "jersey", "bottle", "book",
                "door", "truck", "plane", "boat", "wall")
_TOY_COLORS = ("red", "blue", "green", "white", "black", "yellow")
_TOY_SYLLABLES = ("ka", "lo", "mi", "ru", "ta", "ve", "zo", "ne", "pa", "su")


def _toy_word(rng) -> str:
    return "".join(rng.choice(_TOY_SYLLABLES) for _ in range(rng.integers(2, 4)))


def _toy_answer(rng, kind: str) -> str:
    if kind == "number":
        return str(rng.integers(10, 10000))
    if kind == "word":
        return _toy_word(rng)
    if kind == "two-word":
        return f"{_toy_word(rng)} {_toy_word(rng)}"
    return f"{_toy_word(rng)} {_toy_word(rng)} {_toy_word(rng)}"


_TOY_TEMPLATES = (
    ("number", "what is the number on the {obj}?"),
    ("word", "what word is painted on the {obj}?"),
    ("word", "what is the name of the {color} {obj}?"),
    ("word", "what brand is the {obj}?"),
    ("two-word", "what is written on the {obj}?"),
    ("number", "what number is on the {color} {obj}?"),
    ("word", "what does the {obj} say?"),
    ("three-word", "what text appears near the {obj}?"),
)


def toy_visual_features(seed: int, image_ids, dim: int) -> FeatureStore:
    """Pseudo-random unit-scale features keyed by (seed, image_id)."""
    vectors = {}
    for image_id in image_ids:
        rng = np.random.default_rng(stable_digest(seed, "visual", image_id))
        vectors[image_id] = rng.standard_normal(dim).astype(np.float32)
    return build_feature_store(vectors, dim)


def toy_side_info(seed: int, manifest: DatasetManifest) -> dict[str, dict]:
    """Deterministic object tags and captions for every manifest image."""
    info = {}
    for s in manifest.samples:
        if s.image_id in info:
            continue
        rng = substream(seed, "side", s.image_id)
        obj = s.question[-2] if len(s.question) >= 2 else "object"
        color = _TOY_COLORS[int(rng.integers(len(_TOY_COLORS)))]
        extra = _TOY_OBJECTS[int(rng.integers(len(_TOY_OBJECTS)))]
        info[s.image_id] = {
            "image_id": s.image_id,
            "tags": sorted({obj, extra}),
            "caption": f"a {color} {obj} with text on it",
        }
    return info


def make_toy_dataset(seed: int, n: int) -> tuple[DatasetManifest, FeatureStore]:
    """n synthetic samples plus a 512-d visual feature store.

    Identical seeds give bit-identical manifests and features.  Every
    fifth sample lands in the test split; every third sample carries
    orientation angles on its box.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    samples = []
    for i in range(n):
        rng = substream(seed, "toy", i)
        image_id = f"toy-{i:04d}"
        image_w, image_h = 640.0, 480.0
        kind, template = _TOY_TEMPLATES[int(rng.integers(len(_TOY_TEMPLATES)))]
        obj = _TOY_OBJECTS[int(rng.integers(len(_TOY_OBJECTS)))]
        color = _TOY_COLORS[int(rng.integers(len(_TOY_COLORS)))]
        answer = _toy_answer(rng, kind)
        question = tuple(tokenize(template.format(obj=obj, color=color)))
        x = float(rng.uniform(0, image_w - 120))
        y = float(rng.uniform(0, image_h - 60))
        w = float(rng.uniform(40, 120))
        h = float(rng.uniform(15, 60))
        angles = {}
        if i % 3 == 0:
            angles = {
                "rotation": float(rng.uniform(-45, 45)),
                "yaw": float(rng.uniform(-30, 30)),
                "roll": float(rng.uniform(-15, 15)),
                "pitch": float(rng.uniform(-15, 15)),
            }
        box = BoxGeometry(x=x, y=y, w=w, h=h, **angles)
        samples.append(Sample(
            image_id=image_id,
            image_w=image_w,
            image_h=image_h,
            ocr=OcrToken(text=answer, box=box),
            question=question,
            answer=answer,
            split="test" if i % 5 == 4 else "train",
        ))
    manifest = DatasetManifest(name=f"toy-{seed}-{n}", source="toy", samples=tuple(samples))
    store = toy_visual_features(seed, manifest.image_ids(), dim=512)
    return manifest, store


def load_side_info(path) -> dict[str, dict]:
    info = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                info[rec["image_id"]] = {
                    "image_id": rec["image_id"],
                    "tags": list(rec.get("tags", ())),
                    "caption": rec.get("caption", ""),
                }
            except (KeyError, json.JSONDecodeError) as exc:
                raise IngestError(f"{path}:{lineno}: bad side-info record: {exc}") from exc
    return info


def write_side_info(info: dict[str, dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for image_id in info:
            fh.write(json.dumps(info[image_id], sort_keys=True) + "\n")
