"""Image-set sampling, QA filtering and statistics for multi-image grounding data."""
from __future__ import annotations

import base64
import json
import re
import zlib
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from groundseg.markup import (
    EntityIdentifier,
    IdentifierError,
    UnresolvedReferenceError,
    find_identifiers,
    normalize_name,
    parse_identifier,
    resolve_references,
    strip_identifiers,
    unique_refs,
)

CATEGORIES = ("functional", "spatial", "numerical", "open-ended")
STRATEGIES = ("nearest-neighbor", "object-category")
RULES = ("a", "b", "c", "d", "e", "mask_cap")


# ------------------------------------------------------------------ records


@dataclass(frozen=True)
class PartAnnotation:
    name: str
    part_id: int
    bbox: tuple[float, float, float, float]
    mask_ref: str | None = None


@dataclass(frozen=True)
class ObjectAnnotation:
    name: str
    object_id: int
    bbox: tuple[float, float, float, float]
    mask_ref: str | None = None
    parts: tuple[PartAnnotation, ...] = ()


def _check_bbox(bbox, height, width, what):
    x1, y1, x2, y2 = bbox
    if not (0 <= x1 <= x2 <= width and 0 <= y1 <= y2 <= height):
        raise ValueError(f"{what}: bbox {list(bbox)} outside a {width}x{height} image")


@dataclass(frozen=True, eq=False)
class ImageRecord:
    image_id: str
    height: int
    width: int
    feature: np.ndarray
    objects: tuple[ObjectAnnotation, ...] = ()
    source: str = ""

    def __post_init__(self):
        object.__setattr__(self, "feature", np.asarray(self.feature, dtype=np.float64).reshape(-1))
        seen_obj = set()
        for obj in self.objects:
            if obj.object_id in seen_obj:
                raise ValueError(f"{self.image_id}: duplicate object id {obj.object_id}")
            seen_obj.add(obj.object_id)
            _check_bbox(obj.bbox, self.height, self.width, f"{self.image_id}/{obj.name}")
            seen_part = set()
            for part in obj.parts:
                if part.part_id in seen_part:
                    raise ValueError(f"{self.image_id}: duplicate part id {obj.object_id}/{part.part_id}")
                seen_part.add(part.part_id)
                _check_bbox(part.bbox, self.height, self.width, f"{self.image_id}/{part.name}")

    def object_names(self) -> set[str]:
        return {normalize_name(o.name) for o in self.objects}

    def annotation_table(self, image_index: int) -> dict:
        """Entries keyed by (image_index, object_id, part_id or None)."""
        table = {}
        for obj in self.objects:
            table[(image_index, obj.object_id, None)] = obj
            for part in obj.parts:
                table[(image_index, obj.object_id, part.part_id)] = part
        return table

    def to_json(self) -> dict:
        feat = np.asarray(self.feature, dtype="<f4")
        return {
            "image_id": self.image_id,
            "height": self.height,
            "width": self.width,
            "feature_dim": int(feat.size),
            "feature": base64.b64encode(feat.tobytes()).decode("ascii"),
            "source": self.source,
            "objects": [
                {
                    "name": o.name,
                    "object_id": o.object_id,
                    "bbox": list(o.bbox),
                    "mask_ref": o.mask_ref,
                    "parts": [
                        {"name": p.name, "part_id": p.part_id, "bbox": list(p.bbox), "mask_ref": p.mask_ref}
                        for p in o.parts
                    ],
                }
                for o in self.objects
            ],
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "ImageRecord":
        dim = int(obj["feature_dim"])
        feat = np.frombuffer(base64.b64decode(obj["feature"]), dtype="<f4")
        if feat.size != dim:
            raise ValueError(f"{obj['image_id']}: feature has {feat.size} values, feature_dim says {dim}")
        objects = tuple(
            ObjectAnnotation(
                o["name"],
                int(o["object_id"]),
                tuple(o["bbox"]),
                o.get("mask_ref"),
                tuple(
                    PartAnnotation(p["name"], int(p["part_id"]), tuple(p["bbox"]), p.get("mask_ref"))
                    for p in o.get("parts", [])
                ),
            )
            for o in obj.get("objects", [])
        )
        return cls(
            str(obj["image_id"]), int(obj["height"]), int(obj["width"]), feat.astype(np.float64), objects,
            str(obj.get("source", "")),
        )


@dataclass(frozen=True)
class SampleSet:
    image_ids: tuple[str, ...]
    strategy: str
    anchor_id: str

    def __post_init__(self):
        if not 2 <= len(self.image_ids) <= 3:
            raise ValueError(f"a sample set holds 2 or 3 images, got {len(self.image_ids)}")
        if len(set(self.image_ids)) != len(self.image_ids):
            raise ValueError("duplicate image id in sample set")
        if self.anchor_id not in self.image_ids:
            raise ValueError("anchor must be part of its sample set")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")

    def to_json(self) -> dict:
        return {"image_ids": list(self.image_ids), "strategy": self.strategy, "anchor_id": self.anchor_id}

    @classmethod
    def from_json(cls, obj: Mapping) -> "SampleSet":
        return cls(tuple(obj["image_ids"]), obj["strategy"], obj["anchor_id"])


@dataclass(frozen=True)
class QAPair:
    question: str
    answer: str
    category: str
    sample: SampleSet
    resolved_targets: tuple[EntityIdentifier, ...] = ()
    source: str = ""

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown QA category {self.category!r}")

    def identifiers(self) -> list[EntityIdentifier]:
        if self.resolved_targets:
            return list(self.resolved_targets)
        return [ident for ident, _ in find_identifiers(self.answer)]

    def target_count(self) -> int:
        return len(unique_refs(self.identifiers()))

    def to_json(self) -> dict:
        return {
            "question": self.question,
            "answer": self.answer,
            "category": self.category,
            "sample": self.sample.to_json(),
            "resolved_targets": [t.token() for t in self.resolved_targets],
            "source": self.source,
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "QAPair":
        return cls(
            obj["question"],
            obj["answer"],
            obj["category"],
            SampleSet.from_json(obj["sample"]),
            tuple(parse_identifier(t) for t in obj.get("resolved_targets", [])),
            str(obj.get("source", "")),
        )


# ------------------------------------------------------------------ sampling


def cosine_distance(f1, f2) -> float:
    a = np.asarray(f1, dtype=np.float64)
    b = np.asarray(f2, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"feature dimensions differ: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine distance is undefined for a zero vector")
    return float(1.0 - np.dot(a, b) / (na * nb))


class FeatureIndex:
    """Exact cosine-distance search over a fixed corpus; read-only after construction."""

    def __init__(self, records: Sequence[ImageRecord]):
        self.records = list(records)
        self.ids = [r.image_id for r in self.records]
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("duplicate image ids in corpus")
        self._pos = {rid: k for k, rid in enumerate(self.ids)}
        feats = np.stack([r.feature for r in self.records]) if self.records else np.zeros((0, 0))
        norms = np.linalg.norm(feats, axis=1) if self.records else np.zeros(0)
        if (norms == 0).any():
            bad = self.ids[int(np.flatnonzero(norms == 0)[0])]
            raise ValueError(f"record {bad!r} has a zero feature vector")
        self._unit = feats / norms[:, None] if self.records else feats
        self._id_rank = np.argsort(np.argsort(np.array(self.ids, dtype=object)))

    def __len__(self) -> int:
        return len(self.records)

    def record(self, image_id: str) -> ImageRecord:
        return self.records[self._pos[image_id]]

    def distances(self, feature) -> np.ndarray:
        f = np.asarray(feature, dtype=np.float64)
        norm = np.linalg.norm(f)
        if norm == 0:
            raise ValueError("cosine distance is undefined for a zero vector")
        return 1.0 - self._unit @ (f / norm)

    def ranked(self, anchor: ImageRecord, allowed: np.ndarray | None = None) -> list[str]:
        """Corpus ids by ascending distance to ``anchor`` (ties by id), anchor excluded."""
        d = self.distances(anchor.feature)
        keep = np.array([rid != anchor.image_id for rid in self.ids])
        if allowed is not None:
            keep &= allowed
        idx = np.flatnonzero(keep)
        order = idx[np.lexsort((self._id_rank[idx], d[idx]))]
        return [self.ids[k] for k in order]


def knn_query(anchor: ImageRecord, corpus: Sequence[ImageRecord] | FeatureIndex, k: int) -> list[str]:
    index = corpus if isinstance(corpus, FeatureIndex) else FeatureIndex(corpus)
    ranked = index.ranked(anchor)
    if k < 1 or len(ranked) < k:
        raise ValueError(f"corpus has {len(ranked)} candidates besides the anchor, need k={k}")
    return ranked[:k]


def load_compatibility(pairs: Iterable[Sequence[str]]) -> frozenset[frozenset[str]]:
    """Symmetric closure of the compatible object-name table (names normalised)."""
    out = set()
    for pair in pairs:
        if len(pair) != 2:
            raise ValueError(f"compatibility entries must be pairs, got {pair!r}")
        out.add(frozenset(normalize_name(n) for n in pair))
    return frozenset(out)


def _compatible(a: set[str], b: set[str], table: frozenset[frozenset[str]]) -> bool:
    if a & b:
        return True
    return any(frozenset((x, y)) in table for x in a for y in b)


def _anchor_rng(seed: int, anchor_id: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(anchor_id.encode("utf-8"))])


def sample_image_sets(
    anchor: ImageRecord,
    corpus: Sequence[ImageRecord] | FeatureIndex,
    strategy: str,
    rng_seed: int,
    k: int = 20,
    k2: int = 5,
    compatibility: frozenset[frozenset[str]] | None = None,
    sizes: Sequence[int] | None = None,
) -> list[SampleSet]:
    """Draw related image sets for one anchor.

    ``sizes`` lists how many images to draw besides the anchor, one set per
    entry (default 1 and 2). The anchor always counts toward the set size, for
    both strategies. Nearest-neighbour draws from the top ``k`` neighbours;
    category sampling first keeps images sharing a compatible object name and
    draws from the top ``k2`` of those. Sizes with too few candidates are
    skipped. Output depends only on the inputs and ``rng_seed``.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    index = corpus if isinstance(corpus, FeatureIndex) else FeatureIndex(corpus)
    if sizes is None:
        sizes = (1, 2)
    if any(n not in (1, 2) for n in sizes):
        raise ValueError("sample sets hold 2 or 3 images, so 1 or 2 are drawn besides the anchor")
    if strategy == "nearest-neighbor":
        pool = index.ranked(anchor)[:k]
    else:
        table = compatibility or frozenset()
        names = anchor.object_names()
        allowed = np.array([_compatible(names, r.object_names(), table) for r in index.records], dtype=bool)
        pool = index.ranked(anchor, allowed)[:k2]
    rng = _anchor_rng(rng_seed, anchor.image_id)
    sets = []
    for n in sizes:
        if len(pool) < n:
            continue
        picks = rng.choice(len(pool), size=n, replace=False)
        ids = (anchor.image_id, *(pool[p] for p in sorted(picks)))
        sets.append(SampleSet(ids, strategy, anchor.image_id))
    return sets


# ------------------------------------------------------------------ filtering

BBOX_RE = re.compile(r"\[\s*\d+\s*,\s*\d+\s*,\s*\d+\s*,\s*\d+\s*\]")
_ORDINALS = {"first": 1, "second": 2, "third": 3}
_NUMERALS = {"one": 1, "two": 2, "three": 3}
_IMAGE_NOUN = r"(?:image|picture|photo|scene)s?"
_IMAGE_NUM_RE = re.compile(rf"\b{_IMAGE_NOUN}\s*#?\s*(\d|one|two|three)\b|\(IMAGE(\d)\)", re.I)
_ORDINAL_RE = re.compile(rf"\b(first|second|third)\s+{_IMAGE_NOUN}\b", re.I)
_ALL_IMAGES_RE = re.compile(rf"\b(?:both|all(?:\s+(?:the|three|two))?|each|every)\s+{_IMAGE_NOUN}\b", re.I)
_WORD_RE = re.compile(r"[A-Za-z]+(?:'[a-z]+)?")


def referenced_images(answer: str, num_images: int) -> set[int]:
    """Images an answer refers to, through identifiers or explicit textual mentions."""
    refs: set[int] = set()
    try:
        for ident, _ in find_identifiers(answer):
            refs.update(x for x, _, _ in ident.refs)
    except IdentifierError:
        pass
    for m in _IMAGE_NUM_RE.finditer(answer):
        tok = (m.group(1) or m.group(2)).lower()
        refs.add(_NUMERALS.get(tok) or int(tok))
    for m in _ORDINAL_RE.finditer(answer):
        refs.add(_ORDINALS[m.group(1).lower()])
    if _ALL_IMAGES_RE.search(answer):
        refs.update(range(1, num_images + 1))
    return refs


@dataclass
class FilterReport:
    kept: int = 0
    total: int = 0
    discarded_by_rule: dict[str, int] = field(default_factory=lambda: dict.fromkeys(RULES, 0))

    def to_json(self) -> dict:
        return {"kept": self.kept, "total": self.total, "discarded_by_rule": dict(self.discarded_by_rule)}


@dataclass(frozen=True)
class FilterConfig:
    max_masks: int = 16
    min_clause_words: int = 3


def check_pair(
    pair: QAPair, annotations: Mapping[str, ImageRecord], config: FilterConfig = FilterConfig()
) -> tuple[str | None, tuple[EntityIdentifier, ...]]:
    """First violated rule id (or None) and the resolved identifiers.

    Rules, in order: (a) list-only answer, (b) bbox coordinates in the question,
    (c) answer does not refer to every image, (d) grounded targets cover fewer
    than two images, (e) unresolvable identifier, then the mask cap.
    """
    num_images = len(pair.sample.image_ids)
    try:
        idents = [ident for ident, _ in find_identifiers(pair.answer)]
    except IdentifierError:
        idents = None
    prose_words = _WORD_RE.findall(strip_identifiers(pair.answer))
    if len(prose_words) < config.min_clause_words:
        return "a", ()
    if BBOX_RE.search(pair.question):
        return "b", ()
    if not set(range(1, num_images + 1)) <= referenced_images(pair.answer, num_images):
        return "c", ()
    if idents is not None and len({x for ident in idents for x, _, _ in ident.refs}) < 2:
        return "d", ()
    if idents is None:
        return "e", ()
    table: dict = {}
    for pos, image_id in enumerate(pair.sample.image_ids, start=1):
        record = annotations.get(image_id)
        if record is None:
            return "e", ()
        table.update(record.annotation_table(pos))
    try:
        resolve_references(pair.answer, table)
    except UnresolvedReferenceError:
        return "e", ()
    unique = tuple(dict.fromkeys(idents))
    if len(unique_refs(unique)) > config.max_masks:
        return "mask_cap", unique
    return None, unique


def filter_qa(
    pairs: Iterable[QAPair], annotations: Mapping[str, ImageRecord], max_masks: int = 16, min_clause_words: int = 3
) -> tuple[list[QAPair], FilterReport]:
    config = FilterConfig(max_masks, min_clause_words)
    report = FilterReport()
    kept = []
    for pair in pairs:
        report.total += 1
        rule, idents = check_pair(pair, annotations, config)
        if rule is None:
            report.kept += 1
            kept.append(QAPair(pair.question, pair.answer, pair.category, pair.sample, idents, pair.source))
        else:
            report.discarded_by_rule[rule] += 1
    return kept, report


# ------------------------------------------------------------------ statistics


def dataset_stats(pairs: Sequence[QAPair]) -> dict:
    if not pairs:
        raise ValueError("dataset_stats needs at least one QA pair")
    counts = []
    object_names: set[str] = set()
    part_names: set[str] = set()
    levels = {k: Counter() for k in ("annotation_source", "question_type", "unique_objects", "unique_parts", "target_masks")}
    for pair in pairs:
        idents = pair.identifiers()
        counts.append(len(unique_refs(idents)))
        objs = {i.name for i in idents if not i.is_part}
        parts = {i.name for i in idents if i.is_part}
        object_names |= objs
        part_names |= parts
        levels["annotation_source"][pair.source or "unknown"] += 1
        levels["question_type"][pair.category] += 1
        levels["unique_objects"][len(objs)] += 1
        levels["unique_parts"][len(parts)] += 1
        levels["target_masks"][counts[-1]] += 1
    return {
        "num_pairs": len(pairs),
        "mean_targets": sum(counts) / len(counts),
        "max_targets": max(counts),
        "unique_object_names": len(object_names),
        "unique_part_names": len(part_names),
        "category_histogram": {c: levels["question_type"].get(c, 0) for c in CATEGORIES},
        "levels": {k: {str(key): v for key, v in sorted(c.items(), key=lambda kv: str(kv[0]))} for k, c in levels.items()},
    }


def read_jsonl(path) -> Iterable[dict]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                try:
                    yield json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ValueError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
