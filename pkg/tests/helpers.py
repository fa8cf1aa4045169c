"""Fixture builders shared by the test modules."""
from __future__ import annotations

import string

import numpy as np

from groundseg.dataset import ImageRecord, ObjectAnnotation, PartAnnotation, QAPair, SampleSet
from groundseg.markup import GroundedResponse, build_response
from groundseg.masks import BinaryMask, rle_encode
from groundseg.metrics import EvalSample, TargetEntry


def random_mask(rng: np.random.Generator, h: int, w: int, density: float | None = None) -> BinaryMask:
    p = rng.random() if density is None else density
    return BinaryMask.from_array(rng.random((h, w)) < p)


def naive_iou(a: BinaryMask, b: BinaryMask) -> float:
    inter = union = 0
    for x, y in zip(a.data.tolist(), b.data.tolist()):
        inter += x and y
        union += x or y
    return 1.0 if union == 0 else inter / union


def entry(image: int, phrase: str, mask: BinaryMask) -> TargetEntry:
    return TargetEntry(image, phrase, rle_encode(mask))


def random_sample(rng: np.random.Generator, sid: str, words=("red chair", "wooden table", "lamp", "blue sofa", "bed")):
    n_img = int(rng.integers(1, 4))
    images = tuple((int(rng.integers(4, 12)), int(rng.integers(4, 12))) for _ in range(n_img))

    def targets(n):
        out = []
        for _ in range(n):
            j = int(rng.integers(1, n_img + 1))
            out.append(entry(j, str(rng.choice(words)), random_mask(rng, *images[j - 1])))
        return out

    gt = targets(int(rng.integers(1, 5)))
    pred = []
    for g in gt:
        if rng.random() < 0.7:
            # perturbed copy of a GT mask so matches and misses both occur
            h, w = images[g.image_index - 1]
            base = np.asarray(rle_decode_array(g), dtype=bool)
            flip = rng.random((h, w)) < rng.random() * 0.4
            phrase = g.phrase if rng.random() < 0.6 else str(rng.choice(words))
            pred.append(entry(g.image_index, phrase, BinaryMask.from_array(base ^ flip)))
    pred += targets(int(rng.integers(0, 2)))
    sentence = " ".join(rng.choice(["the", "chair", "is", "left", "of", "a", "table", "in", "image"], 8))
    other = " ".join(rng.choice(["the", "chair", "was", "right", "of", "a", "table", "bed"], 7))
    return EvalSample(sid, images, "which is closer?", tuple(gt), tuple(pred), sentence, other)


def rle_decode_array(e: TargetEntry) -> np.ndarray:
    from groundseg.masks import rle_decode

    return rle_decode(e.mask).array


# ------------------------------------------------------------------ filter fixture

_FEAT = {
    "A": [1.0, 0.0, 0.0],
    "B": [0.9, 0.1, 0.0],
    "C": [0.0, 1.0, 0.0],
    "D": [0.0, 0.0, 1.0],
    "E": [0.1, 0.0, 0.9],
}


def _obj(name, oid, parts=()):
    return ObjectAnnotation(
        name, oid, (0, 0, 10, 10), f"mask/{name}{oid}",
        tuple(PartAnnotation(pn, pid, (1, 1, 5, 5), f"mask/{pn}{pid}") for pn, pid in parts),
    )


def filter_corpus() -> dict[str, ImageRecord]:
    recs = [
        ImageRecord("A", 100, 100, _FEAT["A"], (_obj("table", 1, [("drawer", 1)]), _obj("sofa", 2), _obj("lamp", 3))),
        ImageRecord("B", 100, 100, _FEAT["B"], (_obj("bed", 1, [("headboard", 1)]), _obj("bench", 2), _obj("lamp", 3))),
        ImageRecord("C", 100, 100, _FEAT["C"], (_obj("chair", 1), _obj("lamp", 2))),
        ImageRecord("D", 100, 100, _FEAT["D"], tuple(_obj("box", k) for k in range(1, 11))),
        ImageRecord("E", 100, 100, _FEAT["E"], tuple(_obj("box", k) for k in range(1, 11))),
    ]
    return {r.image_id: r for r in recs}


S2 = SampleSet(("A", "B"), "nearest-neighbor", "A")
S3 = SampleSet(("A", "B", "C"), "nearest-neighbor", "A")
SDE = SampleSet(("D", "E"), "object-category", "D")

_BOXES = [f"box_1{k:02d}" for k in range(1, 10)] + [f"box_2{k:02d}" for k in range(1, 10)]
Q = "Which object is more useful here?"

# (question, answer, sample set, expected verdict); None = kept
FILTER_CASES = [
    (Q, "The table_101 is taller than the bed_201, while sofa_102 looks softer.", S2, None),
    (Q, "table_101, sofa_102 and bed_201.", S2, "a"),
    (Q, "table_101 bed_201", S2, "a"),
    ("What is at [10, 20, 30, 40] in the first image?", "The table_101 is taller than the bed_201 by far.", S2, "b"),
    ("Is the object at [0,0,5,5] bigger?", "Yes, the table_101 is bigger than the bench_202 overall.", S2, "b"),
    (Q, "The table_101 is sturdier than the bed_201 for dining.", S3, "c"),
    (Q, "The table_101 has a drawer_10101 for storage.", S2, "c"),
    (Q, "Unlike anything in the second image, the table_101 has a drawer_10101.", S2, "d"),
    (Q, "In both images the sofa_102 is the most comfortable seat.", S2, "d"),
    (Q, "The zebra_105 looks nothing like the bed_201 here.", S2, "e"),
    (Q, "The chair_101 is next to the bed_201 in the room.", S2, "e"),
    (Q, "In both images, the table_1011 is near the bed_201.", S2, "e"),
    (Q, "The drawer_10109 of table_101 is smaller than bed_201 overall.", S2, "e"),
    (Q, "Compare " + ", ".join(_BOXES[:9] + _BOXES[9:17]) + " for their overall size and shape.", SDE, "mask_cap"),
    (Q, "Compare " + ", ".join(_BOXES[:8] + _BOXES[9:17]) + " for their overall size and shape.", SDE, None),
    (Q, "The chair_301 and lamp_302 differ, while table_101 and bed_201 are both wooden.", S3, None),
    (Q, "The lamp_103_203 is brighter in one scene than the other, near sofa_102.", S2, None),
    (Q, "In the first image the table_101 is wider than the bed_201 from image 2.", S3, "c"),
    (Q, "The headboard_20101 of the bed_201 is taller than the drawer_10101 of the table_101.", S2, None),
    (Q, "table_101; bed_201; bench_202; sofa_102.", S2, "a"),
]


def filter_pairs() -> list[QAPair]:
    cats = ["functional", "spatial", "numerical", "open-ended"]
    return [QAPair(q, a, cats[k % 4], s) for k, (q, a, s, _) in enumerate(FILTER_CASES)]


def random_prose(rng: np.random.Generator, max_len: int = 12) -> str:
    alphabet = string.ascii_letters + string.digits + " .,;:!?'-()"
    n = int(rng.integers(0, max_len))
    return "".join(rng.choice(list(alphabet), n))


def random_response(rng: np.random.Generator) -> GroundedResponse:
    n_img = int(rng.integers(1, 6))
    words = ["big", "red", "chair", "lamp", "the", "left", "wooden", "table"]
    segs = []
    for _ in range(int(rng.integers(0, 7))):
        segs.append(random_prose(rng))
        if rng.random() < 0.8:
            phrase = " ".join(rng.choice(words, int(rng.integers(1, 4))))
            segs.append((phrase, int(rng.integers(1, n_img + 1))))
    segs.append(random_prose(rng))
    return build_response(segs, n_img)


def all_maximal_matchings(edges: list[tuple]) -> list[list[tuple]]:
    """Every maximal one-to-one subset of (key, g, p) edges; brute force.

    Each gt index is either left out or assigned one of its edges, recursively;
    assignments that could still take another edge are dropped.
    """
    by_g: dict = {}
    for e in edges:
        by_g.setdefault(e[1], []).append(e)
    gts = sorted(by_g)
    out = []

    def walk(k, chosen, used_p):
        if k == len(gts):
            used_g = {e[1] for e in chosen}
            if not any(e[1] not in used_g and e[2] not in used_p for e in edges):
                out.append(list(chosen))
            return
        walk(k + 1, chosen, used_p)
        for e in by_g[gts[k]]:
            if e[2] not in used_p:
                walk(k + 1, chosen + [e], used_p | {e[2]})

    walk(0, [], frozenset())
    return out
