"""Text-mask matching and the grounded-reasoning metric suite."""
from __future__ import annotations

import itertools
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Iterable, Iterator, Mapping, Sequence


from groundseg.embeddings import EmbeddingProvider, cosine
from groundseg.masks import RleMask, ShapeError, iou_matrix
from groundseg.meteor import MeteorParams, meteor_score

_PUNCT_RE = re.compile(r"[^\w\s]")


class InvalidSampleError(ValueError):
    def __init__(self, sample_id: str, reason: str):
        super().__init__(f"sample {sample_id!r}: {reason}")
        self.sample_id = sample_id
        self.reason = reason


@dataclass(frozen=True)
class TargetEntry:
    image_index: int
    phrase: str
    mask: RleMask

    def to_json(self) -> dict:
        return {"image": self.image_index, "phrase": self.phrase, "mask": self.mask.to_json()}

    @classmethod
    def from_json(cls, obj: Mapping) -> "TargetEntry":
        image = obj["image"]
        if not isinstance(image, int) or isinstance(image, bool):
            raise ValueError(f"image index must be an integer, got {image!r}")
        phrase = obj["phrase"]
        if not isinstance(phrase, str):
            raise ValueError("phrase must be a string")
        return cls(image, phrase, RleMask.from_json(obj["mask"]))


@dataclass(frozen=True)
class EvalSample:
    sample_id: str
    images: tuple[tuple[int, int], ...]
    question: str
    gt: tuple[TargetEntry, ...]
    pred: tuple[TargetEntry, ...]
    gt_sentence: str = ""
    pred_sentence: str = ""

    def validate(self) -> None:
        if not self.gt:
            raise InvalidSampleError(self.sample_id, "no ground-truth targets")
        for side, entries in (("gt", self.gt), ("pred", self.pred)):
            for k, e in enumerate(entries):
                if not 1 <= e.image_index <= len(self.images):
                    raise InvalidSampleError(
                        self.sample_id, f"{side}[{k}] references image {e.image_index} of {len(self.images)}"
                    )
                if e.mask.shape != tuple(self.images[e.image_index - 1]):
                    raise InvalidSampleError(
                        self.sample_id,
                        f"{side}[{k}] mask is {e.mask.shape}, image {e.image_index} is "
                        f"{tuple(self.images[e.image_index - 1])}",
                    )

    def to_json(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "images": [{"height": h, "width": w} for h, w in self.images],
            "question": self.question,
            "gt": [e.to_json() for e in self.gt],
            "pred": [e.to_json() for e in self.pred],
            "gt_sentence": self.gt_sentence,
            "pred_sentence": self.pred_sentence,
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "EvalSample":
        sid = str(obj.get("sample_id", "<missing id>")) if isinstance(obj, Mapping) else "<not an object>"
        try:
            images = tuple((int(im["height"]), int(im["width"])) for im in obj["images"])
            sample = cls(
                sample_id=str(obj["sample_id"]),
                images=images,
                question=str(obj.get("question", "")),
                gt=tuple(TargetEntry.from_json(e) for e in obj["gt"]),
                pred=tuple(TargetEntry.from_json(e) for e in obj.get("pred", [])),
                gt_sentence=str(obj.get("gt_sentence", "")),
                pred_sentence=str(obj.get("pred_sentence", "")),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidSampleError(sid, f"malformed sample: {exc}") from exc
        sample.validate()
        return sample


@dataclass(frozen=True)
class MatchResult:
    pairs: tuple[tuple[int, int, float], ...]  # (pred_idx, gt_idx, iou)
    unmatched_gt: tuple[int, ...]
    unmatched_pred: tuple[int, ...]


def match_masks(pred: Sequence[TargetEntry], gt: Sequence[TargetEntry]) -> MatchResult:
    """Greedy one-to-one matching within each image.

    Repeatedly takes the highest-IoU unassigned (pred, gt) pair; ties go to the
    smaller gt index, then the smaller pred index. Zero-IoU pairs are kept.
    """
    candidates = []
    for img in sorted({e.image_index for e in gt} & {e.image_index for e in pred}):
        pi = [k for k, e in enumerate(pred) if e.image_index == img]
        gi = [k for k, e in enumerate(gt) if e.image_index == img]
        shapes = {pred[k].mask.shape for k in pi} | {gt[k].mask.shape for k in gi}
        if len(shapes) > 1:
            raise ShapeError(f"masks for image {img} have differing shapes {sorted(shapes)}")
        ious = iou_matrix([pred[k].mask for k in pi], [gt[k].mask for k in gi])
        for a, p in enumerate(pi):
            for b, g in enumerate(gi):
                candidates.append((-float(ious[a, b]), g, p))
    candidates.sort()
    used_p: set[int] = set()
    used_g: set[int] = set()
    pairs = []
    for neg_iou, g, p in candidates:
        if p in used_p or g in used_g:
            continue
        used_p.add(p)
        used_g.add(g)
        pairs.append((p, g, -neg_iou))
    return MatchResult(
        tuple(pairs),
        tuple(k for k in range(len(gt)) if k not in used_g),
        tuple(k for k in range(len(pred)) if k not in used_p),
    )


def mean_iou(m: MatchResult, n_gt: int) -> float:
    if n_gt <= 0:
        raise ValueError("mean_iou needs at least one ground-truth mask")
    return sum(iou for _, _, iou in m.pairs) / n_gt


def token_set(phrase: str) -> set[str]:
    return set(_PUNCT_RE.sub(" ", phrase.lower()).split())


def phrase_iou(a: str, b: str) -> float:
    ta, tb = token_set(a), token_set(b)
    union = ta | tb
    if not union:
        return 1.0
    return len(ta & tb) / len(union)


def recall(
    m: MatchResult,
    pred_phrases: Sequence[str],
    gt_phrases: Sequence[str],
    provider: EmbeddingProvider,
    iou_thresh: float = 0.5,
    sim_thresh: float = 0.5,
) -> tuple[float, int]:
    if not gt_phrases:
        raise ValueError("recall needs at least one ground-truth phrase")
    tp = 0
    for p, g, iou in m.pairs:
        if iou > iou_thresh and cosine(provider, pred_phrases[p], gt_phrases[g]) > sim_thresh:
            tp += 1
    return tp / len(gt_phrases), tp


def _pair_scores(m, pred_phrases, gt_phrases, provider, keep) -> tuple[float, float, int]:
    ss = siou = 0.0
    n = 0
    for p, g, iou in m.pairs:
        if not keep(iou):
            continue
        # negative cosine carries no similarity
        ss += max(0.0, cosine(provider, pred_phrases[p], gt_phrases[g]))
        siou += phrase_iou(pred_phrases[p], gt_phrases[g])
        n += 1
    return ss, siou, n


def semantic_scores(
    m: MatchResult, pred_phrases: Sequence[str], gt_phrases: Sequence[str], provider: EmbeddingProvider
) -> tuple[float, float]:
    """SS and SIoU over all matched pairs, normalised by the number of GT phrases."""
    n_gt = len(gt_phrases)
    if n_gt == 0:
        raise ValueError("semantic_scores needs at least one ground-truth phrase")
    ss, siou, _ = _pair_scores(m, pred_phrases, gt_phrases, provider, lambda iou: True)
    return ss / n_gt, siou / n_gt


def iou_matched_semantic_scores(
    m: MatchResult,
    pred_phrases: Sequence[str],
    gt_phrases: Sequence[str],
    provider: EmbeddingProvider,
    iou_thresh: float = 0.5,
) -> tuple[float, float, bool]:
    """I-SS and I-SIoU over pairs with IoU above the threshold.

    The third value is True when no pair qualified (both scores are then 0).
    """
    ss, siou, n = _pair_scores(m, pred_phrases, gt_phrases, provider, lambda iou: iou > iou_thresh)
    if n == 0:
        return 0.0, 0.0, True
    return ss / n, siou / n, False


@dataclass(frozen=True)
class Thresholds:
    iou: float = 0.5
    sim: float = 0.5

    def __post_init__(self):
        for name in ("iou", "sim"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} threshold must lie in [0, 1], got {v}")


@dataclass(frozen=True)
class SampleResult:
    sample_id: str
    miou: float
    recall: float
    ss: float
    siou: float
    i_ss: float
    i_siou: float
    meteor: float
    n_gt: int
    n_pred: int
    n_true_positive: int
    no_iou_matches: bool


def evaluate_sample(
    sample: EvalSample,
    provider: EmbeddingProvider,
    thresholds: Thresholds = Thresholds(),
    meteor_params: MeteorParams = MeteorParams(),
) -> SampleResult:
    m = match_masks(sample.pred, sample.gt)
    pp = [e.phrase for e in sample.pred]
    gp = [e.phrase for e in sample.gt]
    rec, tp = recall(m, pp, gp, provider, thresholds.iou, thresholds.sim)
    ss, siou = semantic_scores(m, pp, gp, provider)
    i_ss, i_siou, empty = iou_matched_semantic_scores(m, pp, gp, provider, thresholds.iou)
    return SampleResult(
        sample_id=sample.sample_id,
        miou=mean_iou(m, len(gp)),
        recall=rec,
        ss=ss,
        siou=siou,
        i_ss=i_ss,
        i_siou=i_siou,
        meteor=meteor_score(sample.pred_sentence, sample.gt_sentence, meteor_params),
        n_gt=len(gp),
        n_pred=len(pp),
        n_true_positive=tp,
        no_iou_matches=empty,
    )


@dataclass
class MetricReport:
    miou: float
    recall: float
    ss: float
    siou: float
    i_ss: float
    i_siou: float
    meteor: float
    n_samples: int
    n_gt: int
    n_pred: int
    n_true_positive: int
    n_invalid: int = 0
    n_no_iou_matches: int = 0
    embedding_provider: str = ""
    invalid_ids: list[str] = field(default_factory=list)
    per_sample: list[SampleResult] | None = None

    HEADLINE = ("miou", "recall", "ss", "siou", "i_ss", "i_siou", "meteor")
    MACRO = ("miou", "ss", "siou", "i_ss", "i_siou", "meteor")

    def to_json(self) -> dict[str, Any]:
        out: dict[str, Any] = {k: getattr(self, k) for k in self.HEADLINE}
        out.update(
            n_samples=self.n_samples,
            n_gt=self.n_gt,
            n_pred=self.n_pred,
            n_true_positive=self.n_true_positive,
            n_invalid=self.n_invalid,
            n_no_iou_matches=self.n_no_iou_matches,
            embedding_provider=self.embedding_provider,
        )
        if self.invalid_ids:
            out["invalid_ids"] = list(self.invalid_ids)
        if self.per_sample is not None:
            out["per_sample"] = [asdict(r) for r in self.per_sample]
        return out


def _coerce(item: EvalSample | Mapping) -> EvalSample:
    if isinstance(item, EvalSample):
        item.validate()
        return item
    return EvalSample.from_json(item)


def _eval_one(item, provider, thresholds, meteor_params):
    try:
        sample = _coerce(item)
        return evaluate_sample(sample, provider, thresholds, meteor_params)
    except InvalidSampleError as exc:
        return exc
    except (ShapeError, ValueError) as exc:
        sid = getattr(item, "sample_id", None) or (item.get("sample_id") if isinstance(item, Mapping) else "?")
        return InvalidSampleError(str(sid), str(exc))


def _chunks(it: Iterable, size: int) -> Iterator[list]:
    it = iter(it)
    while chunk := list(itertools.islice(it, size)):
        yield chunk


def evaluate_dataset(
    samples: Iterable[EvalSample | Mapping],
    provider: EmbeddingProvider,
    thresholds: Thresholds = Thresholds(),
    meteor_params: MeteorParams = MeteorParams(),
    workers: int = 1,
    skip_invalid: bool = False,
    keep_per_sample: bool = False,
    chunk_size: int = 256,
) -> MetricReport:
    """Aggregate per-sample metrics over a stream of samples.

    mIoU, SS, SIoU, I-SS, I-SIoU and METEOR are macro-averaged over samples;
    Recall is micro-averaged over GT masks. Results are folded in input order,
    so the report does not depend on ``workers``.
    """
    sums = dict.fromkeys(MetricReport.MACRO, 0.0)
    n = n_gt = n_pred = tp = n_flag = 0
    invalid: list[str] = []
    per_sample: list[SampleResult] = []

    def fold(res):
        nonlocal n, n_gt, n_pred, tp, n_flag
        if isinstance(res, InvalidSampleError):
            if not skip_invalid:
                raise res
            invalid.append(res.sample_id)
            return
        for k in sums:
            sums[k] += getattr(res, k)
        n += 1
        n_gt += res.n_gt
        n_pred += res.n_pred
        tp += res.n_true_positive
        n_flag += res.no_iou_matches
        if keep_per_sample:
            per_sample.append(res)

    args = (provider, thresholds, meteor_params)
    if workers <= 1:
        for item in samples:
            fold(_eval_one(item, *args))
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for chunk in _chunks(samples, chunk_size * workers):
                for res in pool.map(lambda item: _eval_one(item, *args), chunk):
                    fold(res)
    if n == 0:
        raise ValueError("no valid samples to evaluate")
    return MetricReport(
        **{k: v / n for k, v in sums.items()},
        recall=tp / n_gt,
        n_samples=n,
        n_gt=n_gt,
        n_pred=n_pred,
        n_true_positive=tp,
        n_invalid=len(invalid),
        n_no_iou_matches=n_flag,
        embedding_provider=getattr(provider, "name", type(provider).__name__),
        invalid_ids=invalid,
        per_sample=per_sample if keep_per_sample else None,
    )
