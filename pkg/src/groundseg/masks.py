"""Binary masks, the run-length codec, overlap metrics and segmentation losses."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from groundseg import _accel

FOCAL_EPS = 1e-7
SOFT_DICE_SMOOTH = 1e-6


class ShapeError(ValueError):
    """Raised when two masks (or a mask and its image) disagree in size."""


def _check_dims(height: int, width: int) -> None:
    if height < 1 or width < 1:
        raise ShapeError(f"mask dimensions must be positive, got {height}x{width}")


@dataclass(frozen=True, eq=False)
class BinaryMask:
    height: int
    width: int
    data: np.ndarray  # flat uint8, row-major

    def __post_init__(self):
        _check_dims(self.height, self.width)
        data = np.ascontiguousarray(self.data, dtype=np.uint8).reshape(-1)
        if data.size != self.height * self.width:
            raise ShapeError(f"data has {data.size} entries, expected {self.height * self.width}")
        if data.size and data.max() > 1:
            data = (data != 0).astype(np.uint8)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @classmethod
    def from_array(cls, arr) -> "BinaryMask":
        arr = np.asarray(arr)
        if arr.ndim != 2:
            raise ShapeError(f"expected a 2-D array, got shape {arr.shape}")
        return cls(arr.shape[0], arr.shape[1], (arr != 0).astype(np.uint8).reshape(-1))

    @classmethod
    def zeros(cls, height: int, width: int) -> "BinaryMask":
        return cls(height, width, np.zeros(height * width, dtype=np.uint8))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def array(self) -> np.ndarray:
        return self.data.reshape(self.height, self.width)

    def area(self) -> int:
        return int(self.data.sum())

    def __eq__(self, other):
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.data, other.data)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class RleMask:
    height: int
    width: int
    counts: np.ndarray

    def __post_init__(self):
        _check_dims(self.height, self.width)
        counts = np.ascontiguousarray(self.counts, dtype=np.int64).reshape(-1)
        if counts.size == 0:
            raise ValueError("RLE counts must not be empty")
        if (counts < 0).any():
            raise ValueError("RLE counts must be non-negative")
        if counts.size > 1 and (counts[1:] == 0).any():
            raise ValueError("only the leading background run may have zero length")
        total = int(counts.sum())
        if total != self.height * self.width:
            raise ValueError(f"RLE counts sum to {total}, expected {self.height * self.width}")
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def area(self) -> int:
        return _accel.run_area(self.counts)

    def to_json(self) -> dict:
        return {"size": [self.height, self.width], "counts": [int(c) for c in self.counts]}

    @classmethod
    def from_json(cls, obj: dict) -> "RleMask":
        try:
            h, w = obj["size"]
            counts = obj["counts"]
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"malformed RLE object: {obj!r}") from exc
        if isinstance(counts, str) or not all(isinstance(c, int) and not isinstance(c, bool) for c in counts):
            raise ValueError("RLE counts must be a list of integers")
        return cls(int(h), int(w), np.asarray(counts, dtype=np.int64))

    def dumps(self) -> str:
        return json.dumps(self.to_json(), separators=(",", ":"))

    def __eq__(self, other):
        if not isinstance(other, RleMask):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.counts, other.counts)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class SoftMask:
    height: int
    width: int
    probs: np.ndarray

    def __post_init__(self):
        _check_dims(self.height, self.width)
        probs = np.ascontiguousarray(self.probs, dtype=np.float64).reshape(-1)
        if probs.size != self.height * self.width:
            raise ShapeError(f"probs has {probs.size} entries, expected {self.height * self.width}")
        if not np.all((probs >= 0.0) & (probs <= 1.0)):
            raise ValueError("soft mask probabilities must lie in [0, 1]")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    @classmethod
    def from_array(cls, arr) -> "SoftMask":
        arr = np.asarray(arr, dtype=np.float64)
        return cls(arr.shape[0], arr.shape[1], arr.reshape(-1))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def is_hard(self) -> bool:
        return bool(np.all((self.probs == 0.0) | (self.probs == 1.0)))


@dataclass(frozen=True)
class LossWeights:
    """Weights of the text, Dice and focal terms plus the loss internals."""

    alpha: float = 1.0
    beta: float = 1.0
    gamma_weight: float = 1.0
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    dice_smooth: float = SOFT_DICE_SMOOTH

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma_weight", "focal_gamma", "focal_alpha", "dice_smooth"):
            v = getattr(self, name)
            if not np.isfinite(v):
                raise ValueError(f"{name} must be finite")
            if v < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 < self.focal_alpha <= 1.0:
            raise ValueError("focal_alpha must lie in (0, 1]")


AnyMask = Union[BinaryMask, RleMask]


# ------------------------------------------------------------------ codec


def rle_encode(mask: BinaryMask) -> RleMask:
    return RleMask(mask.height, mask.width, _accel.encode_runs(mask.data))


def rle_decode(rle: RleMask) -> BinaryMask:
    n = rle.height * rle.width
    return BinaryMask(rle.height, rle.width, _accel.decode_runs(rle.counts, n))


def as_rle(mask: AnyMask) -> RleMask:
    return mask if isinstance(mask, RleMask) else rle_encode(mask)


def as_binary(mask: AnyMask) -> BinaryMask:
    return mask if isinstance(mask, BinaryMask) else rle_decode(mask)


# ------------------------------------------------------------------ overlap


def _same_shape(a, b) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")


def intersection_area(a: AnyMask, b: AnyMask) -> int:
    _same_shape(a, b)
    return _accel.run_intersection(as_rle(a).counts, as_rle(b).counts)


def iou(a: AnyMask, b: AnyMask) -> float:
    """Intersection over union computed on the run-length form.

    Two empty masks count as a perfect match (1.0).
    """
    _same_shape(a, b)
    ra, rb = as_rle(a), as_rle(b)
    inter = _accel.run_intersection(ra.counts, rb.counts)
    union = ra.area() + rb.area() - inter
    if union == 0:
        return 1.0
    return inter / union


def iou_matrix(preds: Sequence[AnyMask], gts: Sequence[AnyMask]) -> np.ndarray:
    """Pairwise IoU between two lists of equally sized masks."""
    shapes = {m.shape for m in list(preds) + list(gts)}
    if len(shapes) > 1:
        raise ShapeError(f"iou_matrix needs one common shape, got {sorted(shapes)}")
    if not shapes:
        return np.zeros((0, 0))
    (h, w), = shapes
    return _accel.iou_matrix(
        [as_rle(m).counts for m in preds], [as_rle(m).counts for m in gts], h * w
    )


def coseg_scores(pred: AnyMask, gt: AnyMask) -> tuple[float, float]:
    """Cosegmentation precision (pixel accuracy) and Jaccard index."""
    _same_shape(pred, gt)
    rp, rg = as_rle(pred), as_rle(gt)
    n = rp.height * rp.width
    tp = _accel.run_intersection(rp.counts, rg.counts)
    fp = rp.area() - tp
    fn = rg.area() - tp
    tn = n - tp - fp - fn
    return (tp + tn) / n, iou(rp, rg)


def visibility_score(targets: Sequence[AnyMask], image_areas: Sequence[float]) -> float:
    """Mean mask-to-image area ratio, scaled by min/max ratio disparity."""
    if len(targets) == 0:
        raise ValueError("visibility_score needs at least one target")
    if len(targets) != len(image_areas):
        raise ValueError("each target needs exactly one image area")
    ratios = []
    for mask, area in zip(targets, image_areas):
        if area <= 0:
            raise ValueError("image area must be positive")
        ratios.append(mask.area() / float(area))
    ratios = np.asarray(ratios)
    hi = ratios.max()
    weight = 1.0 if len(ratios) == 1 or hi == 0 else ratios.min() / hi
    return float(ratios.mean() * weight)


# ------------------------------------------------------------------ losses


def _pair(pred: SoftMask, target: AnyMask) -> tuple[np.ndarray, np.ndarray]:
    _same_shape(pred, target)
    return pred.probs, as_binary(target).data.astype(np.float64)


def _dice_smooth(pred: SoftMask, smooth: float | None) -> float:
    if smooth is None:
        return 0.0 if pred.is_hard() else SOFT_DICE_SMOOTH
    if smooth < 0:
        raise ValueError("smooth must be non-negative")
    return float(smooth)


def dice_loss(pred: SoftMask, target: AnyMask, smooth: float | None = None) -> float:
    p, t = _pair(pred, target)
    s = _dice_smooth(pred, smooth)
    num = 2.0 * np.dot(p, t) + s
    den = p.sum() + t.sum() + s
    if den == 0.0:
        return 0.0
    return float(1.0 - num / den)


def dice_loss_grad(pred: SoftMask, target: AnyMask, smooth: float | None = None) -> np.ndarray:
    """Gradient of :func:`dice_loss` with respect to each probability, shaped (H, W)."""
    p, t = _pair(pred, target)
    s = _dice_smooth(pred, smooth)
    num = 2.0 * np.dot(p, t) + s
    den = p.sum() + t.sum() + s
    if den == 0.0:
        return np.zeros(pred.shape)
    return (-(2.0 * t * den - num) / den**2).reshape(pred.shape)


def _focal_terms(p, t, focal_alpha):
    pc = np.clip(p, FOCAL_EPS, 1.0 - FOCAL_EPS)
    pos = t > 0.5
    pt = np.where(pos, pc, 1.0 - pc)
    at = np.where(pos, focal_alpha, 1.0 - focal_alpha)
    return pc, pos, pt, at


def focal_loss(pred: SoftMask, target: AnyMask, focal_gamma: float = 2.0, focal_alpha: float = 0.25) -> float:
    p, t = _pair(pred, target)
    _, _, pt, at = _focal_terms(p, t, focal_alpha)
    return float(np.mean(-at * (1.0 - pt) ** focal_gamma * np.log(pt)))


def focal_loss_grad(
    pred: SoftMask, target: AnyMask, focal_gamma: float = 2.0, focal_alpha: float = 0.25
) -> np.ndarray:
    p, t = _pair(pred, target)
    pc, pos, pt, at = _focal_terms(p, t, focal_alpha)
    q = 1.0 - pt
    if focal_gamma == 0.0:
        d_pt = -1.0 / pt
    else:
        d_pt = focal_gamma * q ** (focal_gamma - 1.0) * np.log(pt) - q**focal_gamma / pt
    grad = at * d_pt * np.where(pos, 1.0, -1.0) / p.size
    # clamping makes the loss flat outside [eps, 1 - eps]
    grad[(p < FOCAL_EPS) | (p > 1.0 - FOCAL_EPS)] = 0.0
    return grad.reshape(pred.shape)


def segmentation_loss(
    pred: SoftMask, target: AnyMask, weights: LossWeights, text_loss: float = 0.0
) -> float:
    """Weighted training objective; the text term is supplied by the caller."""
    return (
        weights.alpha * text_loss
        + weights.beta * dice_loss(pred, target, weights.dice_smooth)
        + weights.gamma_weight * focal_loss(pred, target, weights.focal_gamma, weights.focal_alpha)
    )
