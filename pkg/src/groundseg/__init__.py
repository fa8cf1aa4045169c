"""Evaluation and data tooling for multi-image pixel-grounded reasoning."""
from groundseg._accel import BACKEND
from groundseg.masks import (
    BinaryMask,
    LossWeights,
    RleMask,
    ShapeError,
    SoftMask,
    coseg_scores,
    dice_loss,
    focal_loss,
    iou,
    rle_decode,
    rle_encode,
    visibility_score,
)
from groundseg.markup import (
    EntityIdentifier,
    GroundedPhrase,
    GroundedResponse,
    MarkupError,
    parse_identifier,
    parse_response,
    resolve_references,
    serialize_response,
)
from groundseg.metrics import EvalSample, MetricReport, TargetEntry, evaluate_dataset, match_masks
from groundseg.meteor import meteor_score

__version__ = "0.1.0"
