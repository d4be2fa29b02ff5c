"""Reference evaluators for the detection and classification losses.

All losses are evaluated in float64 and returned as python floats. Every
elementwise loss comes with its analytic gradient with respect to the
prediction, which allows to cross check a trainer implementation.
"""
import typing as t
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, softmax

from bincell.toolkit.exceptions import ShapeMismatchError, ValidationError
from bincell.toolkit.heatmap_codec import HeadTensors, TargetPack

# Predictions are clamped into (EPSILON, 1 - EPSILON) before taking logs.
EPSILON = 1e-7


@dataclass(frozen=True)
class FocalParams:
    """Exponents of the penalty reduced focal loss.

    Args:
        alpha: Focusing exponent on the prediction.
        beta: Penalty reduction exponent on the Gaussian target.
    """

    alpha: float = 2.0
    beta: float = 4.0

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValidationError(
                f"Focal exponents must be > 0, got alpha={self.alpha}, "
                f"beta={self.beta}."
            )


@dataclass(frozen=True)
class DetectionLossWeights:
    """Weights of the radius and offset terms of the detection loss."""

    lambda_radius: float = 0.1
    lambda_offset: float = 1.0

    def __post_init__(self):
        if self.lambda_radius < 0 or self.lambda_offset < 0:
            raise ValidationError("Loss weights must be >= 0.")


class LossReport(t.NamedTuple):
    """Total loss with its per term breakdown.

    Args:
        total: Sum of the weighted terms.
        terms: Unweighted value of every term.
        weighted: Weighted value of every term, in summation order.
    """

    total: float
    terms: t.Dict[str, float]
    weighted: t.Dict[str, float]


def _pair(pred: t.Any, target: t.Any) -> t.Tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeMismatchError(
            f"Prediction shape {pred.shape} does not match target shape "
            f"{target.shape}."
        )
    return pred, target


def _mask(mask: t.Any, shape: t.Tuple[int, ...]) -> np.ndarray:
    mask = np.asarray(mask, dtype=np.float64)
    try:
        np.broadcast_shapes(mask.shape, shape)
    except ValueError:
        raise ShapeMismatchError(
            f"Mask shape {mask.shape} can not be broadcast to {shape}."
        ) from None
    return mask


def focal_heatmap_loss(
    pred: t.Any, target: t.Any, params: FocalParams = FocalParams()
) -> float:
    """Penalty reduced pixel wise focal loss on a heatmap.

    Cells with target 1 contribute ``-(1 - p)^alpha log(p)``, all other cells
    ``-(1 - y)^beta p^alpha log(1 - p)``. The sum is normalized by the number
    of target 1 cells (at least 1).

    Args:
        pred: Predicted heatmap in [0, 1].
        target: Target heatmap in [0, 1].
        params: Focal exponents.

    Returns:
        Loss value.

    Raises:
        ShapeMismatchError: If the shapes differ.
    """
    pred, target = _pair(pred, target)
    p = np.clip(pred, EPSILON, 1 - EPSILON)
    positive = target == 1
    pos_loss = -((1 - p) ** params.alpha) * np.log(p)
    neg_loss = -((1 - target) ** params.beta) * p**params.alpha * np.log(1 - p)
    total = np.where(positive, pos_loss, neg_loss).sum()
    return float(total / max(1, int(positive.sum())))


def focal_heatmap_loss_grad(
    pred: t.Any, target: t.Any, params: FocalParams = FocalParams()
) -> np.ndarray:
    """Gradient of :func:`focal_heatmap_loss` with respect to ``pred``.

    Valid inside the clamp interval.
    """
    pred, target = _pair(pred, target)
    p = np.clip(pred, EPSILON, 1 - EPSILON)
    a, b = params.alpha, params.beta
    positive = target == 1
    pos_grad = a * (1 - p) ** (a - 1) * np.log(p) - (1 - p) ** a / p
    neg_grad = -((1 - target) ** b) * (
        a * p ** (a - 1) * np.log(1 - p) - p**a / (1 - p)
    )
    return np.where(positive, pos_grad, neg_grad) / max(1, int(positive.sum()))


def masked_l1_loss(pred: t.Any, target: t.Any, mask: t.Any) -> float:
    """L1 loss over supervised cells.

    The absolute differences of all components (channels) at the supervised
    cells are summed and divided by the number of supervised cells.

    Args:
        pred: Prediction ``[K, h, w]``.
        target: Target ``[K, h, w]``.
        mask: Indicator of supervised cells broadcastable to the prediction,
            usually ``[1, h, w]``.

    Returns:
        Loss value, 0 if no cell is supervised.
    """
    pred, target = _pair(pred, target)
    mask = _mask(mask, pred.shape)
    count = mask.sum()
    if count == 0:
        return 0.0
    return float((np.abs(pred - target) * mask).sum() / count)


def masked_l1_loss_grad(pred: t.Any, target: t.Any, mask: t.Any) -> np.ndarray:
    """Gradient of :func:`masked_l1_loss` with respect to ``pred``."""
    pred, target = _pair(pred, target)
    mask = _mask(mask, pred.shape)
    count = mask.sum()
    if count == 0:
        return np.zeros_like(pred)
    return np.sign(pred - target) * mask / count


def detection_total_loss(
    heads: HeadTensors,
    targets: TargetPack,
    weights: DetectionLossWeights = DetectionLossWeights(),
    params: FocalParams = FocalParams(),
) -> LossReport:
    """Overall objective of the circle detector.

    ``L = L_heatmap + lambda_radius L_radius + lambda_offset L_offset
    + (L_kp_offset + L_kp_heatmap + L_kp_local_offset)``

    Args:
        heads: Predicted head tensors.
        targets: Target pack.
        weights: Radius and offset weights.
        params: Focal exponents for both heatmaps.

    Returns:
        Loss report.
    """
    terms = {
        "obj_heatmap": focal_heatmap_loss(
            heads.obj_heatmap, targets.obj_heatmap, params
        ),
        "radius": masked_l1_loss(
            heads.radius_map, targets.radius_map, targets.obj_mask
        ),
        "offset": masked_l1_loss(
            heads.obj_offset, targets.obj_offset, targets.obj_mask
        ),
        "kp_offset": masked_l1_loss(
            heads.kp_offset, targets.kp_offset, targets.obj_mask
        ),
        "kp_heatmap": focal_heatmap_loss(heads.kp_heatmap, targets.kp_heatmap, params),
        "kp_local_offset": masked_l1_loss(
            heads.kp_local_offset, targets.kp_local_offset, targets.kp_mask
        ),
    }
    factors = {
        "radius": weights.lambda_radius,
        "offset": weights.lambda_offset,
    }
    weighted = {name: factors.get(name, 1.0) * value for name, value in terms.items()}
    return LossReport(sum(weighted.values()), terms, weighted)


def suppression_loss(attention: t.Any, background_mask: t.Any) -> float:
    """Region suppression loss.

    Mean absolute attention over background pixels. Nucleus pixels do not
    contribute.

    Args:
        attention: Attention map in [0, 1].
        background_mask: 1 on background (non nucleus) pixels, 0 elsewhere.

    Returns:
        Loss value, 0 if there is no background pixel.
    """
    attention = np.asarray(attention, dtype=np.float64)
    mask = _mask(background_mask, attention.shape)
    mask = np.broadcast_to(mask, np.broadcast_shapes(mask.shape, attention.shape))
    count = mask.sum()
    if count == 0:
        return 0.0
    return float((np.abs(attention) * mask).sum() / count)


def suppression_loss_grad(attention: t.Any, background_mask: t.Any) -> np.ndarray:
    """Gradient of :func:`suppression_loss` with respect to ``attention``."""
    attention = np.asarray(attention, dtype=np.float64)
    mask = _mask(background_mask, attention.shape)
    mask = np.broadcast_to(mask, np.broadcast_shapes(mask.shape, attention.shape))
    count = mask.sum()
    if count == 0:
        return np.zeros_like(attention)
    return np.sign(attention) * mask / count


def _check_label(scores: np.ndarray, label: int) -> None:
    if scores.ndim != 1 or scores.size == 0:
        raise ShapeMismatchError(
            f"Scores must be a non empty vector, got {scores.shape}."
        )
    if not 0 <= label < scores.size:
        raise ValueError(f"Label {label} out of range for {scores.size} classes.")


def cross_entropy(scores: t.Any, label: int) -> float:
    """Softmax cross entropy ``-log softmax(scores)[label]``.

    Args:
        scores: Unnormalized class scores.
        label: Index of the true class.

    Returns:
        Loss value.

    Raises:
        ValueError: If the label is out of range.
    """
    scores = np.asarray(scores, dtype=np.float64)
    _check_label(scores, label)
    return float(logsumexp(scores) - scores[label])


def cross_entropy_grad(scores: t.Any, label: int) -> np.ndarray:
    """Gradient of :func:`cross_entropy` with respect to ``scores``."""
    scores = np.asarray(scores, dtype=np.float64)
    _check_label(scores, label)
    grad = softmax(scores)
    grad[label] -= 1
    return grad


def classification_total_loss(
    cnn_scores: t.Any,
    fusion_scores: t.Any,
    label: int,
    attention: t.Any,
    background_mask: t.Any,
) -> LossReport:
    """Classification objective with deep supervision and region suppression.

    The cross entropy of the convolutional head and of the fusion head are
    added to the region suppression loss of the attention map.

    Args:
        cnn_scores: Class scores of the convolutional branch.
        fusion_scores: Class scores of the fused branch.
        label: Index of the true class.
        attention: Spatial attention map.
        background_mask: 1 on background pixels.

    Returns:
        Loss report.
    """
    terms = {
        "ce_cnn": cross_entropy(cnn_scores, label),
        "ce_fusion": cross_entropy(fusion_scores, label),
        "suppression": suppression_loss(attention, background_mask),
    }
    return LossReport(sum(terms.values()), terms, dict(terms))
