"""Detection and classification metrics.

Detection quality is measured with COCO style average precision on circle IoU
(101 point interpolation, IoU thresholds 0.50:0.05:0.95), the recall at IoU 0.5
and their harmonic mean. Classification quality is measured with a confusion
matrix, per class scores and a two class ROC analysis. Image similarity uses
the global statistics SSIM.
"""
import csv
import itertools
import logging
import typing as t
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.integrate import trapezoid

from bincell.toolkit.exceptions import (
    ImageSetMismatchError,
    ShapeMismatchError,
    ValidationError,
)
from bincell.toolkit.geometry import circle_iou_matrix
from bincell.toolkit.interface import AnnotationSet, CellClass, Detection
from bincell.toolkit.io.image import to_gray

logger = logging.getLogger(__name__)

COCO_IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


class DetEvalReport(t.NamedTuple):
    """Detection evaluation.

    Args:
        ap: AP averaged over classes and IoU thresholds.
        ap50: AP at IoU 0.5.
        ap75: AP at IoU 0.75.
        recall50: Fraction of ground truth cells matched at IoU 0.5.
        f1: Harmonic mean of ``ap50`` and ``recall50``.
        per_class_ap: AP per class id averaged over the IoU thresholds.
        pr_curves: Per IoU threshold the 101 recall points and the class
            averaged interpolated precision.
    """

    ap: float
    ap50: float
    ap75: float
    recall50: float
    f1: float
    per_class_ap: t.Dict[int, float]
    pr_curves: t.Dict[float, t.Tuple[np.ndarray, np.ndarray]]


class RocCurve(t.NamedTuple):
    """ROC points, one per threshold (descending)."""

    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray


class ClsEvalReport(t.NamedTuple):
    """Classification evaluation.

    ``auc`` is None if the labels contain only one of the two ROC classes.
    """

    confusion: np.ndarray
    accuracy: float
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    macro_precision: float
    macro_recall: float
    macro_f1: float
    roc: RocCurve
    auc: t.Optional[float]
    sensitivity: float
    specificity: float


@dataclass(frozen=True)
class SsimParams:
    """Constants of the SSIM.

    Args:
        dynamic_range: Range L of the pixel values.
        k1: ``C1 = (k1 L)^2``.
        k2: ``C2 = (k2 L)^2``.
    """

    dynamic_range: float = 255.0
    k1: float = 0.01
    k2: float = 0.03

    def __post_init__(self):
        if self.dynamic_range <= 0:
            raise ValidationError(
                f"dynamic_range must be > 0, got {self.dynamic_range}."
            )

    @property
    def c1(self) -> float:
        """Luminance stabilizer."""
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        """Contrast stabilizer."""
        return (self.k2 * self.dynamic_range) ** 2


def f1_from_ap_recall(ap50: float, recall50: float) -> float:
    """Harmonic mean of AP50 and Recall50 (0 if both are 0)."""
    if ap50 + recall50 == 0:
        return 0.0
    return 2 * ap50 * recall50 / (ap50 + recall50)


def gt_class_id(cell_class: CellClass, num_classes: int) -> int:
    """Class id a ground truth class is evaluated as."""
    return 0 if num_classes == 1 else cell_class.index


def _match_image(
    gt: AnnotationSet,
    preds: t.Sequence[Detection],
    class_id: int,
    threshold: float,
    num_classes: int,
) -> t.Tuple[t.List[t.Tuple[float, bool]], int]:
    """Greedy matching of one image and class.

    Returns ``(score, is_true_positive)`` per prediction and the number of
    ground truth cells.
    """
    gt_circles = [
        cell.circle
        for cell in gt.cells
        if gt_class_id(cell.cell_class, num_classes) == class_id
    ]
    own = [d for d in preds if d.class_id == class_id]
    order = sorted(range(len(own)), key=lambda i: -own[i].score)
    if not gt_circles or not own:
        return [(own[i].score, False) for i in order], len(gt_circles)
    ious = circle_iou_matrix([own[i].circle.circle for i in order], gt_circles)
    matched = np.zeros(len(gt_circles), dtype=bool)
    results = []
    for row, index in enumerate(order):
        candidates = np.where(matched | (ious[row] < threshold), -1.0, ious[row])
        best = int(np.argmax(candidates))
        hit = candidates[best] >= 0
        if hit:
            matched[best] = True
        results.append((own[index].score, bool(hit)))
    return results, len(gt_circles)


def _interpolated_precision(
    results: t.List[t.Tuple[float, bool]], positives: int
) -> t.Tuple[np.ndarray, int]:
    """101 point interpolated precision and the number of true positives."""
    if not results:
        return np.zeros(len(RECALL_POINTS)), 0
    # sorted is stable, equal scores keep the image order
    ordered = sorted(range(len(results)), key=lambda i: -results[i][0])
    hits = np.array([results[i][1] for i in ordered], dtype=bool)
    true_pos = np.cumsum(hits)
    false_pos = np.cumsum(~hits)
    recall = true_pos / positives
    precision = true_pos / (true_pos + false_pos)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    index = np.searchsorted(recall, RECALL_POINTS, side="left")
    values = np.zeros(len(RECALL_POINTS))
    valid = index < len(envelope)
    values[valid] = envelope[index[valid]]
    return values, int(true_pos[-1])


def evaluate_detections(
    gt: t.Sequence[AnnotationSet],
    preds: t.Sequence[t.Sequence[Detection]],
    iou_thresholds: t.Sequence[float] = COCO_IOU_THRESHOLDS,
    num_classes: int = 1,
) -> DetEvalReport:
    """COCO style evaluation of circle detections.

    Per image, class and IoU threshold the predictions are visited by
    descending score and matched to the unmatched ground truth cell with the
    highest circle IoU at or above the threshold. Classes without ground truth
    are left out of the averages.

    Args:
        gt: Ground truth per image.
        preds: Detections per image, aligned with ``gt``.
        iou_thresholds: IoU thresholds AP is averaged over.
        num_classes: 1 evaluates class agnostic, 4 per cell class.

    Returns:
        Detection report.

    Raises:
        ImageSetMismatchError: If ``gt`` and ``preds`` differ in length.
    """
    if len(gt) != len(preds):
        raise ImageSetMismatchError(
            f"{len(gt)} ground truth images but {len(preds)} prediction sets."
        )
    thresholds = sorted(set(iou_thresholds) | {0.5, 0.75})
    classes = range(num_classes)
    curves: t.Dict[float, t.Dict[int, np.ndarray]] = {}
    matched50 = 0
    positives = {c: 0 for c in classes}
    for threshold in thresholds:
        curves[threshold] = {}
        for class_id in classes:
            results: t.List[t.Tuple[float, bool]] = []
            count = 0
            for image_gt, image_preds in zip(gt, preds):
                image_results, image_count = _match_image(
                    image_gt, image_preds, class_id, threshold, num_classes
                )
                results.extend(image_results)
                count += image_count
            positives[class_id] = count
            if count == 0:
                continue
            curves[threshold][class_id], hits = _interpolated_precision(
                results, count
            )
            if threshold == 0.5:
                matched50 += hits
    evaluated = [c for c in classes if positives[c] > 0]
    for class_id in classes:
        if positives[class_id] == 0:
            logger.warning(f"Class {class_id} has no ground truth and is skipped.")

    def ap_at(threshold: float) -> float:
        if not evaluated:
            return 0.0
        return float(np.mean([curves[threshold][c].mean() for c in evaluated]))

    per_class_ap = {
        c: float(np.mean([curves[th][c].mean() for th in iou_thresholds]))
        for c in evaluated
    }
    ap = float(np.mean([ap_at(th) for th in iou_thresholds])) if evaluated else 0.0
    total = sum(positives.values())
    ap50 = ap_at(0.5)
    recall50 = matched50 / total if total else 0.0
    pr_curves = {
        th: (
            RECALL_POINTS.copy(),
            np.mean([curves[th][c] for c in evaluated], axis=0)
            if evaluated
            else np.zeros(len(RECALL_POINTS)),
        )
        for th in iou_thresholds
    }
    return DetEvalReport(
        ap=ap,
        ap50=ap50,
        ap75=ap_at(0.75),
        recall50=recall50,
        f1=f1_from_ap_recall(ap50, recall50),
        per_class_ap=per_class_ap,
        pr_curves=pr_curves,
    )


def to_binary_abnormal(labels: t.Iterable[t.Union[int, CellClass]]) -> np.ndarray:
    """Collapse cell classes into normal (0) and abnormal (1: mn, nb, npb)."""
    indices = [
        label.index if isinstance(label, CellClass) else int(label) for label in labels
    ]
    return (np.asarray(indices, dtype=np.int64) != CellClass.NORMAL.index).astype(
        np.int64
    )


def roc_curve(truth: np.ndarray, scores: np.ndarray) -> RocCurve:
    """ROC of binary labels over the thresholds ``+inf``, unique scores, ``-inf``.

    A sample is predicted positive if its score is greater than or equal to
    the threshold.
    """
    thresholds = np.concatenate(([np.inf], np.unique(scores)[::-1], [-np.inf]))
    positives = max(1, int(truth.sum()))
    negatives = max(1, int((~truth).sum()))
    predicted = scores[None, :] >= thresholds[:, None]
    tpr = (predicted & truth[None, :]).sum(axis=1) / positives
    fpr = (predicted & ~truth[None, :]).sum(axis=1) / negatives
    return RocCurve(thresholds, fpr, tpr)


def evaluate_classification(
    labels: t.Sequence[int],
    predicted_classes: t.Sequence[int],
    scores: t.Sequence[float],
    num_classes: t.Optional[int] = None,
    positive_class: int = 1,
) -> ClsEvalReport:
    """Evaluate a classifier.

    Args:
        labels: True class per sample.
        predicted_classes: Predicted class per sample.
        scores: Score of the positive class per sample (used for the ROC).
        num_classes: Size of the confusion matrix (default: largest class + 1).
        positive_class: Class treated as positive for ROC, sensitivity and
            specificity.

    Returns:
        Classification report.

    Raises:
        ValueError: If the inputs are empty or differ in length.
    """
    labels_ = np.asarray(labels, dtype=np.int64)
    predicted = np.asarray(predicted_classes, dtype=np.int64)
    scores_ = np.asarray(scores, dtype=np.float64)
    if labels_.size == 0:
        raise ValueError("Cannot evaluate an empty set of samples.")
    if not labels_.shape == predicted.shape == scores_.shape:
        raise ValueError(
            f"Inputs differ in length: {labels_.size} labels, {predicted.size} "
            f"predictions, {scores_.size} scores."
        )
    size = num_classes or int(max(labels_.max(), predicted.max())) + 1
    confusion = np.zeros((size, size), dtype=np.int64)
    np.add.at(confusion, (labels_, predicted), 1)
    diagonal = np.diag(confusion).astype(np.float64)
    support = confusion.sum(axis=1)
    claimed = confusion.sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(claimed > 0, diagonal / claimed, 0.0)
        recall = np.where(support > 0, diagonal / support, 0.0)
        f1 = np.where(
            precision + recall > 0, 2 * precision * recall / (precision + recall), 0.0
        )
    present = support > 0

    truth = labels_ == positive_class
    roc = roc_curve(truth, scores_)
    auc: t.Optional[float] = float(trapezoid(roc.tpr, roc.fpr))
    if truth.all() or not truth.any():
        logger.warning("AUC is undefined, the labels contain only one ROC class.")
        auc = None

    hit = predicted == positive_class
    tp = int((hit & truth).sum())
    fn = int((~hit & truth).sum())
    tn = int((~hit & ~truth).sum())
    fp = int((hit & ~truth).sum())
    return ClsEvalReport(
        confusion=confusion,
        accuracy=float(diagonal.sum() / labels_.size),
        precision=precision,
        recall=recall,
        f1=f1,
        macro_precision=float(precision[present].mean()),
        macro_recall=float(recall[present].mean()),
        macro_f1=float(f1[present].mean()),
        roc=roc,
        auc=auc,
        sensitivity=tp / (tp + fn) if tp + fn else 0.0,
        specificity=tn / (tn + fp) if tn + fp else 0.0,
    )


def ssim(x: t.Any, y: t.Any, params: SsimParams = SsimParams()) -> float:
    """Structural similarity from whole image statistics.

    ``((2 mx my + C1)(2 sxy + C2)) / ((mx^2 + my^2 + C1)(sx^2 + sy^2 + C2))``.
    RGB images are converted to luminance first.

    Args:
        x: First image.
        y: Second image of the same shape.
        params: SSIM constants.

    Returns:
        SSIM in (-1, 1].

    Raises:
        ShapeMismatchError: If the shapes differ.
    """
    if np.shape(x) != np.shape(y):
        raise ShapeMismatchError(f"Shapes {np.shape(x)} and {np.shape(y)} differ.")
    a = to_gray(x).ravel()
    b = to_gray(y).ravel()
    mean_a, mean_b = a.mean(), b.mean()
    da, db = a - mean_a, b - mean_b
    var_a = np.mean(da * da)
    var_b = np.mean(db * db)
    covariance = np.mean(da * db)
    numerator = (2 * (mean_a * mean_b) + params.c1) * (2 * covariance + params.c2)
    denominator = (mean_a * mean_a + mean_b * mean_b + params.c1) * (
        var_a + var_b + params.c2
    )
    return float(numerator / denominator)


def mean_cross_ssim(
    set_a: t.Sequence[t.Any],
    set_b: t.Sequence[t.Any],
    params: SsimParams = SsimParams(),
) -> float:
    """Mean SSIM over all pairs of two image sets."""
    values = [ssim(a, b, params) for a, b in itertools.product(set_a, set_b)]
    if not values:
        raise ValueError("Both image sets must be non empty.")
    return float(np.mean(values))


def write_pr_csv(report: DetEvalReport, path: t.Union[str, Path]) -> None:
    """Write the PR curves as ``iou,recall,precision`` rows."""
    with Path(path).open("w", encoding="utf-8", newline="") as file:
        writer = csv.writer(file)
        writer.writerow(["iou", "recall", "precision"])
        for threshold, (recall, precision) in sorted(report.pr_curves.items()):
            for r, p in zip(recall, precision):
                writer.writerow([f"{threshold:.2f}", f"{r:.2f}", repr(float(p))])


def write_roc_csv(report: ClsEvalReport, path: t.Union[str, Path]) -> None:
    """Write the ROC points as ``threshold,fpr,tpr`` rows."""
    with Path(path).open("w", encoding="utf-8", newline="") as file:
        writer = csv.writer(file)
        writer.writerow(["threshold", "fpr", "tpr"])
        for threshold, fpr, tpr in zip(*report.roc):
            writer.writerow([repr(float(v)) for v in (threshold, fpr, tpr)])
