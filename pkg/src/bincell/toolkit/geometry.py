"""Circle geometry: intersection areas, circle IoU and greedy circle NMS.

Circles are described by their center and a single radius. All IoU values are
computed analytically from the lens formed by two intersecting disks.
"""
import logging
import typing as t

import numpy as np

from bincell.toolkit.interface import Circle, ScoredCircle

logger = logging.getLogger(__name__)

DEFAULT_IOU_THRESHOLD = 0.5


def _as_array(circles: t.Union[np.ndarray, t.Sequence[Circle]]) -> np.ndarray:
    array = np.asarray(circles, dtype=np.float64)
    if array.size == 0:
        return np.zeros((0, 3))
    return array.reshape(-1, 3)


def _intersection(a: np.ndarray, b: np.ndarray) -> t.Tuple[np.ndarray, np.ndarray]:
    """Element-wise lens area of broadcastable circle arrays ``[..., 3]``.

    Returns the intersection area and the containment ratio ``(r_min/r_max)^2``
    used for exact results in the containment branch.
    """
    distance = np.hypot(a[..., 0] - b[..., 0], a[..., 1] - b[..., 1])
    small = np.minimum(a[..., 2], b[..., 2])
    large = np.maximum(a[..., 2], b[..., 2])
    degenerate = small <= 0
    disjoint = distance >= small + large
    contained = distance <= large - small
    with np.errstate(divide="ignore", invalid="ignore"):
        cos_small = (distance**2 + small**2 - large**2) / (2 * distance * small)
        cos_large = (distance**2 + large**2 - small**2) / (2 * distance * large)
        kite = (
            (-distance + small + large)
            * (distance + small - large)
            * (distance - small + large)
            * (distance + small + large)
        )
        lens = (
            small**2 * np.arccos(np.clip(cos_small, -1.0, 1.0))
            + large**2 * np.arccos(np.clip(cos_large, -1.0, 1.0))
            - 0.5 * np.sqrt(np.maximum(kite, 0.0))
        )
        ratio = np.where(large > 0, (small / large) ** 2, 0.0)
    area = np.where(contained, np.pi * small**2, lens)
    area = np.where(disjoint | degenerate, 0.0, area)
    ratio = np.where(degenerate, 0.0, ratio)
    return area, ratio


def _iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    area, ratio = _intersection(a, b)
    small = np.minimum(a[..., 2], b[..., 2])
    large = np.maximum(a[..., 2], b[..., 2])
    union = np.pi * small**2 + np.pi * large**2 - area
    distance = np.hypot(a[..., 0] - b[..., 0], a[..., 1] - b[..., 1])
    contained = distance <= large - small
    with np.errstate(divide="ignore", invalid="ignore"):
        iou = np.where(union > 0, area / union, 0.0)
    iou = np.where(contained, ratio, iou)
    return np.clip(iou, 0.0, 1.0)


def circle_intersection_area(a: Circle, b: Circle) -> float:
    """Area shared by two disks.

    Args:
        a: First circle.
        b: Second circle.

    Returns:
        Intersection area in square pixels. 0 for disjoint or degenerate
        circles.
    """
    area, _ = _intersection(np.asarray(a, float), np.asarray(b, float))
    return float(area)


def circle_iou(a: Circle, b: Circle) -> float:
    """Intersection over union of two circles.

    The result is symmetric in its arguments, 1 for identical non degenerate
    circles, 0 for disjoint circles or circles with radius 0 and the area ratio
    of the smaller to the larger circle if one contains the other.

    Args:
        a: First circle.
        b: Second circle.

    Returns:
        IoU in [0, 1].
    """
    return float(_iou(np.asarray(a, float), np.asarray(b, float)))


def circle_iou_matrix(
    first: t.Union[np.ndarray, t.Sequence[Circle]],
    second: t.Union[np.ndarray, t.Sequence[Circle]],
) -> np.ndarray:
    """Pairwise IoU between two lists of circles.

    Args:
        first: N circles (``[N, 3]`` array of cx, cy, r or sequence of circles).
        second: M circles.

    Returns:
        ``[N, M]`` IoU matrix. Element ``(i, j)`` equals
        ``circle_iou(first[i], second[j])``.
    """
    a = _as_array(first)
    b = _as_array(second)
    return _iou(a[:, None, :], b[None, :, :])


def nms_indices(
    circles: t.Union[np.ndarray, t.Sequence[Circle]],
    scores: t.Sequence[float],
    class_ids: t.Optional[t.Sequence[int]] = None,
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
    per_class: bool = True,
    order: t.Optional[t.Sequence[int]] = None,
) -> t.List[int]:
    """Greedy non maximum suppression on circles.

    Candidates are visited in ``order``. A visited candidate survives unless an
    earlier survivor (of the same class if ``per_class``) overlaps it with an
    IoU strictly above ``iou_threshold``.

    Args:
        circles: Candidate circles.
        scores: Candidate scores.
        class_ids: Candidate class ids (default all 0).
        iou_threshold: Suppression threshold, 0 < threshold < 1.
        per_class: Only suppress candidates of the same class.
        order: Visiting order. Defaults to descending score with ties broken by
            (class_id, cx, cy, r).

    Returns:
        Indices of the survivors in visiting order.

    Raises:
        ValueError: If the threshold is not in (0, 1).
    """
    if not 0 < iou_threshold < 1:
        raise ValueError(f"IoU threshold must be in (0, 1), got {iou_threshold}.")
    boxes = _as_array(circles)
    count = len(boxes)
    if count == 0:
        return []
    score_array = np.asarray(scores, dtype=np.float64)
    ids = (
        np.zeros(count, dtype=np.int64)
        if class_ids is None
        else np.asarray(class_ids, dtype=np.int64)
    )
    if order is None:
        order = np.lexsort(
            (boxes[:, 2], boxes[:, 1], boxes[:, 0], ids, -score_array)
        ).tolist()
    suppressed = np.zeros(count, dtype=bool)
    keep = []
    for index in order:
        if suppressed[index]:
            continue
        keep.append(int(index))
        overlap = _iou(boxes[index][None, :], boxes) > iou_threshold
        if per_class:
            overlap &= ids == ids[index]
        suppressed |= overlap
    logger.debug(f"NMS kept {len(keep)} of {count} candidates.")
    return keep


def circle_nms(
    candidates: t.Sequence[ScoredCircle],
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
    per_class: bool = True,
) -> t.List[ScoredCircle]:
    """Greedy score descending circle NMS.

    Args:
        candidates: Scored circles.
        iou_threshold: Suppression threshold, 0 < threshold < 1.
        per_class: Only suppress candidates of the same class.

    Returns:
        Survivors sorted by descending score.
    """
    keep = nms_indices(
        [c.circle for c in candidates],
        [c.score for c in candidates],
        [c.class_id for c in candidates],
        iou_threshold,
        per_class,
    )
    return [candidates[i] for i in keep]
