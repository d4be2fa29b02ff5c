"""Circle heatmap codec.

Encodes circle annotations into the supervision tensors of an anchor free
center point detector and decodes (predicted) head tensors back into circle
detections with two nucleus keypoints.

All head tensors live on the output grid of size ``H/R x W/R`` where ``R`` is
the output stride. Tensors are indexed ``[channel, row, col]``, rows follow
``y`` and columns follow ``x``. Offsets and radii are stored in grid units, a
single multiplication by ``R`` maps decoded values back to input pixels.
"""
import logging
import math
import typing as t
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from bincell.toolkit.exceptions import (
    OutOfBoundsError,
    ShapeMismatchError,
    ValidationError,
)
from bincell.toolkit.geometry import nms_indices
from bincell.toolkit.interface import (
    AnnotationSet,
    Circle,
    CircleAnnotation,
    Detection,
    Point,
    ScoredCircle,
)
from bincell.toolkit.io.tensor import TENSOR_SUFFIX, read_tensor, write_tensor

logger = logging.getLogger(__name__)

# Number of standard deviations covered by a rendered Gaussian.
GAUSSIAN_EXTENT = 3.0


@dataclass(frozen=True)
class CodecConfig:
    """Geometry and decoding parameters of the heatmap codec.

    Args:
        input_width: Width W of the network input in pixels.
        input_height: Height H of the network input in pixels.
        stride: Output stride R.
        num_classes: Number of heatmap classes C. 1 treats every cell as a
            generic binuclear cell, 4 separates normal, mn, nb and npb.
        sigma_divisor: Object Gaussian sigma is ``max(1, r_grid / divisor)``.
        top_k: Maximum number of decoded peaks.
        score_threshold: Minimum peak score of a detection.
        nms_iou_threshold: Optional circle NMS threshold applied after decoding.
        per_class_nms: Restrict the NMS to detections of the same class.
    """

    input_width: int = 512
    input_height: int = 512
    stride: int = 4
    num_classes: int = 1
    sigma_divisor: float = 3.0
    top_k: int = 100
    score_threshold: float = 0.3
    nms_iou_threshold: t.Optional[float] = None
    per_class_nms: bool = True

    def __post_init__(self):
        if self.stride < 1:
            raise ValidationError(f"stride must be >= 1, got {self.stride}.")
        if self.input_width % self.stride or self.input_height % self.stride:
            raise ValidationError(
                f"Input size {self.input_width}x{self.input_height} is not "
                f"divisible by the stride {self.stride}."
            )
        if self.input_width < 1 or self.input_height < 1:
            raise ValidationError("Input size must be positive.")
        if self.num_classes < 1:
            raise ValidationError(f"num_classes must be >= 1, got {self.num_classes}.")
        if self.top_k < 1:
            raise ValidationError(f"top_k must be >= 1, got {self.top_k}.")
        if not 0 <= self.score_threshold <= 1:
            raise ValidationError(
                f"score_threshold must be in [0, 1], got {self.score_threshold}."
            )
        if self.sigma_divisor <= 0:
            raise ValidationError(
                f"sigma_divisor must be > 0, got {self.sigma_divisor}."
            )
        if self.nms_iou_threshold is not None and not 0 < self.nms_iou_threshold < 1:
            raise ValidationError(
                f"nms_iou_threshold must be in (0, 1), got {self.nms_iou_threshold}."
            )

    @property
    def grid_width(self) -> int:
        """Width of the output grid."""
        return self.input_width // self.stride

    @property
    def grid_height(self) -> int:
        """Height of the output grid."""
        return self.input_height // self.stride

    def class_id(self, cell: CircleAnnotation) -> int:
        """Heatmap channel of an annotated cell.

        Args:
            cell: Annotated cell.

        Returns:
            0 for a single class codec, the index of the cell class otherwise.

        Raises:
            ValidationError: If the codec is neither a 1 nor a 4 class codec.
        """
        if self.num_classes == 1:
            return 0
        if self.num_classes == 4:
            return cell.cell_class.index
        raise ValidationError(
            f"Annotations can only be encoded with 1 or 4 classes, "
            f"not {self.num_classes}."
        )


class HeadTensors(t.NamedTuple):
    """Output tensors of the detection heads (predicted or ground truth).

    Args:
        obj_heatmap: ``[C, h, w]`` object center heatmaps in [0, 1].
        obj_offset: ``[2, h, w]`` sub cell center offsets (x, y).
        radius_map: ``[1, h, w]`` radius in grid units.
        kp_offset: ``[4, h, w]`` nucleus positions relative to the center
            (left x, left y, right x, right y) in grid units.
        kp_heatmap: ``[2, h, w]`` left and right nucleus heatmaps.
        kp_local_offset: ``[2, h, w]`` sub cell nucleus offsets (x, y).
    """

    obj_heatmap: np.ndarray
    obj_offset: np.ndarray
    radius_map: np.ndarray
    kp_offset: np.ndarray
    kp_heatmap: np.ndarray
    kp_local_offset: np.ndarray


class TargetPack(t.NamedTuple):
    """Supervision tensors of one image.

    Same layout as :class:`HeadTensors` plus the masks of supervised cells:
    ``obj_mask`` (``[1, h, w]``, object centers) and ``kp_mask``
    (``[1, h, w]``, nucleus cells).
    """

    obj_heatmap: np.ndarray
    obj_offset: np.ndarray
    radius_map: np.ndarray
    kp_offset: np.ndarray
    kp_heatmap: np.ndarray
    kp_local_offset: np.ndarray
    obj_mask: np.ndarray
    kp_mask: np.ndarray

    def heads(self) -> HeadTensors:
        """Head tensors of the pack (copies)."""
        return HeadTensors(*(np.array(tensor) for tensor in self[:6]))


class RoundtripReport(t.NamedTuple):
    """Result of an encode/decode roundtrip.

    Errors are in input pixels. ``channel_swaps`` counts recovered cells whose
    left and right nucleus ended up exchanged.
    """

    max_center_error: float
    max_radius_error: float
    max_keypoint_error: float
    matched: int
    missed: int
    collisions: int
    channel_swaps: int


HEAD_SUFFIXES = {
    "obj_heatmap": "obj_hm",
    "obj_offset": "obj_off",
    "radius_map": "radius",
    "kp_offset": "kp_off",
    "kp_heatmap": "kp_hm",
    "kp_local_offset": "kp_loff",
}
MASK_SUFFIXES = {"obj_mask": "obj_mask", "kp_mask": "kp_mask"}


def object_sigma(radius_grid: float, sigma_divisor: float) -> float:
    """Gaussian sigma of an object center in grid units."""
    return max(1.0, radius_grid / sigma_divisor)


def keypoint_sigma(radius_grid: float, sigma_divisor: float) -> float:
    """Gaussian sigma of a nucleus in grid units (nuclei span half a radius)."""
    return max(1.0, (radius_grid / 2) / sigma_divisor)


def ordered_nuclei(nuclei: t.Sequence[Point]) -> t.Tuple[Point, Point]:
    """Order two nuclei into (left, right) by x, ties broken by y."""
    first, second = sorted(nuclei, key=lambda point: (point.x, point.y))
    return first, second


def grid_cell(point: Point, stride: int) -> t.Tuple[int, int]:
    """Output grid cell ``(row, col)`` containing a point."""
    return math.floor(point.y / stride), math.floor(point.x / stride)


def render_gaussian(
    heatmap: np.ndarray,
    class_id: int,
    center: t.Tuple[int, int],
    sigma: float,
) -> None:
    """Render a 2D Gaussian into one heatmap channel (in place max merge).

    The value at grid cell distance ``d`` from ``center`` is
    ``exp(-d^2 / (2 sigma^2))``, the center cell itself becomes 1.0. Values are
    rendered within ``3 sigma`` and merged with the existing values by element
    wise maximum.

    Args:
        heatmap: ``[C, h, w]`` heatmap tensor.
        class_id: Channel to render into.
        center: ``(row, col)`` of the center cell.
        sigma: Standard deviation in grid cells.

    Raises:
        OutOfBoundsError: If the center lies outside of the grid.
        ValueError: If sigma is not positive or the channel does not exist.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}.")
    if not 0 <= class_id < heatmap.shape[0]:
        raise ValueError(f"Channel {class_id} does not exist in {heatmap.shape}.")
    height, width = heatmap.shape[1:]
    row, col = center
    if not (0 <= row < height and 0 <= col < width):
        raise OutOfBoundsError(
            f"Center {center} lies outside of the {height}x{width} grid."
        )
    extent = int(math.ceil(GAUSSIAN_EXTENT * sigma))
    top, bottom = max(0, row - extent), min(height, row + extent + 1)
    left, right = max(0, col - extent), min(width, col + extent + 1)
    rows = np.arange(top, bottom)[:, None] - row
    cols = np.arange(left, right)[None, :] - col
    gaussian = np.exp(-(rows**2 + cols**2) / (2 * sigma**2))
    window = heatmap[class_id, top:bottom, left:right]
    np.maximum(window, gaussian, out=window, casting="unsafe")


def empty_targets(config: CodecConfig) -> TargetPack:
    """All zero target pack for the given codec."""
    shape = (config.grid_height, config.grid_width)

    def zeros(channels: int, dtype: t.Any = np.float32) -> np.ndarray:
        return np.zeros((channels,) + shape, dtype=dtype)

    return TargetPack(
        obj_heatmap=zeros(config.num_classes),
        obj_offset=zeros(2),
        radius_map=zeros(1),
        kp_offset=zeros(4),
        kp_heatmap=zeros(2),
        kp_local_offset=zeros(2),
        obj_mask=zeros(1, np.uint8),
        kp_mask=zeros(1, np.uint8),
    )


def encode_targets(annotations: AnnotationSet, config: CodecConfig) -> TargetPack:
    """Encode annotated cells into supervision tensors.

    For every cell the center cell ``floor(p / R)`` of its class heatmap gets a
    Gaussian peak, the sub cell offset ``p / R - floor(p / R)``, the radius
    ``r / R`` and the nucleus offsets ``(nucleus - p) / R`` are stored at that
    cell. The left nucleus (smaller x) goes to keypoint channel 0, the right
    one to channel 1. If two cells share a center cell the later one
    overwrites the regression values of the earlier one.

    Args:
        annotations: Annotated cells in input pixel coordinates.
        config: Codec configuration.

    Returns:
        Target pack.

    Raises:
        OutOfBoundsError: If a cell center lies outside of the codec input.
        ValidationError: If the class mapping is not supported.
    """
    pack = empty_targets(config)
    stride = config.stride
    height, width = config.grid_height, config.grid_width
    for cell in annotations.cells:
        class_id = config.class_id(cell)
        center = Point(cell.cx / stride, cell.cy / stride)
        row, col = math.floor(center.y), math.floor(center.x)
        radius_grid = cell.r / stride
        render_gaussian(
            pack.obj_heatmap,
            class_id,
            (row, col),
            object_sigma(radius_grid, config.sigma_divisor),
        )
        if pack.obj_mask[0, row, col]:
            logger.warning(
                f"Cell at ({cell.cx}, {cell.cy}) shares the grid cell {(row, col)} "
                "with another cell and overwrites its regression targets."
            )
        pack.obj_mask[0, row, col] = 1
        pack.obj_offset[:, row, col] = (center.x - col, center.y - row)
        pack.radius_map[0, row, col] = radius_grid
        nuclei = ordered_nuclei(cell.nuclei)
        kp_sigma = keypoint_sigma(radius_grid, config.sigma_divisor)
        for channel, nucleus in enumerate(nuclei):
            local = Point(nucleus.x / stride, nucleus.y / stride)
            pack.kp_offset[2 * channel : 2 * channel + 2, row, col] = (
                local.x - center.x,
                local.y - center.y,
            )
            kp_row, kp_col = math.floor(local.y), math.floor(local.x)
            if not (0 <= kp_row < height and 0 <= kp_col < width):
                logger.debug(f"Nucleus {nucleus} lies outside of the grid.")
                continue
            render_gaussian(pack.kp_heatmap, channel, (kp_row, kp_col), kp_sigma)
            pack.kp_local_offset[:, kp_row, kp_col] = (
                local.x - kp_col,
                local.y - kp_row,
            )
            pack.kp_mask[0, kp_row, kp_col] = 1
    return pack


def peak_cells(plane: np.ndarray) -> np.ndarray:
    """Local maxima of a 2D map.

    A cell is a peak if it is greater than or equal to all of its 8 connected
    neighbors. Connected peak cells (plateaus) are reduced to the
    lexicographically smallest ``(row, col)``.

    Args:
        plane: 2D map.

    Returns:
        ``[N, 2]`` array of ``(row, col)`` in row major order.
    """
    neighborhood_max = ndimage.maximum_filter(
        plane, size=3, mode="constant", cval=-np.inf
    )
    is_peak = plane >= neighborhood_max
    labels, count = ndimage.label(is_peak, structure=np.ones((3, 3), dtype=int))
    if count == 0:
        return np.zeros((0, 2), dtype=np.int64)
    ids, first = np.unique(labels.ravel(), return_index=True)
    first = first[ids > 0]
    return np.stack(np.unravel_index(np.sort(first), plane.shape), axis=1)


def _check_heads(heads: HeadTensors, config: CodecConfig) -> None:
    grid = (config.grid_height, config.grid_width)
    expected = {
        "obj_heatmap": (config.num_classes,) + grid,
        "obj_offset": (2,) + grid,
        "radius_map": (1,) + grid,
        "kp_offset": (4,) + grid,
        "kp_heatmap": (2,) + grid,
        "kp_local_offset": (2,) + grid,
    }
    for name, shape in expected.items():
        actual = tuple(np.shape(getattr(heads, name)))
        if actual != shape:
            raise ShapeMismatchError(f"{name} has shape {actual}, expected {shape}.")


def _keypoint_candidates(
    heads: HeadTensors, config: CodecConfig
) -> t.List[np.ndarray]:
    """Refined nucleus peak positions (input pixels) per keypoint channel."""
    candidates = []
    for channel in range(2):
        plane = heads.kp_heatmap[channel]
        peaks = peak_cells(plane)
        if len(peaks):
            peaks = peaks[plane[peaks[:, 0], peaks[:, 1]] >= config.score_threshold]
        offsets = heads.kp_local_offset[:, peaks[:, 0], peaks[:, 1]].astype(
            np.float64
        )
        positions = np.stack(
            (peaks[:, 1] + offsets[0], peaks[:, 0] + offsets[1]), axis=1
        )
        candidates.append(positions * config.stride)
    return candidates


def _snap(
    regressed: Point, circle: Circle, candidates: np.ndarray
) -> Point:
    if len(candidates) == 0:
        return regressed
    inside = np.hypot(candidates[:, 0] - circle.cx, candidates[:, 1] - circle.cy)
    candidates = candidates[inside <= circle.r]
    if len(candidates) == 0:
        return regressed
    distance = np.hypot(candidates[:, 0] - regressed.x, candidates[:, 1] - regressed.y)
    best = candidates[int(np.argmin(distance))]
    return Point(float(best[0]), float(best[1]))


def decode_detections(heads: HeadTensors, config: CodecConfig) -> t.List[Detection]:
    """Decode head tensors into circle detections.

    Peaks of the object heatmaps are sorted by descending score (ties by class,
    row and col), cut to ``top_k`` and filtered by ``score_threshold``. Each
    peak yields the circle ``((col, row) + offset) * R`` with radius
    ``radius * R``. Nuclei are regressed from the keypoint offsets and snapped
    to the nearest keypoint heatmap peak of the same channel that lies inside
    the circle.

    Args:
        heads: Predicted head tensors.
        config: Codec configuration.

    Returns:
        Detections sorted by descending score.

    Raises:
        ShapeMismatchError: If the tensors do not match the codec geometry.
    """
    _check_heads(heads, config)
    stride = config.stride
    peaks = []
    for class_id, plane in enumerate(heads.obj_heatmap):
        for row, col in peak_cells(plane):
            score = float(plane[row, col])
            if score > 0 and score >= config.score_threshold:
                peaks.append((-score, class_id, int(row), int(col)))
    peaks = sorted(peaks)[: config.top_k]
    keypoints = _keypoint_candidates(heads, config) if peaks else []
    detections = []
    for neg_score, class_id, row, col in peaks:
        center_x = col + float(heads.obj_offset[0, row, col])
        center_y = row + float(heads.obj_offset[1, row, col])
        radius = max(0.0, float(heads.radius_map[0, row, col]) * stride)
        circle = Circle(center_x * stride, center_y * stride, radius)
        nuclei = []
        for channel in range(2):
            regressed = Point(
                (center_x + float(heads.kp_offset[2 * channel, row, col])) * stride,
                (center_y + float(heads.kp_offset[2 * channel + 1, row, col]))
                * stride,
            )
            nuclei.append(_snap(regressed, circle, keypoints[channel]))
        detections.append(
            Detection(
                ScoredCircle(circle, min(1.0, -neg_score), class_id),
                (nuclei[0], nuclei[1]),
                (row, col),
            )
        )
    if config.nms_iou_threshold is not None and detections:
        keep = nms_indices(
            [d.circle.circle for d in detections],
            [d.score for d in detections],
            [d.class_id for d in detections],
            config.nms_iou_threshold,
            config.per_class_nms,
            order=range(len(detections)),
        )
        detections = [detections[i] for i in keep]
    return detections


def collision_count(annotations: AnnotationSet, config: CodecConfig) -> int:
    """Number of cells whose center shares a grid cell with an earlier cell."""
    seen = set()
    collisions = 0
    for cell in annotations.cells:
        key = grid_cell(Point(cell.cx, cell.cy), config.stride)
        if key in seen:
            collisions += 1
        seen.add(key)
    return collisions


def multitask_grid_roundtrip(
    annotations: AnnotationSet, config: CodecConfig
) -> RoundtripReport:
    """Encode annotations, decode the targets and measure the recovery errors.

    Every annotated cell is looked up by the grid cell and class of its
    expected peak. A cell whose regression targets were overwritten by a later
    cell in the same grid cell counts as missed.

    Args:
        annotations: Annotated cells.
        config: Codec configuration.

    Returns:
        Roundtrip report.
    """
    detections = decode_detections(encode_targets(annotations, config).heads(), config)
    by_peak = {(d.class_id,) + tuple(d.grid_peak): d for d in detections}
    last_writer = {
        grid_cell(Point(cell.cx, cell.cy), config.stride): index
        for index, cell in enumerate(annotations.cells)
    }
    center_error = radius_error = keypoint_error = 0.0
    matched = missed = swaps = 0
    for index, cell in enumerate(annotations.cells):
        cell_key = grid_cell(Point(cell.cx, cell.cy), config.stride)
        detection = by_peak.get((config.class_id(cell),) + cell_key)
        if detection is None or last_writer[cell_key] != index:
            missed += 1
            continue
        matched += 1
        circle = detection.circle.circle
        center_error = max(
            center_error, math.hypot(circle.cx - cell.cx, circle.cy - cell.cy)
        )
        radius_error = max(radius_error, abs(circle.r - cell.r))
        left, right = ordered_nuclei(cell.nuclei)
        straight = max(
            math.dist(detection.nuclei[0], left), math.dist(detection.nuclei[1], right)
        )
        crossed = max(
            math.dist(detection.nuclei[0], right), math.dist(detection.nuclei[1], left)
        )
        if crossed < straight:
            swaps += 1
        keypoint_error = max(keypoint_error, straight)
    return RoundtripReport(
        max_center_error=center_error,
        max_radius_error=radius_error,
        max_keypoint_error=keypoint_error,
        matched=matched,
        missed=missed,
        collisions=collision_count(annotations, config),
        channel_swaps=swaps,
    )


def _tensor_path(stem: t.Union[str, Path], suffix: str) -> Path:
    stem = Path(stem)
    return stem.with_name(f"{stem.name}.{suffix}{TENSOR_SUFFIX}")


def save_heads(
    heads: t.Union[HeadTensors, TargetPack], stem: t.Union[str, Path]
) -> None:
    """Write the head tensors as ``<stem>.<name>.btnsr`` files.

    Args:
        heads: Head tensors or a target pack (only the heads are written).
        stem: Common path prefix of the tensor files.
    """
    for name, suffix in HEAD_SUFFIXES.items():
        tensor = np.asarray(getattr(heads, name), dtype=np.float32)
        write_tensor(tensor, _tensor_path(stem, suffix))


def load_heads(stem: t.Union[str, Path]) -> HeadTensors:
    """Read head tensors written by :func:`save_heads`.

    Args:
        stem: Common path prefix of the tensor files.

    Returns:
        Head tensors.
    """
    return HeadTensors(
        **{
            name: read_tensor(_tensor_path(stem, suffix)).astype(np.float32)
            for name, suffix in HEAD_SUFFIXES.items()
        }
    )


def save_targets(pack: TargetPack, stem: t.Union[str, Path]) -> None:
    """Write a target pack including its masks.

    Args:
        pack: Target pack.
        stem: Common path prefix of the tensor files.
    """
    save_heads(pack, stem)
    for name, suffix in MASK_SUFFIXES.items():
        write_tensor(
            np.asarray(getattr(pack, name), dtype=np.uint8), _tensor_path(stem, suffix)
        )


def load_targets(stem: t.Union[str, Path]) -> TargetPack:
    """Read a target pack.

    Missing mask files are derived from the heatmaps: every cell with value 1.0
    in any channel counts as supervised.

    Args:
        stem: Common path prefix of the tensor files.

    Returns:
        Target pack.
    """
    heads = load_heads(stem)
    masks = {}
    sources = {"obj_mask": heads.obj_heatmap, "kp_mask": heads.kp_heatmap}
    for name, suffix in MASK_SUFFIXES.items():
        path = _tensor_path(stem, suffix)
        if path.exists():
            masks[name] = read_tensor(path).astype(np.uint8)
        else:
            logger.info(f"{path} not found, deriving {name} from the heatmap peaks.")
            masks[name] = np.any(sources[name] == 1.0, axis=0, keepdims=True).astype(
                np.uint8
            )
    return TargetPack(*heads, **masks)
