"""Sliding window tiling of whole slide images (WSI).

A WSI is cut into square tiles with a fixed overlap. Tiles reaching past the
right or bottom edge are padded with gray. Detections found on the tiles are
translated back to WSI coordinates and merged with circle NMS.
"""
import json
import logging
import os
import typing as t
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from bincell.toolkit.exceptions import ValidationError
from bincell.toolkit.geometry import DEFAULT_IOU_THRESHOLD, nms_indices
from bincell.toolkit.interface import Detection, GridDict
from bincell.toolkit.schema import load_schema, validate_instance

logger = logging.getLogger(__name__)

GRID_SCHEMA = "grid_schema.json"
DEFAULT_TILE_SIZE = 512
DEFAULT_OVERLAP = 128
DEFAULT_PAD_VALUE = (128, 128, 128)
CELL_PATCH_SIZE = 128

TilePredictor = t.Callable[[np.ndarray, int], t.Sequence[Detection]]


@dataclass(frozen=True)
class TileGrid:
    """Deterministic sliding window layout over a WSI.

    Args:
        wsi_width: Width of the WSI.
        wsi_height: Height of the WSI.
        tile_size: Edge length of the square tiles.
        overlap: Overlap of neighboring tiles.
        origins: Top left corner ``(x, y)`` of every tile in row major order.
        pad_value: RGB value of padded pixels.
    """

    wsi_width: int
    wsi_height: int
    tile_size: int = DEFAULT_TILE_SIZE
    overlap: int = DEFAULT_OVERLAP
    origins: t.Tuple[t.Tuple[int, int], ...] = ()
    pad_value: t.Tuple[int, int, int] = DEFAULT_PAD_VALUE

    def __post_init__(self):
        if self.overlap < 0 or self.tile_size <= self.overlap:
            raise ValidationError(
                f"Tile size ({self.tile_size}) must be larger than the overlap "
                f"({self.overlap}) and the overlap must be >= 0."
            )
        if self.wsi_width < 1 or self.wsi_height < 1:
            raise ValidationError("WSI size must be positive.")

    @property
    def stride(self) -> int:
        """Distance between neighboring tile origins."""
        return self.tile_size - self.overlap

    def __len__(self) -> int:
        return len(self.origins)

    def padding(self, index: int) -> t.Tuple[int, int]:
        """Number of padded columns and rows of a tile."""
        x, y = self.origins[index]
        return (
            max(0, x + self.tile_size - self.wsi_width),
            max(0, y + self.tile_size - self.wsi_height),
        )


class TileDetection(t.NamedTuple):
    """Detection in the coordinates of a tile."""

    tile_index: int
    detection: Detection


class RemapResult(t.NamedTuple):
    """Detections translated into WSI coordinates.

    Args:
        detections: Detections with the center inside the WSI.
        dropped: Number of detections discarded because their center lies in
            the padding.
    """

    detections: t.List[Detection]
    dropped: int


def _axis_origins(length: int, tile_size: int, stride: int) -> t.List[int]:
    origins = [0]
    while origins[-1] + tile_size < length:
        origins.append(origins[-1] + stride)
    return origins


def plan_grid(
    wsi_w: int,
    wsi_h: int,
    tile_size: int = DEFAULT_TILE_SIZE,
    overlap: int = DEFAULT_OVERLAP,
    pad_value: t.Tuple[int, int, int] = DEFAULT_PAD_VALUE,
) -> TileGrid:
    """Plan the tiles of a WSI.

    Origins are placed at multiples of ``tile_size - overlap`` until the tiles
    cover the WSI. The last tile of a row or column may reach past the edge.

    Args:
        wsi_w: Width of the WSI.
        wsi_h: Height of the WSI.
        tile_size: Edge length of the tiles.
        overlap: Overlap of neighboring tiles.
        pad_value: RGB value of padded pixels.

    Returns:
        Tile grid.

    Raises:
        ValidationError: If ``tile_size <= overlap``.
    """
    if overlap < 0 or tile_size <= overlap:
        raise ValidationError(
            f"Tile size ({tile_size}) must be larger than the overlap ({overlap})."
        )
    stride = tile_size - overlap
    xs = _axis_origins(wsi_w, tile_size, stride)
    ys = _axis_origins(wsi_h, tile_size, stride)
    return TileGrid(
        wsi_width=wsi_w,
        wsi_height=wsi_h,
        tile_size=tile_size,
        overlap=overlap,
        origins=tuple((x, y) for y in ys for x in xs),
        pad_value=tuple(pad_value),  # type: ignore[arg-type]
    )


def crop_padded(
    image: np.ndarray,
    x0: int,
    y0: int,
    size: int,
    pad_value: t.Sequence[int] = DEFAULT_PAD_VALUE,
) -> np.ndarray:
    """Square crop of an image, pixels outside of the image are padded.

    Args:
        image: Gray or RGB image.
        x0: Left edge of the crop (may be negative).
        y0: Top edge of the crop (may be negative).
        size: Edge length of the crop.
        pad_value: RGB value of padded pixels (gray images use the first one).

    Returns:
        ``size x size`` crop with the channels of the input.
    """
    height, width = image.shape[:2]
    fill = pad_value if image.ndim == 3 else pad_value[0]
    tile = np.empty((size, size) + image.shape[2:], dtype=image.dtype)
    tile[...] = fill
    left, top = max(0, x0), max(0, y0)
    right, bottom = min(width, x0 + size), min(height, y0 + size)
    if left < right and top < bottom:
        tile[top - y0 : bottom - y0, left - x0 : right - x0] = image[
            top:bottom, left:right
        ]
    return tile


def extract_tile(wsi: np.ndarray, grid: TileGrid, index: int) -> np.ndarray:
    """Tile of a WSI, gray padded where it reaches past the WSI.

    Args:
        wsi: WSI image.
        grid: Tile grid planned for the WSI.
        index: Tile index.

    Returns:
        ``tile_size x tile_size`` tile.

    Raises:
        IndexError: If the index is out of range.
    """
    if not 0 <= index < len(grid.origins):
        raise IndexError(f"Tile index {index} out of range (0..{len(grid) - 1}).")
    x, y = grid.origins[index]
    return crop_padded(wsi, x, y, grid.tile_size, grid.pad_value)


def extract_cell_patch(
    wsi: np.ndarray,
    detection: Detection,
    size: int = CELL_PATCH_SIZE,
    pad_value: t.Sequence[int] = DEFAULT_PAD_VALUE,
) -> np.ndarray:
    """Square patch centered on a detected cell, input of the classifier.

    Args:
        wsi: WSI image.
        detection: Detected cell in WSI coordinates.
        size: Edge length of the patch.
        pad_value: RGB value of padded pixels.

    Returns:
        ``size x size`` patch.
    """
    circle = detection.circle.circle
    x0 = int(np.floor(circle.cx - size / 2 + 0.5))
    y0 = int(np.floor(circle.cy - size / 2 + 0.5))
    return crop_padded(wsi, x0, y0, size, pad_value)


def remap_to_wsi(
    tile_dets: t.Iterable[TileDetection], grid: TileGrid
) -> RemapResult:
    """Translate tile detections into WSI coordinates.

    Detections whose center falls outside of the WSI (padding artifacts) are
    discarded.

    Args:
        tile_dets: Detections with their tile index.
        grid: Tile grid.

    Returns:
        Remapped detections and the number of dropped ones.
    """
    detections = []
    dropped = 0
    for tile_index, detection in tile_dets:
        x, y = grid.origins[tile_index]
        moved = detection.translated(x, y)
        circle = moved.circle.circle
        if 0 <= circle.cx < grid.wsi_width and 0 <= circle.cy < grid.wsi_height:
            detections.append(moved)
        else:
            dropped += 1
    if dropped:
        logger.warning(f"Dropped {dropped} detections centered in the tile padding.")
    return RemapResult(detections, dropped)


def merge_cross_tile(
    dets: t.Sequence[Detection],
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
    per_class: bool = True,
) -> t.List[Detection]:
    """Remove duplicates of cells detected on several overlapping tiles.

    Detections are visited by descending score, ties in input (tile) order, and
    reduced with greedy circle NMS.

    Args:
        dets: Detections in WSI coordinates.
        iou_threshold: NMS threshold.
        per_class: Only merge detections of the same class.

    Returns:
        Surviving detections sorted by descending score.
    """
    if not dets:
        return []
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    keep = nms_indices(
        [d.circle.circle for d in dets],
        [d.score for d in dets],
        [d.class_id for d in dets],
        iou_threshold,
        per_class,
        order=order,
    )
    logger.info(f"Merged {len(dets)} tile detections into {len(keep)}.")
    return [dets[i] for i in keep]


def detect_tiles(
    wsi: np.ndarray,
    grid: TileGrid,
    predictor: TilePredictor,
    workers: t.Optional[int] = None,
) -> t.List[TileDetection]:
    """Run a predictor on every tile with a bounded worker pool.

    Args:
        wsi: WSI image.
        grid: Tile grid.
        predictor: Called with the tile image and the tile index, returns the
            detections in tile coordinates.
        workers: Number of worker threads (default: number of CPU cores).

    Returns:
        Tile detections ordered by tile index.
    """
    workers = workers or os.cpu_count() or 1

    def run(index: int) -> t.List[TileDetection]:
        tile = extract_tile(wsi, grid, index)
        return [TileDetection(index, d) for d in predictor(tile, index)]

    with ThreadPoolExecutor(max_workers=workers) as executor:
        results = list(executor.map(run, range(len(grid))))
    return [detection for tile in results for detection in tile]


def grid_to_dict(grid: TileGrid) -> GridDict:
    """JSON representation of a tile grid."""
    return {
        "tile_size": grid.tile_size,
        "overlap": grid.overlap,
        "wsi": {"width": grid.wsi_width, "height": grid.wsi_height},
        "origins": [[x, y] for x, y in grid.origins],
        "pad_value": list(grid.pad_value),
    }


def grid_from_dict(data: t.Any) -> TileGrid:
    """Tile grid from its JSON representation.

    Raises:
        ValidationError: If the document does not follow the grid schema.
    """
    validate_instance(data, load_schema(GRID_SCHEMA))
    return TileGrid(
        wsi_width=data["wsi"]["width"],
        wsi_height=data["wsi"]["height"],
        tile_size=data["tile_size"],
        overlap=data["overlap"],
        origins=tuple((x, y) for x, y in data["origins"]),
        pad_value=tuple(data.get("pad_value", DEFAULT_PAD_VALUE)),
    )


def write_grid(grid: TileGrid, path: t.Union[str, Path]) -> None:
    """Write a grid JSON file."""
    with Path(path).open("w", encoding="utf-8") as file:
        json.dump(grid_to_dict(grid), file, indent=2, sort_keys=True)


def read_grid(path: t.Union[str, Path]) -> TileGrid:
    """Read a grid JSON file."""
    with Path(path).open("r", encoding="utf-8") as file:
        return grid_from_dict(json.load(file))
