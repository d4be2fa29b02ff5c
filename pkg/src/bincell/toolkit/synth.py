"""Synthetic binuclear cell images and an oracle predictor.

The generator paints cells with a light cytoplasm disk and two dark nucleus
disks on a bright background. Abnormal classes add their characteristic
structure: a detached micronucleus (mn), a bud on one nucleus (nb) or a thin
bridge between the nuclei (npb). Every pixel is labelled with its color layer
(0 background, 1 cytoplasm, 2 nucleus).

The oracle turns annotations into head tensors as a perfect (or perturbed)
detector would predict them.

All randomness comes from ``numpy.random.Generator(numpy.random.PCG64(seed))``.
"""
import dataclasses
import logging
import math
import typing as t
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from bincell.toolkit.exceptions import InfeasibleSpecError, ValidationError
from bincell.toolkit.geometry import circle_intersection_area
from bincell.toolkit.heatmap_codec import (
    GAUSSIAN_EXTENT,
    CodecConfig,
    HeadTensors,
    encode_targets,
    keypoint_sigma,
    object_sigma,
    ordered_nuclei,
)
from bincell.toolkit.interface import (
    AnnotationSet,
    CellClass,
    Circle,
    CircleAnnotation,
    ColorLayer,
    Point,
)

logger = logging.getLogger(__name__)

BACKGROUND_COLOR = (240, 240, 240)
CYTOPLASM_COLOR = (200, 170, 200)
NUCLEUS_COLOR = (90, 40, 120)
LAYER_COLORS = {
    ColorLayer.UNSTAINED: BACKGROUND_COLOR,
    ColorLayer.CYTOPLASM: CYTOPLASM_COLOR,
    ColorLayer.NUCLEUS: NUCLEUS_COLOR,
}

NUCLEUS_RATIO = 0.3
NUCLEUS_DISTANCE = 0.45
MAX_TILT = math.pi / 6
MICRONUCLEUS_RATIO = 0.1
MICRONUCLEUS_DISTANCE = 0.75
BUD_RATIO = 0.12
BRIDGE_RATIO = 0.08
IMPURITY_RADIUS = (1.5, 3.0)


def rng_from_seed(seed: int) -> np.random.Generator:
    """Random generator used for all synthetic data."""
    return np.random.Generator(np.random.PCG64(seed))


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of a synthetic WSI.

    Args:
        wsi_width: Image width.
        wsi_height: Image height.
        cell_count: Number of cells.
        class_mix: Probabilities of normal, mn, nb and npb.
        radius_range: Minimum and maximum cell radius.
        noise_sigma: Standard deviation of the additive pixel noise.
        impurity_count: Number of small dark impurities on the background.
        seed: Seed of the generator.
        max_overlap: Maximum shared area of two cells relative to the smaller
            cell.
        min_nucleus_gap: Minimum distance between nuclei (and centers) of
            different cells.
        max_retries: Placement attempts per cell.
        tile_size: Tile size the radius range must fit into.
    """

    wsi_width: int = 512
    wsi_height: int = 512
    cell_count: int = 20
    class_mix: t.Tuple[float, float, float, float] = (0.25, 0.25, 0.25, 0.25)
    radius_range: t.Tuple[float, float] = (14.0, 28.0)
    noise_sigma: float = 0.0
    impurity_count: int = 0
    seed: int = 0
    max_overlap: float = 0.2
    min_nucleus_gap: float = 12.0
    max_retries: int = 1000
    tile_size: int = 512

    def __post_init__(self):
        mix = np.asarray(self.class_mix, dtype=np.float64)
        if mix.shape != (4,) or (mix < 0).any() or abs(mix.sum() - 1) > 1e-9:
            raise ValidationError(
                f"class_mix must hold 4 probabilities summing to 1, got "
                f"{self.class_mix}."
            )
        low, high = self.radius_range
        if not 4 < low <= high < self.tile_size / 4:
            raise ValidationError(
                f"radius_range must lie within (4, {self.tile_size / 4}), got "
                f"{self.radius_range}."
            )
        if self.wsi_width < 2 * high or self.wsi_height < 2 * high:
            raise ValidationError(
                f"A {self.wsi_width}x{self.wsi_height} image cannot hold cells "
                f"of radius {high}."
            )
        if self.cell_count < 0 or self.impurity_count < 0:
            raise ValidationError("Counts must be >= 0.")
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma must be >= 0.")


@dataclass(frozen=True)
class OracleConfig:
    """Perturbations applied by the oracle predictor.

    Args:
        heatmap_noise: Gaussian sigma added to both heatmaps.
        offset_noise: Gaussian sigma added to all offset maps (grid units).
        radius_noise: Gaussian sigma added to the radius map (grid units).
        drop_rate: Probability that a cell is missing from the prediction.
        seed: Seed of the perturbations.
    """

    heatmap_noise: float = 0.0
    offset_noise: float = 0.0
    radius_noise: float = 0.0
    drop_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if min(self.heatmap_noise, self.offset_noise, self.radius_noise) < 0:
            raise ValidationError("Oracle noise levels must be >= 0.")
        if not 0 <= self.drop_rate <= 1:
            raise ValidationError(f"drop_rate must be in [0, 1], got {self.drop_rate}.")

    @property
    def noiseless(self) -> bool:
        """True if no tensor is perturbed."""
        return self.heatmap_noise == self.offset_noise == self.radius_noise == 0


class SynthResult(t.NamedTuple):
    """Generated image with its ground truth.

    Args:
        image: ``[H, W, 3]`` RGB image.
        annotations: Annotated cells.
        layer_map: ``[H, W]`` color layer per pixel.
    """

    image: np.ndarray
    annotations: AnnotationSet
    layer_map: np.ndarray


class CellPatch(t.NamedTuple):
    """Single centered cell."""

    image: np.ndarray
    annotation: CircleAnnotation
    layer_map: np.ndarray


class _Canvas:
    """RGB image and layer map painted with disks and bands."""

    def __init__(self, width: int, height: int):
        self.width = width
        self.height = height
        self.layers = np.zeros((height, width), dtype=np.uint8)

    def _window(
        self, left: float, top: float, right: float, bottom: float
    ) -> t.Tuple[slice, slice, np.ndarray, np.ndarray]:
        c0 = max(0, int(math.floor(left)))
        c1 = min(self.width, int(math.ceil(right)) + 1)
        r0 = max(0, int(math.floor(top)))
        r1 = min(self.height, int(math.ceil(bottom)) + 1)
        xs = np.arange(c0, c1)[None, :] + 0.5
        ys = np.arange(r0, r1)[:, None] + 0.5
        return slice(r0, r1), slice(c0, c1), xs, ys

    def disk(self, circle: Circle, layer: ColorLayer) -> None:
        rows, cols, xs, ys = self._window(
            circle.cx - circle.r,
            circle.cy - circle.r,
            circle.cx + circle.r,
            circle.cy + circle.r,
        )
        inside = disk_mask(xs, ys, circle)
        self.layers[rows, cols][inside] = layer

    def band(self, start: Point, end: Point, width: float, layer: ColorLayer) -> None:
        half = width / 2
        rows, cols, xs, ys = self._window(
            min(start.x, end.x) - half,
            min(start.y, end.y) - half,
            max(start.x, end.x) + half,
            max(start.y, end.y) + half,
        )
        dx, dy = end.x - start.x, end.y - start.y
        length2 = dx * dx + dy * dy
        along = np.clip(((xs - start.x) * dx + (ys - start.y) * dy) / length2, 0, 1)
        distance2 = (xs - start.x - along * dx) ** 2 + (ys - start.y - along * dy) ** 2
        self.layers[rows, cols][distance2 <= half * half] = layer

    def render(self, noise_sigma: float, rng: np.random.Generator) -> np.ndarray:
        palette = np.array([LAYER_COLORS[layer] for layer in ColorLayer], np.float64)
        image = palette[self.layers]
        if noise_sigma > 0:
            image = image + rng.normal(0.0, noise_sigma, size=image.shape)
        return np.clip(np.rint(image), 0, 255).astype(np.uint8)


def disk_mask(xs: np.ndarray, ys: np.ndarray, circle: Circle) -> np.ndarray:
    """Pixel centers ``(xs, ys)`` inside a circle."""
    return (xs - circle.cx) ** 2 + (ys - circle.cy) ** 2 <= circle.r**2


def nucleus_circles(cell: CircleAnnotation, nucleus_ratio: float = NUCLEUS_RATIO):
    """The two nucleus disks of an annotated cell."""
    return [Circle(n.x, n.y, nucleus_ratio * cell.r) for n in cell.nuclei]


class _CellLayout(t.NamedTuple):
    annotation: CircleAnnotation
    tilt: float
    extras: t.Tuple[float, int]


def _draw_cell(
    rng: np.random.Generator,
    cell_class: CellClass,
    center: Point,
    radius: float,
) -> _CellLayout:
    tilt = rng.uniform(-MAX_TILT, MAX_TILT)
    ux, uy = math.cos(tilt), math.sin(tilt)
    offset = NUCLEUS_DISTANCE * radius
    nuclei = (
        Point(center.x - offset * ux, center.y - offset * uy),
        Point(center.x + offset * ux, center.y + offset * uy),
    )
    extras = (rng.uniform(-1, 1), int(rng.integers(0, 2)))
    return _CellLayout(
        CircleAnnotation(cell_class, center.x, center.y, radius, nuclei), tilt, extras
    )


def _paint_cell(canvas: _Canvas, layout: _CellLayout) -> None:
    """Paint nuclei and class specific structures of a cell."""
    cell = layout.annotation
    for circle in nucleus_circles(cell):
        canvas.disk(circle, ColorLayer.NUCLEUS)
    ux, uy = math.cos(layout.tilt), math.sin(layout.tilt)
    side = 1.0 if layout.extras[0] >= 0 else -1.0
    if cell.cell_class == CellClass.MN:
        distance = MICRONUCLEUS_DISTANCE * cell.r * side
        canvas.disk(
            Circle(
                cell.cx - distance * uy,
                cell.cy + distance * ux,
                MICRONUCLEUS_RATIO * cell.r,
            ),
            ColorLayer.NUCLEUS,
        )
    elif cell.cell_class == CellClass.NB:
        direction = -1.0 if layout.extras[1] == 0 else 1.0
        nucleus = cell.nuclei[layout.extras[1]]
        distance = (NUCLEUS_RATIO + BUD_RATIO / 2) * cell.r * direction
        canvas.disk(
            Circle(
                nucleus.x + distance * ux,
                nucleus.y + distance * uy,
                BUD_RATIO * cell.r,
            ),
            ColorLayer.NUCLEUS,
        )
    elif cell.cell_class == CellClass.NPB:
        canvas.band(
            cell.nuclei[0],
            cell.nuclei[1],
            max(2.0, BRIDGE_RATIO * cell.r),
            ColorLayer.NUCLEUS,
        )


def _fits(
    candidate: CircleAnnotation,
    placed: t.Sequence[CircleAnnotation],
    max_overlap: float,
    min_gap: float,
) -> bool:
    for other in placed:
        smaller = math.pi * min(candidate.r, other.r) ** 2
        shared = circle_intersection_area(candidate.circle, other.circle)
        if shared / smaller > max_overlap:
            return False
        points = ((candidate.cx, candidate.cy),) + tuple(candidate.nuclei)
        others = ((other.cx, other.cy),) + tuple(other.nuclei)
        if any(math.dist(p, q) < min_gap for p in points for q in others):
            return False
    return True


def _place_cells(spec: SynthSpec, rng: np.random.Generator) -> t.List[_CellLayout]:
    classes = list(CellClass)
    layouts: t.List[_CellLayout] = []
    for index in range(spec.cell_count):
        cell_class = classes[int(rng.choice(len(classes), p=spec.class_mix))]
        for _ in range(spec.max_retries):
            radius = rng.uniform(*spec.radius_range)
            center = Point(
                rng.uniform(radius, spec.wsi_width - radius),
                rng.uniform(radius, spec.wsi_height - radius),
            )
            layout = _draw_cell(rng, cell_class, center, radius)
            if _fits(
                layout.annotation,
                [placed.annotation for placed in layouts],
                spec.max_overlap,
                spec.min_nucleus_gap,
            ):
                layouts.append(layout)
                break
        else:
            raise InfeasibleSpecError(
                f"Cell {index} could not be placed within {spec.max_retries} "
                "attempts. Reduce the cell count or the radius range."
            )
    return layouts


def _place_impurities(
    spec: SynthSpec, cells: t.Sequence[CircleAnnotation], rng: np.random.Generator
) -> t.List[Circle]:
    impurities: t.List[Circle] = []
    for index in range(spec.impurity_count):
        for _ in range(spec.max_retries):
            radius = rng.uniform(*IMPURITY_RADIUS)
            dot = Circle(
                rng.uniform(radius, spec.wsi_width - radius),
                rng.uniform(radius, spec.wsi_height - radius),
                radius,
            )
            if all(
                math.hypot(dot.cx - c.cx, dot.cy - c.cy) >= c.r + dot.r + 2
                for c in cells
            ):
                impurities.append(dot)
                break
        else:
            raise InfeasibleSpecError(
                f"Impurity {index} could not be placed on the background."
            )
    return impurities


def generate_wsi(spec: SynthSpec) -> SynthResult:
    """Generate a synthetic WSI.

    Cells are placed by rejection sampling, fully inside the image. All
    cytoplasm disks are painted first, then the nuclei and class specific
    structures, then impurities.

    Args:
        spec: Generator parameters.

    Returns:
        Image, annotations and layer map.

    Raises:
        InfeasibleSpecError: If the layout cannot be placed.
    """
    rng = rng_from_seed(spec.seed)
    layouts = _place_cells(spec, rng)
    cells = [layout.annotation for layout in layouts]
    impurities = _place_impurities(spec, cells, rng)
    canvas = _Canvas(spec.wsi_width, spec.wsi_height)
    for cell in cells:
        canvas.disk(cell.circle, ColorLayer.CYTOPLASM)
    for layout in layouts:
        _paint_cell(canvas, layout)
    for dot in impurities:
        canvas.disk(dot, ColorLayer.NUCLEUS)
    image = canvas.render(spec.noise_sigma, rng)
    logger.debug(
        f"Generated {len(cells)} cells and {len(impurities)} impurities "
        f"(seed {spec.seed})."
    )
    annotations = AnnotationSet(spec.wsi_width, spec.wsi_height, tuple(cells))
    return SynthResult(image, annotations, canvas.layers)


def generate_batch(
    spec: SynthSpec, count: int, workers: t.Optional[int] = None
) -> t.List[SynthResult]:
    """Generate several images, image ``i`` uses the seed ``spec.seed ^ i``.

    Args:
        spec: Generator parameters shared by all images.
        count: Number of images.
        workers: Number of worker threads.

    Returns:
        Generated images in index order.
    """
    specs = [
        dataclasses.replace(spec, seed=spec.seed ^ index) for index in range(count)
    ]
    with ThreadPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(generate_wsi, specs))


def generate_cell_patch(
    cell_class: t.Union[CellClass, str],
    size: int = 128,
    seed: int = 0,
    noise_sigma: float = 0.0,
) -> CellPatch:
    """Generate a single centered cell for the classification stage.

    Args:
        cell_class: Class of the cell.
        size: Edge length of the square patch.
        seed: Seed of the generator.
        noise_sigma: Standard deviation of the additive pixel noise.

    Returns:
        Patch image, annotation and layer map.
    """
    rng = rng_from_seed(seed)
    radius = rng.uniform(0.32, 0.4) * size
    layout = _draw_cell(rng, CellClass(cell_class), Point(size / 2, size / 2), radius)
    canvas = _Canvas(size, size)
    canvas.disk(layout.annotation.circle, ColorLayer.CYTOPLASM)
    _paint_cell(canvas, layout)
    image = canvas.render(noise_sigma, rng)
    return CellPatch(image, layout.annotation, canvas.layers)


def rasterize_nuclei(
    annotations: AnnotationSet,
    shape: t.Optional[t.Tuple[int, int]] = None,
    nucleus_ratio: float = NUCLEUS_RATIO,
) -> np.ndarray:
    """Pixels covered by the main nuclei of the annotated cells.

    Args:
        annotations: Annotated cells.
        shape: ``(H, W)`` of the output, defaults to the image size.
        nucleus_ratio: Nucleus radius relative to the cell radius.

    Returns:
        Boolean mask.
    """
    height, width = shape or (annotations.image_height, annotations.image_width)
    canvas = _Canvas(width, height)
    for cell in annotations.cells:
        for circle in nucleus_circles(cell, nucleus_ratio):
            canvas.disk(circle, ColorLayer.NUCLEUS)
    return canvas.layers == ColorLayer.NUCLEUS


def rotate_quarter_turns(
    image: np.ndarray, annotations: AnnotationSet, layer_map: np.ndarray, k: int
) -> SynthResult:
    """Rotate an image with its ground truth by ``k`` quarter turns.

    The rotation follows :func:`numpy.rot90` (counter clockwise).

    Args:
        image: Image.
        annotations: Annotated cells.
        layer_map: Layer map.
        k: Number of quarter turns.

    Returns:
        Rotated image, annotations and layer map.
    """
    k %= 4
    width, height = annotations.image_width, annotations.image_height
    cells = list(annotations.cells)
    for _ in range(k):
        cells = [
            CircleAnnotation(
                cell.cell_class,
                cell.cy,
                width - cell.cx,
                cell.r,
                tuple(Point(n.y, width - n.x) for n in cell.nuclei),  # type: ignore
            )
            for cell in cells
        ]
        width, height = height, width
    return SynthResult(
        np.ascontiguousarray(np.rot90(image, k)),
        AnnotationSet(width, height, tuple(cells)),
        np.ascontiguousarray(np.rot90(layer_map, k)),
    )


_UPPER = np.nextafter(np.float32(1.0), np.float32(0.0))


class _Window(t.NamedTuple):
    index: t.Tuple[slice, slice]
    rows: np.ndarray
    cols: np.ndarray
    gaussian: np.ndarray


def _gaussian_window(point: Point, sigma: float, shape: t.Tuple[int, int]) -> _Window:
    row, col = math.floor(point.y), math.floor(point.x)
    extent = int(math.ceil(GAUSSIAN_EXTENT * sigma))
    r0, r1 = max(0, row - extent), min(shape[0], row + extent + 1)
    c0, c1 = max(0, col - extent), min(shape[1], col + extent + 1)
    rows = np.arange(r0, r1)[:, None]
    cols = np.arange(c0, c1)[None, :]
    gaussian = np.exp(-((rows - row) ** 2 + (cols - col) ** 2) / (2 * sigma**2))
    return _Window((slice(r0, r1), slice(c0, c1)), rows, cols, gaussian)


def _claim(owner: np.ndarray, window: _Window) -> np.ndarray:
    """Cells of the window where the Gaussian is at least the current owner."""
    wins = window.gaussian >= owner[window.index]
    owner[window.index] = np.maximum(owner[window.index], window.gaussian)
    return wins


def _dense_regression(
    heads: HeadTensors, annotations: AnnotationSet, config: CodecConfig
) -> None:
    """Fill the regression maps around every peak like a trained head would.

    Every cell of an object's Gaussian window that the object dominates gets
    the object's radius and offsets pointing to its center and nuclei. The
    keypoint windows get local offsets pointing to their nucleus.
    """
    stride = config.stride
    shape = (config.grid_height, config.grid_width)
    owner = np.zeros(shape)
    kp_owner = np.zeros((2,) + shape)
    for cell in annotations.cells:
        center = Point(cell.cx / stride, cell.cy / stride)
        radius = cell.r / stride
        window = _gaussian_window(
            center, object_sigma(radius, config.sigma_divisor), shape
        )
        wins = _claim(owner, window)
        full = np.zeros_like(window.gaussian)
        offset_x = np.clip(center.x - window.cols, 0.0, _UPPER) + full
        offset_y = np.clip(center.y - window.rows, 0.0, _UPPER) + full
        heads.obj_offset[0][window.index][wins] = offset_x[wins]
        heads.obj_offset[1][window.index][wins] = offset_y[wins]
        heads.radius_map[0][window.index][wins] = radius
        nuclei = ordered_nuclei(cell.nuclei)
        for channel, nucleus in enumerate(nuclei):
            local = Point(nucleus.x / stride, nucleus.y / stride)
            kp_x = local.x - (window.cols + offset_x)
            kp_y = local.y - (window.rows + offset_y)
            heads.kp_offset[2 * channel][window.index][wins] = kp_x[wins]
            heads.kp_offset[2 * channel + 1][window.index][wins] = kp_y[wins]
            if not (0 <= local.y < shape[0] and 0 <= local.x < shape[1]):
                continue
            kp_window = _gaussian_window(
                local, keypoint_sigma(radius, config.sigma_divisor), shape
            )
            kp_wins = _claim(kp_owner[channel], kp_window)
            kp_full = np.zeros_like(kp_window.gaussian)
            local_x = np.clip(local.x - kp_window.cols, 0.0, _UPPER) + kp_full
            local_y = np.clip(local.y - kp_window.rows, 0.0, _UPPER) + kp_full
            heads.kp_local_offset[0][kp_window.index][kp_wins] = local_x[kp_wins]
            heads.kp_local_offset[1][kp_window.index][kp_wins] = local_y[kp_wins]


def oracle_predict(
    annotations: AnnotationSet,
    codec: CodecConfig,
    oracle: OracleConfig = OracleConfig(),
) -> HeadTensors:
    """Head tensors an oracle detector predicts for the annotations.

    Dropped cells are removed before encoding. Without noise the result equals
    the encoded targets. With noise the regression maps are filled densely
    around every object and all tensors are perturbed with Gaussian noise and
    clipped back into their valid ranges.

    Drops and noise are drawn from a PCG64 generator seeded with
    ``oracle.seed`` (see :func:`rng_from_seed`), not from a xoshiro family
    generator, so equal seeds reproduce the same tensors.

    Args:
        annotations: Annotated cells.
        codec: Codec configuration.
        oracle: Perturbation parameters.

    Returns:
        Predicted head tensors.
    """
    rng = rng_from_seed(oracle.seed)
    cells = annotations.cells
    if oracle.drop_rate > 0 and cells:
        keep = rng.random(len(cells)) >= oracle.drop_rate
        cells = tuple(cell for cell, kept in zip(cells, keep) if kept)
        logger.debug(f"Oracle dropped {len(annotations.cells) - len(cells)} cells.")
    kept = annotations._replace(cells=cells)
    heads = encode_targets(kept, codec).heads()
    if oracle.noiseless:
        return heads
    _dense_regression(heads, kept, codec)

    def perturb(tensor: np.ndarray, sigma: float) -> np.ndarray:
        if sigma == 0:
            return tensor
        return tensor + rng.normal(0.0, sigma, size=tensor.shape)

    noisy = HeadTensors(
        obj_heatmap=np.clip(perturb(heads.obj_heatmap, oracle.heatmap_noise), 0, 1),
        obj_offset=np.clip(perturb(heads.obj_offset, oracle.offset_noise), 0, _UPPER),
        radius_map=np.clip(perturb(heads.radius_map, oracle.radius_noise), 0, None),
        kp_offset=perturb(heads.kp_offset, oracle.offset_noise),
        kp_heatmap=np.clip(perturb(heads.kp_heatmap, oracle.heatmap_noise), 0, 1),
        kp_local_offset=np.clip(
            perturb(heads.kp_local_offset, oracle.offset_noise), 0, _UPPER
        ),
    )
    return HeadTensors(*(tensor.astype(np.float32) for tensor in noisy))
