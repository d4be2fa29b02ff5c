"""End-to-end detection run on a synthetic WSI.

The WSI is generated, cut into tiles, an oracle detector predicts the head
tensors of every tile, the tensors are decoded, the tile detections are
remapped to WSI coordinates, merged across tiles and evaluated against the
ground truth.
"""
import json
import logging
import typing as t
from pathlib import Path

from bincell.toolkit.config import PipelineConfig, config_to_dict
from bincell.toolkit.heatmap_codec import (
    decode_detections,
    encode_targets,
    save_targets,
)
from bincell.toolkit.interface import AnnotationSet, Detection
from bincell.toolkit.io import write_annotations, write_detections, write_image
from bincell.toolkit.io.tensor import TENSOR_SUFFIX, write_tensor
from bincell.toolkit.metrics import DetEvalReport, evaluate_detections, write_pr_csv
from bincell.toolkit.synth import SynthResult, generate_wsi, oracle_predict
from bincell.toolkit.tiling import (
    TileGrid,
    TilePredictor,
    detect_tiles,
    merge_cross_tile,
    remap_to_wsi,
    write_grid,
)

logger = logging.getLogger(__name__)


class PipelineResult(t.NamedTuple):
    """Outcome of a pipeline run.

    Args:
        synth: Generated WSI with its ground truth.
        grid: Tile grid.
        detections: Merged detections in WSI coordinates.
        dropped: Tile detections dropped in the padding.
        report: Detection evaluation.
    """

    synth: SynthResult
    grid: TileGrid
    detections: t.List[Detection]
    dropped: int
    report: DetEvalReport


def tile_annotations(
    annotations: AnnotationSet, grid: TileGrid, index: int
) -> AnnotationSet:
    """Cells centered inside a tile, in tile coordinates.

    Args:
        annotations: Annotated cells of the WSI.
        grid: Tile grid.
        index: Tile index.

    Returns:
        Annotations of the tile.
    """
    x0, y0 = grid.origins[index]
    size = grid.tile_size
    cells = tuple(
        cell._replace(
            cx=cell.cx - x0,
            cy=cell.cy - y0,
            nuclei=tuple(n._replace(x=n.x - x0, y=n.y - y0) for n in cell.nuclei),
        )
        for cell in annotations.cells
        if x0 <= cell.cx < x0 + size and y0 <= cell.cy < y0 + size
    )
    return AnnotationSet(size, size, cells)


def oracle_tile_predictor(
    annotations: AnnotationSet, grid: TileGrid, config: PipelineConfig
) -> TilePredictor:
    """Tile predictor backed by the oracle detector.

    Tile ``i`` is perturbed with the oracle seed ``seed ^ i``.
    """
    codec = config.tile_codec()

    def predict(tile: t.Any, index: int) -> t.List[Detection]:
        heads = oracle_predict(
            tile_annotations(annotations, grid, index),
            codec,
            config.oracle_config(index),
        )
        return decode_detections(heads, codec)

    return predict


def detect_whole_image(
    annotations: AnnotationSet, config: PipelineConfig
) -> t.List[Detection]:
    """Oracle detections of the untiled image."""
    codec = config.codec_for(annotations.image_width, annotations.image_height)
    heads = oracle_predict(annotations, codec, config.oracle_config(0))
    return decode_detections(heads, codec)


def _write_artifacts(result: PipelineResult, config: PipelineConfig) -> None:
    out_dir = Path(config.out_dir)  # type: ignore[arg-type]
    out_dir.mkdir(parents=True, exist_ok=True)
    synth = result.synth
    annotations = synth.annotations
    write_image(synth.image, out_dir / "wsi.ppm")
    write_annotations(annotations, out_dir / "wsi.json")
    write_tensor(synth.layer_map, out_dir / f"wsi.layers{TENSOR_SUFFIX}")
    write_grid(result.grid, out_dir / "grid.json")
    codec = config.codec_for(annotations.image_width, annotations.image_height)
    save_targets(encode_targets(annotations, codec), out_dir / "wsi.targets")
    write_detections(
        result.detections,
        out_dir / "wsi.detections.json",
        (annotations.image_width, annotations.image_height),
    )
    write_pr_csv(result.report, out_dir / "pr.csv")
    with (out_dir / "report.json").open("w", encoding="utf-8") as file:
        json.dump(report_to_dict(result.report), file, indent=2, sort_keys=True)
    with (out_dir / "config.json").open("w", encoding="utf-8") as file:
        json.dump(config_to_dict(config), file, indent=2, sort_keys=True)
    logger.info(f"Artifacts written to {out_dir}.")


def report_to_dict(report: DetEvalReport) -> t.Dict[str, t.Any]:
    """JSON representation of a detection report (without the PR curves)."""
    return {
        "ap": report.ap,
        "ap50": report.ap50,
        "ap75": report.ap75,
        "recall50": report.recall50,
        "f1": report.f1,
        "per_class_ap": {str(k): v for k, v in report.per_class_ap.items()},
    }


def run_pipeline(config: PipelineConfig) -> PipelineResult:
    """Run synthesis, tiled oracle detection, merge and evaluation.

    Args:
        config: Pipeline configuration.

    Returns:
        Pipeline result. Artifacts are written if ``config.out_dir`` is set.
    """
    synth = generate_wsi(config.synth_spec())
    annotations = synth.annotations
    logger.info(
        f"Generated a {annotations.image_width}x{annotations.image_height} WSI "
        f"with {len(annotations.cells)} cells."
    )
    grid = config.plan_grid(annotations.image_width, annotations.image_height)
    tile_dets = detect_tiles(
        synth.image,
        grid,
        oracle_tile_predictor(annotations, grid, config),
        config.workers,
    )
    logger.info(f"Detected {len(tile_dets)} cells on {len(grid)} tiles.")
    remapped = remap_to_wsi(tile_dets, grid)
    merged = merge_cross_tile(
        remapped.detections,
        config.tiling.merge_iou_threshold,
        config.codec.per_class_nms,
    )
    report = evaluate_detections(
        [annotations], [merged], num_classes=config.codec.num_classes
    )
    logger.info(f"AP {report.ap:.4f}, AP50 {report.ap50:.4f}, F1 {report.f1:.4f}.")
    result = PipelineResult(synth, grid, merged, remapped.dropped, report)
    if config.out_dir is not None:
        _write_artifacts(result, config)
    return result
