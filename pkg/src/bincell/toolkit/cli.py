"""Command line interface ``bincell``.

Every subcommand prints a JSON document on stdout. Diagnostics go to stderr.

Exit codes:
    0: Success.
    2: Usage error (unknown subcommand or flag, bad flag value).
    3: An input could not be read or inputs do not fit together.
    4: An input or parameter is invalid.

Parameters are resolved from the built-in defaults, then the ``--config``
file, then the command line flags.
"""
import argparse
import csv
import dataclasses
import json
import logging
import sys
import typing as t
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from bincell.toolkit.config import PipelineConfig, apply_overrides, load_config
from bincell.toolkit.exceptions import (
    ImageSetMismatchError,
    InfeasibleSpecError,
    InputError,
    ValidationError,
)
from bincell.toolkit.geometry import nms_indices
from bincell.toolkit.heatmap_codec import (
    collision_count,
    decode_detections,
    encode_targets,
    load_heads,
    load_targets,
    save_heads,
    save_targets,
)
from bincell.toolkit.interface import CellClass
from bincell.toolkit.io import (
    image_id,
    read_annotations,
    read_detections,
    read_image,
    read_keypoints,
    read_tensor,
    write_annotations,
    write_image,
    write_tensor,
)
from bincell.toolkit.io.detections import detections_to_dict
from bincell.toolkit.io.tensor import TENSOR_SUFFIX
from bincell.toolkit.losses import detection_total_loss
from bincell.toolkit.metrics import (
    evaluate_classification,
    evaluate_detections,
    mean_cross_ssim,
    to_binary_abnormal,
    write_pr_csv,
    write_roc_csv,
)
from bincell.toolkit.neural_ops import patch_positions, select_key_patches
from bincell.toolkit.pipeline import report_to_dict, run_pipeline
from bincell.toolkit.segmentation import (
    downsample_mask,
    kmeans_color,
    nucleus_mask_from_keypoints,
)
from bincell.toolkit.synth import generate_batch, oracle_predict
from bincell.toolkit.tiling import (
    TileDetection,
    extract_tile,
    grid_to_dict,
    merge_cross_tile,
    read_grid,
    remap_to_wsi,
    write_grid,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INPUT = 3
EXIT_INVALID = 4

IMAGE_SUFFIXES = (".ppm", ".pgm")

# Flag destination to configuration key.
CONFIG_FLAGS = {
    "seed": "seed",
    "workers": "workers",
    "out_dir": "out_dir",
    "tile_size": "tiling.tile_size",
    "overlap": "tiling.overlap",
    "nms_iou": "tiling.merge_iou_threshold",
    "stride_r": "codec.stride",
    "sigma_div": "codec.sigma_divisor",
    "score_thr": "codec.score_threshold",
    "top_k": "codec.top_k",
    "num_classes": "codec.num_classes",
    "kmeans_k": "kmeans.k",
    "width": "synth.wsi_width",
    "height": "synth.wsi_height",
    "cells": "synth.cell_count",
    "noise_sigma": "synth.noise_sigma",
    "impurities": "synth.impurity_count",
    "noise": "oracle.heatmap_noise",
    "offset_noise": "oracle.offset_noise",
    "radius_noise": "oracle.radius_noise",
    "drop_rate": "oracle.drop_rate",
}

Handler = t.Callable[[argparse.Namespace, PipelineConfig], t.Any]


def _config_default(key: str) -> t.Any:
    value: t.Any = PipelineConfig()
    for part in key.split("."):
        value = getattr(value, part)
    return value


def _option(
    parser: t.Any,
    flag: str,
    help: str,
    key: t.Optional[str] = None,
    **kwargs: t.Any,
) -> None:
    """Add an option whose help text states its default."""
    if key is not None:
        default = _config_default(key)
        kwargs["default"] = None
    elif kwargs.get("action") == "store_true":
        default = "off"
    else:
        default = kwargs.get("default")
    parser.add_argument(flag, help=f"{help} (default: {default})", **kwargs)


def _common_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(add_help=False)
    group = parser.add_argument_group("common options")
    _option(group, "--config", "JSON configuration file", type=Path, default=None)
    _option(group, "--verbose", "Log debug messages", action="store_true")
    _option(group, "--seed", "Master seed", "seed", type=int)
    _option(
        group,
        "--workers",
        "Worker pool size, unset uses all cores",
        "workers",
        type=int,
    )
    _option(group, "--out-dir", "Output directory", "out_dir", type=Path)
    _option(group, "--tile-size", "Tile edge length", "tiling.tile_size", type=int)
    _option(group, "--overlap", "Tile overlap", "tiling.overlap", type=int)
    _option(
        group,
        "--nms-iou",
        "IoU threshold of circle NMS and of the cross tile merge",
        "tiling.merge_iou_threshold",
        type=float,
    )
    _option(group, "--stride-r", "Output stride R", "codec.stride", type=int)
    _option(
        group,
        "--sigma-div",
        "Gaussian sigma divisor of the radius",
        "codec.sigma_divisor",
        type=float,
    )
    _option(
        group,
        "--score-thr",
        "Peak score threshold",
        "codec.score_threshold",
        type=float,
    )
    _option(group, "--top-k", "Maximum decoded peaks", "codec.top_k", type=int)
    _option(
        group,
        "--num-classes",
        "Heatmap classes",
        "codec.num_classes",
        type=int,
        choices=(1, 4),
    )
    _option(group, "--kmeans-k", "Number of color clusters", "kmeans.k", type=int)
    return parser


def _synth_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(add_help=False)
    group = parser.add_argument_group("synthetic data")
    _option(group, "--width", "WSI width", "synth.wsi_width", type=int)
    _option(group, "--height", "WSI height", "synth.wsi_height", type=int)
    _option(group, "--cells", "Number of cells", "synth.cell_count", type=int)
    _option(
        group, "--noise-sigma", "Pixel noise sigma", "synth.noise_sigma", type=float
    )
    _option(
        group, "--impurities", "Number of impurities", "synth.impurity_count", type=int
    )
    _option(
        group, "--noise", "Oracle heatmap noise", "oracle.heatmap_noise", type=float
    )
    _option(
        group,
        "--offset-noise",
        "Oracle offset noise",
        "oracle.offset_noise",
        type=float,
    )
    _option(
        group,
        "--radius-noise",
        "Oracle radius noise",
        "oracle.radius_noise",
        type=float,
    )
    _option(group, "--drop-rate", "Oracle drop rate", "oracle.drop_rate", type=float)
    return parser


def build_config(args: argparse.Namespace) -> PipelineConfig:
    """Resolve the configuration of a parsed command line.

    Args:
        args: Parsed arguments.

    Returns:
        Configuration with the config file and the flags applied.
    """
    config = PipelineConfig()
    if args.config is not None:
        config = load_config(args.config, config)
    overrides = {
        key: getattr(args, dest)
        for dest, key in CONFIG_FLAGS.items()
        if getattr(args, dest, None) is not None
    }
    return apply_overrides(config, overrides)


def _out_dir(config: PipelineConfig) -> Path:
    out_dir = Path(config.out_dir or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir


def _cmd_synth(args: argparse.Namespace, config: PipelineConfig) -> t.Any:
    out_dir = _out_dir(config)
    results = generate_batch(config.synth_spec(), args.count, config.workers)
    images = []
    for index, result in enumerate(results):
        name = args.name if args.count == 1 else f"{args.name}_{index:04d}"
        stem = out_dir / name
        annotations = result.annotations
        write_image(result.image, stem.with_suffix(".ppm"))
        write_annotations(annotations, stem.with_suffix(".json"))
        layers = stem.with_name(f"{name}.layers{TENSOR_SUFFIX}")
        write_tensor(result.layer_map, layers)
        entry = {
            "image": str(stem.with_suffix(".ppm")),
            "annotations": str(stem.with_suffix(".json")),
            "layer_map": str(layers),
            "cells": len(annotations.cells),
        }
        if args.oracle:
            codec = config.codec_for(annotations.image_width, annotations.image_height)
            heads = oracle_predict(annotations, codec, config.oracle_config(index))
            save_heads(heads, stem.with_name(f"{name}.pred"))
            entry["predictions"] = str(stem.with_name(f"{name}.pred"))
        images.append(entry)
    return {"images": images}


def _cmd_encode(args: argparse.Namespace, config: PipelineConfig) -> t.Any:
    annotations = read_annotations(args.annotations)
    codec = config.codec_for(annotations.image_width, annotations.image_height)
    stem = args.output or _out_dir(config) / f"{image_id(args.annotations)}.targets"
    save_targets(encode_targets(annotations, codec), stem)
    return {
        "targets": str(stem),
        "cells": len(annotations.cells),
        "collisions": collision_count(annotations, codec),
        "grid": {"width": codec.grid_width, "height": codec.grid_height},
    }


def _cmd_decode(args: argparse.Namespace, config: PipelineConfig) -> t.Any:
    heads = load_heads(args.heads)
    classes, grid_h, grid_w = heads.obj_heatmap.shape
    stride = config.codec.stride
    codec = dataclasses.replace(
        config.codec_for(grid_w * stride, grid_h * stride), num_classes=classes
    )
    detections = decode_detections(heads, codec)
    size = (codec.input_width, codec.input_height)
    document = detections_to_dict(detections, size)
    if args.output is not None:
        Path(args.output).write_text(json.dumps(document, indent=2, sort_keys=True))
    return document


def _cmd_nms(args: argparse.Namespace, config: PipelineConfig) -> t.Any:
    content = read_detections(args.detections)
    detections = content.detections
    keep = nms_indices(
        [d.circle.circle for d in detections],
        [d.score for d in detections],
        [d.class_id for d in detections],
        config.tiling.merge_iou_threshold,
        per_class=not args.class_agnostic,
    )
    document = detections_to_dict(
        [detections[i] for i in keep],
        (content.image_width, content.image_height),
        content.tile_index,
    )
    if args.output is not None:
        Path(args.output).write_text(json.dumps(document, indent=2, sort_keys=True))
    return document


def _cmd_tile(args: argparse.Namespace, config: PipelineConfig) -> t.Any:
    image = read_image(args.image)
    height, width = image.shape[:2]
    grid = config.plan_grid(width, height)
    out_dir = _out_dir(config)
    write_grid(grid, out_dir / "grid.json")
    name = image_id(args.image)

    def write(index: int) -> str:
        path = out_dir / f"{name}_tile_{index:04d}.ppm"
        write_image(extract_tile(image, grid, index), path)
        return str(path)

    with ThreadPoolExecutor(max_workers=config.workers) as executor:
        tiles = list(executor.map(write, range(len(grid))))
    return {"grid": grid_to_dict(grid), "tiles": tiles}


def _cmd_merge(args: argparse.Namespace, config: PipelineConfig) -> t.Any:
    grid = read_grid(args.grid)
    tile_dets = []
    for path in args.detections:
        content = read_detections(path)
        if content.tile_index is None:
            raise InputError(f"{path} has no tile_index.")
        if not 0 <= content.tile_index < len(grid):
            raise InputError(
                f"{path} refers to tile {content.tile_index}, the grid has "
                f"{len(grid)} tiles."
            )
        tile_dets.extend(
            TileDetection(content.tile_index, d) for d in content.detections
        )
    remapped = remap_to_wsi(tile_dets, grid)
    merged = merge_cross_tile(
        remapped.detections,
        config.tiling.merge_iou_threshold,
        config.codec.per_class_nms,
    )
    document = detections_to_dict(merged, (grid.wsi_width, grid.wsi_height))
    if args.output is not None:
        Path(args.output).write_text(json.dumps(document, indent=2, sort_keys=True))
    document["dropped"] = remapped.dropped
    return document


def _label_image(labels: np.ndarray, levels: int) -> np.ndarray:
    """Spread labels ``0..levels-1`` over the gray range 0..255."""
    scale = 255 / max(levels - 1, 1)
    return np.rint(np.asarray(labels) * scale).astype(np.uint8)


def _cmd_segment(args: argparse.Namespace, config: PipelineConfig) -> t.Any:
    image = read_image(args.image)
    result = kmeans_color(
        image,
        k=config.kmeans.k,
        seed=config.seed,
        tol=config.kmeans.tol,
        max_iter=config.kmeans.max_iter,
    )
    out_dir = _out_dir(config)
    name = image_id(args.image)
    labels_path = out_dir / f"{name}.labels{TENSOR_SUFFIX}"
    write_tensor(result.labels, labels_path)
    labels_image = out_dir / f"{name}.labels.pgm"
    write_image(_label_image(result.labels, config.kmeans.k), labels_image)
    document: t.Dict[str, t.Any] = {
        "labels": str(labels_path),
        "labels_image": str(labels_image),
        "centroids": result.centroids.tolist(),
        "iterations": result.iterations,
        "inertia": result.inertia,
    }
    keypoints = []
    if args.keypoints is not None:
        keypoints.extend(read_keypoints(args.keypoints))
    if args.annotations is not None:
        for cell in read_annotations(args.annotations).cells:
            keypoints.extend(cell.nuclei)
    if keypoints:
        nucleus = nucleus_mask_from_keypoints(result, keypoints)
        mask = nucleus.mask
        if args.mask_size is not None:
            mask = downsample_mask(nucleus, args.mask_size, args.mask_size)
        mask_path = out_dir / f"{name}.background_mask{TENSOR_SUFFIX}"
        write_tensor(mask, mask_path)
        mask_image = out_dir / f"{name}.background_mask.pgm"
        write_image(_label_image(mask, 2), mask_image)
        document["background_mask_image"] = str(mask_image)
        document["nucleus_label"] = nucleus.nucleus_label
        document["background_mask"] = str(mask_path)
    return document


def _image_set(path: Path) -> t.List[np.ndarray]:
    path = Path(path)
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix in IMAGE_SUFFIXES)
        if not files:
            raise InputError(f"{path} contains no images.")
        return [read_image(file) for file in files]
    return [read_image(path)]


def _cmd_ssim(args: argparse.Namespace, config: PipelineConfig) -> t.Any:
    first = _image_set(args.first)
    second = _image_set(args.second)
    return {"ssim": mean_cross_ssim(first, second), "pairs": len(first) * len(second)}


def _cmd_loss(args: argparse.Namespace, config: PipelineConfig) -> t.Any:
    report = detection_total_loss(
        load_heads(args.predictions),
        load_targets(args.targets),
        config.loss_weights,
        config.focal,
    )
    return {"total": report.total, "terms": report.terms, "weighted": report.weighted}


def _cmd_attn_select(args: argparse.Namespace, config: PipelineConfig) -> t.Any:
    layers = read_tensor(args.attention)
    if layers.ndim == 3:
        layers = layers[:, None]
    indices = select_key_patches(layers, args.query_row, args.residual)
    document: t.Dict[str, t.Any] = {"indices": indices}
    if args.tokens_per_row is not None:
        positions = patch_positions(
            indices, args.tokens_per_row, args.patch_size, not args.no_class_token
        )
        document["positions"] = [[p.x, p.y] for p in positions]
    return document


def _by_image_id(paths: t.Sequence[Path], kind: str) -> t.Dict[str, Path]:
    files: t.Dict[str, Path] = {}
    for path in paths:
        key = image_id(path)
        if key in files:
            raise ImageSetMismatchError(f"Image {key!r} has several {kind} files.")
        files[key] = path
    return files


def _cmd_eval_det(args: argparse.Namespace, config: PipelineConfig) -> t.Any:
    gt_files = _by_image_id(args.gt, "ground truth")
    pred_files = _by_image_id(args.pred, "detection")
    if gt_files.keys() != pred_files.keys():
        missing = sorted(gt_files.keys() ^ pred_files.keys())
        raise ImageSetMismatchError(
            f"Ground truth and detections cover different images: {missing}."
        )
    ids = sorted(gt_files)
    gt = [read_annotations(gt_files[key]) for key in ids]
    preds = [list(read_detections(pred_files[key]).detections) for key in ids]
    report = evaluate_detections(gt, preds, num_classes=config.codec.num_classes)
    if args.pr_csv is not None:
        write_pr_csv(report, args.pr_csv)
    return {"images": len(ids), **report_to_dict(report)}


def _class_index(value: str) -> int:
    value = value.strip()
    if value.lstrip("-").isdigit():
        return int(value)
    try:
        return CellClass(value.lower()).index
    except ValueError:
        raise ValidationError(f"Unknown class {value!r}.") from None


def _cmd_eval_cls(args: argparse.Namespace, config: PipelineConfig) -> t.Any:
    labels, predicted, scores = [], [], []
    with Path(args.samples).open("r", encoding="utf-8", newline="") as file:
        reader = csv.DictReader(file)
        missing = {"label", "predicted", "score"} - set(reader.fieldnames or ())
        if missing:
            raise InputError(f"{args.samples} lacks the columns {sorted(missing)}.")
        for row in reader:
            labels.append(_class_index(row["label"]))
            predicted.append(_class_index(row["predicted"]))
            scores.append(float(row["score"]))
    positive = args.positive_class
    if args.binary:
        labels = to_binary_abnormal(labels).tolist()
        predicted = to_binary_abnormal(predicted).tolist()
        positive = 1
    report = evaluate_classification(labels, predicted, scores, None, positive)
    if args.roc_csv is not None:
        write_roc_csv(report, args.roc_csv)
    return {
        "confusion": report.confusion.tolist(),
        "accuracy": report.accuracy,
        "precision": report.precision.tolist(),
        "recall": report.recall.tolist(),
        "f1": report.f1.tolist(),
        "macro_precision": report.macro_precision,
        "macro_recall": report.macro_recall,
        "macro_f1": report.macro_f1,
        "auc": report.auc,
        "sensitivity": report.sensitivity,
        "specificity": report.specificity,
    }


def _cmd_pipeline(args: argparse.Namespace, config: PipelineConfig) -> t.Any:
    result = run_pipeline(config)
    return {
        "cells": len(result.synth.annotations.cells),
        "tiles": len(result.grid),
        "detections": len(result.detections),
        "dropped": result.dropped,
        **report_to_dict(result.report),
    }


def build_parser() -> argparse.ArgumentParser:
    """Argument parser of the ``bincell`` command."""
    common = _common_parser()
    synth = _synth_parser()
    parser = argparse.ArgumentParser(
        prog="bincell", description="Binuclear cell detection toolkit."
    )
    commands = parser.add_subparsers(dest="command", metavar="command")
    commands.required = True

    def add(
        name: str, handler: Handler, help: str, *parents: argparse.ArgumentParser
    ) -> argparse.ArgumentParser:
        sub = commands.add_parser(
            name, help=help, description=help, parents=[common, *parents]
        )
        sub.set_defaults(handler=handler)
        return sub

    sub = add("synth", _cmd_synth, "Generate synthetic WSIs.", synth)
    _option(sub, "--name", "File name stem", default="synth")
    _option(sub, "--count", "Number of images", type=int, default=1)
    _option(
        sub, "--oracle", "Also write oracle prediction tensors", action="store_true"
    )

    sub = add("encode", _cmd_encode, "Encode annotations into target tensors.")
    sub.add_argument("annotations", type=Path, help="Annotation JSON file")
    _option(sub, "--output", "Tensor file stem", type=Path, default=None)

    sub = add("decode", _cmd_decode, "Decode head tensors into detections.")
    sub.add_argument("heads", type=Path, help="Head tensor file stem")
    _option(sub, "--output", "Detection JSON file", type=Path, default=None)

    sub = add("nms", _cmd_nms, "Circle NMS on a detection file.")
    sub.add_argument("detections", type=Path, help="Detection JSON file")
    _option(sub, "--class-agnostic", "Suppress across classes", action="store_true")
    _option(sub, "--output", "Detection JSON file", type=Path, default=None)

    sub = add("tile", _cmd_tile, "Cut an image into overlapping tiles.")
    sub.add_argument("image", type=Path, help="Binary PPM or PGM image")

    sub = add("merge", _cmd_merge, "Merge per tile detections into WSI detections.")
    sub.add_argument("grid", type=Path, help="Tile grid JSON file")
    sub.add_argument("detections", type=Path, nargs="+", help="Tile detection files")
    _option(sub, "--output", "Detection JSON file", type=Path, default=None)

    sub = add("segment", _cmd_segment, "Color layer segmentation of a patch.")
    sub.add_argument("image", type=Path, help="Binary PPM or PGM image")
    _option(sub, "--keypoints", "Nucleus keypoint JSON file", type=Path, default=None)
    _option(
        sub, "--annotations", "Annotations providing nuclei", type=Path, default=None
    )
    _option(sub, "--mask-size", "Edge length of the mask", type=int, default=None)

    sub = add("ssim", _cmd_ssim, "Mean SSIM between two images or image folders.")
    sub.add_argument("first", type=Path, help="Image or folder")
    sub.add_argument("second", type=Path, help="Image or folder")

    sub = add("loss", _cmd_loss, "Detection loss of predictions against targets.")
    sub.add_argument("predictions", type=Path, help="Predicted head tensor stem")
    sub.add_argument("targets", type=Path, help="Target tensor stem")

    sub = add("attn-select", _cmd_attn_select, "Select key patches by rollout.")
    sub.add_argument("attention", type=Path, help="[L, H, T, T] attention tensor")
    _option(sub, "--query-row", "Query token", type=int, default=0)
    _option(sub, "--residual", "Mix in the identity", action="store_true")
    _option(sub, "--tokens-per-row", "Patches per row", type=int, default=None)
    _option(sub, "--patch-size", "Patch edge length", type=float, default=16.0)
    _option(sub, "--no-class-token", "Token 0 is a patch", action="store_true")

    sub = add("eval-det", _cmd_eval_det, "Evaluate detections.")
    _option(sub, "--gt", "Annotation files", type=Path, nargs="+", required=True)
    _option(sub, "--pred", "Detection files", type=Path, nargs="+", required=True)
    _option(sub, "--pr-csv", "PR curve CSV output", type=Path, default=None)

    sub = add("eval-cls", _cmd_eval_cls, "Evaluate classifications.")
    sub.add_argument("samples", type=Path, help="CSV with label,predicted,score")
    _option(sub, "--positive-class", "Positive ROC class", type=int, default=1)
    _option(sub, "--binary", "Collapse to normal vs abnormal", action="store_true")
    _option(sub, "--roc-csv", "ROC CSV output", type=Path, default=None)

    add("pipeline", _cmd_pipeline, "Run the synthetic end-to-end pipeline.", synth)
    return parser


def main(argv: t.Optional[t.Sequence[str]] = None) -> int:
    """Run the ``bincell`` command.

    Args:
        argv: Command line arguments (default ``sys.argv[1:]``).

    Returns:
        Exit code.
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        config = build_config(args)
        document = args.handler(args, config)
    except (InputError, OSError, json.JSONDecodeError) as e:
        logger.error(str(e))
        return EXIT_INPUT
    except (ValidationError, InfeasibleSpecError, ValueError, IndexError) as e:
        logger.error(str(e))
        return EXIT_INVALID
    sys.stdout.write(json.dumps(document, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
