"""The binuclear cell toolkit (bincell-toolkit).

This package implements the non learned part of a two stage binuclear cell
detection pipeline. Cells are represented as circles with two nucleus
keypoints. The toolkit encodes annotations into heatmap targets and decodes
predicted head tensors back into circles, evaluates the training losses,
runs the attention and normalization forward operations, segments stained
patches into color layers, tiles whole slide images and computes the
detection and classification metrics.

A deterministic synthetic image generator together with an oracle predictor
allows to verify the whole pipeline without trained networks.
"""
from bincell.toolkit.config import PipelineConfig
from bincell.toolkit.geometry import circle_iou, circle_nms
from bincell.toolkit.heatmap_codec import CodecConfig, decode_detections, encode_targets
from bincell.toolkit.interface import (
    AnnotationSet,
    CellClass,
    Circle,
    CircleAnnotation,
    Detection,
    Point,
)
from bincell.toolkit.metrics import evaluate_classification, evaluate_detections
from bincell.toolkit.pipeline import run_pipeline
from bincell.toolkit.synth import OracleConfig, SynthSpec, generate_wsi, oracle_predict

try:
    from bincell.toolkit._version import version as __version__
except ModuleNotFoundError:
    pass

__all__ = [
    "PipelineConfig",
    "circle_iou",
    "circle_nms",
    "CodecConfig",
    "decode_detections",
    "encode_targets",
    "AnnotationSet",
    "CellClass",
    "Circle",
    "CircleAnnotation",
    "Detection",
    "Point",
    "evaluate_classification",
    "evaluate_detections",
    "run_pipeline",
    "OracleConfig",
    "SynthSpec",
    "generate_wsi",
    "oracle_predict",
]
