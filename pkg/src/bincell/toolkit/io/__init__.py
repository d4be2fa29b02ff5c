"""File formats of bincell-toolkit.

Tensors use a small binary format, images binary portable pixmaps and all
structured data (annotations, detections, tile grids) JSON validated against
the schemas shipped in the package resources.
"""
from bincell.toolkit.io.annotations import (
    annotations_from_dict,
    annotations_to_dict,
    image_id,
    read_annotations,
    write_annotations,
)
from bincell.toolkit.io.detections import (
    DetectionFile,
    read_detections,
    read_keypoints,
    write_detections,
)
from bincell.toolkit.io.image import read_image, to_gray, write_image
from bincell.toolkit.io.tensor import read_tensor, write_tensor

__all__ = [
    "annotations_from_dict",
    "annotations_to_dict",
    "image_id",
    "read_annotations",
    "write_annotations",
    "DetectionFile",
    "read_detections",
    "read_keypoints",
    "write_detections",
    "read_image",
    "to_gray",
    "write_image",
    "read_tensor",
    "write_tensor",
]
