"""Annotation JSON files.

Example:
    >>> annotations = read_annotations("slide_0.json")
    >>> annotations.cells[0].cell_class
    <CellClass.NORMAL: 'normal'>
"""
import json
import typing as t
from pathlib import Path

import jsonschema

from bincell.toolkit.exceptions import (
    NucleiArityError,
    UnknownClassError,
    ValidationError,
)
from bincell.toolkit.interface import (
    AnnotationDict,
    AnnotationSet,
    CellClass,
    CircleAnnotation,
    Point,
)
from bincell.toolkit.schema import load_schema, validate_instance

PathLike = t.Union[str, Path]
ANNOTATION_SCHEMA = "annotation_schema.json"


def _classify_error(error: jsonschema.ValidationError) -> t.Type[ValidationError]:
    path = list(error.absolute_path)
    if path and path[-1] == "class":
        return UnknownClassError
    if path and path[-1] == "nuclei":
        return NucleiArityError
    if error.validator == "required" and "'nuclei'" in error.message:
        return NucleiArityError
    return ValidationError


def annotations_from_dict(data: t.Any) -> AnnotationSet:
    """Build an annotation set from its JSON representation.

    Args:
        data: Parsed JSON document.

    Returns:
        Annotation set.

    Raises:
        UnknownClassError: A cell class is not one of normal, mn, nb, npb.
        NucleiArityError: A cell does not list exactly two nuclei.
        ValidationError: Any other schema violation or a cell center outside
            of the image.
    """
    validate_instance(data, load_schema(ANNOTATION_SCHEMA), _classify_error)
    width = data["image"]["width"]
    height = data["image"]["height"]
    cells = []
    for index, cell in enumerate(data["cells"]):
        if not (0 <= cell["cx"] < width and 0 <= cell["cy"] < height):
            raise ValidationError(
                f"cells/{index}: center ({cell['cx']}, {cell['cy']}) lies outside "
                f"of the {width}x{height} image."
            )
        nuclei = tuple(Point(float(n["x"]), float(n["y"])) for n in cell["nuclei"])
        cells.append(
            CircleAnnotation(
                CellClass(cell["class"]),
                float(cell["cx"]),
                float(cell["cy"]),
                float(cell["r"]),
                nuclei,  # type: ignore[arg-type]
            )
        )
    return AnnotationSet(width, height, tuple(cells))


def annotations_to_dict(annotations: AnnotationSet) -> AnnotationDict:
    """JSON representation of an annotation set.

    Args:
        annotations: Annotation set.

    Returns:
        JSON serializable dictionary.
    """
    return {
        "image": {"width": annotations.image_width, "height": annotations.image_height},
        "cells": [
            {
                "class": cell.cell_class.value,
                "cx": cell.cx,
                "cy": cell.cy,
                "r": cell.r,
                "nuclei": [{"x": n.x, "y": n.y} for n in cell.nuclei],
            }
            for cell in annotations.cells
        ],
    }


def read_annotations(path: PathLike) -> AnnotationSet:
    """Read an annotation file.

    Args:
        path: Source file.

    Returns:
        Annotation set.
    """
    with Path(path).open("r", encoding="utf-8") as file:
        return annotations_from_dict(json.load(file))


def write_annotations(annotations: AnnotationSet, path: PathLike) -> None:
    """Write an annotation file.

    Args:
        annotations: Annotation set.
        path: Target file.
    """
    with Path(path).open("w", encoding="utf-8") as file:
        json.dump(annotations_to_dict(annotations), file, indent=2, sort_keys=True)


def image_id(path: PathLike) -> str:
    """Identifier of the image a file belongs to (file name up to the first dot).

    Args:
        path: Path of an annotation, detection or image file.

    Returns:
        Image identifier.
    """
    return Path(path).name.split(".", 1)[0]
