"""Detection and keypoint JSON files."""
import json
import typing as t
from pathlib import Path

from bincell.toolkit.interface import Circle, Detection, Point, ScoredCircle
from bincell.toolkit.schema import load_schema, validate_instance

PathLike = t.Union[str, Path]
DETECTIONS_SCHEMA = "detections_schema.json"
KEYPOINTS_SCHEMA = "keypoints_schema.json"


class DetectionFile(t.NamedTuple):
    """Content of a detection file.

    Args:
        image_width: Width of the image (or tile) the detections refer to.
        image_height: Height of the image (or tile) the detections refer to.
        detections: Detections in the coordinates of that image.
        tile_index: Index of the tile for per tile files.
    """

    image_width: int
    image_height: int
    detections: t.Tuple[Detection, ...]
    tile_index: t.Optional[int] = None


def detection_to_dict(detection: Detection) -> t.Dict[str, t.Any]:
    """JSON representation of a single detection."""
    circle = detection.circle.circle
    return {
        "class_id": int(detection.class_id),
        "score": float(detection.score),
        "cx": float(circle.cx),
        "cy": float(circle.cy),
        "r": float(circle.r),
        "nuclei": [{"x": float(n.x), "y": float(n.y)} for n in detection.nuclei],
    }


def detection_from_dict(data: t.Dict[str, t.Any]) -> Detection:
    """Detection from its (already validated) JSON representation."""
    first, second = (Point(float(n["x"]), float(n["y"])) for n in data["nuclei"])
    return Detection(
        ScoredCircle(
            Circle(float(data["cx"]), float(data["cy"]), float(data["r"])),
            float(data["score"]),
            int(data["class_id"]),
        ),
        (first, second),
    )


def detections_to_dict(
    detections: t.Iterable[Detection],
    image_size: t.Tuple[int, int],
    tile_index: t.Optional[int] = None,
) -> t.Dict[str, t.Any]:
    """JSON representation of a detection file.

    Args:
        detections: Detections to store.
        image_size: ``(width, height)`` of the image the detections refer to.
        tile_index: Optional tile index for per tile files.

    Returns:
        JSON serializable dictionary.
    """
    result: t.Dict[str, t.Any] = {
        "image": {"width": int(image_size[0]), "height": int(image_size[1])},
        "detections": [detection_to_dict(d) for d in detections],
    }
    if tile_index is not None:
        result["tile_index"] = int(tile_index)
    return result


def detections_from_dict(data: t.Any) -> DetectionFile:
    """Parse and validate the JSON representation of a detection file.

    Args:
        data: Parsed JSON document.

    Returns:
        Detection file content.

    Raises:
        ValidationError: If the document does not follow the detection schema.
    """
    validate_instance(data, load_schema(DETECTIONS_SCHEMA))
    return DetectionFile(
        data["image"]["width"],
        data["image"]["height"],
        tuple(detection_from_dict(d) for d in data["detections"]),
        data.get("tile_index"),
    )


def write_detections(
    detections: t.Iterable[Detection],
    path: PathLike,
    image_size: t.Tuple[int, int],
    tile_index: t.Optional[int] = None,
) -> None:
    """Write a detection file.

    Args:
        detections: Detections to store.
        path: Target file.
        image_size: ``(width, height)`` of the image the detections refer to.
        tile_index: Optional tile index for per tile files.
    """
    with Path(path).open("w", encoding="utf-8") as file:
        json.dump(
            detections_to_dict(detections, image_size, tile_index),
            file,
            indent=2,
            sort_keys=True,
        )


def read_detections(path: PathLike) -> DetectionFile:
    """Read a detection file.

    Args:
        path: Source file.

    Returns:
        Detection file content.
    """
    with Path(path).open("r", encoding="utf-8") as file:
        return detections_from_dict(json.load(file))


def read_keypoints(path: PathLike) -> t.List[Point]:
    """Read a keypoint file ``{"keypoints": [{"x": .., "y": ..}, ...]}``.

    Args:
        path: Source file.

    Returns:
        Keypoints in file order.

    Raises:
        ValidationError: If the document does not follow the keypoint schema.
    """
    with Path(path).open("r", encoding="utf-8") as file:
        data = json.load(file)
    validate_instance(data, load_schema(KEYPOINTS_SCHEMA))
    return [Point(float(p["x"]), float(p["y"])) for p in data["keypoints"]]
