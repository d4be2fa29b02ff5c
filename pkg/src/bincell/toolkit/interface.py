"""Interface types shared by all bincell.toolkit modules.

All records are immutable named tuples. Coordinates are continuous pixel
coordinates with the origin at the top left corner of the image, ``x`` grows to
the right and ``y`` grows downwards. Pixel ``(row, col)`` covers the square
``[col, col + 1) x [row, row + 1)``.
"""
import typing as t
from enum import Enum, IntEnum

# TypedDict is available in the typing module since 3.8
# If we only support 3.8 we should switch to t.TypedDict
from typing_extensions import TypedDict


class CellClass(Enum):
    """Binuclear cell classes.

    NORMAL:
        Normal binuclear cell.
    MN:
        Micronucleus cell with an outlier small nucleus.
    NB:
        Nucleus bud cell with a bud-like protuberance.
    NPB:
        Nucleoplasmic bridge cell with a bridging connector between the nuclei.
    """

    NORMAL = "normal"
    MN = "mn"
    NB = "nb"
    NPB = "npb"

    @property
    def index(self) -> int:
        """Position of the class in the canonical order normal, mn, nb, npb."""
        return list(CellClass).index(self)


class TensorDType(IntEnum):
    """Element type codes of the binary tensor file format."""

    F32 = 0
    U8 = 1


class ColorLayer(IntEnum):
    """Photometric layers of a stained patch."""

    UNSTAINED = 0
    CYTOPLASM = 1
    NUCLEUS = 2


class Point(t.NamedTuple):
    """A 2D point in pixel coordinates."""

    x: float
    y: float


class Circle(t.NamedTuple):
    """Circle given by its center and radius."""

    cx: float
    cy: float
    r: float


class ScoredCircle(t.NamedTuple):
    """Circle candidate with a confidence score and a class id."""

    circle: Circle
    score: float
    class_id: int = 0


class CircleAnnotation(t.NamedTuple):
    """One binuclear cell.

    Args:
        cell_class: Class of the cell.
        cx: Center x coordinate.
        cy: Center y coordinate.
        r: Radius of the cell.
        nuclei: Centers of the two main nuclei.
    """

    cell_class: CellClass
    cx: float
    cy: float
    r: float
    nuclei: t.Tuple[Point, Point]

    @property
    def circle(self) -> Circle:
        """Circle of the cell."""
        return Circle(self.cx, self.cy, self.r)


class AnnotationSet(t.NamedTuple):
    """All annotated cells of one image."""

    image_width: int
    image_height: int
    cells: t.Tuple[CircleAnnotation, ...] = ()


class Detection(t.NamedTuple):
    """Decoded cell candidate.

    Args:
        circle: Scored circle in input pixel units.
        nuclei: Recovered nucleus centers (left nucleus first).
        grid_peak: ``(row, col)`` of the heatmap peak the detection stems from.
    """

    circle: ScoredCircle
    nuclei: t.Tuple[Point, Point]
    grid_peak: t.Tuple[int, int] = (0, 0)

    @property
    def score(self) -> float:
        """Confidence of the detection."""
        return self.circle.score

    @property
    def class_id(self) -> int:
        """Class id of the detection."""
        return self.circle.class_id

    def translated(self, dx: float, dy: float) -> "Detection":
        """Return the detection moved by ``(dx, dy)``.

        Args:
            dx: Shift along x.
            dy: Shift along y.

        Returns:
            Translated detection, radius and score unchanged.
        """
        circle = self.circle.circle
        return Detection(
            ScoredCircle(
                Circle(circle.cx + dx, circle.cy + dy, circle.r),
                self.circle.score,
                self.circle.class_id,
            ),
            (
                Point(self.nuclei[0].x + dx, self.nuclei[0].y + dy),
                Point(self.nuclei[1].x + dx, self.nuclei[1].y + dy),
            ),
            self.grid_peak,
        )


_PointDict = TypedDict("_PointDict", {"x": float, "y": float})
_ImageDict = TypedDict("_ImageDict", {"width": int, "height": int})
CellDict = TypedDict(
    "CellDict",
    {
        "class": str,
        "cx": float,
        "cy": float,
        "r": float,
        "nuclei": t.List[_PointDict],
    },
)
AnnotationDict = TypedDict(
    "AnnotationDict", {"image": _ImageDict, "cells": t.List[CellDict]}
)
DetectionDict = TypedDict(
    "DetectionDict",
    {
        "class_id": int,
        "score": float,
        "cx": float,
        "cy": float,
        "r": float,
        "nuclei": t.List[_PointDict],
    },
)
GridDict = TypedDict(
    "GridDict",
    {
        "tile_size": int,
        "overlap": int,
        "wsi": _ImageDict,
        "origins": t.List[t.List[int]],
        "pad_value": t.List[int],
    },
)
