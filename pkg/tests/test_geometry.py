import math

import numpy as np
import pytest

from bincell.toolkit.geometry import (
    circle_intersection_area,
    circle_iou,
    circle_iou_matrix,
    circle_nms,
    nms_indices,
)
from bincell.toolkit.interface import Circle, ScoredCircle

UNIT_LENS_IOU = (2 * math.pi / 3 - math.sqrt(3) / 2) / (
    2 * math.pi - (2 * math.pi / 3 - math.sqrt(3) / 2)
)


def _grid_iou(a, b, samples=300):
    """IoU with the intersection estimated on a midpoint grid."""
    small, large = sorted((a, b), key=lambda c: c.r)
    steps = (np.arange(samples) + 0.5) / samples * 2 * small.r - small.r
    xs, ys = np.meshgrid(small.cx + steps, small.cy + steps)
    inside = ((xs - small.cx) ** 2 + (ys - small.cy) ** 2 <= small.r**2) & (
        (xs - large.cx) ** 2 + (ys - large.cy) ** 2 <= large.r**2
    )
    intersection = inside.sum() * (2 * small.r / samples) ** 2
    union = math.pi * (a.r**2 + b.r**2) - intersection
    return intersection / union


def test_branch_cases_are_exact():
    assert circle_iou(Circle(0, 0, 1), Circle(0, 0, 1)) == 1.0
    assert circle_iou(Circle(0, 0, 1), Circle(3, 0, 1)) == 0.0
    # externally and internally tangent
    assert circle_iou(Circle(0, 0, 1), Circle(2, 0, 1)) == 0.0
    assert circle_iou(Circle(0, 0, 2), Circle(1, 0, 1)) == 0.25
    assert circle_iou(Circle(0, 0, 1), Circle(0, 0, 2)) == 0.25


def test_lens_case():
    assert circle_iou(Circle(0, 0, 1), Circle(1, 0, 1)) == pytest.approx(
        0.2430, abs=1e-3
    )
    assert circle_iou(Circle(0, 0, 1), Circle(1, 0, 1)) == pytest.approx(
        UNIT_LENS_IOU, abs=1e-12
    )
    assert circle_intersection_area(Circle(0, 0, 1), Circle(1, 0, 1)) == (
        pytest.approx(2 * math.pi / 3 - math.sqrt(3) / 2, abs=1e-12)
    )


def test_degenerate_circles():
    assert circle_iou(Circle(0, 0, 0), Circle(0, 0, 0)) == 0.0
    assert circle_iou(Circle(0, 0, 0), Circle(0, 0, 1)) == 0.0
    assert circle_intersection_area(Circle(0, 0, 0), Circle(0, 0, 1)) == 0.0


def test_monte_carlo_unit_lens():
    rng = np.random.Generator(np.random.PCG64(3))
    xs = rng.uniform(-1, 2, 1_000_000)
    ys = rng.uniform(-1, 1, 1_000_000)
    first = xs**2 + ys**2 <= 1
    second = (xs - 1) ** 2 + ys**2 <= 1
    estimate = (first & second).sum() / (first | second).sum()
    assert circle_iou(Circle(0, 0, 1), Circle(1, 0, 1)) == pytest.approx(
        estimate, abs=2e-3
    )


def test_rasterization_oracle(rng):
    for _ in range(1000):
        a = Circle(*rng.uniform(0, 10, 2), rng.uniform(0.5, 5))
        b = Circle(*rng.uniform(0, 10, 2), rng.uniform(0.5, 5))
        iou = circle_iou(a, b)
        assert 0.0 <= iou <= 1.0
        assert iou == circle_iou(b, a)
        assert iou == pytest.approx(_grid_iou(a, b), abs=2e-3)


def test_iou_matrix(rng):
    first = [Circle(*rng.uniform(0, 20, 2), rng.uniform(1, 6)) for _ in range(5)]
    second = [Circle(*rng.uniform(0, 20, 2), rng.uniform(1, 6)) for _ in range(3)]
    matrix = circle_iou_matrix(first, second)
    assert matrix.shape == (5, 3)
    for i, a in enumerate(first):
        for j, b in enumerate(second):
            assert matrix[i, j] == pytest.approx(circle_iou(a, b), abs=1e-15)
    assert circle_iou_matrix([], second).shape == (0, 3)


def _overlapping_pairs(rng, count=200):
    """Circle pairs that partially overlap, away from the tangent cases."""
    pairs = []
    for _ in range(count):
        a = Circle(*rng.uniform(-20, 20, 2), rng.uniform(3, 12))
        r = rng.uniform(3, 12)
        distance = rng.uniform(abs(a.r - r) + 0.5, a.r + r - 0.5)
        angle = rng.uniform(0, 2 * math.pi)
        b = Circle(
            a.cx + distance * math.cos(angle), a.cy + distance * math.sin(angle), r
        )
        pairs.append((a, b))
    return pairs


def test_iou_translation_and_rotation_invariance(rng):
    for a, b in _overlapping_pairs(rng):
        iou = circle_iou(a, b)
        dx, dy = rng.uniform(-100, 100, 2)
        moved = circle_iou(
            Circle(a.cx + dx, a.cy + dy, a.r), Circle(b.cx + dx, b.cy + dy, b.r)
        )
        assert moved == pytest.approx(iou, abs=1e-12)
        angle = rng.uniform(0, 2 * math.pi)
        cos, sin = math.cos(angle), math.sin(angle)
        rotated = circle_iou(
            Circle(cos * a.cx - sin * a.cy, sin * a.cx + cos * a.cy, a.r),
            Circle(cos * b.cx - sin * b.cy, sin * b.cx + cos * b.cy, b.r),
        )
        assert rotated == pytest.approx(iou, abs=1e-12)


@pytest.mark.parametrize("scale", [0.25, 0.7, 3.0, 11.5])
def test_iou_scale_invariance(rng, scale):
    for a, b in _overlapping_pairs(rng):
        scaled = circle_iou(
            Circle(a.cx * scale, a.cy * scale, a.r * scale),
            Circle(b.cx * scale, b.cy * scale, b.r * scale),
        )
        assert scaled == pytest.approx(circle_iou(a, b), abs=1e-12)
    # closed form branches
    for a, b in [
        (Circle(0, 0, 1), Circle(0, 0, 1)),
        (Circle(0, 0, 1), Circle(3, 0, 1)),
        (Circle(0, 0, 2), Circle(1, 0, 1)),
    ]:
        scaled = circle_iou(
            Circle(a.cx * scale, a.cy * scale, a.r * scale),
            Circle(b.cx * scale, b.cy * scale, b.r * scale),
        )
        assert scaled == pytest.approx(circle_iou(a, b), abs=1e-12)


def test_nms_single_and_empty():
    only = ScoredCircle(Circle(5, 5, 2), 0.3)
    assert circle_nms([only]) == [only]
    assert circle_nms([]) == []


def test_nms_identical_circles():
    high = ScoredCircle(Circle(5, 5, 2), 0.9)
    low = ScoredCircle(Circle(5, 5, 2), 0.8)
    assert circle_nms([low, high], 0.5) == [high]


def test_nms_chain():
    a = ScoredCircle(Circle(0, 0, 1), 0.9)
    b = ScoredCircle(Circle(1, 0, 1), 0.8)
    c = ScoredCircle(Circle(2, 0, 1), 0.7)
    # A suppresses B, C only touches A and survives
    assert circle_nms([c, b, a], 0.2) == [a, c]
    assert circle_nms([c, b, a], 0.3) == [a, b, c]


def test_nms_threshold_is_strict():
    outer = ScoredCircle(Circle(0, 0, 2), 0.9)
    inner = ScoredCircle(Circle(0, 0, 1), 0.8)
    assert circle_nms([outer, inner], 0.25) == [outer, inner]
    assert circle_nms([outer, inner], 0.2) == [outer]


def test_nms_per_class():
    first = ScoredCircle(Circle(5, 5, 2), 0.9, 0)
    second = ScoredCircle(Circle(5, 5, 2), 0.8, 1)
    assert circle_nms([first, second], per_class=True) == [first, second]
    assert circle_nms([first, second], per_class=False) == [first]


def test_nms_ties_and_order():
    circles = [Circle(9, 0, 1), Circle(0, 0, 1)]
    assert nms_indices(circles, [0.5, 0.5]) == [1, 0]
    assert nms_indices(circles, [0.5, 0.5], order=[0, 1]) == [0, 1]


@pytest.mark.parametrize("threshold", [0.0, 1.0, -0.5, 1.5])
def test_nms_threshold_range(threshold):
    with pytest.raises(ValueError):
        circle_nms([ScoredCircle(Circle(0, 0, 1), 0.5)], threshold)
