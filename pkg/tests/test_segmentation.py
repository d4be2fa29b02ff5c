import numpy as np
import pytest

from bincell.toolkit.exceptions import OutOfBoundsError, ValidationError
from bincell.toolkit.interface import CellClass, ColorLayer, Point
from bincell.toolkit.segmentation import (
    ColorLayerResult,
    NucleusMask,
    downsample_mask,
    kmeans_color,
    luminance,
    nucleus_mask_from_keypoints,
    pixel_agreement,
)
from bincell.toolkit.synth import (
    BACKGROUND_COLOR,
    CYTOPLASM_COLOR,
    NUCLEUS_COLOR,
    generate_cell_patch,
)

CLASSES = list(CellClass)


def _three_color_image():
    layers = np.zeros((6, 9), dtype=np.uint8)
    layers[1:5, 1:8] = ColorLayer.CYTOPLASM
    layers[2:4, 2:4] = ColorLayer.NUCLEUS
    layers[2:4, 5:7] = ColorLayer.NUCLEUS
    palette = np.array([BACKGROUND_COLOR, CYTOPLASM_COLOR, NUCLEUS_COLOR], np.uint8)
    return palette[layers], layers


def test_three_colors_are_separated():
    image, layers = _three_color_image()
    result = kmeans_color(image, k=3, seed=0)
    assert result.inertia == 0.0
    np.testing.assert_array_equal(result.labels, layers)
    assert result.labels.dtype == np.uint8
    # labels sorted by descending luminance
    assert list(luminance(result.centroids)) == sorted(
        luminance(result.centroids), reverse=True
    )


def test_single_color(caplog):
    image = np.full((5, 5, 3), 77, dtype=np.uint8)
    result = kmeans_color(image, k=3)
    assert len(np.unique(result.labels)) == 1
    assert result.inertia == 0.0
    assert caplog.records


def test_gray_image():
    image = np.array([[0, 0, 200, 200]], dtype=np.uint8)
    result = kmeans_color(image, k=2)
    np.testing.assert_array_equal(result.labels, [[1, 1, 0, 0]])


def test_determinism_and_monotone_inertia():
    patch = generate_cell_patch(CellClass.MN, seed=4, noise_sigma=5)
    first = kmeans_color(patch.image, seed=11)
    second = kmeans_color(patch.image, seed=11)
    np.testing.assert_array_equal(first.labels, second.labels)
    np.testing.assert_array_equal(first.centroids, second.centroids)
    history = np.array(first.inertia_history)
    assert (np.diff(history) <= 1e-9 * history[0]).all()
    assert 1 <= first.iterations <= 100


def test_pixel_order_does_not_matter(rng):
    patch = generate_cell_patch(CellClass.NPB, seed=9, noise_sigma=5)
    height, width = patch.image.shape[:2]
    pixels = patch.image.reshape(height * width, -1)
    order = rng.permutation(height * width)
    shuffled = pixels[order].reshape(patch.image.shape)
    original = kmeans_color(patch.image, seed=2)
    permuted = kmeans_color(shuffled, seed=2)
    np.testing.assert_array_equal(
        permuted.labels.reshape(-1), original.labels.reshape(-1)[order]
    )
    np.testing.assert_array_equal(permuted.centroids, original.centroids)
    assert permuted.inertia == original.inertia


def test_invalid_arguments():
    with pytest.raises(ValidationError):
        kmeans_color(np.zeros((2, 2, 3), dtype=np.uint8), k=1)
    with pytest.raises(ValidationError):
        kmeans_color(np.zeros((0, 2, 3), dtype=np.uint8))


def test_noisy_patches_match_layer_maps():
    for seed in range(100):
        patch = generate_cell_patch(CLASSES[seed % 4], seed=seed, noise_sigma=5)
        result = kmeans_color(patch.image, k=3, seed=seed)
        assert pixel_agreement(result.labels, patch.layer_map) >= 0.99


@pytest.mark.parametrize("cell_class", CLASSES)
def test_nucleus_mask_on_noiseless_patch(cell_class):
    patch = generate_cell_patch(cell_class, seed=2)
    result = kmeans_color(patch.image)
    nucleus = nucleus_mask_from_keypoints(result, list(patch.annotation.nuclei))
    assert nucleus.nucleus_label == ColorLayer.NUCLEUS
    np.testing.assert_array_equal(
        nucleus.mask, (patch.layer_map != ColorLayer.NUCLEUS).astype(np.uint8)
    )


def test_duplicate_keypoints():
    patch = generate_cell_patch(CellClass.NORMAL, seed=3)
    result = kmeans_color(patch.image)
    point = patch.annotation.nuclei[0]
    single = nucleus_mask_from_keypoints(result, [point])
    double = nucleus_mask_from_keypoints(result, [point, point])
    assert single.nucleus_label == double.nucleus_label
    np.testing.assert_array_equal(single.mask, double.mask)


def test_keypoint_vote_tie_goes_to_darker_layer():
    labels = np.zeros((3, 8), dtype=np.uint8)
    labels[:, 4:] = 1
    result = ColorLayerResult(
        labels, np.array([[200.0] * 3, [50.0] * 3]), 1, 0.0, (0.0,)
    )
    nucleus = nucleus_mask_from_keypoints(result, [Point(1.5, 1.5), Point(6.5, 1.5)])
    assert nucleus.nucleus_label == 1
    np.testing.assert_array_equal(nucleus.mask, 1 - labels)


def test_keypoint_errors():
    image, _ = _three_color_image()
    result = kmeans_color(image)
    with pytest.raises(OutOfBoundsError):
        nucleus_mask_from_keypoints(result, [Point(9.0, 1.0)])
    with pytest.raises(ValueError):
        nucleus_mask_from_keypoints(result, [])


def test_downsample_mask():
    mask = np.arange(16).reshape(4, 4)
    np.testing.assert_array_equal(downsample_mask(mask, 4, 4), mask)
    np.testing.assert_array_equal(downsample_mask(mask, 2, 2), [[5, 7], [13, 15]])
    checkerboard = np.indices((4, 4)).sum(axis=0) % 2
    np.testing.assert_array_equal(downsample_mask(checkerboard, 2, 2), 0)
    ones = NucleusMask(np.ones((7, 5), dtype=np.uint8), 2)
    np.testing.assert_array_equal(downsample_mask(ones, 3, 2), np.ones((3, 2)))
    with pytest.raises(ValueError):
        downsample_mask(mask, 0, 2)
