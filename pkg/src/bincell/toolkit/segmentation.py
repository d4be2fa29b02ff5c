"""Color layer segmentation of stained cell images.

The pixels of an image are clustered into color layers with a seeded k-means.
With the default of three clusters the layers are the unstained background,
the cytoplasm and the nuclei. Clusters are labelled by descending centroid
luminance, so label 0 is the brightest and label ``k - 1`` the darkest layer.
"""
import logging
import math
import typing as t

import numpy as np
from scipy.spatial.distance import cdist

from bincell.toolkit.exceptions import OutOfBoundsError, ValidationError
from bincell.toolkit.interface import Point

logger = logging.getLogger(__name__)

LUMINANCE = np.array([0.299, 0.587, 0.114])


class ColorLayerResult(t.NamedTuple):
    """Result of the color clustering.

    Args:
        labels: ``[H, W]`` cluster label per pixel.
        centroids: ``[k, channels]`` cluster centers.
        iterations: Number of Lloyd iterations run.
        inertia: Sum of squared distances of all pixels to their centroid.
        inertia_history: Inertia at the start of every iteration followed by
            the final inertia.
    """

    labels: np.ndarray
    centroids: np.ndarray
    iterations: int
    inertia: float
    inertia_history: t.Tuple[float, ...]


class NucleusMask(t.NamedTuple):
    """Background mask derived from the nucleus color layer.

    Args:
        mask: ``[H, W]`` uint8, 1 on background (non nucleus) pixels.
        nucleus_label: Cluster label chosen as nucleus layer.
    """

    mask: np.ndarray
    nucleus_label: int


def luminance(colors: np.ndarray) -> np.ndarray:
    """Luminance of RGB colors (gray values are returned unchanged)."""
    colors = np.asarray(colors, dtype=np.float64)
    if colors.shape[-1] == 3:
        return colors @ LUMINANCE
    return colors[..., 0]


def _kmeans_pp(
    colors: np.ndarray, weights: np.ndarray, k: int, rng: np.random.Generator
) -> np.ndarray:
    """Seeded k-means++ initialisation on weighted points."""
    probabilities = weights / weights.sum()
    centroids = [colors[rng.choice(len(colors), p=probabilities)]]
    for _ in range(1, k):
        distance = cdist(colors, np.array(centroids), "sqeuclidean").min(axis=1)
        potential = weights * distance
        if potential.sum() > 0:
            probabilities = potential / potential.sum()
        centroids.append(colors[rng.choice(len(colors), p=probabilities)])
    return np.array(centroids, dtype=np.float64)


def kmeans_color(
    image: np.ndarray,
    k: int = 3,
    seed: int = 0,
    tol: float = 1e-4,
    max_iter: int = 100,
) -> ColorLayerResult:
    """Cluster the pixel colors of an image with Lloyd's k-means.

    The clustering runs on the distinct colors weighted by their pixel counts,
    which is equivalent to clustering the pixels and independent of the pixel
    order. Centroids are initialised with k-means++ drawn from a PCG64
    generator seeded with ``seed``. Iterations stop once no centroid moves by
    ``tol`` or more. Assignment ties go to the lowest cluster index, empty
    clusters are re-seeded at the color farthest from its centroid.

    Args:
        image: ``[H, W, 3]`` RGB or ``[H, W]`` gray image.
        k: Number of clusters.
        seed: Seed of the initialisation.
        tol: Convergence threshold on the centroid shift (color units).
        max_iter: Maximum number of Lloyd iterations.

    Returns:
        Clustering result with labels sorted by descending luminance.

    Raises:
        ValidationError: If ``k < 2`` or the image is empty.
    """
    if k < 2:
        raise ValidationError(f"k must be >= 2, got {k}.")
    image = np.asarray(image)
    if image.size == 0:
        raise ValidationError("Cannot cluster an empty image.")
    height, width = image.shape[:2]
    pixels = image.reshape(height * width, -1).astype(np.float64)
    colors, inverse, counts = np.unique(
        pixels, axis=0, return_inverse=True, return_counts=True
    )
    inverse = inverse.reshape(-1)
    weights = counts.astype(np.float64)
    rng = np.random.Generator(np.random.PCG64(seed))
    centroids = _kmeans_pp(colors, weights, k, rng)

    history = []
    iterations = 0
    for iterations in range(1, max_iter + 1):
        distance = cdist(colors, centroids, "sqeuclidean")
        assignment = np.argmin(distance, axis=1)
        nearest = distance[np.arange(len(colors)), assignment]
        history.append(float((weights * nearest).sum()))
        updated = centroids.copy()
        for cluster in range(k):
            members = assignment == cluster
            if members.any():
                updated[cluster] = np.average(
                    colors[members], axis=0, weights=weights[members]
                )
                continue
            farthest = int(np.argmax(nearest))
            logger.warning(
                f"Cluster {cluster} is empty and is re-seeded at color "
                f"{colors[farthest].tolist()}."
            )
            updated[cluster] = colors[farthest]
            nearest[farthest] = 0.0
            assignment[farthest] = cluster
        shift = float(np.max(np.linalg.norm(updated - centroids, axis=1)))
        centroids = updated
        if shift < tol:
            break

    distance = cdist(colors, centroids, "sqeuclidean")
    assignment = np.argmin(distance, axis=1)
    inertia = float((weights * distance[np.arange(len(colors)), assignment]).sum())
    history.append(inertia)

    order = np.argsort(-luminance(centroids), kind="stable")
    relabel = np.empty(k, dtype=np.int64)
    relabel[order] = np.arange(k)
    labels = relabel[assignment][inverse].reshape(height, width).astype(np.uint8)
    logger.debug(f"k-means converged after {iterations} iterations, inertia {inertia}")
    return ColorLayerResult(
        labels=labels,
        centroids=centroids[order],
        iterations=iterations,
        inertia=inertia,
        inertia_history=tuple(history),
    )


def nucleus_mask_from_keypoints(
    result: ColorLayerResult, keypoints: t.Sequence[Point]
) -> NucleusMask:
    """Pick the nucleus layer from nucleus keypoints and mask everything else.

    The nucleus layer is the most frequent label within the 3x3 neighborhoods
    of all keypoints. Ties are resolved in favor of the darker centroid.

    Args:
        result: Clustering result.
        keypoints: Nucleus locations in pixel coordinates.

    Returns:
        Mask with 1 on every pixel outside of the nucleus layer.

    Raises:
        OutOfBoundsError: If a keypoint lies outside of the image.
        ValueError: If no keypoint is given.
    """
    if not keypoints:
        raise ValueError("At least one keypoint is required.")
    labels = result.labels
    height, width = labels.shape
    k = len(result.centroids)
    votes = np.zeros(k, dtype=np.int64)
    for point in keypoints:
        row, col = math.floor(point.y), math.floor(point.x)
        if not (0 <= row < height and 0 <= col < width):
            raise OutOfBoundsError(
                f"Keypoint ({point.x}, {point.y}) lies outside of the "
                f"{width}x{height} image."
            )
        window = labels[max(0, row - 1) : row + 2, max(0, col - 1) : col + 2]
        votes += np.bincount(window.ravel(), minlength=k)[:k]
    candidates = np.flatnonzero(votes == votes.max())
    nucleus = int(candidates[np.argmin(luminance(result.centroids[candidates]))])
    return NucleusMask((labels != nucleus).astype(np.uint8), nucleus)


def downsample_mask(
    mask: t.Union[NucleusMask, np.ndarray], out_h: int, out_w: int
) -> np.ndarray:
    """Nearest neighbor downsampling sampled at pixel centers.

    Output pixel ``i`` takes source index ``floor((i + 0.5) * in / out)``.

    Args:
        mask: Mask to downsample.
        out_h: Output height.
        out_w: Output width.

    Returns:
        ``[out_h, out_w]`` mask.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError(f"Output size must be >= 1, got {out_h}x{out_w}.")
    data = mask.mask if isinstance(mask, NucleusMask) else np.asarray(mask)
    height, width = data.shape[:2]
    rows = np.floor((np.arange(out_h) + 0.5) * (height / out_h)).astype(np.int64)
    cols = np.floor((np.arange(out_w) + 0.5) * (width / out_w)).astype(np.int64)
    rows = np.clip(rows, 0, height - 1)
    cols = np.clip(cols, 0, width - 1)
    return data[np.ix_(rows, cols)]


def pixel_agreement(labels: np.ndarray, layer_map: np.ndarray) -> float:
    """Fraction of pixels whose label equals the reference layer."""
    labels = np.asarray(labels)
    layer_map = np.asarray(layer_map).reshape(labels.shape)
    return float(np.mean(labels == layer_map))
