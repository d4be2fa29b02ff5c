"""Forward only network blocks.

* Dilated spatial attention with a residual connection.
* Instance normalization.
* Attention rollout based selection of the most attended patches.
"""
import logging
import typing as t
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.special import expit

from bincell.toolkit.exceptions import ShapeMismatchError, ValidationError
from bincell.toolkit.interface import Point

logger = logging.getLogger(__name__)

ROW_SUM_TOLERANCE = 1e-5


@dataclass(frozen=True, eq=False)
class DsaKernel:
    """Weights of the dilated spatial attention convolution.

    The convolution maps the channel wise average and maximum maps (in that
    order) to a single attention map with a 3x3 kernel, dilation 2, padding 2
    and stride 1.

    Args:
        weights: ``[2, 3, 3]`` kernel weights.
        bias: Bias added before the sigmoid.
    """

    weights: np.ndarray = field(default_factory=lambda: np.zeros((2, 3, 3)))
    bias: float = 0.0
    dilation: int = 2
    padding: int = 2

    def __post_init__(self):
        if np.shape(self.weights) != (2, 3, 3):
            raise ValidationError(
                f"DSA weights must have shape (2, 3, 3), got {np.shape(self.weights)}."
            )
        if self.dilation != 2 or self.padding != 2:
            raise ValidationError("The DSA kernel uses dilation 2 and padding 2.")

    def dilated(self) -> np.ndarray:
        """Kernel with the dilation applied (``[2, 5, 5]``, zeros between taps)."""
        size = 2 * self.dilation + 1
        kernel = np.zeros((2, size, size))
        kernel[:, :: self.dilation, :: self.dilation] = self.weights
        return kernel


def dsa_forward(
    features: t.Any, kernel: DsaKernel = DsaKernel()
) -> t.Tuple[np.ndarray, np.ndarray]:
    """Dilated spatial attention.

    ``attention = sigmoid(conv([avg_c(F); max_c(F)]) + bias)`` and
    ``out = F + F * attention`` (attention broadcast over the channels).

    Args:
        features: Feature map ``[Ch, Hf, Wf]``.
        kernel: Convolution weights.

    Returns:
        Attention map ``[1, Hf, Wf]`` and output features ``[Ch, Hf, Wf]``.

    Raises:
        ShapeMismatchError: If the features are not a 3D tensor.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 3 or min(features.shape) < 1:
        raise ShapeMismatchError(
            f"Features must have shape [Ch, Hf, Wf], got {features.shape}."
        )
    pooled = np.stack((features.mean(axis=0), features.max(axis=0)))
    dilated = kernel.dilated()
    logits = sum(
        ndimage.correlate(pooled[c], dilated[c], mode="constant", cval=0.0)
        for c in range(2)
    )
    attention = expit(logits + kernel.bias)[None]
    return attention, features + features * attention


def instance_normalize(x: t.Any, epsilon: float = 1e-5) -> np.ndarray:
    """Instance normalization.

    Every ``(b, c)`` plane is shifted to zero mean and scaled by
    ``1 / sqrt(var + epsilon)``.

    Args:
        x: Batch ``[B, C, H, W]``.
        epsilon: Variance regularizer.

    Returns:
        Normalized batch.

    Raises:
        ShapeMismatchError: If the input is not a 4D tensor.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or x.shape[2] * x.shape[3] < 1:
        raise ShapeMismatchError(f"Expected a [B, C, H, W] tensor, got {x.shape}.")
    mean = x.mean(axis=(2, 3), keepdims=True)
    var = x.var(axis=(2, 3), keepdims=True)
    return (x - mean) / np.sqrt(var + epsilon)


def _stack(layers: t.Union[np.ndarray, t.Sequence[t.Any]]) -> np.ndarray:
    layers = [np.asarray(layer, dtype=np.float64) for layer in layers]
    if not layers:
        raise ShapeMismatchError("At least one attention layer is required.")
    shape = layers[0].shape
    if len(shape) != 3 or shape[1] != shape[2]:
        raise ShapeMismatchError(f"Attention layers must be [H, T, T], got {shape}.")
    for index, layer in enumerate(layers):
        if layer.shape[0] != shape[0]:
            raise ShapeMismatchError(
                f"Layer {index} has {layer.shape[0]} heads, expected {shape[0]}."
            )
        if layer.shape != shape:
            raise ShapeMismatchError(
                f"Layer {index} has shape {layer.shape}, expected {shape}."
            )
    return np.stack(layers)


def attention_rollout(
    layers: t.Union[np.ndarray, t.Sequence[t.Any]], residual: bool = False
) -> np.ndarray:
    """Joint attention of all layers per head.

    ``joint[h] = A_L[h] @ ... @ A_1[h]``. With ``residual`` every layer is
    replaced by ``0.5 * (A + I)`` with rows renormalized before multiplying.

    Args:
        layers: ``[L, H, T, T]`` attention weights (rows sum to 1).
        residual: Mix in the identity for the skip connections.

    Returns:
        ``[H, T, T]`` joint attention.

    Raises:
        ShapeMismatchError: If the layers do not share heads and tokens.
        ValidationError: If an attention row does not sum to 1.
    """
    stack = _stack(layers)
    row_sums = stack.sum(axis=-1)
    if not np.allclose(row_sums, 1.0, rtol=0, atol=ROW_SUM_TOLERANCE):
        raise ValidationError(
            f"Attention rows must sum to 1, worst row sums to "
            f"{row_sums.flat[np.argmax(np.abs(row_sums - 1))]}."
        )
    if residual:
        stack = 0.5 * (stack + np.eye(stack.shape[-1]))
        stack = stack / stack.sum(axis=-1, keepdims=True)
    joint = stack[0]
    for layer in stack[1:]:
        joint = np.matmul(layer, joint)
    return joint


def select_key_patches(
    layers: t.Union[np.ndarray, t.Sequence[t.Any]],
    query_row: int = 0,
    residual: bool = False,
) -> t.List[int]:
    """Select the patch every head attends to the most.

    Args:
        layers: ``[L, H, T, T]`` attention weights.
        query_row: Token whose joint attention row is inspected (class token).
        residual: Use identity mixing in the rollout.

    Returns:
        One token index per head, ordered by head. The query token itself is
        never selected, ties go to the smallest index.
    """
    joint = attention_rollout(layers, residual)
    tokens = joint.shape[-1]
    if not 0 <= query_row < tokens:
        raise ValueError(f"Query row {query_row} out of range for {tokens} tokens.")
    if tokens < 2:
        raise ShapeMismatchError("At least two tokens are required.")
    rows = joint[:, query_row, :].copy()
    rows[:, query_row] = -np.inf
    selected = [int(index) for index in np.argmax(rows, axis=1)]
    logger.debug(f"Selected patches per head: {selected}")
    return selected


def patch_positions(
    indices: t.Iterable[int],
    tokens_per_row: int,
    patch_size: float,
    class_token: bool = True,
) -> t.List[Point]:
    """Pixel centers of selected patch tokens.

    Args:
        indices: Selected token indices.
        tokens_per_row: Number of patches along the image width.
        patch_size: Patch edge length in pixels.
        class_token: Token 0 is a class token and patches start at index 1.

    Returns:
        Center of every selected patch.

    Raises:
        ValueError: If an index refers to the class token.
    """
    positions = []
    for index in indices:
        patch = index - 1 if class_token else index
        if patch < 0:
            raise ValueError(f"Token {index} is not a patch token.")
        row, col = divmod(patch, tokens_per_row)
        positions.append(Point((col + 0.5) * patch_size, (row + 0.5) * patch_size))
    return positions
