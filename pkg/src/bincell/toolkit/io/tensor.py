"""Binary tensor file format.

A tensor file consists of the magic ``BTNSR1\\0``, one byte element type
(0 = 32-bit float, 1 = 8-bit unsigned), one byte dimension count, one
little-endian unsigned 64-bit integer per dimension and finally the raw
row-major payload in little-endian byte order.
"""
import logging
import typing as t
from pathlib import Path

import numpy as np

from bincell.toolkit.exceptions import (
    BadMagicError,
    TruncatedPayloadError,
    UnsupportedDtypeError,
)
from bincell.toolkit.interface import TensorDType

logger = logging.getLogger(__name__)

MAGIC = b"BTNSR1\0"
MAX_NDIM = 4
TENSOR_SUFFIX = ".btnsr"

_NUMPY_TYPES = {
    TensorDType.F32: np.dtype("<f4"),
    TensorDType.U8: np.dtype("u1"),
}

PathLike = t.Union[str, Path]


def _dtype_code(array: np.ndarray) -> TensorDType:
    if array.dtype == np.float32:
        return TensorDType.F32
    if array.dtype == np.uint8:
        return TensorDType.U8
    raise UnsupportedDtypeError(
        f"Tensors must be float32 or uint8, got {array.dtype}. "
        "Cast the array before writing it."
    )


def _check_shape(shape: t.Sequence[int]) -> None:
    if not 1 <= len(shape) <= MAX_NDIM:
        raise ValueError(
            f"Tensors must have between 1 and {MAX_NDIM} dimensions, "
            f"got {len(shape)}."
        )
    if any(dim < 1 for dim in shape):
        raise ValueError(f"All tensor dimensions must be >= 1, got {tuple(shape)}.")


def to_bytes(array: np.ndarray) -> bytes:
    """Serialize a tensor into the binary tensor format.

    Args:
        array: Array of type float32 or uint8 with 1 to 4 dimensions.

    Returns:
        Serialized tensor.

    Raises:
        UnsupportedDtypeError: If the array is neither float32 nor uint8.
        ValueError: If the shape is not supported.
    """
    code = _dtype_code(array)
    _check_shape(array.shape)
    header = (
        MAGIC
        + bytes([int(code), array.ndim])
        + np.asarray(array.shape, dtype="<u8").tobytes()
    )
    payload = np.ascontiguousarray(array, dtype=_NUMPY_TYPES[code]).tobytes()
    return header + payload


def from_bytes(raw: bytes) -> np.ndarray:
    """Deserialize a tensor from the binary tensor format.

    Args:
        raw: Serialized tensor.

    Returns:
        Tensor as numpy array (float32 or uint8).

    Raises:
        BadMagicError: If the data does not start with the tensor magic.
        UnsupportedDtypeError: If the element type code is unknown.
        TruncatedPayloadError: If the payload size does not match the header.
        ValueError: If the header announces an unsupported shape.
    """
    if raw[: len(MAGIC)] != MAGIC:
        raise BadMagicError(f"Bad magic {raw[:len(MAGIC)]!r}, expected {MAGIC!r}.")
    offset = len(MAGIC)
    if len(raw) < offset + 2:
        raise TruncatedPayloadError("Tensor header is incomplete.")
    try:
        code = TensorDType(raw[offset])
    except ValueError:
        raise UnsupportedDtypeError(
            f"Unsupported tensor dtype code {raw[offset]}."
        ) from None
    ndim = raw[offset + 1]
    offset += 2
    if len(raw) < offset + 8 * ndim:
        raise TruncatedPayloadError("Tensor dimensions are incomplete.")
    shape = tuple(
        int(dim) for dim in np.frombuffer(raw, dtype="<u8", count=ndim, offset=offset)
    )
    _check_shape(shape)
    offset += 8 * ndim
    dtype = _NUMPY_TYPES[code]
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(raw) - offset != expected:
        raise TruncatedPayloadError(
            f"Tensor payload has {len(raw) - offset} bytes, header announces "
            f"{expected} bytes for shape {shape}."
        )
    data = np.frombuffer(raw, dtype=dtype, offset=offset).reshape(shape)
    return data.astype(dtype.newbyteorder("="), copy=True)


def write_tensor(array: np.ndarray, path: PathLike) -> None:
    """Write a tensor file.

    Args:
        array: Array of type float32 or uint8 with 1 to 4 dimensions.
        path: Target file.
    """
    Path(path).write_bytes(to_bytes(array))
    logger.debug(f"Wrote tensor {array.dtype}{list(array.shape)} to {path}")


def read_tensor(path: PathLike) -> np.ndarray:
    """Read a tensor file.

    Args:
        path: Source file.

    Returns:
        Tensor as numpy array.
    """
    return from_bytes(Path(path).read_bytes())
