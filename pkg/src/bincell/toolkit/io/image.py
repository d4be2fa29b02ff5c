"""Binary portable pixmaps (P5 gray, P6 RGB) with 8-bit samples.

Images are numpy ``uint8`` arrays of shape ``(height, width)`` for gray and
``(height, width, 3)`` for RGB images.
"""
import re
import typing as t
from pathlib import Path

import numpy as np

from bincell.toolkit.exceptions import (
    MalformedHeaderError,
    ShortDataError,
    UnsupportedMaxvalError,
)

PathLike = t.Union[str, Path]
_SPACE_OR_COMMENT = re.compile(rb"(?:\s|#[^\n]*\n)+")
_TOKEN = re.compile(rb"[^\s#]+")


def _header_tokens(raw: bytes, count: int) -> t.Tuple[t.List[bytes], int]:
    """Read ``count`` whitespace separated header tokens, skipping comments."""
    tokens = []
    position = 0
    while len(tokens) < count:
        match = _SPACE_OR_COMMENT.match(raw, position)
        position = match.end() if match else position
        match = _TOKEN.match(raw, position)
        if match is None:
            raise MalformedHeaderError("Pixmap header is incomplete.")
        tokens.append(match.group(0))
        position = match.end()
    # Exactly one whitespace byte separates the header from the samples.
    if position >= len(raw) or not raw[position : position + 1].isspace():
        raise MalformedHeaderError("Pixmap header must end with a whitespace.")
    return tokens, position + 1


def from_bytes(raw: bytes) -> np.ndarray:
    """Decode a P5 or P6 pixmap.

    Args:
        raw: Encoded pixmap.

    Returns:
        Image array.

    Raises:
        MalformedHeaderError: If the header can not be parsed.
        UnsupportedMaxvalError: If the maximum sample value is not 255.
        ShortDataError: If the pixmap holds fewer samples than announced.
    """
    tokens, offset = _header_tokens(raw, 4)
    magic, width_raw, height_raw, maxval_raw = tokens
    if magic not in (b"P5", b"P6"):
        raise MalformedHeaderError(f"Unsupported pixmap type {magic!r}.")
    try:
        width, height, maxval = int(width_raw), int(height_raw), int(maxval_raw)
    except ValueError:
        raise MalformedHeaderError(
            f"Pixmap dimensions are not integers: {tokens[1:]}"
        ) from None
    if width < 1 or height < 1:
        raise MalformedHeaderError(f"Invalid pixmap size {width}x{height}.")
    if maxval != 255:
        raise UnsupportedMaxvalError(
            f"Only 8-bit pixmaps (maxval 255) are supported, got maxval {maxval}."
        )
    channels = 3 if magic == b"P6" else 1
    expected = width * height * channels
    if len(raw) - offset < expected:
        raise ShortDataError(
            f"Pixmap holds {len(raw) - offset} samples, expected {expected}."
        )
    data = np.frombuffer(raw, dtype=np.uint8, count=expected, offset=offset)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return data.reshape(shape).copy()


def to_bytes(image: np.ndarray) -> bytes:
    """Encode an image as P5 (gray) or P6 (RGB) pixmap.

    Args:
        image: ``uint8`` array of shape ``(H, W)`` or ``(H, W, 3)``.

    Returns:
        Encoded pixmap.

    Raises:
        ValueError: If the array is not an 8-bit gray or RGB image.
    """
    if image.dtype != np.uint8:
        raise ValueError(f"Images must be uint8, got {image.dtype}.")
    if image.ndim == 2:
        magic = b"P5"
    elif image.ndim == 3 and image.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"Unsupported image shape {image.shape}.")
    height, width = image.shape[:2]
    header = magic + f"\n{width} {height}\n255\n".encode("ascii")
    return header + np.ascontiguousarray(image).tobytes()


def read_image(path: PathLike) -> np.ndarray:
    """Read a P5/P6 pixmap file.

    Args:
        path: Source file.

    Returns:
        Image array.
    """
    return from_bytes(Path(path).read_bytes())


def write_image(image: np.ndarray, path: PathLike) -> None:
    """Write a P5/P6 pixmap file.

    Args:
        image: ``uint8`` gray or RGB image.
        path: Target file.
    """
    Path(path).write_bytes(to_bytes(image))


def to_gray(image: np.ndarray) -> np.ndarray:
    """Convert an image to float64 luminance (0.299 R + 0.587 G + 0.114 B).

    Gray images are only converted to float64.

    Args:
        image: Gray or RGB image.

    Returns:
        Luminance array of shape ``(H, W)``.
    """
    data = np.asarray(image, dtype=np.float64)
    if data.ndim == 3 and data.shape[-1] == 3:
        return data @ np.array([0.299, 0.587, 0.114])
    return data
