"""Global bincell-toolkit exceptions."""


class ValidationError(Exception):
    """Data validation failed."""

    pass


class UnknownClassError(ValidationError):
    """Cell class name is not one of normal, mn, nb or npb."""

    pass


class NucleiArityError(ValidationError):
    """A cell does not carry exactly two nuclei."""

    pass


class InputError(Exception):
    """An input could not be read or does not fit together with other inputs."""

    pass


class FormatError(InputError):
    """A file does not follow its binary format."""

    pass


class BadMagicError(FormatError):
    """Tensor file does not start with the expected magic."""

    pass


class TruncatedPayloadError(FormatError):
    """Tensor file is shorter (or longer) than its header announces."""

    pass


class UnsupportedDtypeError(FormatError):
    """Tensor element type is neither 32-bit float nor 8-bit unsigned."""

    pass


class MalformedHeaderError(FormatError):
    """Portable pixmap header could not be parsed."""

    pass


class UnsupportedMaxvalError(FormatError):
    """Portable pixmap uses a maximum sample value other than 255."""

    pass


class ShortDataError(FormatError):
    """Portable pixmap holds fewer samples than its header announces."""

    pass


class ImageSetMismatchError(InputError):
    """Ground truth and predictions do not cover the same images."""

    pass


class ShapeMismatchError(ValueError):
    """Tensor shapes do not fit together."""

    pass


class OutOfBoundsError(ValueError):
    """A coordinate lies outside of the image or grid it refers to."""

    pass


class InfeasibleSpecError(RuntimeError):
    """The synthetic layout could not be placed within the retry budget."""

    pass
