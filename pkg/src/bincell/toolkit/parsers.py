"""Sanitizers for soft limited configuration values."""
import logging
import typing as t

logger = logging.getLogger(__name__)

Number = t.TypeVar("Number", int, float)


class Parse:
    """Clamp configuration values into their valid range.

    Hard limits are enforced by the configuration dataclasses and raise. The
    values handled here have a sensible nearest valid value, they are clamped
    and a warning is logged.
    """

    @staticmethod
    def greater_equal(value: Number, limit: Number) -> Number:
        """Ensures that the value is greater or equal a lower limit.

        Args:
            value: Used value.
            limit: Minimum value returned.

        Returns:
            Clamped value.
        """
        if value < limit:
            logger.warning(
                f"The value {value} must be greater than or equal to {limit} and "
                f"will be rounded up to: {limit}"
            )
            return limit
        return value

    @staticmethod
    def smaller_equal(value: Number, limit: Number) -> Number:
        """Ensures that the value is smaller or equal a upper limit.

        Args:
            value: Used value.
            limit: Maximum value returned.

        Returns:
            Clamped value.
        """
        if value > limit:
            logger.warning(
                f"The value {value} must be smaller than or equal to {limit} and "
                f"will be rounded down to: {limit}"
            )
            return limit
        return value

    @staticmethod
    def unit_interval(value: float) -> float:
        """Clamps a probability like value into [0, 1].

        Args:
            value: Used value.

        Returns:
            Clamped value.
        """
        return Parse.smaller_equal(Parse.greater_equal(value, 0.0), 1.0)
