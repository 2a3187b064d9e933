"""Exception types shared across the package."""


class LipsplatError(Exception):
    pass


class InvalidArgumentError(LipsplatError, ValueError):
    pass


class ShapeError(LipsplatError, ValueError):
    pass


class StateError(LipsplatError, RuntimeError):
    """Raised when a backward pass runs without its forward cache."""


class SingularCovarianceError(LipsplatError, ValueError):
    pass


class DegenerateFeatureError(LipsplatError, ValueError):
    pass


class ParseError(LipsplatError, ValueError):
    """Malformed file. ``offset`` is a byte offset or a 1-based line number."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at {offset})"
        super().__init__(message)
        self.offset = offset


class NonFiniteGradientError(LipsplatError, FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in parameter '{name}'")
        self.name = name


class NonFiniteLossError(LipsplatError, FloatingPointError):
    pass
