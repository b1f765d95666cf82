"""Exception types shared across the simulator."""


class StructuralError(ValueError):
    """Shapes, lengths or identifiers do not fit together."""


class NumericError(ArithmeticError):
    """A computation produced a non-finite value."""


class FormatError(ValueError):
    """A data file does not follow its binary format.

    ``offset`` is the byte position at which parsing failed.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ConfigError(ValueError):
    """An experiment configuration is malformed or out of bounds."""


class DataError(RuntimeError):
    """Device data could not be loaded or split."""
