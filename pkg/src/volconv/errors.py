class ShapeError(ValueError):
    """Operand extents are incompatible with the requested operation."""


class FormatError(ValueError):
    """A file on disk does not follow the expected binary or CSV layout."""
