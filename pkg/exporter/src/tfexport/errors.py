"""Exporter error classes."""


class ExportError(Exception):
    code = "EXPORT"

    def __init__(self, message: str = ""):
        super().__init__(f"{self.code}: {message}" if message else self.code)


class MissingKeyError(ExportError):
    code = "MISSING_KEY"


class ShapeMismatchError(ExportError):
    code = "SHAPE_MISMATCH"


class AmbiguousMapError(ExportError):
    code = "AMBIGUOUS_MAP"
