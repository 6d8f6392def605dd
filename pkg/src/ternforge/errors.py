"""Error taxonomy shared by all ternforge modules.

Every exception carries a stable ``code`` string so the CLI can map
failures to documented exit codes and tests can assert on the class of
failure rather than message text.
"""


class TernForgeError(Exception):
    """Base class; ``code`` identifies the error class across the API."""

    code = "INTERNAL"

    def __init__(self, message: str = ""):
        super().__init__(f"{self.code}: {message}" if message else self.code)


# ---- tensor / numeric errors -------------------------------------------------

class EmptyTensorError(TernForgeError):
    code = "EMPTY_TENSOR"


class NanInputError(TernForgeError):
    code = "NAN_INPUT"


class NanDetectedError(TernForgeError):
    code = "NAN_DETECTED"


class ShapeMismatchError(TernForgeError):
    code = "SHAPE_MISMATCH"


class AccumOverflowRiskError(TernForgeError):
    code = "ACCUM_OVERFLOW_RISK"


class DimNotDivisibleError(TernForgeError):
    code = "DIM_NOT_DIVISIBLE"


# ---- packing / file-format errors --------------------------------------------

class InvalidTritError(TernForgeError):
    code = "INVALID_TRIT"


class CorruptTritError(TernForgeError):
    code = "CORRUPT_TRIT"


class BadMagicError(TernForgeError):
    code = "BAD_MAGIC"


class BadVersionError(TernForgeError):
    code = "BAD_VERSION"


class TruncatedError(TernForgeError):
    code = "TRUNCATED"


class DuplicateTensorError(TernForgeError):
    code = "DUPLICATE_TENSOR"


class SizeMismatchError(TernForgeError):
    code = "SIZE_MISMATCH"


class MissingTensorError(TernForgeError):
    code = "MISSING_TENSOR"


# ---- analysis errors ----------------------------------------------------------

class MissingTraceError(TernForgeError):
    code = "MISSING_TRACE"
