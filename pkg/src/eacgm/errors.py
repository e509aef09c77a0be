"""Exception hierarchy shared by all modules.

Data problems (bad input, bad config) derive from ``DataError``; numeric
failures during fitting derive from ``NumericError``. The CLI maps the two
families to different exit codes.
"""

from __future__ import annotations


class EacgmError(Exception):
    """Base class for every error raised by this package."""


class DataError(EacgmError, ValueError):
    pass


class NumericError(EacgmError, ArithmeticError):
    pass


# -- event model -------------------------------------------------------------


class MissingField(DataError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"missing field {name!r}")


class RangeViolation(DataError):
    def __init__(self, field: str, value):
        self.field = field
        self.value = value
        super().__init__(f"field {field!r} out of range: {value!r}")


class UnknownLayer(DataError):
    def __init__(self, layer):
        self.layer = layer
        super().__init__(f"unknown layer {layer!r}")


class EmptyLayer(DataError):
    def __init__(self, layer):
        self.layer = layer
        super().__init__(f"no events for layer {layer}")


class NonFiniteFeature(DataError):
    def __init__(self, row: int, col: int):
        self.row = row
        self.col = col
        super().__init__(f"non-finite feature at row {row}, column {col}")


# -- trace io ----------------------------------------------------------------


class ParseError(DataError):
    def __init__(self, line_no: int, detail: str = ""):
        self.line_no = line_no
        msg = f"line {line_no}: malformed JSON"
        super().__init__(f"{msg}: {detail}" if detail else msg)


class TraceValidationError(DataError):
    def __init__(self, line_no: int, cause: DataError):
        self.line_no = line_no
        self.cause = cause
        super().__init__(f"line {line_no}: {type(cause).__name__}: {cause}")


class ManifestParseError(DataError):
    def __init__(self, line_no: int, detail: str = ""):
        self.line_no = line_no
        msg = f"manifest line {line_no}: unparseable"
        super().__init__(f"{msg}: {detail}" if detail else msg)


# -- workload simulation -----------------------------------------------------


class InvalidConfig(DataError):
    def __init__(self, field: str, detail: str = ""):
        self.field = field
        msg = f"invalid config field {field!r}"
        super().__init__(f"{msg}: {detail}" if detail else msg)


class EmptyLabels(DataError):
    def __init__(self):
        super().__init__("label list is empty")


# -- gmm ---------------------------------------------------------------------


class DimensionMismatch(DataError):
    def __init__(self, expected: int, got: int):
        self.expected = expected
        self.got = got
        super().__init__(f"expected dimension {expected}, got {got}")


class TooFewPoints(DataError):
    def __init__(self, n: int, k: int):
        super().__init__(f"need at least {k} points, got {n}")


class DegenerateData(DataError):
    def __init__(self, detail: str = "all points identical"):
        super().__init__(detail)


class SingularCovariance(NumericError):
    def __init__(self, k: int):
        self.k = k
        super().__init__(f"covariance of component {k} is not positive definite")


class RepeatedCollapse(NumericError):
    def __init__(self, k: int, attempts: int):
        self.k = k
        super().__init__(f"component {k} collapsed again after {attempts} reseeds")


# -- detection / evaluation --------------------------------------------------


class EmptyTraining(DataError):
    def __init__(self):
        super().__init__("training set is empty")


class InsufficientTraining(DataError):
    def __init__(self, n_train: int, needed: int):
        self.n_train = n_train
        self.needed = needed
        super().__init__(f"train split has {n_train} points, need at least {needed}")


class LengthMismatch(DataError):
    def __init__(self, a: int, b: int):
        super().__init__(f"length mismatch: {a} labels vs {b} flags")


class EmptyMatrix(DataError):
    def __init__(self):
        super().__init__("confusion matrix has no samples")
