"""Exception types raised across the toolkit.

``DataError`` subclasses map to CLI exit code 2, ``Diverged`` to exit code 3.
"""


class KdlError(Exception):
    """Base class for every error raised by kdlvision."""


# tensor / autodiff
class ShapeMismatch(KdlError):
    pass


class UnsupportedAttr(KdlError):
    pass


class NotScalar(KdlError):
    pass


class EmptyTape(KdlError):
    pass


class MissingGrad(KdlError):
    pass


class CheckpointError(KdlError):
    pass


# data-side errors
class DataError(KdlError):
    pass


class NotRGB(DataError):
    pass


class NotGrayscale(DataError):
    pass


class DimMismatch(DataError):
    pass


class BadDims(DataError):
    pass


class ImageFormatError(DataError):
    pass


class ParseError(DataError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class NonContiguousClasses(DataError):
    pass


class SpecimenSplitLeak(DataError):
    pass


class TooFewSpecimens(DataError):
    pass


class ImageLoadError(DataError):
    def __init__(self, path, cause):
        super().__init__(f"cannot load {path}: {cause}")
        self.path = path
        self.cause = cause


class EmptySplit(DataError):
    pass


class LabelOutOfRange(DataError):
    pass


class ClassOutOfRange(KdlError):
    pass


class NoConvLayer(KdlError):
    pass


class Diverged(KdlError):
    def __init__(self, epoch: int, value: float):
        super().__init__(f"training diverged at epoch {epoch} (loss={value})")
        self.epoch = epoch
        self.value = value
