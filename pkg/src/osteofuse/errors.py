"""Exception and warning types shared across the pipeline stages."""


class OsteofuseError(Exception):
    """Base class for all pipeline errors."""


# --- clinical ingest ---

class MissingColumnError(OsteofuseError):
    """A retained column is absent from the CSV header."""


class UnknownLabelError(OsteofuseError):
    """A label cell is not one of the three class names."""


class DuplicateIdError(OsteofuseError):
    """The same patient id appears on more than one row."""


# --- imaging ---

class ImageTooSmallError(OsteofuseError):
    """Input image below the 64x64 minimum."""


class BoxOutOfBoundsError(OsteofuseError):
    """ROI box exceeds the image bounds."""


class MissingManifestEntryError(OsteofuseError):
    """Image id absent from the ROI manifest."""


# --- backbone runtime ---

class ShapeMismatchError(OsteofuseError):
    """Model output shape disagrees with its manifest."""


class UnsupportedOperatorError(OsteofuseError):
    """The runtime cannot execute the serialized graph."""


class ManifestMismatchError(OsteofuseError):
    """Manifest contents disagree with the loaded graph or the caller's expectation."""


class NonFiniteOutputError(OsteofuseError):
    """NaN or Inf in extracted features."""


# --- fusion / shared numeric ---

class DegenerateDataError(OsteofuseError):
    """All fit rows identical; nothing to decompose."""


class DimensionMismatchError(OsteofuseError):
    """Input width disagrees with the fitted transform."""


class RowCountMismatchError(OsteofuseError):
    """Blocks to be concatenated have different row counts."""


class RowAlignmentError(OsteofuseError):
    """Patient ids of two blocks do not line up row by row."""


# --- variable clustering ---

class NonFiniteCorrelationError(OsteofuseError):
    """A column has zero variance, so its correlations are undefined."""


# --- classifier ---

class DivergenceDetectedError(OsteofuseError):
    """Training loss became non-finite."""


# --- metrics ---

class LabelOutOfRangeError(OsteofuseError):
    """A label is outside {0, .., n_classes-1}."""


# --- pipeline ---

class ClassTooSmallError(OsteofuseError):
    """A class has fewer members than the number of folds."""


class StageError(OsteofuseError):
    """Wraps a failure with the pipeline stage and fold where it occurred."""

    def __init__(self, stage: str, fold: int | None, cause: BaseException):
        self.stage = stage
        self.fold = fold
        self.cause = cause
        where = f"stage={stage}" + (f" fold={fold}" if fold is not None else "")
        super().__init__(f"{where}: {type(cause).__name__}: {cause}")


# --- warnings ---

class OsteofuseWarning(UserWarning):
    """Base class for pipeline warnings."""


class ConstantColumnWarning(OsteofuseWarning):
    """A column is constant on the fit rows and was encoded as all zeros."""


class UnseenLevelWarning(OsteofuseWarning):
    """A categorical level absent at fit time was mapped to all zeros."""


class OmittedColumnWarning(OsteofuseWarning):
    """A configured column could not be produced and was dropped."""


class UndefinedMetricWarning(OsteofuseWarning):
    """A metric had a zero denominator and is reported as undefined."""


class SoftCheckWarning(OsteofuseWarning):
    """A qualitative expectation did not hold; reported, not fatal."""
