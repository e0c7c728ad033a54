"""Exception hierarchy shared across the package."""


class AscaError(Exception):
    """Base class for all errors raised by ascalib."""


class InvalidDesignError(AscaError):
    """The experimental design is structurally invalid (levels, nesting, DoFs)."""


class FormulaError(AscaError):
    """A model formula could not be parsed or references unknown factors."""


class EstimabilityError(AscaError):
    """The coded model matrix is rank deficient (empty cells, aliased terms)."""


class DegenerateDataError(AscaError):
    """The response carries no usable variation for the requested computation."""


class PreprocessError(AscaError):
    """Imputation, transform or scaling failed (domain violation, missing cell)."""


class ConfigError(AscaError):
    """A run configuration is incomplete or inconsistent."""


class CsvFormatError(AscaError):
    """An input CSV is malformed; message carries the offending line number."""
