"""Exception types raised across the pipeline."""


class SalPrivacyError(Exception):
    """Base class for all package errors."""


class EmptyRegion(SalPrivacyError):
    """A box covers no pixel centers of the map it is measured against."""


class DimensionMismatch(SalPrivacyError):
    pass


class ConfigMismatch(SalPrivacyError):
    pass


class ShapeMismatch(SalPrivacyError):
    pass


class DegenerateTruth(SalPrivacyError):
    pass


class EmptyDataset(SalPrivacyError):
    pass


class MissingMasks(SalPrivacyError):
    pass


class UnknownImageId(SalPrivacyError):
    pass


class PlacementFailure(SalPrivacyError):
    pass


class ParseError(SalPrivacyError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class MissingImage(SalPrivacyError):
    def __init__(self, path):
        super().__init__(f"missing file: {path}")
        self.path = path


class InvalidBox(SalPrivacyError):
    pass
