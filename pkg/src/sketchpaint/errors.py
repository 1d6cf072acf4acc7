"""Exception types raised across the package."""


class ShapeError(ValueError):
    """Tensor/array shapes do not line up."""


class ParameterError(ValueError):
    """An argument is outside its valid range."""


class IntegrityError(RuntimeError):
    """Stored data failed a consistency or checksum check."""


class VersionError(RuntimeError):
    """A checkpoint does not match the expected format or model config."""


class IngestionError(ValueError):
    """A manifest or corpus file could not be parsed."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
