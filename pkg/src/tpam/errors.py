"""Exception hierarchy shared by every tpam module."""


class TpamError(Exception):
    """Base class for all library errors."""


class ShapeError(TpamError, ValueError):
    pass


class ArgumentError(TpamError, ValueError):
    pass


class CapacityError(TpamError):
    """A dense computation would exceed its configured element cap."""


class UnsupportedVariantError(TpamError):
    pass


class FormatError(TpamError):
    """Malformed file contents.  ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class IntegrityError(TpamError):
    pass


class ExtractorError(TpamError):
    """An extractor call failed.  ``stderr`` carries the external diagnostics."""

    def __init__(self, message, stderr=""):
        if stderr:
            message = f"{message}\n--- extractor stderr ---\n{stderr.rstrip()}"
        super().__init__(message)
        self.stderr = stderr


class ProtocolError(ExtractorError):
    pass
