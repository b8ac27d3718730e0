"""Shared error types for file formats and run-level failures."""


class FormatError(Exception):
    """Corrupt or incompatible on-disk artifact; carries a byte offset when known."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
