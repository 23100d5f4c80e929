class FormatError(ValueError):
    """Malformed or truncated file; ``offset`` is the byte (or line) position."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingError(RuntimeError):
    pass
