"""Exception types shared across the package."""


class OfhrlError(Exception):
    """Base class for package-specific failures."""


class FormatError(OfhrlError):
    """A file did not match the expected on-disk layout.

    ``offset`` is the byte position at which the problem was detected.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class TrainingError(OfhrlError):
    """Training produced a non-finite loss or otherwise diverged."""
