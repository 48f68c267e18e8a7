"""Exception types raised across the package."""


class NVSError(Exception):
    """Base class for all package errors."""


class ShapeError(NVSError, ValueError):
    pass


class BadConfig(NVSError, ValueError):
    """A configuration value is missing or out of range; ``key`` names it."""

    def __init__(self, key, message=""):
        self.key = key
        super().__init__(f"{key}: {message}" if message else str(key))


class DegenerateRays(NVSError, ValueError):
    pass


class DegenerateAnchor(NVSError, ValueError):
    pass


class CorruptDataset(NVSError):
    pass


class MissingDependency(NVSError):
    """A pipeline stage needs a checkpoint that does not exist."""

    def __init__(self, name, path=None):
        self.name = name
        self.path = path
        msg = name if path is None else f"{name} (expected at {path})"
        super().__init__(msg)


class EmptyInput(NVSError, ValueError):
    pass


class CorruptCheckpoint(NVSError):
    """Stored weights do not match the content hash in their manifest."""
