"""Exception types shared across the package."""


class MicrodetError(Exception):
    """Base class for every error raised deliberately by microdet."""


class ShapeError(MicrodetError, ValueError):
    """Tensor shapes are incompatible; the message names the offending dimension."""


class GraphError(MicrodetError, RuntimeError):
    """The autograd tape cannot be replayed as requested."""


class ConfigError(MicrodetError, ValueError):
    """A configuration value or combination is invalid."""


class FormatError(MicrodetError, ValueError):
    """A file on disk does not follow its declared format.

    ``location`` carries a file path and, where meaningful, a line number or
    tensor name so callers can point at the bad record.
    """

    def __init__(self, message: str, location: str = ""):
        self.location = location
        super().__init__(f"{location}: {message}" if location else message)


class StateError(MicrodetError, RuntimeError):
    """An operation was requested in the wrong lifecycle state (e.g. fusing twice)."""
