"""Exception hierarchy shared by all trajrag modules."""


class TrajRagError(Exception):
    """Base class for every error raised by this package."""


class MapError(TrajRagError, ValueError):
    """Invalid map access: unknown channel, point outside the grid, bad shape."""


class EmptyTrajectoryError(TrajRagError, ValueError):
    """A trajectory could not be built, or an operation received an empty one."""


class UnreachableError(TrajRagError):
    """No path exists between the requested cells."""


class MatchError(TrajRagError, ValueError):
    """Not enough correspondences to estimate a transform."""


class ConfigError(TrajRagError, ValueError):
    """Invalid run configuration or parameter set."""


class ParseError(TrajRagError, ValueError):
    """Malformed serialized document.

    Carries the offending file name (if any) and 1-based line number.
    """

    def __init__(self, message: str, line: int | None = None, source: str | None = None):
        self.line = line
        self.source = source
        where = []
        if source:
            where.append(str(source))
        if line is not None:
            where.append(f"line {line}")
        prefix = ":".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)
