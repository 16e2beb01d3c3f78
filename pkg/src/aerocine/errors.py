"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration value or combination."""


class ScenarioError(ConfigError):
    """Malformed scenario file; carries the file, line and field when known."""

    def __init__(self, message: str, *, path=None, line: int | None = None, field: str | None = None):
        self.path = path
        self.line = line
        self.field = field
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field '{field}'")
        super().__init__(f"{': '.join(where)}: {message}" if where else message)


class OutOfBoundsError(IndexError):
    """Query or voxel coordinate outside the grid."""


class NoIntersectionError(ValueError):
    """A back-projected ray never reaches the ground plane."""
