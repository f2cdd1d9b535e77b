"""Exception taxonomy shared across the package.

The CLI maps ConfigError to exit code 2 and SequencingError/IntegrityError
(internal invariant violations) to exit code 3.
"""


class ShapeError(ValueError):
    """Operands have incompatible or malformed dimensions."""


class ConfigError(ValueError):
    """Invalid configuration: bad thresholds, mismatched grids, missing inputs."""


class SequencingError(RuntimeError):
    """Cache rolled out of order: block index is not one past the last-seen index."""


class IntegrityError(RuntimeError):
    """Internal bookkeeping violated: corrupted offsets, double re-encoding, etc."""
