"""Exception hierarchy shared by every idiokv module."""


class IdioKVError(Exception):
    """Base class for all errors raised by idiokv."""


class ShapeError(IdioKVError, ValueError):
    """Matrix or vector dimensions do not line up."""


class InfeasibleBudgetError(IdioKVError, ValueError):
    """A token budget or per-layer bound cannot be satisfied."""


class EvictionError(IdioKVError, ValueError):
    """An eviction decision does not fit the cache it is applied to."""


class HeadScoreError(IdioKVError, ValueError):
    """Head scores are missing, malformed, or inconsistent with a trace."""


class ConfigError(IdioKVError, ValueError):
    """Configuration could not be loaded or validated."""


class ArtifactError(IdioKVError):
    """An artifact file is missing or malformed."""
