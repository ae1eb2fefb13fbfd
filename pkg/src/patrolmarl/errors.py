"""Exception hierarchy shared across the package."""


class PatrolError(Exception):
    """Base class for every error raised by patrolmarl."""


class MalformedMap(PatrolError, ValueError):
    pass


class NoStation(PatrolError, ValueError):
    pass


class DisconnectedMap(PatrolError, ValueError):
    pass


class LocIsObstacle(PatrolError, ValueError):
    pass


class Unreachable(PatrolError):
    pass


class TooManyAgents(PatrolError, ValueError):
    pass


class InvalidAction(PatrolError, ValueError):
    pass


class MissingAction(PatrolError, ValueError):
    pass


class UnknownAgent(PatrolError, KeyError):
    pass


class AlreadyFailed(PatrolError):
    pass


class CapacityExceeded(PatrolError):
    pass


class AgentUnavailable(PatrolError):
    pass


class NegativeIdleness(PatrolError, ValueError):
    pass


class NoVertices(PatrolError, ValueError):
    pass


class BatteryOutOfRange(PatrolError, ValueError):
    pass


class ShapeMismatch(PatrolError, ValueError):
    pass


class NonScalarLoss(PatrolError, ValueError):
    pass


class AllMasked(PatrolError, ValueError):
    pass


class LengthMismatch(PatrolError, ValueError):
    pass


class EmptyBatch(PatrolError, ValueError):
    pass


class TraceTooShort(PatrolError, ValueError):
    pass


class QuotaUnreachable(PatrolError):
    pass


class ConfigError(PatrolError, ValueError):
    pass
