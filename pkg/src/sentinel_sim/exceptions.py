"""Exception hierarchy shared by every sentinel_sim module."""


class SentinelError(Exception):
    """Base class for all package errors."""


class ConfigError(SentinelError, ValueError):
    """Raised for invalid configuration (CLI exit code 2)."""


class EmptyPlatform(SentinelError, ValueError):
    pass


class DanglingRegion(SentinelError, ValueError):
    pass


class InvalidConfig(ConfigError):
    pass


class ShapeMismatch(SentinelError, ValueError):
    pass


class EmptyHistory(SentinelError, ValueError):
    pass


class EmptyTrainingSet(SentinelError, ValueError):
    pass


class DivergedLoss(SentinelError, FloatingPointError):
    pass


class UntrainedModel(SentinelError, RuntimeError):
    pass


class TooFewPoints(SentinelError, ValueError):
    pass


class InsufficientHistory(SentinelError, ValueError):
    pass


class Unfitted(SentinelError, RuntimeError):
    pass


class Infeasible(SentinelError):
    """The pre-scheduling LP cannot route all forecast demand.

    ``fraction`` carries the maximal schedulable fraction per category so the
    caller can hand the remainder to post-scheduling.
    """

    def __init__(self, message, fraction=None):
        super().__init__(message)
        self.fraction = fraction


class StaleStrategy(SentinelError, RuntimeError):
    pass


class UnknownRequest(SentinelError, KeyError):
    pass


class UnknownServer(SentinelError, KeyError):
    pass


class StreamMismatch(SentinelError, ValueError):
    pass


class ConservationViolation(SentinelError, RuntimeError):
    """placed + dropped differs from arrivals at some tick."""


class TickFailure(SentinelError, RuntimeError):
    """Wraps an error raised while simulating one tick; ``tick`` says which."""

    def __init__(self, tick, scheduler, cause):
        super().__init__(f"{scheduler} failed at tick {tick}: {cause!r}")
        self.tick = tick
        self.scheduler = scheduler
