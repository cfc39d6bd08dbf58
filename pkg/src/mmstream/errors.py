"""Exception hierarchy shared across the package."""


class MMStreamError(Exception):
    """Base class for every error raised by mmstream."""


# wire
class WireError(MMStreamError):
    pass


class InvalidTopic(WireError, ValueError):
    pass


class OversizeTopic(InvalidTopic):
    pass


class InvalidSample(WireError, ValueError):
    pass


class DimMismatch(InvalidSample):
    pass


class Truncated(WireError):
    pass


class BadVersion(WireError):
    pass


class SlowSubscriber(MMStreamError):
    pass


class BrokerUnreachable(MMStreamError, ConnectionError):
    pass


# node
class NodeSpecError(MMStreamError, ValueError):
    pass


class AdapterFailure(MMStreamError):
    pass


class UnknownSource(MMStreamError, KeyError):
    pass


# timesync
class NegativeDelay(MMStreamError, ValueError):
    pass


class EmptyInput(MMStreamError, ValueError):
    pass


# sched
class Infeasible(MMStreamError, ValueError):
    pass


class StrideExceedsWindow(MMStreamError, ValueError):
    pass


# storage
class SchemaMismatch(MMStreamError, ValueError):
    pass


class DiskFull(MMStreamError, OSError):
    pass


class EncoderExited(MMStreamError):
    pass


# cli
class ConfigInvalid(MMStreamError, ValueError):
    pass


class PortBusy(MMStreamError, OSError):
    pass
