"""Exception hierarchy shared by all feddice modules."""


class FedDiceError(Exception):
    pass


# netflow
class EmptyWindow(FedDiceError):
    pass


class InsufficientData(FedDiceError):
    pass


class MissingFamily(FedDiceError):
    pass


class SchemaError(FedDiceError):
    pass


class IoError(FedDiceError, OSError):
    pass


# models / federation
class ShapeError(FedDiceError, ValueError):
    pass


class ArchError(FedDiceError, ValueError):
    pass


class EmptyInput(FedDiceError, ValueError):
    pass


# metrics
class LengthMismatch(FedDiceError, ValueError):
    pass


class EmptyMatrix(FedDiceError, ValueError):
    pass


class MetricsUnavailable(FedDiceError):
    pass


class TooFewSamples(FedDiceError, ValueError):
    pass


# policy
class PolicyError(FedDiceError):
    pass


class UnknownModel(PolicyError, KeyError):
    pass


class DuplicateId(PolicyError):
    pass


class UnknownId(PolicyError, KeyError):
    pass


# sim
class UnknownDevice(FedDiceError, KeyError):
    pass
