class SolError(Exception):
    """Base class of every error raised by the framework."""


class EncodingTooShort(SolError):
    pass


class MalformedEncoding(SolError):
    pass


class InvalidConfig(SolError):
    pass


class UnsupportedAlgorithm(SolError):
    pass


class WrongPin(SolError):
    pass


class StoreCorrupt(SolError):
    pass


class StoreLocked(SolError):
    pass


class SelfCertificateRejected(SolError):
    pass


class SubkeyLimitReached(SolError):
    pass


class CorruptRepository(SolError):
    pass


class OoBRejected(SolError):
    pass


class ProtocolViolation(SolError):
    pass


class NoPriorRelationship(SolError):
    pass


class MissingCalibration(SolError):
    pass


class InvariantViolation(SolError):
    """A simulation run broke one of its own consistency checks."""
