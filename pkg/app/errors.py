"""Exception hierarchy shared by the services, the protocol and the CLI."""


class ITDError(Exception):
    """Base class for every error raised by this package."""


class InputError(ITDError, ValueError):
    """Invalid point clouds, weights or parameters."""


class EmptyInputError(InputError):
    pass


class DimensionMismatchError(InputError):
    pass


class NonFiniteError(InputError):
    pass


class InfeasibleWeightsError(InputError):
    """Source and target weights carry different total mass."""


class SolverError(ITDError, RuntimeError):
    """A solver failed numerically or hit its iteration cap."""


class ProtocolError(ITDError):
    pass


class FramingError(ProtocolError):
    """Truncated or oversized frame."""


class UnknownTagError(ProtocolError):
    pass


class ProtocolVersionError(ProtocolError):
    pass


class MalformedRequestError(ProtocolError):
    pass


class UnsupportedOrderError(MalformedRequestError):
    pass


class DuplicateClientError(ProtocolError):
    pass


class ClientTimeoutError(ProtocolError):
    pass


class PhaseError(ProtocolError):
    """Illegal coordinator phase transition."""


class RunAbortedError(ProtocolError):
    """A distributed run was aborted; `report` lists what was received."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report
