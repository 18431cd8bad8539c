"""Exception hierarchy shared by every capsule subsystem."""

from __future__ import annotations


class CapsuleError(Exception):
    """Root of all framework errors."""


# -- policy -----------------------------------------------------------------


class PolicyError(CapsuleError):
    pass


class PolicySyntaxError(PolicyError):
    def __init__(self, message: str, line: int = 0, column: int = 0):
        super().__init__(f"{message} (line {line}, column {column})")
        self.line = line
        self.column = column


class DelegationNestingError(PolicySyntaxError):
    """A ``can say`` appeared inside another ``can say``."""


class PolicyTypeError(PolicyError):
    pass


class SignatureError(PolicyError):
    def __init__(self, message: str, index: int | None = None):
        super().__init__(message if index is None else f"{message} (assertion {index})")
        self.index = index


class ResolutionError(PolicyError):
    """The query or the database cannot be evaluated (not a denial)."""


class StateUpdateError(PolicyError):
    pass


class SplitError(PolicyError):
    pass


# -- trust module -----------------------------------------------------------


class TrustModuleError(CapsuleError):
    pass


class UnknownAttestationKey(TrustModuleError):
    pass


class CounterPersistenceError(TrustModuleError):
    """Fatal: the capsule must refuse service."""


# -- base layer / protocols -------------------------------------------------


class ProtocolError(CapsuleError):
    """A hosting-protocol run was aborted."""


class AttestationFailure(ProtocolError):
    pass


class HostingDenied(ProtocolError):
    pass


class TamperError(CapsuleError):
    """Authenticated data failed its integrity check."""


class ReplayError(CapsuleError):
    """State or message older than the trust-module counter binding."""


class FramingError(CapsuleError):
    pass


class RequestRejected(CapsuleError):
    """Invocation request failed authentication before policy resolution."""


class UnknownOperation(CapsuleError):
    pass


class DataLayerError(CapsuleError):
    pass


# -- host hub ---------------------------------------------------------------


class HubError(CapsuleError):
    pass


class ConnectionRefused(HubError):
    pass


class HubTimeout(HubError):
    pass


class SecureChannelError(CapsuleError):
    pass


class TimeVerificationError(CapsuleError):
    pass


# -- transformations --------------------------------------------------------


class TransformationError(CapsuleError):
    pass


class DuplicateContribution(TransformationError):
    pass


class CrowdMismatch(TransformationError):
    pass


class BelowThreshold(TransformationError):
    """Release refused: fewer distinct contributors than the threshold."""
