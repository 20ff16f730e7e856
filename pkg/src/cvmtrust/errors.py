"""Exception hierarchy shared by every actor.

Each protocol failure carries a stable ``code`` string. Scenario reports,
audit logs and error frames on the wire all use these codes.
"""


class TrustChainError(Exception):
    code = "Error"

    def __init__(self, message="", *, step=None):
        super().__init__(message or self.code)
        self.step = step


class AuthenticationError(TrustChainError):
    """AEAD tag or signature did not verify."""

    code = "AuthenticationFailed"


class CertificateChainError(TrustChainError):
    code = "ChainOfCertsInvalid"

    def __init__(self, message, index):
        super().__init__(f"link {index}: {message}")
        self.index = index


class PcrIndexError(TrustChainError, IndexError):
    code = "PcrIndexOutOfRange"


class BindingViolation(TrustChainError):
    """State file was sealed for another VM or under another key."""

    code = "BindingViolation"


class RollbackDetected(TrustChainError):
    code = "RollbackDetected"


class MalformedState(TrustChainError):
    code = "MalformedState"


class PlatformUntrusted(TrustChainError):
    code = "PlatformUntrusted"


class InitMeasurementMismatch(TrustChainError):
    code = "InitMeasurementMismatch"


class BootMeasurementMismatch(TrustChainError):
    code = "BootMeasurementMismatch"


class LaunchAborted(TrustChainError):
    code = "LaunchAborted"


class ChannelAuthenticationFailed(LaunchAborted):
    """A sealed frame failed authentication or arrived out of sequence."""

    code = "ChannelAuthenticationFailed"


class ChannelIntegrityError(ChannelAuthenticationFailed):
    """Guest-side view of a dropped or corrupted wrapped command."""


class StageOrderError(TrustChainError, ValueError):
    code = "StageOrderViolation"


class InvalidState(TrustChainError):
    """Operation not allowed in the actor's current state."""

    code = "InvalidState"


class RegistrationError(TrustChainError, ValueError):
    code = "RegistrationRefused"


class ManagerStartupError(TrustChainError):
    code = "ManagerStartupFailed"


class TransportError(TrustChainError):
    """Infrastructure failure (socket, framing); never a verdict."""

    code = "TransportError"


ERRORS_BY_CODE = {
    cls.code: cls
    for cls in (
        TrustChainError,
        AuthenticationError,
        PcrIndexError,
        BindingViolation,
        RollbackDetected,
        MalformedState,
        PlatformUntrusted,
        InitMeasurementMismatch,
        BootMeasurementMismatch,
        LaunchAborted,
        ChannelAuthenticationFailed,
        StageOrderError,
        InvalidState,
        RegistrationError,
        ManagerStartupError,
        TransportError,
    )
}


def error_from_code(code, message="", step=None):
    """Rebuild an exception received as an error frame."""
    cls = ERRORS_BY_CODE.get(code, TrustChainError)
    if cls is CertificateChainError:
        return cls(message, -1)
    return cls(message, step=step)
