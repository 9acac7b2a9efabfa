"""Exception hierarchy shared by every service in the package."""


class QuickinError(Exception):
    """Base class for all domain errors."""


class InvalidInputError(QuickinError, ValueError):
    pass


class NotFoundError(QuickinError, LookupError):
    pass


class ConflictError(QuickinError):
    pass


class StateTransitionError(ConflictError):
    pass


class AuthorizationDenied(QuickinError):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class SchedulingError(QuickinError):
    """Raised when a station is asked to advertise before its interval elapsed."""


class ModeError(QuickinError):
    """Operation not supported by the station's mode."""


class DecryptionError(QuickinError):
    pass


class IntegrityError(DecryptionError):
    """Authenticated decryption failed: ciphertext or wrapped key was altered."""


class EmptyReportError(QuickinError):
    pass


class KAnonymityRefused(QuickinError):
    """Export refused because the smallest anonymity group is below threshold."""

    def __init__(self, report, threshold: int):
        super().__init__(f"k_min {report.k_min} below threshold {threshold}")
        self.report = report
        self.threshold = threshold
