"""Exception hierarchy shared by all simulator modules."""


class QkdError(Exception):
    """Base class for simulator failures that a caller is expected to handle."""

    status = "error"


class ProtocolError(QkdError):
    status = "protocol-error"


class ProtocolTimeout(ProtocolError):
    status = "timeout"


class MacFailure(ProtocolError):
    status = "mac-failure"


class EavesdropSuspected(QkdError):
    status = "eavesdrop-suspected"

    def __init__(self, qber, threshold):
        super().__init__(f"QBER estimate {qber:.4f} exceeds abort threshold {threshold:.4f}")
        self.qber = qber
        self.threshold = threshold


class InsufficientMaterial(QkdError):
    status = "insufficient-material"

    def __init__(self, shortfall, message=None):
        super().__init__(message or f"insufficient key material (shortfall {shortfall} bits)")
        self.shortfall = shortfall


class ReconciliationFailure(QkdError):
    status = "reconciliation-failure"


class SyncError(QkdError):
    status = "sync-error"


class NoRoute(QkdError):
    status = "no-route"


class UntrustedPath(QkdError):
    status = "untrusted-path"


class NegotiationFailure(QkdError):
    status = "negotiation-failure"


class AuthFailure(QkdError):
    status = "auth-failure"


class RecordError(QkdError):
    """Record-layer rejection: bad MAC or out-of-order sequence number."""

    status = "record-error"
