"""Exception hierarchy shared by the ledger, contracts and channel endpoints.

Every error carries a short ``code`` string; traces and reports record the
code rather than the Python class name so that offline tooling does not depend
on import paths.

``Refused`` and its subclasses are the simulator's rendering of the bottom
value: the request is well-formed but forbidden in the current state, and the
target refuses it without touching any state.
"""

from __future__ import annotations


class ChanforgeError(Exception):
    code = "error"


class EncodingError(ChanforgeError, ValueError):
    code = "encoding"


class ConfigInvalid(ChanforgeError):
    code = "config-invalid"


# -- ledger -----------------------------------------------------------------


class LedgerError(ChanforgeError):
    code = "ledger"


class UnknownAccount(LedgerError):
    code = "unknown-account"


class InsufficientFunds(LedgerError):
    code = "insufficient-funds"


class BadSignature(LedgerError):
    code = "bad-signature"


class PrematureClaim(LedgerError):
    code = "premature-claim"


class BadCredential(LedgerError):
    code = "bad-credential"


class AlreadyConsumed(LedgerError):
    code = "already-consumed"


class UnknownEscrow(LedgerError):
    code = "unknown-escrow"


class Unauthorized(LedgerError):
    code = "unauthorized"


class DuplicateId(LedgerError):
    code = "duplicate-id"


class ContractRejected(LedgerError):
    code = "contract-rejected"


# -- network ----------------------------------------------------------------


class NetworkError(ChanforgeError):
    code = "network"


class UnknownParty(NetworkError):
    code = "unknown-party"


class SimulationStarted(NetworkError):
    code = "simulation-started"


# -- protocol ---------------------------------------------------------------


class ProtocolError(ChanforgeError):
    code = "protocol"


class Aborted(ProtocolError):
    code = "abort"


class StaleCounter(ProtocolError):
    code = "stale-counter"


class CounterGap(ProtocolError):
    code = "counter-gap"


class NonConservingBalance(ProtocolError):
    code = "non-conserving-balance"


class TimerElapsed(ProtocolError):
    code = "timer-elapsed"


class UnknownChannel(ProtocolError):
    code = "unknown-channel"


class UnknownTx(ProtocolError):
    code = "unknown-tx"


class CreditLimitExceeded(ProtocolError):
    code = "credit-limit-exceeded"


class RoleViolation(ProtocolError):
    code = "role-violation"


class PrematureSettlement(ProtocolError):
    code = "premature-settlement"


class Refused(ProtocolError):
    """The bottom answer to a forbidden environment request."""

    code = "refused"


class AlreadyOpen(Refused):
    code = "already-open"


class AlreadyClosed(Refused):
    code = "already-closed"


class NotOpen(Refused):
    code = "not-open"


class StaleClose(Refused):
    code = "stale-close"


class ChannelDisputed(Refused):
    code = "channel-disputed"


class DuplicateDispute(Refused):
    code = "duplicate-dispute"


class DisputeLimit(Refused):
    code = "dispute-limit"


class DoubleFinalise(Refused):
    code = "double-finalise"

