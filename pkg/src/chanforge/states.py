"""Value types shared by channel endpoints and on-chain contract records."""

from __future__ import annotations

from dataclasses import dataclass, field

from . import crypto

# ((alpha_i, Q_i), (alpha_j, Q_j)): coins and energy packets per channel side.
Balances = tuple[tuple[int, int], tuple[int, int]]


def make_balances(alpha_i: int, alpha_j: int, q_i: int = 0, q_j: int = 0) -> Balances:
    return ((alpha_i, q_i), (alpha_j, q_j))


def as_balances(value) -> Balances:
    (a, b), (c, d) = value
    return ((int(a), int(b)), (int(c), int(d)))


def totals(balances: Balances) -> tuple[int, int]:
    return (balances[0][0] + balances[1][0], balances[0][1] + balances[1][1])


def balances_fields(balances: Balances) -> list:
    return [list(balances[0]), list(balances[1])]


def state_fields(scid: str, channel_id: str, i: int, balances: Balances) -> list:
    return ["state", scid, channel_id, i, balances_fields(balances)]


@dataclass(frozen=True)
class VersionedState:
    """One channel version. ``sigs`` holds (sigma_i, sigma_j); b"" marks a missing one."""

    scid: str
    channel_id: str
    i: int
    balances: Balances
    nonce: bytes
    hstate: bytes
    sigs: tuple[bytes, bytes] = (b"", b"")

    def state_fields(self) -> list:
        return state_fields(self.scid, self.channel_id, self.i, self.balances)

    def recompute(self) -> bytes:
        return crypto.hash_state(self.state_fields(), self.nonce)

    def signed_by(self, side: int, vkey: bytes) -> bool:
        sig = self.sigs[side]
        return bool(sig) and crypto.verify(vkey, self.hstate, self.i, sig)

    def is_cosigned(self, vkeys: tuple[bytes, bytes]) -> bool:
        return (
            self.recompute() == self.hstate
            and self.signed_by(0, vkeys[0])
            and self.signed_by(1, vkeys[1])
        )

    def with_sig(self, side: int, sig: bytes) -> "VersionedState":
        sigs = list(self.sigs)
        sigs[side] = sig
        return VersionedState(
            self.scid, self.channel_id, self.i, self.balances, self.nonce, self.hstate, (sigs[0], sigs[1])
        )

    def to_fields(self) -> list:
        return [
            self.scid,
            self.channel_id,
            self.i,
            balances_fields(self.balances),
            self.nonce,
            self.hstate,
            list(self.sigs),
        ]

    def to_json(self) -> dict:
        return {
            "scid": self.scid,
            "channel_id": self.channel_id,
            "i": self.i,
            "balances": balances_fields(self.balances),
            "nonce": self.nonce.hex(),
            "hstate": self.hstate.hex(),
            "sigs": [s.hex() for s in self.sigs],
        }


@dataclass(frozen=True)
class FundingSource:
    kind: str  # "deposit" | "credit-note"
    ref: str  # escrow id or note id
    amount: int
    owner: str  # payout address on the ledger
    quantity: int = 0  # energy packets the side brings into the channel

    def to_fields(self) -> list:
        return [self.kind, self.ref, self.amount, self.owner, self.quantity]

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "ref": self.ref,
            "amount": self.amount,
            "owner": self.owner,
            "quantity": self.quantity,
        }


@dataclass
class DisputeRecord:
    raiser: str
    channel_id: str
    disputed_tx: bytes
    disputed_counter: int
    t_start: int
    t_end: int
    outcome: str = "pending"  # pending | resolved | unresolved
    evidence_counter: int = 0

    def to_fields(self) -> list:
        return [
            self.raiser,
            self.channel_id,
            self.disputed_tx,
            self.disputed_counter,
            self.t_start,
            self.t_end,
            self.outcome,
            self.evidence_counter,
        ]

    def to_json(self) -> dict:
        return {
            "raiser": self.raiser,
            "channel_id": self.channel_id,
            "disputed_tx": self.disputed_tx.hex(),
            "disputed_counter": self.disputed_counter,
            "t_start": self.t_start,
            "t_end": self.t_end,
            "outcome": self.outcome,
            "evidence_counter": self.evidence_counter,
        }


def dispute_payload(scid: str, channel_id: str, disputed_tx: bytes, disputed_counter: int, raiser: str) -> list:
    return ["dispute", scid, channel_id, disputed_tx, disputed_counter, raiser]


@dataclass(frozen=True)
class DisputeTx:
    """T_dispute: which transaction is disputed plus the raiser's best co-signed state."""

    scid: str
    channel_id: str
    raiser: str
    disputed_tx: bytes
    disputed_counter: int
    fallback: VersionedState
    sig: bytes = field(default=b"", repr=False)

    def digest(self) -> bytes:
        return crypto.hash_state(
            dispute_payload(self.scid, self.channel_id, self.disputed_tx, self.disputed_counter, self.raiser),
            self.fallback.nonce,
        )

    def to_fields(self) -> list:
        return [
            self.scid,
            self.channel_id,
            self.raiser,
            self.disputed_tx,
            self.disputed_counter,
            self.fallback.to_fields(),
            self.sig,
        ]


def finalise_digest(state: VersionedState) -> bytes:
    return crypto.hash_state(["finalise", state.scid, state.channel_id, state.i, state.hstate], state.nonce)


@dataclass
class CreditNote:
    """A merchant-signed debit against a participant's credit limit.

    The channel fields are filled in by the contract logic once the note
    funds a channel and again when that channel closes.
    """

    note_id: str
    sid: str
    scid: str
    debtor: str
    amount: int
    merchant_sig: bytes = field(default=b"", repr=False)
    status: str = "issued"  # issued | bound | closed | settled
    channel_id: str = ""
    final_alpha: int = 0
    creditor: str = ""  # payout address owed when the note closes in debt
    obligation: int = 0

    def body(self) -> list:
        return ["credit-note", self.note_id, self.sid, self.scid, self.debtor, self.amount]

    def digest(self) -> bytes:
        return crypto.hash_state(self.body(), crypto.ZERO_NONCE)

    def to_fields(self) -> list:
        return self.body() + [
            self.merchant_sig,
            self.status,
            self.channel_id,
            self.final_alpha,
            self.creditor,
            self.obligation,
        ]

    def to_json(self) -> dict:
        return {
            "note_id": self.note_id,
            "sid": self.sid,
            "scid": self.scid,
            "debtor": self.debtor,
            "amount": self.amount,
            "merchant_sig": self.merchant_sig.hex(),
            "status": self.status,
            "channel_id": self.channel_id,
            "final_alpha": self.final_alpha,
            "creditor": self.creditor,
            "obligation": self.obligation,
        }
