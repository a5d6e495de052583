"""Credit-note system: credit review, collateral, note issuance and period settlement.

A participant applies with opaque supporting documents. The merchant checks
the applicant against a blacklist and the dispute registry and either
rejects the application (the applicant may still fund channels with deposits)
or signs an agreement naming a credit limit and the collateral it requires.
The collateral sits in a time-locked escrow payable to the merchant; at
period end the merchant draws what the participant's closed notes owe and
passes it on to the counterparties, and the rest goes back to the participant.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from fractions import Fraction

from . import crypto
from .contracts import Contracts, make_note_id
from .errors import ConfigInvalid, CreditLimitExceeded, PrematureSettlement, Unauthorized
from .ledger import Escrow, Ledger
from .states import CreditNote

REASONS = ("blacklisted", "excessive-disputes", "insufficient-liability")


@dataclass
class Policy:
    blacklist: set[str] = field(default_factory=set)
    margin: Fraction = Fraction(1)
    dispute_threshold: int = 3
    collateral_window: int = 50  # blocks until the merchant may claim collateral
    period_length: int = 100  # blocks per billing period
    agreement_validity: int = 1000
    verify_collateral_sig: bool = True

    def __post_init__(self) -> None:
        self.margin = Fraction(str(self.margin)) if isinstance(self.margin, float) else Fraction(self.margin)
        if self.margin < 0 or self.dispute_threshold < 1 or self.collateral_window < 0:
            raise ConfigInvalid("CNS policy values out of range")
        self.blacklist = set(self.blacklist)

    @classmethod
    def from_json(cls, data: dict) -> "Policy":
        known = {
            "blacklist",
            "margin",
            "dispute_threshold",
            "collateral_window",
            "period_length",
            "agreement_validity",
            "verify_collateral_sig",
        }
        unknown = set(data) - known
        if unknown:
            raise ConfigInvalid(f"unknown policy keys: {sorted(unknown)}")
        values = dict(data)
        if "margin" in values:
            values["margin"] = Fraction(str(values["margin"]))
        return cls(**values)


def required_collateral(credit_limit: int, margin: Fraction) -> int:
    return math.ceil(Fraction(credit_limit) * Fraction(margin))


@dataclass(frozen=True)
class CreditApplication:
    applicant: str
    merchant: str
    supporting_docs: bytes = field(repr=False)
    declared_liability: int
    requested_limit: int

    def to_fields(self) -> list:
        return [self.applicant, self.merchant, self.supporting_docs, self.declared_liability, self.requested_limit]


@dataclass(frozen=True)
class CreditAgreement:
    applicant: str
    merchant: str
    credit_limit: int
    required_collateral: int
    valid_until: int
    collateral_window: int
    merchant_sig: bytes = field(default=b"", repr=False)

    def body(self) -> list:
        return [
            "credit-agreement",
            self.applicant,
            self.merchant,
            self.credit_limit,
            self.required_collateral,
            self.valid_until,
            self.collateral_window,
        ]

    def digest(self) -> bytes:
        return crypto.hash_state(self.body(), crypto.ZERO_NONCE)

    def verify(self, merchant_vk: bytes) -> bool:
        return crypto.verify(merchant_vk, self.digest(), 0, self.merchant_sig)

    def to_fields(self) -> list:
        return self.body() + [self.merchant_sig]


@dataclass(frozen=True)
class Rejection:
    applicant: str
    reason: str

    def to_fields(self) -> list:
        return ["rejection", self.applicant, self.reason]


def review_application(
    merchant_key: crypto.KeyPair,
    app: CreditApplication,
    policy: Policy,
    dispute_count: int,
    height: int,
) -> CreditAgreement | Rejection:
    if app.applicant in policy.blacklist:
        return Rejection(app.applicant, "blacklisted")
    if dispute_count >= policy.dispute_threshold:
        return Rejection(app.applicant, "excessive-disputes")
    collateral = required_collateral(app.requested_limit, policy.margin)
    if app.declared_liability < collateral:
        return Rejection(app.applicant, "insufficient-liability")
    unsigned = CreditAgreement(
        app.applicant,
        app.merchant,
        app.requested_limit,
        collateral,
        height + policy.agreement_validity,
        policy.collateral_window,
    )
    sig = crypto.sign(merchant_key, unsigned.digest(), 0)
    return CreditAgreement(*unsigned.body()[1:], merchant_sig=sig)


def collateral_digest(escrow_id: str, amount: int, unlock_height: int, credential_digest: bytes) -> bytes:
    return crypto.hash_state(
        ["collateral", escrow_id, amount, unlock_height, credential_digest], crypto.ZERO_NONCE
    )


def deposit_collateral(
    agreement: CreditAgreement,
    ledger: Ledger,
    owner_address: str,
    merchant_address: str,
    rng: random.Random,
) -> tuple[Escrow, crypto.TimelockCredential]:
    """Lock the agreed collateral; the credential goes to the merchant afterwards."""
    unlock = ledger.height + agreement.collateral_window
    credential = crypto.new_credential(rng, unlock, agreement.merchant)
    escrow = ledger.lock_escrow(
        owner_address, agreement.required_collateral, unlock, merchant_address, credential.credential_digest
    )
    return escrow, credential


def check_collateral(
    ledger: Ledger,
    agreement: CreditAgreement,
    escrow_id: str,
    claim_secret: bytes,
    merchant_address: str,
) -> Escrow:
    """Merchant-side check of a collateral credential before signing it."""
    escrow = ledger.escrow(escrow_id)
    if (
        escrow.consumed
        or escrow.beneficiary != merchant_address
        or escrow.amount < agreement.required_collateral
        or crypto.digest(claim_secret) != escrow.credential_digest
    ):
        raise Unauthorized(f"collateral {escrow_id} does not match the agreement")
    return escrow


def issue_credit_note(
    contracts: Contracts,
    sid: str,
    merchant_key: crypto.KeyPair,
    scid: str,
    amount: int,
) -> CreditNote:
    msc = contracts.read_msc(sid)
    if not msc.use_cns:
        raise CreditLimitExceeded(f"{sid} has no credit agreement")
    if amount < 0 or msc.outstanding() + amount > msc.credit_limit:
        raise CreditLimitExceeded(
            f"{sid}: outstanding {msc.outstanding()} + {amount} > limit {msc.credit_limit}"
        )
    escrow = contracts.ledger.escrow(msc.collateral_ref) if msc.collateral_ref else None
    if escrow is None or escrow.consumed:
        raise CreditLimitExceeded(f"{sid}: no live collateral")
    note = CreditNote(make_note_id(sid, len(msc.debit_ledger)), sid, scid, msc.participant, amount)
    note.merchant_sig = crypto.sign(merchant_key, note.digest(), 0)
    msc.debit_ledger.append(note)
    msc.current_balances = (msc.outstanding(), msc.collateral_amount)
    contracts.update_msc(msc, "note", [(msc.merchant, merchant_key)])
    return note


def recalculate(contracts: Contracts, sid: str, merchant_key: crypto.KeyPair) -> bool:
    """Merchant countersigns the coin amounts of notes whose channels closed."""
    msc = contracts.read_msc(sid)
    closed = [n for n in msc.debit_ledger if n.status == "closed"]
    if not closed:
        return False
    for n in closed:
        n.status = "recalculated"
    owed = sum(n.obligation for n in msc.debit_ledger if n.status == "recalculated")
    msc.current_balances = (owed, msc.collateral_amount)
    contracts.update_msc(msc, "recalc", [(msc.merchant, merchant_key)])
    return True


@dataclass
class SettlementReport:
    period_end: int
    height: int
    net: dict[str, int] = field(default_factory=dict)  # signed coin delta per party id
    payouts: list[tuple[str, str, int]] = field(default_factory=list)  # (from, to, amount)
    collateral_draws: list[tuple[str, int]] = field(default_factory=list)  # (escrow id, amount)
    refunds: list[tuple[str, int]] = field(default_factory=list)
    unrecovered: list[tuple[str, int]] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "period_end": self.period_end,
            "height": self.height,
            "net": dict(sorted(self.net.items())),
            "payouts": [list(p) for p in self.payouts],
            "collateral_draws": [list(d) for d in self.collateral_draws],
            "refunds": [list(r) for r in self.refunds],
            "unrecovered": [list(u) for u in self.unrecovered],
        }


def settle_period(
    contracts: Contracts,
    merchant_key: crypto.KeyPair,
    merchant_address: str,
    sids: list[str],
    claim_secrets: dict[str, bytes],
    period_end: int,
    policy: Policy,
) -> SettlementReport:
    """Clear every closed note of the period against its debtor's collateral.

    Raises ``PrematureSettlement`` without touching anything if the period
    has not ended, a note's channel is still open, or collateral that has to
    be drawn is still time-locked.
    """
    ledger = contracts.ledger
    height = ledger.height
    if height < period_end:
        raise PrematureSettlement(f"period ends at {period_end}, height {height}")
    records = [contracts.read_msc(sid) for sid in sids]
    records = [m for m in records if m.use_cns and m.final_balance is None]
    for msc in records:
        if any(n.status == "bound" for n in msc.debit_ledger):
            raise PrematureSettlement(f"{msc.sid}: a note's channel is still open")
        if msc.collateral_ref:
            escrow = ledger.escrow(msc.collateral_ref)
            if not escrow.consumed and height < escrow.unlock_height:
                raise PrematureSettlement(f"{msc.sid}: collateral locked until {escrow.unlock_height}")
    report = SettlementReport(period_end, height)
    for msc in records:
        debtor = ledger.escrow(msc.collateral_ref).owner if msc.collateral_ref else msc.participant
        notes = [n for n in msc.debit_ledger if n.status != "settled"]
        debt = sum(n.obligation for n in notes)
        collateral = 0
        draw = 0
        if msc.collateral_ref and not ledger.escrow(msc.collateral_ref).consumed:
            escrow = ledger.escrow(msc.collateral_ref)
            collateral = escrow.amount
            draw = min(debt, collateral)
            ledger.claim_escrow(escrow.id, claim_secrets[escrow.id], amount=draw)
            report.collateral_draws.append((escrow.id, draw))
            report.refunds.append((escrow.id, collateral - draw))
        remaining = draw
        for n in notes:
            paid = min(n.obligation, remaining)
            remaining -= paid
            if paid:
                ledger.signed_transfer(merchant_key, merchant_address, n.creditor, paid)
                report.payouts.append((msc.merchant, n.creditor, paid))
                report.net[n.creditor] = report.net.get(n.creditor, 0) + paid
            n.status = "settled"
        residual = debt - draw
        report.net[debtor] = report.net.get(debtor, 0) - draw
        if residual:
            report.unrecovered.append((debtor, residual))
            policy.blacklist.add(debtor)
        msc.unrecovered_debt += residual
        msc.final_balance = (draw, collateral - draw)
        msc.current_balances = (0, 0)
        contracts.update_msc(msc, "settle", [(msc.merchant, merchant_key)])
    contracts.emit("settlement", report.to_json())
    return report
