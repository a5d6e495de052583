"""Merchant and entity smart contracts and the on-chain half of the channel logic.

Records are passive: the ledger stores signed versions and asks each record
type, through ``check_commit``, whether the attached signatures authorise the
transition. ``Contracts`` holds the rules that a real contract would execute
(channel open and close, the challenge window, disputes and their timers) and
only ever mutates state through ``Ledger.commit_contract`` and the ledger's
escrow operations. It keeps no state of its own.
"""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field

from . import crypto
from .errors import (
    AlreadyClosed,
    AlreadyConsumed,
    AlreadyOpen,
    BadSignature,
    ChannelDisputed,
    ContractRejected,
    DisputeLimit,
    DoubleFinalise,
    DuplicateDispute,
    NotOpen,
    PrematureClaim,
    StaleClose,
    StaleCounter,
    TimerElapsed,
    Unauthorized,
    UnknownChannel,
    UnknownTx,
)
from .ledger import Ledger, SignatureSet
from .states import (
    Balances,
    CreditNote,
    DisputeRecord,
    DisputeTx,
    FundingSource,
    VersionedState,
    balances_fields,
    finalise_digest,
)


@dataclass(frozen=True)
class DisputePolicy:
    grey_at: int = 3
    black_at: int = 5
    open_limit: int = 5  # refuse new channels in an ESC once this many disputes were raised


def _tag(prefix: str, parts: list) -> str:
    return prefix + "-" + hashlib.sha256(crypto.canonical_encode(parts)).hexdigest()[:16]


def make_sid(merchant: str, participant: str, k: int) -> str:
    return _tag("sid", ["sid", merchant, participant, k])


def make_scid(a: str, b: str, n: int) -> str:
    lo, hi = sorted((a, b))
    return _tag("scid", ["SC", lo, hi, n])


def make_channel_id(scid: str, k: int) -> str:
    return _tag("ch", ["CH", scid, k])


def make_note_id(sid: str, k: int) -> str:
    return _tag("note", ["note", sid, k])


def _require_signers(sigs: SignatureSet, expected: dict[str, bytes], what: str) -> None:
    if len(sigs.entries) != len(expected) or set(sigs.signers()) != set(expected):
        raise BadSignature(f"{what}: signers {sorted(sigs.signers())} != {sorted(expected)}")
    for signer, vkey in expected.items():
        if sigs.vkey_of(signer) != vkey:
            raise BadSignature(f"{what}: wrong key for {signer}")


def sign_record(record, action: str, signers: list[tuple[str, crypto.KeyPair]]) -> SignatureSet:
    """Signatures over a record's own digest, counter = record version."""
    dgst = record.digest()
    entries = tuple(
        (party, key.verification_key, crypto.sign(key, dgst, record.version)) for party, key in signers
    )
    return SignatureSet(action, dgst, record.version, entries)


# -- MSC ----------------------------------------------------------------------


@dataclass
class MscLink:
    """One ESC reference inside an MSC: (sid, scid, P, (alpha, Q) pairs, sigma_P)."""

    sid: str
    scid: str
    participant: str
    balances: Balances
    sig: bytes = b""

    def to_fields(self) -> list:
        return [self.sid, self.scid, self.participant, balances_fields(self.balances), self.sig]

    def to_json(self) -> dict:
        return {
            "sid": self.sid,
            "scid": self.scid,
            "participant": self.participant,
            "balances": balances_fields(self.balances),
            "sig": self.sig.hex(),
        }


@dataclass
class MscRecord:
    sid: str
    merchant: str
    participant: str
    merchant_vk: bytes
    participant_vk: bytes
    use_cns: bool = False
    collateral_ref: str = ""
    collateral_amount: int = 0
    collateral_unlock: int = 0
    collateral_sig: bytes = b""
    credit_limit: int = 0
    # (outstanding credit extended by the merchant, collateral posted by the participant)
    current_balances: tuple[int, int] = (0, 0)
    # (coins kept by the merchant, coins returned to the participant) at period settlement
    final_balance: tuple[int, int] | None = None
    # (alpha, Q) finals of the most recent channel closed in a linked ESC
    channel_finals: Balances | None = None
    links: list[MscLink] = field(default_factory=list)
    debit_ledger: list[CreditNote] = field(default_factory=list)
    dispute_list: list[DisputeRecord] = field(default_factory=list)
    unrecovered_debt: int = 0
    mirror_scid: str = ""
    version: int = 0
    sig_set: list[bytes] = field(default_factory=list)

    @property
    def record_id(self) -> str:
        return self.sid

    @property
    def final_quantity(self) -> tuple[int, int] | None:
        if self.channel_finals is None:
            return None
        return (self.channel_finals[0][1], self.channel_finals[1][1])

    def outstanding(self) -> int:
        return sum(n.amount for n in self.debit_ledger if n.status != "settled")

    def note(self, note_id: str) -> CreditNote | None:
        for n in self.debit_ledger:
            if n.note_id == note_id:
                return n
        return None

    def to_fields(self) -> list:
        return [
            "msc",
            self.sid,
            self.merchant,
            self.participant,
            self.merchant_vk,
            self.participant_vk,
            self.use_cns,
            self.collateral_ref,
            self.collateral_amount,
            self.collateral_unlock,
            self.collateral_sig,
            self.credit_limit,
            list(self.current_balances),
            [] if self.final_balance is None else list(self.final_balance),
            [] if self.channel_finals is None else balances_fields(self.channel_finals),
            [link.to_fields() for link in self.links],
            [n.to_fields() for n in self.debit_ledger],
            [d.to_fields() for d in self.dispute_list],
            self.unrecovered_debt,
            self.mirror_scid,
            self.version,
        ]

    def digest(self) -> bytes:
        return crypto.hash_state(self.to_fields(), crypto.ZERO_NONCE)

    def to_json(self) -> dict:
        return {
            "type": "msc",
            "sid": self.sid,
            "parties": [self.merchant, self.participant],
            "vkeys": [self.merchant_vk.hex(), self.participant_vk.hex()],
            "use_cns": self.use_cns,
            "collateral_ref": self.collateral_ref or None,
            "collateral_amount": self.collateral_amount,
            "collateral_unlock": self.collateral_unlock,
            "credit_limit": self.credit_limit,
            "current_balances": list(self.current_balances),
            "final_balance": None if self.final_balance is None else list(self.final_balance),
            "final_pairs": None if self.channel_finals is None else balances_fields(self.channel_finals),
            "final_quantity": None if self.final_quantity is None else list(self.final_quantity),
            "links": [link.to_json() for link in self.links],
            "debit_ledger": [n.to_json() for n in self.debit_ledger],
            "dispute_list": [d.to_json() for d in self.dispute_list],
            "unrecovered_debt": self.unrecovered_debt,
            "version": self.version,
            "sig_set": [s.hex() for s in self.sig_set],
        }

    def check_commit(self, prev: "MscRecord | None", sigs: SignatureSet, ledger: Ledger) -> None:
        if prev is None:
            if sigs.action != "create":
                raise ContractRejected(f"{self.sid}: first version must be a create")
            self._check_own_digest(sigs)
            _require_signers(
                sigs, {self.merchant: self.merchant_vk, self.participant: self.participant_vk}, self.sid
            )
        else:
            for name in ("merchant", "participant", "merchant_vk", "participant_vk"):
                if getattr(self, name) != getattr(prev, name):
                    raise ContractRejected(f"{self.sid}: {name} is immutable")
            if prev.final_balance is not None and self.final_balance != prev.final_balance:
                raise ContractRejected(f"{self.sid}: final balance already set")
            if sigs.action == "link":
                # whichever record party just linked an ESC signs for it
                self._check_own_digest(sigs)
                linker = self.links[-1].participant if len(self.links) > len(prev.links) else ""
                keys = {self.merchant: self.merchant_vk, self.participant: self.participant_vk}
                if linker not in keys:
                    raise ContractRejected(f"{self.sid}: link by a non-party")
                _require_signers(sigs, {linker: keys[linker]}, self.sid)
            elif sigs.action in ("collateral", "note", "recalc", "settle"):
                self._check_own_digest(sigs)
                _require_signers(sigs, {self.merchant: self.merchant_vk}, self.sid)
                known = {n.note_id for n in prev.debit_ledger}
                for n in self.debit_ledger:
                    if n.note_id not in known and not crypto.verify(self.merchant_vk, n.digest(), 0, n.merchant_sig):
                        raise BadSignature(f"{self.sid}: note {n.note_id} not signed by merchant")
            elif sigs.action == "mirror":
                self._check_mirror(sigs, ledger)
            else:
                raise ContractRejected(f"{self.sid}: unknown action {sigs.action!r}")
        if self.outstanding() > self.credit_limit:
            raise ContractRejected(f"{self.sid}: notes exceed credit limit")

    def _check_own_digest(self, sigs: SignatureSet) -> None:
        if sigs.digest != self.digest() or sigs.counter != self.version:
            raise BadSignature(f"{self.sid}: signatures do not cover this version")

    def _check_mirror(self, sigs: SignatureSet, ledger: Ledger) -> None:
        if not ledger.has_contract(self.mirror_scid):
            raise ContractRejected(f"{self.sid}: mirror of unknown ESC {self.mirror_scid}")
        esc = ledger.read_contract(self.mirror_scid)
        if self.sid not in esc.sids:
            raise ContractRejected(f"{self.sid}: ESC {esc.scid} is not linked to this MSC")
        keys = dict(zip(esc.parties, esc.vkeys))
        if not sigs.entries:
            raise BadSignature(f"{self.sid}: empty mirror authorisation")
        for signer, vkey, _ in sigs.entries:
            if keys.get(signer) != vkey:
                raise BadSignature(f"{self.sid}: mirror signer {signer} not in {esc.scid}")
        if all(entry[2] != sigs.digest for entry in esc.tx_set):
            raise ContractRejected(f"{self.sid}: mirrored transaction not recorded in {esc.scid}")


# -- ESC ----------------------------------------------------------------------


@dataclass
class ChannelEntry:
    channel_id: str
    t_delta: int
    open_height: int
    funding: tuple[FundingSource, FundingSource]
    initial: Balances
    status: str = "open"  # open | disputed | closing | closed
    posted: VersionedState | None = None
    deadline: int = 0
    dispute_index: int = -1
    final: Balances | None = None
    trigger: str = ""

    @property
    def expiry(self) -> int:
        return self.open_height + self.t_delta

    def to_fields(self) -> list:
        return [
            self.channel_id,
            self.t_delta,
            self.open_height,
            [f.to_fields() for f in self.funding],
            balances_fields(self.initial),
            self.status,
            [] if self.posted is None else self.posted.to_fields(),
            self.deadline,
            self.dispute_index + 1,
            [] if self.final is None else balances_fields(self.final),
            self.trigger,
        ]

    def to_json(self) -> dict:
        return {
            "channel_id": self.channel_id,
            "t_delta": self.t_delta,
            "open_height": self.open_height,
            "funding": [f.to_json() for f in self.funding],
            "initial": balances_fields(self.initial),
            "status": self.status,
            "posted_counter": None if self.posted is None else self.posted.i,
            "deadline": self.deadline,
            "dispute_index": self.dispute_index,
            "final": None if self.final is None else balances_fields(self.final),
            "trigger": self.trigger,
        }


@dataclass
class EscRecord:
    scid: str
    n: int
    parties: tuple[str, str]
    vkeys: tuple[bytes, bytes]
    sids: tuple[str, str]
    channel_set: list[str] = field(default_factory=list)
    tx_set: list[tuple[str, str, bytes]] = field(default_factory=list)  # (kind, channel id, digest)
    balances: Balances = ((0, 0), (0, 0))
    final_balances: Balances | None = None
    dispute_list: list[DisputeRecord] = field(default_factory=list)
    channels: dict[str, ChannelEntry] = field(default_factory=dict)
    list_status: dict[str, str] = field(default_factory=dict)
    version: int = 0
    sig_set: list[bytes] = field(default_factory=list)

    @property
    def record_id(self) -> str:
        return self.scid

    def side_of(self, party: str) -> int:
        try:
            return self.parties.index(party)
        except ValueError:
            raise Unauthorized(f"{party} is not a party of {self.scid}") from None

    def entry(self, channel_id: str) -> ChannelEntry:
        try:
            return self.channels[channel_id]
        except KeyError:
            raise UnknownChannel(channel_id) from None

    def open_channels(self) -> list[ChannelEntry]:
        return [e for e in self.channels.values() if e.status != "closed"]

    def to_fields(self) -> list:
        return [
            "esc",
            self.scid,
            self.n,
            list(self.parties),
            list(self.vkeys),
            list(self.sids),
            list(self.channel_set),
            [list(t) for t in self.tx_set],
            balances_fields(self.balances),
            [] if self.final_balances is None else balances_fields(self.final_balances),
            [d.to_fields() for d in self.dispute_list],
            [self.channels[c].to_fields() for c in self.channel_set],
            sorted([k, v] for k, v in self.list_status.items()),
            self.version,
        ]

    def digest(self) -> bytes:
        return crypto.hash_state(self.to_fields(), crypto.ZERO_NONCE)

    def to_json(self) -> dict:
        return {
            "type": "esc",
            "scid": self.scid,
            "n": self.n,
            "parties": list(self.parties),
            "vkeys": [v.hex() for v in self.vkeys],
            "sids": list(self.sids),
            "channel_set": list(self.channel_set),
            "tx_set": [[k, c, d.hex()] for k, c, d in self.tx_set],
            "balances": balances_fields(self.balances),
            "final_balances": None if self.final_balances is None else balances_fields(self.final_balances),
            "dispute_list": [d.to_json() for d in self.dispute_list],
            "channels": {c: self.channels[c].to_json() for c in self.channel_set},
            "list_status": dict(sorted(self.list_status.items())),
            "version": self.version,
            "sig_set": [s.hex() for s in self.sig_set],
        }

    def check_commit(self, prev: "EscRecord | None", sigs: SignatureSet, ledger: Ledger) -> None:
        keys = dict(zip(self.parties, self.vkeys))
        if prev is None:
            if sigs.action != "create":
                raise ContractRejected(f"{self.scid}: first version must be a create")
            if sigs.digest != self.digest() or sigs.counter != 0:
                raise BadSignature(f"{self.scid}: signatures do not cover this version")
            _require_signers(sigs, keys, self.scid)
            return
        for name in ("n", "parties", "vkeys", "sids"):
            if getattr(self, name) != getattr(prev, name):
                raise ContractRejected(f"{self.scid}: {name} is immutable")
        if self.channel_set[: len(prev.channel_set)] != prev.channel_set:
            raise ContractRejected(f"{self.scid}: channel set is append-only")
        if self.tx_set[: len(prev.tx_set)] != prev.tx_set:
            raise ContractRejected(f"{self.scid}: transaction set is append-only")
        added = self.tx_set[len(prev.tx_set) :]
        if all(d != sigs.digest for _, _, d in added):
            raise ContractRejected(f"{self.scid}: authorising transaction not recorded")
        if sigs.action == "dispute":
            raiser = self.dispute_list[-1].raiser if self.dispute_list else ""
            _require_signers(sigs, {raiser: keys.get(raiser, b"")}, self.scid)
        elif sigs.action in ("open", "post", "evidence", "close"):
            _require_signers(sigs, keys, self.scid)
        else:
            raise ContractRejected(f"{self.scid}: unknown action {sigs.action!r}")
        for ch in self.channel_set:
            kinds = {k for k, c, _ in self.tx_set if c == ch}
            if "open" not in kinds or (self.channels[ch].status == "closed" and "close" not in kinds):
                raise ContractRejected(f"{self.scid}: channel {ch} lacks open/close transactions")
        if self.final_balances is not None and self.open_channels():
            raise ContractRejected(f"{self.scid}: final balances while a channel is open")


def _state_auth(action: str, esc: EscRecord, state: VersionedState) -> SignatureSet:
    return SignatureSet(
        action,
        state.hstate,
        state.i,
        tuple((esc.parties[k], esc.vkeys[k], state.sigs[k]) for k in (0, 1)),
    )


# -- on-chain logic -----------------------------------------------------------


class Contracts:
    def __init__(self, ledger: Ledger, policy: DisputePolicy | None = None):
        self.ledger = ledger
        self.policy = policy or DisputePolicy()

    def emit(self, kind: str, details: dict) -> None:
        self.ledger.emit(kind, details)

    # reads

    def read_msc(self, sid: str) -> MscRecord:
        if not self.ledger.has_contract(sid):
            raise UnknownChannel(f"no MSC {sid}")
        return self.ledger.read_contract(sid)

    def read_esc(self, scid: str) -> EscRecord:
        if not self.ledger.has_contract(scid):
            raise UnknownChannel(f"no ESC {scid}")
        return self.ledger.read_contract(scid)

    def escs(self) -> list[EscRecord]:
        return [
            versions[-1].record
            for versions in self.ledger.contracts.values()
            if isinstance(versions[-1].record, EscRecord)
        ]

    def mscs(self) -> list[MscRecord]:
        return [
            versions[-1].record
            for versions in self.ledger.contracts.values()
            if isinstance(versions[-1].record, MscRecord)
        ]

    def esc_count(self, a: str, b: str) -> int:
        pair = tuple(sorted((a, b)))
        return sum(1 for e in self.escs() if tuple(sorted(e.parties)) == pair)

    def msc_count(self, merchant: str, participant: str) -> int:
        return sum(1 for m in self.mscs() if (m.merchant, m.participant) == (merchant, participant))

    def disputes_raised(self, party: str) -> int:
        return sum(1 for e in self.escs() for d in e.dispute_list if d.raiser == party)

    def blacklisted(self, party: str) -> bool:
        return any(e.list_status.get(party) == "black" for e in self.escs())

    def list_status(self, esc: EscRecord) -> dict[str, str]:
        counts: dict[str, int] = {}
        for d in esc.dispute_list:
            counts[d.raiser] = counts.get(d.raiser, 0) + 1
        status = {}
        for party, n in counts.items():
            if n >= self.policy.black_at:
                status[party] = "black"
            elif n >= self.policy.grey_at:
                status[party] = "grey"
        return status

    # MSC

    def create_msc(self, record: MscRecord, sigs: SignatureSet) -> MscRecord:
        self.ledger.commit_contract(record, sigs)
        return self.read_msc(record.sid)

    def update_msc(self, record: MscRecord, action: str, signers: list[tuple[str, crypto.KeyPair]]) -> MscRecord:
        """Commit ``record`` (a modified copy of the latest version) as the next version."""
        record.version = self.ledger.history(record.sid)[-1].record.version + 1
        self.ledger.commit_contract(record, sign_record(record, action, signers))
        return self.read_msc(record.sid)

    # ESC

    def create_esc(self, record: EscRecord, sigs: SignatureSet) -> EscRecord:
        for party in record.parties:
            if self.blacklisted(party):
                raise DisputeLimit(f"{party} is blacklisted")
        if record.scid != make_scid(record.parties[0], record.parties[1], record.n):
            raise ContractRejected(f"{record.scid} does not match SC(pair, {record.n})")
        for k, sid in enumerate(record.sids):
            msc = self.read_msc(sid)
            if record.parties[k] not in (msc.merchant, msc.participant):
                raise ContractRejected(f"{record.parties[k]} is not backed by {sid}")
        self.ledger.commit_contract(record, sigs)
        return self.read_esc(record.scid)

    def link_esc(self, sid: str, scid: str, party: str, key: crypto.KeyPair) -> MscRecord:
        """Write the (sid, scid, P, pairs, sigma_P) reference into ``party``'s MSC."""
        msc = self.read_msc(sid)
        esc = self.read_esc(scid)
        balances: Balances = ((0, 0), (0, 0))
        link_digest = crypto.hash_state(["link", sid, scid, party, balances_fields(balances)], crypto.ZERO_NONCE)
        msc.links.append(MscLink(sid, scid, party, balances, crypto.sign(key, link_digest, 0)))
        if party not in esc.parties:
            raise Unauthorized(f"{party} is not in {scid}")
        return self.update_msc(msc, "link", [(party, key)])

    def _commit_esc(self, esc: EscRecord, auth: SignatureSet) -> EscRecord:
        esc.version = self.ledger.history(esc.scid)[-1].record.version + 1
        esc.list_status = self.list_status(esc)
        self.ledger.commit_contract(esc, auth)
        return self.read_esc(esc.scid)

    def _mirror(self, esc: EscRecord, auth: SignatureSet, sides_fn=None) -> None:
        """Propagate an ESC change into the MSC of each party."""
        mirror_auth = SignatureSet("mirror", auth.digest, auth.counter, auth.entries)
        for sid in dict.fromkeys(esc.sids):
            msc = self.read_msc(sid)
            msc.mirror_scid = esc.scid
            keep = [d for d in msc.dispute_list if d.channel_id not in esc.channels]
            msc.dispute_list = keep + copy.deepcopy(esc.dispute_list)
            for k in (0, 1):
                if esc.sids[k] != sid:
                    continue
                for link in msc.links:
                    if link.scid == esc.scid and link.participant == esc.parties[k]:
                        link.balances = esc.balances
                        sig = auth.entries[0][2]
                        for signer, _, s in auth.entries:
                            if signer == esc.parties[k]:
                                sig = s
                        link.sig = sig
                if sides_fn is not None:
                    sides_fn(msc, k)
            msc.version = self.ledger.history(sid)[-1].record.version + 1
            self.ledger.commit_contract(msc, mirror_auth)

    # channels

    def open_channel(
        self,
        scid: str,
        state0: VersionedState,
        funding: tuple[FundingSource, FundingSource],
        t_delta: int,
    ) -> EscRecord:
        esc = self.read_esc(scid)
        ch = state0.channel_id
        if ch in esc.channel_set or esc.open_channels():
            raise AlreadyOpen(f"{scid} already has channel {ch if ch in esc.channel_set else 'open'}")
        if len(esc.dispute_list) >= self.policy.open_limit:
            raise DisputeLimit(f"{scid} has {len(esc.dispute_list)} disputes")
        for party in esc.parties:
            if self.blacklisted(party):
                raise DisputeLimit(f"{party} is blacklisted")
        if ch != make_channel_id(scid, len(esc.channel_set)) or state0.scid != scid or state0.i != 0:
            raise ContractRejected(f"{ch} is not the next channel of {scid}")
        if t_delta < 1:
            raise ContractRejected("t_delta must be at least one block")
        if state0.recompute() != state0.hstate or not state0.is_cosigned(esc.vkeys):
            raise BadSignature(f"{ch}: opening state not co-signed")
        used = {f.ref for e in esc.channels.values() for f in e.funding}
        for k in (0, 1):
            f = funding[k]
            if state0.balances[k] != (f.amount, f.quantity):
                raise ContractRejected(f"{ch}: side {k} balance does not match its funding")
            if f.ref in used:
                raise AlreadyConsumed(f.ref)
            if f.kind == "deposit":
                escrow = self.ledger.escrow(f.ref)
                if escrow.consumed:
                    raise AlreadyConsumed(f.ref)
                if escrow.beneficiary != scid or escrow.owner != f.owner or escrow.amount != f.amount:
                    raise ContractRejected(f"{ch}: escrow {f.ref} does not fund this channel")
            elif f.kind == "credit-note":
                note = self.read_msc(esc.sids[k]).note(f.ref)
                if (
                    note is None
                    or note.status != "issued"
                    or note.scid != scid
                    or note.amount != f.amount
                    or note.debtor != esc.parties[k]
                ):
                    raise ContractRejected(f"{ch}: note {f.ref} cannot fund side {k}")
            else:
                raise ContractRejected(f"unknown funding kind {f.kind!r}")
        height = self.ledger.height
        esc.channels[ch] = ChannelEntry(ch, t_delta, height, funding, state0.balances)
        esc.channel_set.append(ch)
        esc.tx_set.append(("open", ch, state0.hstate))
        esc.balances = state0.balances
        esc.final_balances = None
        auth = _state_auth("open", esc, state0)
        esc = self._commit_esc(esc, auth)

        def bind(msc: MscRecord, k: int) -> None:
            if funding[k].kind == "credit-note":
                note = msc.note(funding[k].ref)
                note.status = "bound"
                note.channel_id = ch

        self._mirror(esc, auth, bind)
        self.emit("channel-open", {"scid": scid, "channel_id": ch, "height": height, "expiry": height + t_delta})
        return esc

    def apply_channel_result(self, scid: str, tx) -> EscRecord:
        """Submit a co-signed finalise transaction (a ``channel.FinaliseTx``)."""
        return self.cooperative_close(scid, tx.state.channel_id, tx.state, tx.sigs)

    def record_dispute(self, scid: str, dtx: DisputeTx) -> EscRecord:
        return self.raise_dispute(scid, dtx)

    def peek_esc(self, scid: str) -> EscRecord | None:
        """The stored latest version, without a copy. Callers must not mutate it."""
        history = self.ledger.contracts.get(scid)
        return history[-1].record if history else None

    def reclaim_deposit(self, scid: str, escrow_id: str, owner: str) -> int:
        """Return a deposit that never ended up funding a channel, once its lock elapsed."""
        esc = self.read_esc(scid)
        escrow = self.ledger.escrow(escrow_id)
        if escrow.owner != owner:
            raise Unauthorized(f"{owner} does not own {escrow_id}")
        if any(f.ref == escrow_id for e in esc.channels.values() for f in e.funding):
            raise Unauthorized(f"{escrow_id} funds a channel of {scid}")
        if self.ledger.height < escrow.unlock_height:
            raise PrematureClaim(f"{escrow_id} locked until {escrow.unlock_height}")
        return self.ledger.refund_escrow(escrow_id, authorized_by=scid)

    def cooperative_close(
        self, scid: str, channel_id: str, state: VersionedState, finalise_sigs: tuple[bytes, bytes]
    ) -> EscRecord:
        esc = self.read_esc(scid)
        entry = esc.entry(channel_id)
        if entry.status == "closed":
            raise DoubleFinalise(f"{channel_id} already finalised")
        if state.channel_id != channel_id or state.scid != scid:
            raise UnknownChannel(f"state belongs to {state.channel_id}")
        if not state.is_cosigned(esc.vkeys):
            raise BadSignature(f"{channel_id}: closing state not co-signed")
        if entry.posted is not None and state.i < entry.posted.i:
            raise StaleClose(f"{channel_id}: i={state.i} older than posted i={entry.posted.i}")
        fd = finalise_digest(state)
        for k in (0, 1):
            if not crypto.verify(esc.vkeys[k], fd, state.i, finalise_sigs[k]):
                raise BadSignature(f"{channel_id}: finalise not signed by side {k}")
        auth = SignatureSet(
            "close", fd, state.i, tuple((esc.parties[k], esc.vkeys[k], finalise_sigs[k]) for k in (0, 1))
        )
        return self._finalise(esc, entry, state, "trade-complete", auth, fd)

    def post_state(self, scid: str, channel_id: str, state: VersionedState, trigger: str = "timer-elapsed") -> EscRecord:
        """Unilateral close: start (or answer) the t_delta challenge window."""
        esc = self.read_esc(scid)
        entry = esc.entry(channel_id)
        if entry.status == "closed":
            raise AlreadyClosed(f"{channel_id} is closed")
        if entry.status == "disputed":
            return self.submit_evidence(scid, channel_id, state)
        if state.channel_id != channel_id or not state.is_cosigned(esc.vkeys):
            raise BadSignature(f"{channel_id}: posted state not co-signed")
        if entry.posted is not None and state.i <= entry.posted.i:
            raise StaleClose(f"{channel_id}: i={state.i} not newer than posted i={entry.posted.i}")
        starting = entry.status == "open"
        entry.posted = state
        if starting:
            entry.status = "closing"
            entry.deadline = self.ledger.height + entry.t_delta
            entry.trigger = trigger
        esc.tx_set.append(("post", channel_id, state.hstate))
        esc = self._commit_esc(esc, _state_auth("post", esc, state))
        if starting:
            deadline = esc.channels[channel_id].deadline
            self.ledger.watch(deadline, lambda h, s=scid, c=channel_id, d=deadline: self._close_deadline(s, c, d))
        self.emit("channel-post", {"scid": scid, "channel_id": channel_id, "i": state.i})
        return esc

    def raise_dispute(self, scid: str, dtx: DisputeTx) -> EscRecord:
        esc = self.read_esc(scid)
        entry = esc.entry(dtx.channel_id)
        if entry.status == "closed":
            raise AlreadyClosed(f"{dtx.channel_id} is closed")
        if entry.status == "disputed":
            raise DuplicateDispute(f"{dtx.channel_id} already disputed")
        if entry.status != "open":
            raise NotOpen(f"{dtx.channel_id} is {entry.status}")
        k = esc.side_of(dtx.raiser)
        if not crypto.verify(esc.vkeys[k], dtx.digest(), dtx.disputed_counter, dtx.sig):
            raise BadSignature(f"{dtx.channel_id}: dispute not signed by {dtx.raiser}")
        fb = dtx.fallback
        if fb.channel_id != dtx.channel_id or not fb.is_cosigned(esc.vkeys):
            raise BadSignature(f"{dtx.channel_id}: fallback state not co-signed")
        names_fallback = dtx.disputed_tx == fb.hstate and dtx.disputed_counter == fb.i
        if not names_fallback and dtx.disputed_counter != fb.i + 1:
            raise UnknownTx(f"{dtx.channel_id}: cannot place disputed transaction")
        height = self.ledger.height
        record = DisputeRecord(
            dtx.raiser, dtx.channel_id, dtx.disputed_tx, dtx.disputed_counter, height, height + entry.t_delta
        )
        esc.dispute_list.append(record)
        entry.dispute_index = len(esc.dispute_list) - 1
        entry.status = "disputed"
        if entry.posted is None or fb.i > entry.posted.i:
            entry.posted = fb
        esc.tx_set.append(("dispute", dtx.channel_id, dtx.digest()))
        auth = SignatureSet("dispute", dtx.digest(), dtx.disputed_counter, ((dtx.raiser, esc.vkeys[k], dtx.sig),))
        esc = self._commit_esc(esc, auth)
        self._mirror(esc, auth)
        index = entry.dispute_index
        self.ledger.watch(
            record.t_end, lambda h, s=scid, c=dtx.channel_id, i=index: self._dispute_deadline(s, c, i)
        )
        self.emit(
            "dispute-raised",
            {"scid": scid, "channel_id": dtx.channel_id, "raiser": dtx.raiser, "t_end": record.t_end},
        )
        return esc

    def submit_evidence(self, scid: str, channel_id: str, state: VersionedState) -> EscRecord:
        esc = self.read_esc(scid)
        entry = esc.entry(channel_id)
        if entry.status == "closed":
            raise AlreadyClosed(f"{channel_id} is closed")
        if entry.status != "disputed":
            raise NotOpen(f"{channel_id} has no open dispute")
        dispute = esc.dispute_list[entry.dispute_index]
        if self.ledger.height >= dispute.t_end:
            raise TimerElapsed(f"{channel_id}: dispute timer ended at {dispute.t_end}")
        if state.channel_id != channel_id or not state.is_cosigned(esc.vkeys):
            raise BadSignature(f"{channel_id}: evidence not co-signed")
        if state.i < dispute.disputed_counter:
            raise StaleCounter(f"{channel_id}: evidence i={state.i} < disputed {dispute.disputed_counter}")
        dispute.outcome = "resolved"
        dispute.evidence_counter = state.i
        entry.status = "open"
        if entry.posted is None or state.i > entry.posted.i:
            entry.posted = state
        esc.tx_set.append(("evidence", channel_id, state.hstate))
        auth = _state_auth("evidence", esc, state)
        esc = self._commit_esc(esc, auth)
        self._mirror(esc, auth)
        self.emit("dispute-resolved", {"scid": scid, "channel_id": channel_id, "evidence_counter": state.i})
        return esc

    def _dispute_deadline(self, scid: str, channel_id: str, index: int) -> None:
        esc = self.read_esc(scid)
        entry = esc.channels[channel_id]
        if entry.status != "disputed" or entry.dispute_index != index:
            return
        dispute = esc.dispute_list[index]
        dispute.outcome = "unresolved"
        dispute.evidence_counter = entry.posted.i
        self.emit("dispute-unresolved", {"scid": scid, "channel_id": channel_id})
        state = entry.posted
        self._finalise(esc, entry, state, "dispute-unresolved", _state_auth("close", esc, state), state.hstate)

    def _close_deadline(self, scid: str, channel_id: str, deadline: int) -> None:
        esc = self.read_esc(scid)
        entry = esc.channels[channel_id]
        if entry.status != "closing" or entry.deadline != deadline:
            return
        state = entry.posted
        self._finalise(esc, entry, state, entry.trigger, _state_auth("close", esc, state), state.hstate)

    def _finalise(
        self,
        esc: EscRecord,
        entry: ChannelEntry,
        state: VersionedState,
        trigger: str,
        auth: SignatureSet,
        close_digest: bytes,
    ) -> EscRecord:
        """Write the final (alpha, Q) pairs, release deposits and record note results."""
        ch = entry.channel_id
        if entry.dispute_index >= 0:
            dispute = esc.dispute_list[entry.dispute_index]
            if dispute.outcome == "pending":
                dispute.outcome = "resolved" if state.i >= dispute.disputed_counter else "unresolved"
                dispute.evidence_counter = state.i
        payouts, escrow_ids, obligations = settlement_split(entry.funding, state.balances)
        entry.status = "closed"
        entry.final = state.balances
        entry.posted = state
        entry.trigger = trigger
        esc.tx_set.append(("close", ch, close_digest))
        esc.balances = state.balances
        if not esc.open_channels():
            esc.final_balances = state.balances
        esc = self._commit_esc(esc, auth)
        if escrow_ids:
            self.ledger.settle_escrows(escrow_ids, payouts, authorized_by=esc.scid)

        def record_result(msc: MscRecord, k: int) -> None:
            msc.channel_finals = state.balances
            if entry.funding[k].kind == "credit-note":
                note = msc.note(entry.funding[k].ref)
                note.status = "closed"
                note.final_alpha = state.balances[k][0]
                note.obligation = obligations[k]
                note.creditor = entry.funding[1 - k].owner if obligations[k] else ""

        self._mirror(esc, auth, record_result)
        self.emit(
            "channel-close",
            {
                "scid": esc.scid,
                "channel_id": ch,
                "i": state.i,
                "trigger": trigger,
                "final": balances_fields(state.balances),
                "payouts": dict(sorted(payouts.items())),
                "obligations": list(obligations),
            },
        )
        return esc


def settlement_split(
    funding: tuple[FundingSource, FundingSource], balances: Balances
) -> tuple[dict[str, int], list[str], tuple[int, int]]:
    """Split a closing state into escrow payouts and credit-note obligations.

    Deposit escrows pay out immediately. A note-funded side that ended in
    credit is paid from the counterparty's deposit when there is one; a
    note-funded side that ended in debt owes the difference, which its
    merchant settles from collateral at period end.
    """
    payouts: dict[str, int] = {}
    escrow_ids: list[str] = []
    obligations = [0, 0]

    def pay(addr: str, amount: int) -> None:
        payouts[addr] = payouts.get(addr, 0) + amount

    for k in (0, 1):
        if funding[k].kind == "deposit":
            escrow_ids.append(funding[k].ref)
    for k in (0, 1):
        f, other = funding[k], funding[1 - k]
        alpha = balances[k][0]
        delta = alpha - f.amount
        if f.kind == "deposit":
            if other.kind == "deposit":
                pay(f.owner, alpha)
            elif balances[1 - k][0] - other.amount >= 0:
                # the note side won: its gain comes out of this deposit
                pay(f.owner, alpha)
            else:
                # the note side lost: full refund now, the merchant covers the rest
                pay(f.owner, f.amount)
        else:
            if delta < 0:
                obligations[k] = -delta
            elif other.kind == "deposit":
                pay(f.owner, delta)
    return payouts, escrow_ids, (obligations[0], obligations[1])
