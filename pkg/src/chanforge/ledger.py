"""Ideal ledger: accounts, block clock, time-locked escrows and contract storage.

Time is measured in blocks only; ``height`` doubles as the ledger timestamp.
Coins are non-negative integers and there are no fees, so the sum of account
balances plus unconsumed escrow amounts always equals the minted supply.
"""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Protocol

from . import crypto
from .errors import (
    AlreadyConsumed,
    BadCredential,
    BadSignature,
    ContractRejected,
    DuplicateId,
    InsufficientFunds,
    PrematureClaim,
    Unauthorized,
    UnknownAccount,
    UnknownEscrow,
)

Emit = Callable[[str, dict], None]


def _no_emit(kind: str, details: dict) -> None:
    pass


@dataclass
class Escrow:
    id: str
    owner: str
    amount: int
    unlock_height: int
    beneficiary: str
    credential_digest: bytes
    created_height: int
    consumed: str | None = None  # "claim" | "refund" | "settle"

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "owner": self.owner,
            "amount": self.amount,
            "unlock_height": self.unlock_height,
            "beneficiary": self.beneficiary,
            "credential_digest": self.credential_digest.hex(),
            "created_height": self.created_height,
            "consumed": self.consumed,
        }


@dataclass(frozen=True)
class Receipt:
    sender: str
    receiver: str
    amount: int
    seq: int
    height: int


@dataclass(frozen=True)
class SignatureSet:
    """Signatures authorising one contract version.

    All entries sign the same ``(digest, counter)`` pair. ``action`` names the
    transition so the record type can decide which signers it requires.
    """

    action: str
    digest: bytes
    counter: int
    entries: tuple[tuple[str, bytes, bytes], ...]  # (signer, vkey, sig)

    def signers(self) -> list[str]:
        return [signer for signer, _, _ in self.entries]

    def vkey_of(self, signer: str) -> bytes | None:
        for s, vk, _ in self.entries:
            if s == signer:
                return vk
        return None

    def verify_all(self) -> bool:
        return bool(self.entries) and all(
            crypto.verify(vk, self.digest, self.counter, sig) for _, vk, sig in self.entries
        )

    def to_json(self) -> dict:
        return {
            "action": self.action,
            "digest": self.digest.hex(),
            "counter": self.counter,
            "entries": [[s, vk.hex(), sig.hex()] for s, vk, sig in self.entries],
        }


class ContractRecord(Protocol):
    record_id: str
    version: int
    sig_set: list[bytes]

    def to_fields(self) -> list: ...

    def to_json(self) -> dict: ...

    def check_commit(self, prev: Any, sigs: SignatureSet, ledger: "Ledger") -> None: ...


@dataclass
class ContractVersion:
    record: Any
    sigs: SignatureSet
    height: int


class Ledger:
    def __init__(self, emit: Emit | None = None):
        self.height = 0
        self.supply = 0
        self.balances: dict[str, int] = {}
        self.vkeys: dict[str, bytes] = {}
        self.seq: dict[str, int] = {}
        self.escrows: dict[str, Escrow] = {}
        self._escrow_counter: dict[str, int] = {}
        self.contracts: dict[str, list[ContractVersion]] = {}
        self._watchers: dict[int, list[Callable[[int], None]]] = {}
        self.emit: Emit = emit or _no_emit

    # -- accounts ---------------------------------------------------------

    def open_account(self, address: str, vkey: bytes, balance: int = 0) -> None:
        if address in self.balances:
            raise DuplicateId(f"account {address} exists")
        if balance < 0:
            raise ValueError("negative genesis balance")
        self.balances[address] = balance
        self.vkeys[address] = vkey
        self.seq[address] = 0
        self.supply += balance
        self.emit("ledger", {"op": "mint", "amount": balance, "balances": {address: balance}})

    def balance(self, address: str) -> int:
        try:
            return self.balances[address]
        except KeyError:
            raise UnknownAccount(address) from None

    def _require(self, address: str) -> None:
        if address not in self.balances:
            raise UnknownAccount(address)

    # -- clock ------------------------------------------------------------

    def advance(self, blocks: int = 1) -> int:
        if blocks < 1:
            raise ValueError("advance needs at least one block")
        for _ in range(blocks):
            self.height += 1
            for callback in self._watchers.pop(self.height, []):
                callback(self.height)
        return self.height

    def watch(self, height: int, callback: Callable[[int], None]) -> None:
        """Run ``callback`` once the chain reaches ``height``."""
        target = max(height, self.height + 1)
        self._watchers.setdefault(target, []).append(callback)

    # -- transfers --------------------------------------------------------

    def transfer_digest(self, sender: str, receiver: str, amount: int) -> tuple[bytes, int]:
        seq = self.seq.get(sender, 0)
        return crypto.hash_state(["transfer", sender, receiver, amount, seq], crypto.ZERO_NONCE), seq

    def transfer(self, sender: str, receiver: str, amount: int, sig: bytes) -> Receipt:
        self._require(sender)
        self._require(receiver)
        dgst, seq = self.transfer_digest(sender, receiver, amount)
        if not crypto.verify(self.vkeys[sender], dgst, seq, sig):
            raise BadSignature(f"transfer from {sender}")
        if self.balances[sender] < amount:
            raise InsufficientFunds(f"{sender} holds {self.balances[sender]} < {amount}")
        self.balances[sender] -= amount
        self.balances[receiver] += amount
        self.seq[sender] = seq + 1
        self.emit(
            "ledger",
            {
                "op": "transfer",
                "amount": amount,
                "balances": {sender: self.balances[sender], receiver: self.balances[receiver]},
            },
        )
        return Receipt(sender, receiver, amount, seq, self.height)

    def signed_transfer(self, key: crypto.KeyPair, sender: str, receiver: str, amount: int) -> Receipt:
        dgst, seq = self.transfer_digest(sender, receiver, amount)
        return self.transfer(sender, receiver, amount, crypto.sign(key, dgst, seq))

    # -- escrows ----------------------------------------------------------

    def lock_escrow(
        self,
        owner: str,
        amount: int,
        unlock_height: int,
        beneficiary: str,
        credential_digest: bytes = b"",
    ) -> Escrow:
        self._require(owner)
        if amount < 0:
            raise ValueError("negative escrow")
        if self.balances[owner] < amount:
            raise InsufficientFunds(f"{owner} holds {self.balances[owner]} < {amount}")
        n = self._escrow_counter.get(owner, 0)
        self._escrow_counter[owner] = n + 1
        escrow_id = "esc-" + hashlib.sha256(crypto.canonical_encode([owner, n])).hexdigest()[:16]
        escrow = Escrow(
            escrow_id, owner, amount, unlock_height, beneficiary, bytes(credential_digest), self.height
        )
        self.balances[owner] -= amount
        self.escrows[escrow_id] = escrow
        self.emit(
            "ledger",
            {"op": "lock", "balances": {owner: self.balances[owner]}, "escrows": {escrow_id: escrow.to_json()}},
        )
        return escrow

    def escrow(self, escrow_id: str) -> Escrow:
        try:
            return self.escrows[escrow_id]
        except KeyError:
            raise UnknownEscrow(escrow_id) from None

    def claim_escrow(self, escrow_id: str, claim_secret: bytes, amount: int | None = None) -> int:
        """Beneficiary takes ``amount`` (default: all); any remainder returns to the owner."""
        escrow = self.escrow(escrow_id)
        if escrow.consumed:
            raise AlreadyConsumed(escrow_id)
        if self.height < escrow.unlock_height:
            raise PrematureClaim(f"{escrow_id} unlocks at {escrow.unlock_height}, height {self.height}")
        if crypto.digest(claim_secret) != escrow.credential_digest:
            raise BadCredential(escrow_id)
        self._require(escrow.beneficiary)
        take = escrow.amount if amount is None else amount
        if not 0 <= take <= escrow.amount:
            raise ValueError(f"claim {take} outside escrow amount {escrow.amount}")
        escrow.consumed = "claim"
        self.balances[escrow.beneficiary] += take
        self.balances[escrow.owner] += escrow.amount - take
        self.emit(
            "ledger",
            {
                "op": "claim",
                "amount": take,
                "balances": {
                    escrow.beneficiary: self.balances[escrow.beneficiary],
                    escrow.owner: self.balances[escrow.owner],
                },
                "escrows": {escrow_id: escrow.to_json()},
            },
        )
        return take

    def refund_escrow(self, escrow_id: str, authorized_by: str) -> int:
        escrow = self.escrow(escrow_id)
        if escrow.consumed:
            raise AlreadyConsumed(escrow_id)
        if authorized_by != escrow.beneficiary:
            raise Unauthorized(f"{authorized_by} cannot release {escrow_id}")
        escrow.consumed = "refund"
        self.balances[escrow.owner] += escrow.amount
        self.emit(
            "ledger",
            {
                "op": "refund",
                "balances": {escrow.owner: self.balances[escrow.owner]},
                "escrows": {escrow_id: escrow.to_json()},
            },
        )
        return escrow.amount

    def settle_escrows(self, escrow_ids: Iterable[str], payouts: dict[str, int], authorized_by: str) -> None:
        """Distribute several escrows held for ``authorized_by`` in one step."""
        escrows = [self.escrow(i) for i in escrow_ids]
        for e in escrows:
            if e.consumed:
                raise AlreadyConsumed(e.id)
            if e.beneficiary != authorized_by:
                raise Unauthorized(f"{authorized_by} cannot settle {e.id}")
        if len({e.id for e in escrows}) != len(escrows):
            raise ValueError("escrow listed twice")
        if any(v < 0 for v in payouts.values()):
            raise ValueError("negative payout")
        if sum(payouts.values()) != sum(e.amount for e in escrows):
            raise ValueError("payouts do not match escrowed total")
        for addr in payouts:
            self._require(addr)
        for e in escrows:
            e.consumed = "settle"
        for addr, amount in payouts.items():
            self.balances[addr] += amount
        self.emit(
            "ledger",
            {
                "op": "settle",
                "balances": {a: self.balances[a] for a in payouts},
                "escrows": {e.id: e.to_json() for e in escrows},
            },
        )

    # -- contracts --------------------------------------------------------

    def commit_contract(self, record: ContractRecord, sigs: SignatureSet) -> str:
        history = self.contracts.get(record.record_id)
        prev = history[-1].record if history else None
        if prev is None and record.version != 0:
            raise ContractRejected(f"{record.record_id}: first version must be 0")
        if prev is not None and record.version == 0:
            raise DuplicateId(record.record_id)
        if prev is not None and record.version != prev.version + 1:
            raise ContractRejected(f"{record.record_id}: version {record.version} after {prev.version}")
        if not sigs.verify_all():
            raise BadSignature(f"{record.record_id} v{record.version}")
        record.check_commit(prev, sigs, self)
        stored = copy.deepcopy(record)
        stored.sig_set = list(stored.sig_set) + [sig for _, _, sig in sigs.entries]
        record.sig_set = list(stored.sig_set)
        self.contracts.setdefault(record.record_id, []).append(ContractVersion(stored, sigs, self.height))
        self.emit(
            "contract",
            {
                "id": record.record_id,
                "version": record.version,
                "action": sigs.action,
                "record_digest": crypto.digest(crypto.canonical_encode(stored.to_fields())).hex(),
                "record": stored.to_json(),
                "sigs": sigs.to_json(),
            },
        )
        return record.record_id

    def read_contract(self, record_id: str) -> Any:
        history = self.contracts.get(record_id)
        if not history:
            raise KeyError(record_id)
        return copy.deepcopy(history[-1].record)

    def has_contract(self, record_id: str) -> bool:
        return record_id in self.contracts

    def history(self, record_id: str) -> list[ContractVersion]:
        return list(self.contracts.get(record_id, []))

    # -- reporting --------------------------------------------------------

    def escrowed_total(self) -> int:
        return sum(e.amount for e in self.escrows.values() if not e.consumed)

    def conservation_delta(self) -> int:
        return sum(self.balances.values()) + self.escrowed_total() - self.supply

    def dump(self) -> dict:
        return {
            "height": self.height,
            "supply": self.supply,
            "accounts": {
                a: {"balance": b, "vkey": self.vkeys[a].hex(), "seq": self.seq[a]}
                for a, b in self.balances.items()
            },
            "escrows": {i: e.to_json() for i, e in self.escrows.items()},
            "contracts": {
                cid: [
                    {"height": v.height, "record": v.record.to_json(), "sigs": v.sigs.to_json()}
                    for v in versions
                ]
                for cid, versions in self.contracts.items()
            },
        }
