"""Party-local state channel endpoint.

One ``ChannelState`` lives at each end of a channel. It builds and checks the
'update' / 'update-success' exchange, assembles dispute and finalise
transactions, and refuses requests that the channel's phase forbids. It never
talks to the ledger; the owning party submits what the endpoint produces.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

from . import crypto
from .errors import (
    AlreadyClosed,
    BadSignature,
    ChannelDisputed,
    CounterGap,
    DuplicateDispute,
    NonConservingBalance,
    NotOpen,
    Refused,
    StaleCounter,
    TimerElapsed,
    UnknownChannel,
)
from .messages import Message
from .states import (
    Balances,
    DisputeRecord,
    DisputeTx,
    FundingSource,
    VersionedState,
    as_balances,
    dispute_payload,
    finalise_digest,
    state_fields,
    totals,
)

# (old balances, new balances, proposing side) -> raises on a forbidden move
Validator = Callable[[Balances, Balances, int], None]


class Phase(str, Enum):
    INIT = "init"
    ACTIVE = "active"
    DISPUTED = "disputed"
    CLOSED = "closed"


@dataclass(frozen=True)
class FinaliseTx:
    state: VersionedState
    sigs: tuple[bytes, bytes]
    trigger: str


def check_conserving(old: Balances, new: Balances) -> None:
    for pair in new:
        if pair[0] < 0 or pair[1] < 0:
            raise NonConservingBalance(f"negative balance in {new}")
    if totals(old) != totals(new):
        raise NonConservingBalance(f"totals {totals(new)} != {totals(old)}")


@dataclass
class ChannelState:
    channel_id: str
    scid: str
    side: int
    parties: tuple[str, str]
    vkeys: tuple[bytes, bytes]
    key: crypto.KeyPair = field(repr=False)
    nonces: crypto.NonceSource = field(repr=False)
    t_delta: int
    funding: tuple[FundingSource, FundingSource]
    phase: Phase = Phase.INIT
    latest: VersionedState | None = None
    pending: VersionedState | None = None
    pending_round: int = 0
    open_height: int = 0
    dispute: DisputeRecord | None = None
    history: list[VersionedState] = field(default_factory=list)
    validators: list[Validator] = field(default_factory=list)

    @property
    def peer_side(self) -> int:
        return 1 - self.side

    @property
    def expiry(self) -> int:
        return self.open_height + self.t_delta

    @property
    def max_cosigned(self) -> int:
        return self.latest.i if self.latest is not None else -1

    # -- building states --------------------------------------------------

    def make_state(self, i: int, balances: Balances) -> VersionedState:
        nonce = self.nonces.fresh()
        hstate = crypto.hash_state(state_fields(self.scid, self.channel_id, i, balances), nonce)
        sigs = [b"", b""]
        sigs[self.side] = crypto.sign(self.key, hstate, i)
        return VersionedState(self.scid, self.channel_id, i, balances, nonce, hstate, (sigs[0], sigs[1]))

    def countersign(self, state: VersionedState) -> VersionedState:
        if state.recompute() != state.hstate or not state.signed_by(self.peer_side, self.vkeys[self.peer_side]):
            raise BadSignature(f"{self.channel_id}: peer signature does not verify")
        return state.with_sig(self.side, crypto.sign(self.key, state.hstate, state.i))

    def activate(self, state0: VersionedState, height: int) -> None:
        if not state0.is_cosigned(self.vkeys):
            raise BadSignature(f"{self.channel_id}: opening state not co-signed")
        self.latest = state0
        self.history = [state0]
        self.open_height = height
        self.phase = Phase.ACTIVE

    def _adopt(self, state: VersionedState) -> None:
        self.latest = state
        self.history.append(state)
        if self.pending is not None and self.pending.i <= state.i:
            self.pending = None

    def adopt(self, state: VersionedState) -> bool:
        """Take any valid co-signed state newer than ours (evidence, close data)."""
        if state.channel_id != self.channel_id or state.scid != self.scid:
            return False
        if self.latest is not None and state.i <= self.latest.i:
            return False
        if not state.is_cosigned(self.vkeys):
            return False
        self._adopt(state)
        return True

    # -- updates ----------------------------------------------------------

    def _check_live(self, height: int) -> None:
        if self.phase == Phase.DISPUTED:
            raise ChannelDisputed(f"{self.channel_id} is in a dispute")
        if self.phase != Phase.ACTIVE:
            raise NotOpen(f"{self.channel_id} is {self.phase.value}")
        if height >= self.expiry:
            raise TimerElapsed(f"{self.channel_id} expired at {self.expiry}")

    def _validate(self, new: Balances, proposer: int) -> None:
        check_conserving(self.latest.balances, new)
        for check in self.validators:
            check(self.latest.balances, new, proposer)

    def propose_update(self, new_balances: Balances, height: int, round_: int = 0) -> Message:
        self._check_live(height)
        if self.pending is not None:
            raise Refused(f"{self.channel_id}: proposal i={self.pending.i} still outstanding")
        new_balances = as_balances(new_balances)
        self._validate(new_balances, self.side)
        state = self.make_state(self.latest.i + 1, new_balances)
        self.pending = state
        self.pending_round = round_
        return update_message(state, self.side, self.t_delta)

    def accept_update(self, msg: Message, height: int) -> Message:
        """Check a peer proposal in a fixed order and co-sign it."""
        if msg.session != self.channel_id or msg.get("scid") != self.scid:
            raise UnknownChannel(f"{msg.session} is not {self.channel_id}")
        if self.phase == Phase.DISPUTED:
            raise ChannelDisputed(f"{self.channel_id} is in a dispute")
        if self.phase != Phase.ACTIVE:
            raise NotOpen(f"{self.channel_id} is {self.phase.value}")
        i = msg.counter
        if not isinstance(i, int) or i <= self.latest.i:
            raise StaleCounter(f"{self.channel_id}: i={i} <= latest {self.latest.i}")
        try:
            balances = as_balances(msg["balances"])
            sigs = [b"", b""]
            sigs[self.peer_side] = msg["sig"]
            state = VersionedState(
                self.scid, self.channel_id, i, balances, msg["nonce"], msg["hstate"], (sigs[0], sigs[1])
            )
            consistent = msg["state"] == state_fields(self.scid, self.channel_id, i, balances)
            recomputed = state.recompute()
        except (KeyError, TypeError, ValueError):
            raise BadSignature(f"{self.channel_id}: malformed update") from None
        if not consistent or recomputed != state.hstate:
            raise BadSignature(f"{self.channel_id}: hstate does not match state")
        if not state.signed_by(self.peer_side, self.vkeys[self.peer_side]):
            raise BadSignature(f"{self.channel_id}: proposer signature does not verify")
        if i != self.latest.i + 1:
            raise CounterGap(f"{self.channel_id}: i={i} after {self.latest.i}")
        if height >= self.expiry:
            raise TimerElapsed(f"{self.channel_id} expired at {self.expiry}")
        self._validate(balances, self.peer_side)
        if self.pending is not None and self.pending.i == i:
            # both proposed i at once: the lower party id keeps its proposal
            if self.parties[self.side] < self.parties[self.peer_side]:
                raise StaleCounter(f"{self.channel_id}: simultaneous proposal, ours wins")
            self.pending = None
        cosigned = state.with_sig(self.side, crypto.sign(self.key, state.hstate, i))
        self._adopt(cosigned)
        return Message.make(
            "update-success",
            self.channel_id,
            i,
            True,
            scid=self.scid,
            balances=cosigned.balances,
            sigs=cosigned.sigs,
            t_delta=self.t_delta,
            state=cosigned,
        )

    def complete_update(self, msg: Message) -> VersionedState:
        if msg.session != self.channel_id or msg.get("scid") != self.scid:
            raise UnknownChannel(f"{msg.session} is not {self.channel_id}")
        if self.phase == Phase.CLOSED:
            raise AlreadyClosed(f"{self.channel_id} is closed")
        if self.phase == Phase.INIT:
            raise NotOpen(f"{self.channel_id} is not open")
        state = msg.get("state")
        if not isinstance(state, VersionedState) or state.i != msg.counter:
            raise BadSignature(f"{self.channel_id}: malformed update-success")
        if state.i <= self.latest.i:
            raise StaleCounter(f"{self.channel_id}: i={state.i} <= latest {self.latest.i}")
        if (
            state.channel_id != self.channel_id
            or state.scid != self.scid
            or state.balances != as_balances(msg.get("balances"))
            or not state.is_cosigned(self.vkeys)
        ):
            raise BadSignature(f"{self.channel_id}: update-success signatures do not verify")
        check_conserving(self.latest.balances, state.balances)
        self._adopt(state)
        return state

    def on_reject(self, msg: Message) -> None:
        if self.pending is not None and msg.counter == self.pending.i:
            self.pending = None

    # -- disputes ---------------------------------------------------------

    def dispute_tx(self, raiser: str) -> DisputeTx:
        if self.phase == Phase.CLOSED:
            raise AlreadyClosed(f"{self.channel_id} is closed")
        if self.phase == Phase.DISPUTED:
            raise DuplicateDispute(f"{self.channel_id} already disputed")
        if self.phase != Phase.ACTIVE:
            raise NotOpen(f"{self.channel_id} is {self.phase.value}")
        target = self.pending if self.pending is not None else self.latest
        payload = dispute_payload(self.scid, self.channel_id, target.hstate, target.i, raiser)
        dgst = crypto.hash_state(payload, self.latest.nonce)
        return DisputeTx(
            self.scid,
            self.channel_id,
            raiser,
            target.hstate,
            target.i,
            self.latest,
            crypto.sign(self.key, dgst, target.i),
        )

    def raise_dispute(self, record: DisputeRecord) -> None:
        """Enter the dispute phase once the ledger accepted the dispute."""
        self.phase = Phase.DISPUTED
        self.dispute = record

    def resolve_dispute(self, evidence: VersionedState | None) -> str:
        if self.dispute is None:
            raise NotOpen(f"{self.channel_id} has no open dispute")
        if evidence is not None and evidence.is_cosigned(self.vkeys) and evidence.i >= self.dispute.disputed_counter:
            self.adopt(evidence)
            self.phase = Phase.ACTIVE
            self.dispute = None
            self.pending = None
            return "resolved"
        return "unresolved"

    # -- closing ----------------------------------------------------------

    def finalise_sig(self, state: VersionedState) -> bytes:
        return crypto.sign(self.key, finalise_digest(state), state.i)

    def close_channel(self, trigger: str) -> Message:
        """Ask the peer to co-sign a 'finalise' over our latest state."""
        if self.phase == Phase.CLOSED:
            raise AlreadyClosed(f"{self.channel_id} is closed")
        if self.phase == Phase.INIT:
            raise NotOpen(f"{self.channel_id} is not open")
        sigs = [b"", b""]
        sigs[self.side] = self.finalise_sig(self.latest)
        return Message.make(
            "finalise",
            self.channel_id,
            self.latest.i,
            False,
            scid=self.scid,
            state=self.latest,
            sigs=(sigs[0], sigs[1]),
            trigger=trigger,
        )

    def on_finalise(self, msg: Message) -> Message:
        """Answer a peer's finalise: co-sign it, or hand back a newer state."""
        if self.phase == Phase.CLOSED:
            raise AlreadyClosed(f"{self.channel_id} is closed")
        state = msg.get("state")
        if not isinstance(state, VersionedState) or state.channel_id != self.channel_id:
            raise UnknownChannel(f"finalise for {msg.session}")
        if not state.is_cosigned(self.vkeys):
            raise BadSignature(f"{self.channel_id}: finalise state not co-signed")
        peer_sig = msg.get("sigs", (b"", b""))[self.peer_side]
        if not crypto.verify(self.vkeys[self.peer_side], finalise_digest(state), state.i, peer_sig):
            raise BadSignature(f"{self.channel_id}: finalise not signed by peer")
        self.adopt(state)
        if state.i < self.latest.i:
            return Message.make(
                "finalise-newer", self.channel_id, msg.counter, True, scid=self.scid, state=self.latest
            )
        sigs = [b"", b""]
        sigs[self.peer_side] = peer_sig
        sigs[self.side] = self.finalise_sig(state)
        self.pending = None
        return Message.make(
            "finalise-ack",
            self.channel_id,
            msg.counter,
            True,
            scid=self.scid,
            state=state,
            sigs=(sigs[0], sigs[1]),
            trigger=msg.get("trigger", "trade-complete"),
        )

    def finalise_tx(self, msg: Message) -> FinaliseTx:
        """Turn a 'finalise-ack' into the transaction submitted to the ledger."""
        state = msg.get("state")
        sigs = msg.get("sigs")
        if not isinstance(state, VersionedState) or not state.is_cosigned(self.vkeys):
            raise BadSignature(f"{self.channel_id}: finalise-ack state not co-signed")
        if not crypto.verify(self.vkeys[self.peer_side], finalise_digest(state), state.i, sigs[self.peer_side]):
            raise BadSignature(f"{self.channel_id}: finalise-ack not signed by peer")
        if state.i < self.latest.i:
            raise StaleCounter(f"{self.channel_id}: ack for i={state.i}, we hold {self.latest.i}")
        return FinaliseTx(state, (sigs[0], sigs[1]), msg.get("trigger", "trade-complete"))

    def mark_closed(self, final: VersionedState | None = None) -> None:
        if final is not None:
            self.adopt(final)
        self.phase = Phase.CLOSED
        self.pending = None
        self.dispute = None


def update_message(state: VersionedState, side: int, t_delta: int) -> Message:
    """('update', C, hstate_i, state_i, N_i, (alpha, Q), sigma, t_delta)."""
    return Message.make(
        "update",
        state.channel_id,
        state.i,
        False,
        scid=state.scid,
        hstate=state.hstate,
        state=state.state_fields(),
        nonce=state.nonce,
        balances=state.balances,
        sig=state.sigs[side],
        t_delta=t_delta,
    )
