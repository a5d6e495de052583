"""Synchronous secure message transmission with a non-adaptive adversary.

Every message sent in round r is delivered in round r + 1 unless the
adversary adds delay (bounded by ``max_delay``). Per sender/receiver pair
delivery order always matches send order. For traffic between honest parties
the adversary learns only ``(sender, receiver, length)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

from .errors import SimulationStarted, UnknownParty
from .messages import Message

Emit = Callable[[str, dict], None]
Substitute = Callable[[str, Message], "Message | None"]

DEFAULT_MAX_DELAY = 10


@dataclass(frozen=True)
class Envelope:
    msg_id: int  # per-sender sequence number
    sender: str
    receiver: str
    payload: Message
    sent_round: int
    deliver_round: int


@dataclass(frozen=True)
class LeakageView:
    sender: str
    receiver: str
    payload_length: int

    def to_json(self) -> dict:
        return {"sender": self.sender, "receiver": self.receiver, "payload_length": self.payload_length}


@dataclass
class AdversaryState:
    corrupted: set[str] = field(default_factory=set)
    pending_delays: dict[tuple[str, int], int] = field(default_factory=dict)
    observed_leaks: list[LeakageView] = field(default_factory=list)
    # full envelopes the adversary is entitled to (traffic touching a corrupted party)
    observed_payloads: list[Envelope] = field(default_factory=list)
    stalled: dict[str, int] = field(default_factory=dict)  # party -> first silent round
    substitutes: dict[str, Substitute] = field(default_factory=dict)
    # (sender, kind, nth) -> extra rounds for the nth message of that kind
    delay_rules: dict[tuple[str, str, int], int] = field(default_factory=dict)


class AdversaryHandle:
    """What the adversary controls after corrupting one party."""

    def __init__(self, network: "Network", party_id: str):
        self.network = network
        self.party_id = party_id
        self.secrets: dict = {}  # filled by the engine with everything the party holds

    def stall(self, from_round: int = 0) -> None:
        self.network.adversary.stalled[self.party_id] = from_round

    def substitute(self, fn: Substitute) -> None:
        """Rewrite or suppress (return None) each outbound message of the party."""
        self.network.adversary.substitutes[self.party_id] = fn

    def inject(self, receiver: str, payload: Message) -> int:
        return self.network._enqueue(self.party_id, receiver, payload)


class Network:
    def __init__(self, emit: Emit | None = None, max_delay: int = DEFAULT_MAX_DELAY):
        self.round = 0
        self.started = False
        self.max_delay = max_delay
        self.parties: set[str] = set()
        self.adversary = AdversaryState()
        self.handles: dict[str, AdversaryHandle] = {}
        self.queue: list[Envelope] = []
        self._next_id: dict[str, int] = {}
        self._kind_count: dict[tuple[str, str], int] = {}
        self._last_deliver: dict[tuple[str, str], int] = {}
        self.emit: Emit = emit or (lambda kind, details: None)

    def register(self, party_id: str) -> None:
        self.parties.add(party_id)
        self._next_id.setdefault(party_id, 0)

    def start(self) -> None:
        self.started = True

    def is_corrupted(self, party_id: str) -> bool:
        return party_id in self.adversary.corrupted

    def corrupt(self, party_id: str) -> AdversaryHandle:
        if self.started:
            raise SimulationStarted(f"cannot corrupt {party_id} after round 0")
        if party_id not in self.parties:
            raise UnknownParty(party_id)
        self.adversary.corrupted.add(party_id)
        handle = self.handles.setdefault(party_id, AdversaryHandle(self, party_id))
        return handle

    def delay(self, sender: str, msg_id: int, rounds: int) -> None:
        """Hold back one message by ``rounds`` (already queued or not yet sent)."""
        if rounds < 0:
            raise ValueError("negative delay")
        for n, env in enumerate(self.queue):
            if env.sender == sender and env.msg_id == msg_id:
                self._push_back(n, rounds)
                return
        self.adversary.pending_delays[(sender, msg_id)] = rounds

    def delay_nth(self, sender: str, kind: str, nth: int, rounds: int) -> None:
        """Hold back the ``nth`` (from 0) future message of ``kind`` sent by ``sender``."""
        if rounds < 0:
            raise ValueError("negative delay")
        self.adversary.delay_rules[(sender, kind, nth)] = rounds

    def _capped(self, sent_round: int, wanted: int) -> int:
        return min(wanted, sent_round + 1 + self.max_delay)

    def _push_back(self, index: int, rounds: int) -> None:
        env = self.queue[index]
        new_round = self._capped(env.sent_round, env.deliver_round + rounds)
        self.queue[index] = _with_round(env, new_round)
        pair = (env.sender, env.receiver)
        # keep FIFO: later messages on the pair may not overtake this one
        for n in range(index + 1, len(self.queue)):
            later = self.queue[n]
            if (later.sender, later.receiver) == pair and later.deliver_round < new_round:
                self.queue[n] = _with_round(later, new_round)
        self._last_deliver[pair] = max(self._last_deliver.get(pair, 0), new_round)

    def send_secure(self, sender: str, receiver: str, payload: Message) -> int | None:
        """Queue ``payload``; returns the msg_id, or None if a corrupted sender stays silent."""
        for p in (sender, receiver):
            if p not in self.parties:
                raise UnknownParty(p)
        if sender in self.adversary.corrupted:
            stall_from = self.adversary.stalled.get(sender)
            if stall_from is not None and self.round >= stall_from:
                self.emit("suppressed", {"sender": sender, "receiver": receiver, "kind": payload.kind})
                return None
            fn = self.adversary.substitutes.get(sender)
            if fn is not None:
                replaced = fn(receiver, payload)
                if replaced is None:
                    self.emit("suppressed", {"sender": sender, "receiver": receiver, "kind": payload.kind})
                    return None
                payload = replaced
        return self._enqueue(sender, receiver, payload)

    def _enqueue(self, sender: str, receiver: str, payload: Message) -> int:
        msg_id = self._next_id.get(sender, 0)
        self._next_id[sender] = msg_id + 1
        extra = self.adversary.pending_delays.pop((sender, msg_id), 0)
        nth = self._kind_count.get((sender, payload.kind), 0)
        self._kind_count[(sender, payload.kind)] = nth + 1
        extra += self.adversary.delay_rules.pop((sender, payload.kind, nth), 0)
        pair = (sender, receiver)
        deliver = self._capped(self.round, self.round + 1 + extra)
        deliver = max(deliver, self._last_deliver.get(pair, 0))
        self._last_deliver[pair] = deliver
        env = Envelope(msg_id, sender, receiver, payload, self.round, deliver)
        self.queue.append(env)
        wire = payload.encode()
        leak = LeakageView(sender, receiver, len(wire))
        self.adversary.observed_leaks.append(leak)
        if sender in self.adversary.corrupted or receiver in self.adversary.corrupted:
            self.adversary.observed_payloads.append(env)
        self.emit(
            "queued",
            {
                "msg_id": msg_id,
                "sender": sender,
                "receiver": receiver,
                "kind": payload.kind,
                "counter": payload.counter,
                "reply": payload.reply,
                "sent_round": self.round,
                "deliver_round": deliver,
                "payload_digest": payload.digest().hex(),
            },
        )
        self.emit("leak", leak.to_json())
        return msg_id

    def step_round(self) -> list[Envelope]:
        """Advance one round and return the envelopes due, in (sender, msg_id) order."""
        self.started = True
        self.round += 1
        due = [e for e in self.queue if e.deliver_round <= self.round]
        self.queue = [e for e in self.queue if e.deliver_round > self.round]
        due.sort(key=lambda e: (e.sender, e.msg_id))
        return due

    def pending(self) -> int:
        return len(self.queue)


def _with_round(env: Envelope, deliver_round: int) -> Envelope:
    return Envelope(env.msg_id, env.sender, env.receiver, env.payload, env.sent_round, deliver_round)
