"""Deterministic round scheduler tying parties, network and ledger together.

Each round: the network hands over due envelopes, the ledger advances by
``blocks_per_round`` (firing timer watchers), envelopes are delivered,
scheduled environment requests and adversary actions run, and finally every
party that is not stalled ticks in UUTID order. Every observable step is appended to
the trace as one JSON event; the trace hash is SHA-256 over its JSON lines.
"""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Callable

from . import cns
from .contracts import Contracts, DisputePolicy
from .errors import ChanforgeError, Refused, UnknownParty
from .ledger import Ledger
from .marketplace import MarketRole
from .network import AdversaryHandle, Network
from .party import Merchant, Party


def _json_default(value: Any) -> Any:
    if isinstance(value, (bytes, bytearray)):
        return bytes(value).hex()
    if isinstance(value, (set, frozenset)):
        return sorted(value)
    if isinstance(value, Fraction):
        return str(value)
    if hasattr(value, "to_json"):
        return value.to_json()
    raise TypeError(f"cannot serialize {type(value).__name__}")


def canonical_line(event: dict) -> str:
    return json.dumps(event, sort_keys=True, separators=(",", ":"), default=_json_default)


class Trace:
    """Append-only event log with a running hash."""

    def __init__(self, keep: bool = True):
        self.keep = keep
        self.events: list[dict] = []
        self.lines: list[str] = []
        self._hash = hashlib.sha256()
        self.count = 0

    def append(self, event: dict) -> dict:
        line = canonical_line(event)
        self._hash.update(line.encode() + b"\n")
        self.count += 1
        normalized = json.loads(line)
        if self.keep:
            self.lines.append(line)
            self.events.append(normalized)
        return normalized

    @property
    def hash(self) -> str:
        return self._hash.hexdigest()

    def write(self, path: str) -> None:
        with open(path, "w") as fh:
            for line in self.lines:
                fh.write(line + "\n")


def trace_hash(lines: list[str]) -> str:
    h = hashlib.sha256()
    for line in lines:
        h.update(line.encode() + b"\n")
    return h.hexdigest()


@dataclass(order=True)
class Scheduled:
    round: int
    order: int
    kind: str = field(compare=False)  # "party" | "adversary"
    target: str = field(compare=False)
    action: Any = field(compare=False)
    params: dict = field(compare=False, default_factory=dict)


class Simulation:
    def __init__(
        self,
        seed: int = 42,
        *,
        t_delta: int = 50,
        blocks_per_round: int = 1,
        max_delay: int = 10,
        timeout: int = 3,
        mode: str = "plain",
        policy: cns.Policy | None = None,
        dispute_policy: DisputePolicy | None = None,
        observer: Callable[[dict], None] | None = None,
        keep_trace: bool = True,
    ):
        if mode not in ("plain", "marketplace"):
            raise ValueError(f"unknown mode {mode!r}")
        self.seed = seed
        self.t_delta = t_delta
        self.blocks_per_round = blocks_per_round
        self.timeout = timeout
        self.mode = mode
        self.policy = policy or cns.Policy()
        self.observer = observer
        self.trace = Trace(keep_trace)
        self.ledger = Ledger(self._emit)
        self.contracts = Contracts(self.ledger, dispute_policy)
        self.network = Network(self._emit, max_delay)
        self.parties: dict[str, Party] = {}  # by name
        self.by_uutid: dict[str, Party] = {}
        self.handles: dict[str, AdversaryHandle] = {}
        self.inert: dict[str, int] = {}  # uutid -> round from which the party is silent
        self.schedule: list[Scheduled] = []
        self._order = 0
        self.started = False
        self._actor = ""
        self.rejections: Counter[str] = Counter()  # error code -> count

    # -- trace ----------------------------------------------------------------

    @property
    def round(self) -> int:
        return self.network.round

    def _emit(self, kind: str, details: dict) -> None:
        self.record(kind, details, actor=self._actor)

    def record(self, kind: str, details: dict, actor: str = "") -> dict:
        digest = details.get("payload_digest")
        if digest is None:
            digest = hashlib.sha256(canonical_line(details).encode()).hexdigest()
        event = {
            "seq": self.trace.count,
            "round": self.round,
            "height": self.ledger.height,
            "kind": kind,
            "actor": actor,
            "payload_digest": digest,
            "details": details,
        }
        normalized = self.trace.append(event)
        if kind in ("rejected", "refused", "action-failed"):
            self.rejections[details.get("code", "?")] += 1
        if self.observer is not None:
            self.observer(normalized)
        return normalized

    # -- setup ----------------------------------------------------------------

    def add_party(
        self,
        name: str,
        balance: int = 0,
        role: str = "prosumer",
        merchant: bool = False,
        **kwargs: Any,
    ) -> Party:
        if name in self.parties:
            raise ValueError(f"duplicate party {name!r}")
        if self.started:
            raise ValueError("parties must be added before the first round")
        cls = Merchant if merchant else Party
        party = cls(self, name, balance, role, **kwargs)
        self.parties[name] = party
        self.by_uutid[party.uutid] = party
        self.network.register(party.uutid)
        self.record(
            "party",
            {
                "uutid": party.uutid,
                "identity": name,
                "address": party.address,
                "role": party.role.value,
                "merchant": merchant,
            },
        )
        self.ledger.open_account(party.address, party.keys.verification_key, balance)
        return party

    def party(self, name: str) -> Party:
        try:
            return self.parties[name]
        except KeyError:
            raise UnknownParty(name) from None

    def uutid(self, name: str) -> str:
        return self.party(name).uutid

    def roles_of(self, uutids) -> tuple[MarketRole, MarketRole]:
        a, b = (self.by_uutid[u].role for u in uutids)
        return (a, b)

    def corrupt(self, name: str) -> AdversaryHandle:
        party = self.party(name)
        handle = self.network.corrupt(party.uutid)
        handle.secrets["party"] = party  # total corruption: keys, nonces, channel state
        self.handles[name] = handle
        return handle

    def stall(self, name: str, from_round: int) -> None:
        """The corrupted party goes completely silent from ``from_round`` on."""
        handle = self.handles[name]
        handle.stall(from_round)
        self.inert[handle.party_id] = from_round

    def is_inert(self, uutid: str) -> bool:
        start = self.inert.get(uutid)
        return start is not None and self.round >= start

    def at(self, round_: int, name: str, action: str, **params: Any) -> None:
        self._order += 1
        self.schedule.append(Scheduled(round_, self._order, "party", name, action, params))

    def adversary_at(self, round_: int, action: Callable[["Simulation"], None], label: str = "") -> None:
        self._order += 1
        self.schedule.append(Scheduled(round_, self._order, "adversary", label, action))

    def _start(self) -> None:
        self.started = True
        self.network.start()
        self.record(
            "start",
            {
                "seed": self.seed,
                "mode": self.mode,
                "t_delta": self.t_delta,
                "blocks_per_round": self.blocks_per_round,
                "max_delay": self.network.max_delay,
                "timeout": self.timeout,
                "corrupted": sorted(self.network.adversary.corrupted),
            },
        )

    # -- running --------------------------------------------------------------

    def act(self, name: str, action: str, **params: Any) -> Any:
        """Run one environment request now; refusals are traced and re-raised."""
        party = self.party(name)
        self._actor = party.uutid
        try:
            result = party.act(action, params)
        except ChanforgeError as exc:
            kind = "refused" if isinstance(exc, Refused) else "action-failed"
            self.record(kind, {"action": action, "code": exc.code, "error": str(exc)}, actor=party.uutid)
            raise
        finally:
            self._actor = ""
        self.record("action", {"action": action, "params": _plain(params)}, actor=party.uutid)
        return result

    def step(self) -> None:
        if not self.started:
            self._start()
        due = self.network.step_round()
        self.ledger.advance(self.blocks_per_round)
        for env in due:
            receiver = self.by_uutid[env.receiver]
            if self.is_inert(receiver.uutid):
                self.record("ignored", {"sender": env.sender, "msg_id": env.msg_id}, actor=receiver.uutid)
                continue
            self._actor = receiver.uutid
            receiver.handle(env)
        self._actor = ""
        now = [s for s in self.schedule if s.round <= self.round]
        self.schedule = [s for s in self.schedule if s.round > self.round]
        for item in sorted(now):
            if item.kind == "adversary":
                self.record("adversary", {"action": item.target})
                item.action(self)
                continue
            party = self.party(item.target)
            if self.is_inert(party.uutid):
                continue
            try:
                self.act(item.target, item.action, **item.params)
            except (ChanforgeError, ValueError, KeyError) as exc:
                if not isinstance(exc, ChanforgeError):
                    self.record("action-failed", {"action": item.action, "code": "invalid", "error": str(exc)}, actor=party.uutid)
        for uutid in sorted(self.by_uutid):
            if self.is_inert(uutid):
                continue
            self._actor = uutid
            self.by_uutid[uutid].tick()
        self._actor = ""
        self.record("round-end", {"conservation_delta": self.ledger.conservation_delta()})

    def run(self, rounds: int) -> None:
        for _ in range(rounds):
            self.step()

    def run_until(self, predicate: Callable[["Simulation"], bool], max_rounds: int) -> bool:
        while self.round < max_rounds:
            if self.started and predicate(self):
                return True
            self.step()
        return predicate(self)

    def quiescent(self) -> bool:
        if self.schedule or self.network.pending():
            return False
        if any(h > self.ledger.height for h in self.ledger._watchers):
            return False
        for party in self.by_uutid.values():
            if self.is_inert(party.uutid):
                continue
            if party.busy() or party.pending_esc or party.msc_pending:
                return False
            for session in party.sessions.values():
                if session.channel is not None or session.opening is not None or session.deposits:
                    return False
            if isinstance(party, Merchant) and party.auto_settle and not party.reports:
                return False
        return True

    def finish(self) -> None:
        self.record(
            "run-end",
            {
                "conservation_delta": self.ledger.conservation_delta(),
                "pending_messages": self.network.pending(),
            },
        )


def _plain(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value
