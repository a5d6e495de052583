"""Invariant monitor driven purely by trace events.

The monitor never looks at live objects: it rebuilds the state it needs from
the JSON events themselves. A live run feeds it each event as it is recorded,
and ``verify`` feeds it the lines of a trace file, so both reach the same
verdicts on the same trace.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Iterable

from .. import crypto
from ..states import state_fields

INVARIANTS = {
    "trace-integrity": "event sequence numbers are consecutive from 0",
    "ledger-conservation": "balances plus live escrows equal the minted supply after every ledger event",
    "no-negative-balance": "no account balance is ever negative",
    "escrow-linearity": "an escrow is locked once and consumed at most once",
    "contract-append-only": "contract versions increase by one; immutable fields and sets only grow",
    "signature-completeness": "every contract version carries verifying signatures of the required parties",
    "one-open-channel": "an ESC never has two channels open at once",
    "balance-coherence": "an ESC with no open channel reports the last channel's final balances",
    "channel-conservation": "every co-signed version conserves the channel's funded coin and packet totals",
    "counter-monotonic": "each endpoint's co-signed counter strictly increases",
    "cosigned-signatures": "every co-signed version's hstate and both signatures verify",
    "monotone-finality": "a channel settles at a counter no lower than any honest party co-signed",
    "dispute-timer": "dispute timers run exactly t_delta and resolve or expire on the right side of t_end",
    "dispute-mirroring": "at each round end every MSC mirrors the dispute list of its ESCs",
    "credit-limit": "outstanding credit notes never exceed the credit limit",
    "final-balance-once": "an MSC final balance is written once and never changed",
    "role-safety": "consumers never sell packets and producers never buy them",
    "uutid-masking": "no true identity appears in ledger or contract data",
    "leak-confidentiality": "leakage views carry only sender, receiver and length",
    "delivery-bounds": "messages arrive between one round and 1 + max_delay rounds after sending",
    "fifo-order": "messages between a pair of parties arrive in send order",
    "eventual-delivery": "every message due before the run ended was delivered",
    "settlement-conservation": "period settlement moves exactly what it draws from collateral",
}


@dataclass
class Outcome:
    name: str
    passed: bool = True
    checks: int = 0
    first_violation: dict | None = None

    def to_json(self) -> dict:
        return {
            "passed": self.passed,
            "checks": self.checks,
            "first_violation": self.first_violation,
        }


@dataclass
class _Channel:
    parties: list[str]
    vkeys: list[bytes]
    coins: int
    packets: int
    roles: list[str]
    t_delta: int


@dataclass
class _Sent:
    receiver: str
    sent_round: int


class Monitor:
    def __init__(self) -> None:
        self.outcomes = {name: Outcome(name) for name in INVARIANTS}
        self.expected_seq = 0
        self.identities: set[str] = set()
        self.corrupted: set[str] = set()
        self.max_delay = 10
        self.last_round = 0
        self.supply = 0
        self.balances: dict[str, int] = {}
        self.escrows: dict[str, dict] = {}
        self.records: dict[str, dict] = {}
        self.channels: dict[str, _Channel] = {}
        self.channel_t_delta: dict[str, int] = {}
        self.dispute_t_end: dict[str, int] = {}
        self.endpoint_i: dict[tuple[str, str], int] = {}
        self.endpoint_state: dict[tuple[str, str], list] = {}
        self.honest_max: dict[str, int] = {}
        self.sent: dict[tuple[str, int], _Sent] = {}
        self.delivered: set[tuple[str, int]] = set()
        self.pair_last: dict[tuple[str, str], int] = {}
        self.event: dict = {}

    # -- bookkeeping ------------------------------------------------------

    def check(self, name: str, ok: bool, message: str = "") -> None:
        outcome = self.outcomes[name]
        outcome.checks += 1
        if not ok and outcome.passed:
            outcome.passed = False
            outcome.first_violation = {
                "seq": self.event.get("seq"),
                "round": self.event.get("round"),
                "kind": self.event.get("kind"),
                "message": message,
            }

    @property
    def passed(self) -> bool:
        return all(o.passed for o in self.outcomes.values())

    def violations(self) -> list[str]:
        return [n for n, o in self.outcomes.items() if not o.passed]

    def results(self) -> dict:
        return {n: o.to_json() for n, o in self.outcomes.items()}

    def observe_all(self, events: Iterable[dict]) -> "Monitor":
        for event in events:
            self.observe(event)
        return self

    def observe(self, event: dict) -> None:
        self.event = event
        seq = event.get("seq")
        self.check("trace-integrity", seq == self.expected_seq, f"seq {seq}, expected {self.expected_seq}")
        self.expected_seq = (seq if isinstance(seq, int) else self.expected_seq) + 1
        self.last_round = max(self.last_round, event.get("round", 0))
        handler = getattr(self, "_on_" + event.get("kind", "").replace("-", "_"), None)
        if handler is not None:
            try:
                handler(event.get("details", {}), event)
            except (KeyError, TypeError, ValueError, IndexError, AttributeError) as exc:
                # a malformed event is itself a violation of whatever it feeds
                self.check("trace-integrity", False, f"malformed {event.get('kind')} event: {exc!r}")

    # -- setup events -----------------------------------------------------

    def _on_party(self, d: dict, e: dict) -> None:
        self.identities.add(d["identity"])

    def _on_start(self, d: dict, e: dict) -> None:
        self.corrupted = set(d["corrupted"])
        self.max_delay = d["max_delay"]

    # -- ledger -----------------------------------------------------------

    def _masked(self, value: Any) -> bool:
        if isinstance(value, str):
            return value not in self.identities and not any(
                len(name) >= 4 and name in value for name in self.identities
            )
        if isinstance(value, dict):
            return all(self._masked(k) and self._masked(v) for k, v in value.items())
        if isinstance(value, list):
            return all(self._masked(v) for v in value)
        return True

    def _on_ledger(self, d: dict, e: dict) -> None:
        self.check("uutid-masking", self._masked(d), "true identity in ledger event")
        if d["op"] == "mint":
            self.supply += d["amount"]
        for addr, bal in d.get("balances", {}).items():
            self.check("no-negative-balance", bal >= 0, f"{addr} balance {bal}")
            self.balances[addr] = bal
        for eid, esc in d.get("escrows", {}).items():
            prev = self.escrows.get(eid)
            if prev is None:
                ok = d["op"] == "lock" and not esc["consumed"]
            else:
                ok = not prev["consumed"] and bool(esc["consumed"]) and esc["amount"] == prev["amount"]
            self.check("escrow-linearity", ok, f"escrow {eid} transition {d['op']}")
            self.escrows[eid] = esc
        total = sum(self.balances.values()) + sum(x["amount"] for x in self.escrows.values() if not x["consumed"])
        self.check("ledger-conservation", total == self.supply, f"holdings {total} != supply {self.supply}")

    def _on_round_end(self, d: dict, e: dict) -> None:
        self.check(
            "ledger-conservation", d["conservation_delta"] == 0, f"ledger delta {d['conservation_delta']}"
        )
        for rid, rec in self.records.items():
            if rec.get("type") != "esc":
                continue
            own = set(rec["channel_set"])
            for sid in dict.fromkeys(rec["sids"]):
                msc = self.records.get(sid)
                if msc is None:
                    continue
                mirrored = [x for x in msc["dispute_list"] if x["channel_id"] in own]
                self.check(
                    "dispute-mirroring",
                    mirrored == rec["dispute_list"],
                    f"{sid} does not mirror the disputes of {rid}",
                )

    def _on_run_end(self, d: dict, e: dict) -> None:
        self.check("ledger-conservation", d["conservation_delta"] == 0, f"ledger delta {d['conservation_delta']}")
        for key, sent in self.sent.items():
            if sent.sent_round + 1 + self.max_delay <= e["round"]:
                self.check("eventual-delivery", key in self.delivered, f"message {key} never delivered")

    # -- contracts --------------------------------------------------------

    def _on_contract(self, d: dict, e: dict) -> None:
        rid, record, sigs = d["id"], d["record"], d["sigs"]
        self.check("uutid-masking", self._masked(record), f"true identity in {rid}")
        prev = self.records.get(rid)
        self._check_append_only(rid, prev, record, sigs)
        self._check_signatures(rid, record, sigs)
        if record["type"] == "esc":
            self._check_esc(rid, record)
        else:
            self._check_msc(rid, prev, record)
        self.records[rid] = record

    def _check_append_only(self, rid: str, prev: dict | None, record: dict, sigs: dict) -> None:
        if prev is None:
            self.check("contract-append-only", record["version"] == 0, f"{rid} starts at v{record['version']}")
            return
        ok = record["version"] == prev["version"] + 1
        ok = ok and record["sig_set"][: len(prev["sig_set"])] == prev["sig_set"]
        ok = ok and len(record["sig_set"]) == len(prev["sig_set"]) + len(sigs["entries"])
        ok = ok and record["parties"] == prev["parties"] and record["vkeys"] == prev["vkeys"]
        if record["type"] == "esc":
            for name in ("channel_set", "tx_set"):
                ok = ok and record[name][: len(prev[name])] == prev[name]
            ok = ok and record["sids"] == prev["sids"]
            old = [(x["raiser"], x["channel_id"], x["disputed_tx"]) for x in prev["dispute_list"]]
            new = [(x["raiser"], x["channel_id"], x["disputed_tx"]) for x in record["dispute_list"]]
            ok = ok and new[: len(old)] == old
        else:
            old_notes = [n["note_id"] for n in prev["debit_ledger"]]
            ok = ok and [n["note_id"] for n in record["debit_ledger"]][: len(old_notes)] == old_notes
            ok = ok and len(record["links"]) >= len(prev["links"])
        self.check("contract-append-only", ok, f"{rid} v{record['version']} rewrites history")

    def _check_signatures(self, rid: str, record: dict, sigs: dict) -> None:
        digest = bytes.fromhex(sigs["digest"])
        entries = sigs["entries"]
        ok = bool(entries) and all(
            crypto.verify(bytes.fromhex(vk), digest, sigs["counter"], bytes.fromhex(sig)) for _, vk, sig in entries
        )
        keys = dict(zip(record["parties"], record["vkeys"]))
        signers = {s: vk for s, vk, _ in entries}
        action = sigs["action"]
        if record["type"] == "esc":
            if action == "dispute":
                ok = ok and len(signers) == 1 and all(keys.get(s) == vk for s, vk in signers.items())
            else:
                ok = ok and signers == keys
            if action != "create":
                ok = ok and any(t[2] == sigs["digest"] for t in record["tx_set"])
        elif action == "create":
            ok = ok and signers == keys
        elif action in ("collateral", "note", "recalc", "settle"):
            ok = ok and signers == {record["parties"][0]: record["vkeys"][0]}
        elif action == "mirror":
            escs = [r for r in self.records.values() if r.get("type") == "esc" and rid in r["sids"]]
            ok = ok and any(
                all(dict(zip(r["parties"], r["vkeys"])).get(s) == vk for s, vk in signers.items()) for r in escs
            )
        elif action == "link":
            ok = ok and len(signers) == 1
        self.check("signature-completeness", ok, f"{rid} v{record['version']} {action}")

    def _check_esc(self, rid: str, record: dict) -> None:
        channels = record["channels"]
        open_ = [c for c, x in channels.items() if x["status"] != "closed"]
        self.check("one-open-channel", len(open_) <= 1, f"{rid} has open channels {open_}")
        if channels and not open_:
            last = channels[record["channel_set"][-1]]
            self.check(
                "balance-coherence",
                record["final_balances"] == last["final"],
                f"{rid} final balances differ from its last channel",
            )

    def _check_msc(self, rid: str, prev: dict | None, record: dict) -> None:
        outstanding = sum(n["amount"] for n in record["debit_ledger"] if n["status"] != "settled")
        self.check(
            "credit-limit",
            not record["debit_ledger"] or outstanding <= record["credit_limit"],
            f"{rid} outstanding {outstanding} > limit {record['credit_limit']}",
        )
        if prev is not None and prev["final_balance"] is not None:
            self.check(
                "final-balance-once", record["final_balance"] == prev["final_balance"], f"{rid} final balance rewritten"
            )

    def _on_channel_open(self, d: dict, e: dict) -> None:
        self.channel_t_delta[d["channel_id"]] = d["expiry"] - d["height"]

    def _on_dispute_raised(self, d: dict, e: dict) -> None:
        t_delta = self.channel_t_delta.get(d["channel_id"])
        self.check(
            "dispute-timer",
            t_delta is not None and d["t_end"] == e["height"] + t_delta,
            f"{d['channel_id']} timer ends at {d['t_end']}",
        )
        self.dispute_t_end[d["channel_id"]] = d["t_end"]

    def _on_dispute_resolved(self, d: dict, e: dict) -> None:
        t_end = self.dispute_t_end.get(d["channel_id"])
        self.check("dispute-timer", t_end is not None and e["height"] < t_end, "evidence accepted after t_end")

    def _on_dispute_unresolved(self, d: dict, e: dict) -> None:
        t_end = self.dispute_t_end.get(d["channel_id"])
        self.check("dispute-timer", t_end is not None and e["height"] == t_end, "dispute expired off its timer")

    def _on_channel_close(self, d: dict, e: dict) -> None:
        best = self.honest_max.get(d["channel_id"], -1)
        self.check(
            "monotone-finality", d["i"] >= best, f"{d['channel_id']} settled at i={d['i']} below honest i={best}"
        )

    def _on_settlement(self, d: dict, e: dict) -> None:
        drawn = sum(x[1] for x in d["collateral_draws"])
        paid = sum(x[2] for x in d["payouts"])
        self.check(
            "settlement-conservation",
            drawn == paid and sum(d["net"].values()) == 0,
            f"drew {drawn}, paid {paid}, net {sum(d['net'].values())}",
        )

    # -- channels ---------------------------------------------------------

    def _on_channel_active(self, d: dict, e: dict) -> None:
        ch = d["channel_id"]
        if ch in self.channels:
            return
        self.channels[ch] = _Channel(
            d["parties"],
            [bytes.fromhex(v) for v in d["vkeys"]],
            sum(f["amount"] for f in d["funding"]),
            sum(f["quantity"] for f in d["funding"]),
            d["roles"],
            d["t_delta"],
        )

    def _on_cosigned(self, d: dict, e: dict) -> None:
        ch = d["channel_id"]
        state = d["state"]
        info = self.channels.get(ch)
        if info is None:
            self.check("cosigned-signatures", False, f"co-signed state for unknown channel {ch}")
            return
        i = state["i"]
        bal = state["balances"]
        hstate = bytes.fromhex(state["hstate"])
        recomputed = crypto.hash_state(
            state_fields(state["scid"], ch, i, tuple(tuple(p) for p in bal)), bytes.fromhex(state["nonce"])
        )
        ok = recomputed == hstate and all(
            crypto.verify(info.vkeys[k], hstate, i, bytes.fromhex(state["sigs"][k])) for k in (0, 1)
        )
        self.check("cosigned-signatures", ok, f"{ch} i={i} signatures")
        coins = bal[0][0] + bal[1][0]
        packets = bal[0][1] + bal[1][1]
        self.check(
            "channel-conservation",
            coins == info.coins and packets == info.packets and min(v for p in bal for v in p) >= 0,
            f"{ch} i={i} totals ({coins}, {packets}) != ({info.coins}, {info.packets})",
        )
        key = (e["actor"], ch)
        last = self.endpoint_i.get(key, -1)
        self.check("counter-monotonic", i > last, f"{ch} i={i} after {last} at {e['actor']}")
        self.endpoint_i[key] = i
        prev = self.endpoint_state.get(key)
        if prev is not None:
            for k in (0, 1):
                role = info.roles[k]
                if role == "consumer":
                    self.check("role-safety", bal[k][1] >= prev[k][1], f"{ch}: consumer sold packets")
                if role == "producer":
                    self.check("role-safety", bal[k][1] <= prev[k][1], f"{ch}: producer bought packets")
        self.endpoint_state[key] = bal
        if e["actor"] not in self.corrupted:
            self.honest_max[ch] = max(self.honest_max.get(ch, -1), i)

    # -- network ----------------------------------------------------------

    def _on_queued(self, d: dict, e: dict) -> None:
        sent = d["sent_round"]
        deliver = d["deliver_round"]
        self.check(
            "delivery-bounds",
            sent + 1 <= deliver <= sent + 1 + self.max_delay,
            f"message {d['sender']}#{d['msg_id']} scheduled for round {deliver}",
        )
        self.sent[(d["sender"], d["msg_id"])] = _Sent(d["receiver"], sent)

    def _on_leak(self, d: dict, e: dict) -> None:
        self.check(
            "leak-confidentiality",
            set(d) == {"sender", "receiver", "payload_length"} and isinstance(d["payload_length"], int),
            f"leak view exposes {sorted(d)}",
        )

    def _delivered(self, sender: str, msg_id: int, receiver: str, round_: int) -> None:
        key = (sender, msg_id)
        sent = self.sent.get(key)
        ok = sent is not None and sent.receiver == receiver and key not in self.delivered
        ok = ok and sent.sent_round + 1 <= round_ <= sent.sent_round + 1 + self.max_delay
        self.check("delivery-bounds", ok, f"message {sender}#{msg_id} delivered in round {round_}")
        pair = (sender, receiver)
        last = self.pair_last.get(pair, -1)
        self.check("fifo-order", msg_id > last, f"{sender}#{msg_id} overtook #{last}")
        self.pair_last[pair] = msg_id
        self.delivered.add(key)

    def _on_delivered(self, d: dict, e: dict) -> None:
        self._delivered(d["sender"], d["msg_id"], e["actor"], e["round"])

    def _on_ignored(self, d: dict, e: dict) -> None:
        self._delivered(d["sender"], d["msg_id"], e["actor"], e["round"])


def verify_events(events: Iterable[dict]) -> Monitor:
    return Monitor().observe_all(events)
