"""Scripted adversary behaviours for corrupted parties.

Each builder returns a callable run by the engine at the scheduled round.
The adversary holds everything the corrupted party holds (total corruption)
but nothing of the honest parties.
"""

from __future__ import annotations

from typing import Callable

from .. import crypto
from ..channel import update_message
from ..errors import ChanforgeError
from ..messages import Message
from ..states import VersionedState, as_balances

Action = Callable[["Simulation"], None]  # noqa: F821


def _log(sim, actor: str, event: str, **details) -> None:
    sim.record(event, details, actor=actor)


def _attempt(sim, actor: str, what: str, fn: Callable[[], object]) -> None:
    """Run an on-chain attempt by the adversary and trace how it ended."""
    sim._actor = actor
    try:
        fn()
        _log(sim, actor, "adversary-accepted", attempt=what)
    except ChanforgeError as exc:
        _log(sim, actor, "rejected", kind=what, code=exc.code, error=str(exc))
    finally:
        sim._actor = ""


def stall(target: str, round_: int) -> Action:
    def act(sim) -> None:
        sim.stall(target, round_)

    return act


def delay(target: str, kind: str, nth: int, rounds: int) -> Action:
    def act(sim) -> None:
        sim.network.delay_nth(sim.uutid(target), kind, nth, rounds)

    return act


def _shifted(balances, side: int, amount: int):
    """Move ``amount`` coins to ``side`` (clamped so the forgery stays well-formed)."""
    pairs = [list(balances[0]), list(balances[1])]
    amount = min(amount, pairs[1 - side][0])
    pairs[side][0] += amount
    pairs[1 - side][0] -= amount
    return as_balances(pairs)


def forgeries(party, victim: str) -> list[Message]:
    """Forged channel messages the corrupted ``party`` can build against ``victim``."""
    endpoint = party.channel_with(victim)
    latest = endpoint.latest
    side = endpoint.side
    i = latest.i + 1
    stolen = _shifted(latest.balances, side, 10)
    out = []
    # 1. balances rewritten under an old hstate and signature
    honest = update_message(latest, side, endpoint.t_delta)
    out.append(honest.replace(counter=i, balances=stolen))
    # 2. correct hstate, signed with the party's ledger key instead of its ESC key
    nonce = party.nonces.fresh()
    forged = VersionedState(latest.scid, latest.channel_id, i, stolen, nonce, b"", (b"", b""))
    hstate = forged.recompute()
    sigs = [b"", b""]
    sigs[side] = crypto.sign(party.keys, hstate, i)
    forged = VersionedState(latest.scid, latest.channel_id, i, stolen, nonce, hstate, (sigs[0], sigs[1]))
    out.append(update_message(forged, side, endpoint.t_delta))
    # 3. an 'update-success' claiming the victim co-signed a state it never saw
    own = endpoint.make_state(i, stolen)
    fake = own.with_sig(1 - side, bytes(crypto.SIGNATURE_SIZE))
    out.append(
        Message.make(
            "update-success",
            latest.channel_id,
            i,
            True,
            scid=latest.scid,
            balances=fake.balances,
            sigs=fake.sigs,
            t_delta=endpoint.t_delta,
            state=fake,
        )
    )
    return out


def forge(target: str, victim: str) -> Action:
    def act(sim) -> None:
        party = sim.handles[target].secrets["party"]
        victim_id = sim.uutid(victim)
        handle = sim.handles[target]
        try:
            messages = forgeries(party, victim_id)
        except ChanforgeError as exc:
            _log(sim, party.uutid, "adversary-skipped", attempt="forge", code=exc.code)
            return
        for msg in messages:
            handle.inject(victim_id, msg)
        # and a forged co-signed state posted straight to the ledger
        endpoint = party.channel_with(victim_id)
        own = endpoint.make_state(endpoint.latest.i + 1, _shifted(endpoint.latest.balances, endpoint.side, 10))
        fake = own.with_sig(1 - endpoint.side, bytes(crypto.SIGNATURE_SIZE))
        _attempt(sim, party.uutid, "post", lambda: sim.contracts.post_state(endpoint.scid, endpoint.channel_id, fake))

    return act


def replay(target: str, kind: str = "update", nth: int = 0) -> Action:
    """Re-send the ``nth`` earlier ``kind`` message the corrupted party sent."""

    def act(sim) -> None:
        uutid = sim.uutid(target)
        seen = [e for e in sim.network.adversary.observed_payloads if e.sender == uutid and e.payload.kind == kind]
        if nth >= len(seen):
            _log(sim, uutid, "adversary-skipped", attempt="replay", code="nothing-to-replay")
            return
        env = seen[nth]
        sim.handles[target].inject(env.receiver, env.payload)

    return act


def stale_close(target: str, victim: str, counter: int = 0) -> Action:
    """Post an old co-signed state and stop defending the channel."""

    def act(sim) -> None:
        party = sim.handles[target].secrets["party"]
        party.watch_chain = False
        endpoint = party.channel_with(sim.uutid(victim))
        old = next((s for s in endpoint.history if s.i == counter), endpoint.history[0])
        _attempt(sim, party.uutid, "stale-post", lambda: sim.contracts.post_state(endpoint.scid, endpoint.channel_id, old))

    return act


def dispute(target: str, victim: str) -> Action:
    """Raise a (groundless) dispute on the channel with ``victim``."""

    def act(sim) -> None:
        party = sim.handles[target].secrets["party"]
        _attempt(sim, party.uutid, "dispute", lambda: party.do_dispute(sim.uutid(victim)))

    return act


def build(spec) -> Action | None:
    p = spec.params
    if spec.action == "corrupt":
        return None
    if spec.action == "stall":
        return stall(spec.target, spec.round)
    if spec.action == "delay":
        return delay(spec.target, p.get("kind", "update"), p.get("nth", 0), p.get("rounds", 1))
    if spec.action == "forge":
        return forge(spec.target, p["victim"])
    if spec.action == "replay":
        return replay(spec.target, p.get("kind", "update"), p.get("nth", 0))
    if spec.action == "stale-close":
        return stale_close(spec.target, p["victim"], p.get("counter", 0))
    if spec.action == "dispute":
        return dispute(spec.target, p["victim"])
    raise ValueError(spec.action)
