"""Shared builders for the test suite."""

from __future__ import annotations

import json
import random
from pathlib import Path

from chanforge import crypto
from chanforge.channel import ChannelState
from chanforge.contracts import make_channel_id, make_scid
from chanforge.harness import runner, scenarios
from chanforge.harness.config import from_dict
from chanforge.states import FundingSource, make_balances

VECTORS = json.loads((Path(__file__).parent / "vectors" / "crypto_vectors.json").read_text())


def channel_pair(deposits=(100, 100), quantities=(0, 0), t_delta=50, seed=0):
    """Two activated endpoints of a fresh channel, outside any simulation."""
    rng = random.Random(seed)
    keys = [crypto.gen_keypair(rng.randbytes(32)) for _ in range(2)]
    parties = ("u-a", "u-b")
    vkeys = (keys[0].verification_key, keys[1].verification_key)
    scid = make_scid(*parties, 0)
    ch = make_channel_id(scid, 0)
    nonces = crypto.NonceSource(rng)
    funding = tuple(
        FundingSource("deposit", f"esc-{k}", deposits[k], f"addr-{k}", quantities[k]) for k in (0, 1)
    )
    ends = [ChannelState(ch, scid, k, parties, vkeys, keys[k], nonces, t_delta, funding) for k in (0, 1)]
    state0 = ends[0].make_state(0, make_balances(deposits[0], deposits[1], quantities[0], quantities[1]))
    state0 = ends[1].countersign(state0)
    for end in ends:
        end.activate(state0, 0)
    return ends


def update(proposer, responder, balances, height=1):
    msg = proposer.propose_update(balances, height)
    reply = responder.accept_update(msg, height)
    return msg, reply, proposer.complete_update(reply)


def snapshot(end):
    return (end.phase, end.latest, end.pending, len(end.history), end.dispute)


def ready_sim(config: dict | None = None, rounds: int = scenarios.TRADE_ROUND - 1):
    """A simulation of the honest-trade set-up stepped until the channel is active.

    Only the set-up and open actions of ``config`` are kept, so tests drive
    the rest themselves.
    """
    config = dict(config or scenarios.honest_trade())
    config["schedule"] = [s for s in config["schedule"] if s["round"] <= scenarios.OPEN_ROUND]
    sim, monitor = runner.build(from_dict(config))
    sim.run(rounds)
    return sim, monitor


def sim_state(sim) -> str:
    """Everything observable about the ledger and the parties' channels, as text."""
    ends = {}
    for name, party in sorted(sim.parties.items()):
        for scid, s in sorted(party.sessions.items()):
            chans = ([s.channel] if s.channel is not None else []) + s.closed
            ends[f"{name}:{scid}"] = [
                [c.channel_id, c.phase.value, c.latest.to_json() if c.latest else None,
                 c.pending.to_json() if c.pending else None, len(c.history)]
                for c in chans
            ]
        ends[f"{name}:queue"] = len(party.queue)
    return json.dumps({"ledger": sim.ledger.dump(), "ends": ends}, sort_keys=True, default=str)
