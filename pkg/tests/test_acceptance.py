"""The ten acceptance criteria, each at its stated tolerance and time limit.

Every test prints one PASS/FAIL line; the same lines are repeated in the
pytest terminal summary.
"""

import json
import os
import random
import subprocess
import sys

from acceptance import criterion
from helpers import channel_pair, ready_sim, sim_state, snapshot, update

from chanforge.errors import (
    AlreadyOpen,
    BadSignature,
    ChannelDisputed,
    DisputeLimit,
    DuplicateDispute,
    NotOpen,
    Refused,
    StaleClose,
    StaleCounter,
    UnknownChannel,
)
from chanforge.harness import runner, scenarios
from chanforge.marketplace import shape_problems
from chanforge.network import Network
from chanforge.states import make_balances, totals

CHANNEL_KINDS = {"channel-init", "channel-accept", "update", "update-success", "finalise", "finalise-ack"}

# trace hash of every scenario run by a suite, keyed by its config, for the determinism check
HASHES: dict[str, str] = {}


def _execute(config, **kwargs):
    run = runner.execute(config, **kwargs)
    HASHES[json.dumps(config, sort_keys=True)] = run.report.trace_hash
    return run


# 1 -------------------------------------------------------------------------


def test_conservation():
    with criterion(1, "conservation: built-ins and 100 random seeds end with delta 0", 30):
        configs = [scenarios.builtin(name) for name in scenarios.BUILTINS]
        configs += [scenarios.random_trade(seed) for seed in range(100)]
        for config in configs:
            report = _execute(config, keep_trace=False).report
            assert report.conservation_delta == 0, (config["name"], config["seed"])
            assert report.invariants["ledger-conservation"]["passed"]
            assert report.invariants["channel-conservation"]["passed"]
            assert report.passed, (config["name"], report.violations)


# 2 -------------------------------------------------------------------------


def _latest_cosigned(run, name):
    latest = None
    for session in run.sim.party(name).sessions.values():
        for endpoint in ([session.channel] if session.channel else []) + session.closed:
            if endpoint.latest is not None:
                latest = endpoint.latest
    return latest


def _interruption_points():
    """Every channel message of the honest five-update session, as (sender, kind, nth, round)."""
    run = _execute(scenarios.honest_trade())
    names = {run.sim.uutid(n): n for n in ("P1", "P2")}
    counts = {}
    points = []
    for e in run.sim.trace.events:
        if e["kind"] == "queued" and e["details"]["kind"] in CHANNEL_KINDS:
            key = (names[e["actor"]], e["details"]["kind"])
            counts[key] = counts.get(key, 0) + 1
            points.append((*key, counts[key] - 1, e["round"]))
    return points


def test_atomicity():
    with criterion(2, "atomicity: no single interruption splits the honest endpoints", 60):
        points = _interruption_points()
        assert sum(1 for p in points if p[1] == "update") == 5
        runs = 0
        for seed in range(10):
            for sender, kind, nth, round_ in points:
                for mode in ("delay", "stall"):
                    config = scenarios.honest_trade()
                    config["seed"] = seed
                    if mode == "delay":
                        params = {"kind": kind, "nth": nth, "rounds": config["max_delay"]}
                        config["adversary"] = [{"action": "delay", "target": sender, "round": 1, "params": params}]
                    else:
                        config["adversary"] = [
                            {"action": "corrupt", "target": sender, "round": 0},
                            {"action": "stall", "target": sender, "round": round_},
                        ]
                    run = _execute(config)
                    runs += 1
                    where = (seed, mode, sender, kind, nth)
                    assert run.report.passed, (where, run.report.violations)
                    honest = [n for n in ("P1", "P2") if mode == "delay" or n != sender]
                    latest = {n: _latest_cosigned(run, n) for n in honest}
                    hstates = {s.hstate if s is not None else None for s in latest.values()}
                    assert len(hstates) == 1, (where, {n: s and s.i for n, s in latest.items()})
                    if mode == "delay":
                        posted = [e.posted for esc in run.sim.contracts.escs() for e in esc.channels.values()]
                        assert all(p is not None and p.hstate in hstates for p in posted), where
        assert runs == len(points) * 20


# 3 -------------------------------------------------------------------------


def test_stall_liveness():
    with criterion(3, "stall: honest funds available within t_delta + 3 rounds", 10):
        for t_delta in (5, 50, 500):
            config = scenarios.griefing_stall(t_delta)
            run = _execute(config)
            assert run.report.passed
            sim = run.sim
            p1 = sim.party("P1")
            events = sim.trace.events
            last_msg = max(e["round"] for e in events if e["kind"] == "queued" and e["actor"] == p1.uutid)
            final = sim.ledger.balance(p1.address)
            assert final == 990
            # the round from which P1's ledger balance is final and nothing of P1's is left in escrow
            available = next(
                e["round"]
                for e in events
                if e["kind"] == "ledger" and e["details"].get("balances", {}).get(p1.address) == final
            )
            assert all(x.consumed for x in sim.ledger.escrows.values() if x.owner == p1.address)
            rounds = -(-t_delta // config["blocks_per_round"])
            assert available <= last_msg + rounds + 3, (t_delta, last_msg, available)


# 4 -------------------------------------------------------------------------


def _flip(data: bytes, rng) -> bytes:
    k = rng.randrange(len(data))
    return data[:k] + bytes([data[k] ^ (1 << rng.randrange(8))]) + data[k + 1 :]


def _other_balances(balances, rng):
    total = balances[0][0] + balances[1][0]
    while True:
        left = rng.randint(0, total)
        new = make_balances(left, total - left, balances[0][1], balances[1][1])
        if new != balances:
            return new


def _forgery_fixture():
    """A channel at version 3 with a proposal for version 4 in flight.

    A second, identically seeded pair co-signs version 4 so there is a valid
    'update-success' to tamper with without touching the real endpoints.
    """
    a, b = channel_pair(seed=11)
    shadow_a, shadow_b = channel_pair(seed=11)
    old_updates, old_replies = [], []
    for k in range(3):
        bal = make_balances(90 - 10 * k, 110 + 10 * k)
        msg, reply, _ = update(a, b, bal)
        update(shadow_a, shadow_b, bal)
        old_updates.append(msg)
        old_replies.append(reply)
    msg4 = a.propose_update(make_balances(50, 150), 2)
    assert shadow_a.propose_update(make_balances(50, 150), 2) == msg4
    reply4 = shadow_b.accept_update(msg4, 2)
    return a, b, msg4, reply4, old_updates, old_replies


def _mutate_update(msg, old, rng):
    choice = rng.randrange(9)
    if choice == 0:
        return rng.choice(old), StaleCounter
    if choice == 1:
        return msg.replace(counter=rng.randint(0, 3)), StaleCounter
    if choice == 2:
        return msg.replace(session=msg.session + rng.choice(["x", "-0", "1"])), UnknownChannel
    if choice == 3:
        return msg.replace(scid="scid-" + rng.randbytes(8).hex()), UnknownChannel
    if choice == 4:
        return msg.replace(hstate=_flip(msg["hstate"], rng)), BadSignature
    if choice == 5:
        return msg.replace(nonce=_flip(msg["nonce"], rng)), BadSignature
    if choice == 6:
        return msg.replace(sig=_flip(msg["sig"], rng)), BadSignature
    if choice == 7:
        return msg.replace(balances=_other_balances(msg["balances"], rng)), BadSignature
    # skipping ahead breaks the signed counter
    return msg.replace(counter=msg.counter + rng.randint(1, 5)), BadSignature


def _mutate_success(reply, old, rng):
    state = reply["state"]
    choice = rng.randrange(6)
    if choice == 0:
        return rng.choice(old), StaleCounter
    if choice == 1:
        side = rng.randrange(2)
        return reply.replace(state=state.with_sig(side, _flip(state.sigs[side], rng))), BadSignature
    if choice == 2:
        forged = type(state)(state.scid, state.channel_id, state.i, state.balances, state.nonce, _flip(state.hstate, rng), state.sigs)
        return reply.replace(state=forged), BadSignature
    if choice == 3:
        return reply.replace(balances=_other_balances(state.balances, rng)), BadSignature
    if choice == 4:
        bal = _other_balances(state.balances, rng)
        forged = type(state)(state.scid, state.channel_id, state.i, bal, state.nonce, state.hstate, state.sigs)
        return reply.replace(state=forged, balances=bal), BadSignature
    return reply.replace(session=reply.session + "x"), UnknownChannel


def test_forgery_and_replay():
    with criterion(4, "forgery/replay: 10^4 tampered messages rejected, state unchanged", 60):
        a, b, msg4, reply4, old_updates, old_replies = _forgery_fixture()
        rng = random.Random(2024)
        before_a, before_b = snapshot(a), snapshot(b)
        checked = 0
        for n in range(12000):
            if n % 2:
                bad, expected = _mutate_update(msg4, old_updates, rng)
                target, handler = b, b.accept_update
                args = (bad, 2)
            else:
                bad, expected = _mutate_success(reply4, old_replies, rng)
                target, handler = a, a.complete_update
                args = (bad,)
            try:
                handler(*args)
            except expected:
                pass
            except Exception as exc:
                raise AssertionError(f"mutation {n} raised {type(exc).__name__}, wanted {expected.__name__}")
            else:
                raise AssertionError(f"mutation {n} was accepted")
            checked += 1
            assert snapshot(target) == (before_b if target is b else before_a)
        assert checked >= 10**4
        # the untouched messages still go through
        b.accept_update(msg4, 2)
        assert a.complete_update(reply4).i == 4 == b.latest.i


# 5 -------------------------------------------------------------------------


def _refused(sim, fn, expected):
    before = sim_state(sim)
    count = sim.trace.count
    try:
        fn()
    except expected:
        pass
    else:
        raise AssertionError(f"expected {expected.__name__}")
    assert sim_state(sim) == before
    return sim.trace.count - count


def test_environment_rules():
    with criterion(5, "environment rules: seven forbidden requests return bottom", 5):
        sim, _ = ready_sim()
        peer = sim.uutid("P2")
        # 1. re-open an opened channel
        _refused(sim, lambda: sim.act("P1", "open", peer=peer, amounts=[100, 100]), AlreadyOpen)
        assert sim.trace.events[-1]["kind"] == "refused"
        # 4. close on an old state when a newer one exists
        sim.act("P1", "pay", peer=peer, amount=5)
        sim.act("P1", "pay", peer=peer, amount=5)
        sim.run(6)
        endpoint = sim.party("P1").channel_with(peer)
        assert endpoint.latest.i == 2
        sim.contracts.post_state(endpoint.scid, endpoint.channel_id, endpoint.latest)
        _refused(
            sim,
            lambda: sim.contracts.post_state(endpoint.scid, endpoint.channel_id, endpoint.history[1]),
            StaleClose,
        )

        sim, _ = ready_sim()
        peer = sim.uutid("P2")
        endpoint = sim.party("P1").channel_with(peer)
        sim.act("P1", "dispute", peer=peer)
        # 6. raise a dispute while one is raised
        _refused(sim, lambda: sim.act("P1", "dispute", peer=peer), DuplicateDispute)
        # 5. update while disputed
        _refused(sim, lambda: endpoint.propose_update(make_balances(90, 110), sim.ledger.height), ChannelDisputed)

        run = _execute(scenarios.honest_trade())
        sim = run.sim
        peer = sim.uutid("P2")
        closed = next(iter(sim.party("P1").sessions.values())).closed[0]
        # 2. close a closed channel
        _refused(sim, lambda: sim.act("P1", "close", peer=peer), NotOpen)
        _refused(sim, lambda: closed.close_channel("trade-complete"), Refused)
        # 3. update a channel that is not open
        _refused(sim, lambda: closed.propose_update(make_balances(90, 110), sim.ledger.height), NotOpen)

        # 7. open when over the dispute limit
        sim = _execute(scenarios.dispute_storm()).sim
        for me, other in (("P1", "P2"), ("P2", "P1")):
            _refused(sim, lambda: sim.act(me, "open", peer=sim.uutid(other), amounts=[10, 10]), DisputeLimit)


# 6 -------------------------------------------------------------------------

IDENTITIES = {"P1": "Alice Prosumer", "P2": "Bob Consumer", "M": "Mallory Utility Co"}
HONEST = ("honest-trade", "random-trade", "cns-settlement", "marketplace", "marketplace-partial", "marketplace-tso")


def _renamed(config):
    text = json.dumps(config)
    for short, full in IDENTITIES.items():
        text = text.replace(json.dumps(short), json.dumps(full))
    return json.loads(text)


def test_privacy(monkeypatch):
    sent = []
    original = Network.send_secure

    def spy(self, sender, receiver, payload):
        sent.append(payload)
        return original(self, sender, receiver, payload)

    monkeypatch.setattr(Network, "send_secure", spy)
    with criterion(6, "privacy: no identity or plaintext state in ledger dumps and leaks", 10):
        for name in HONEST:
            sent.clear()
            run = _execute(_renamed(scenarios.builtin(name)))
            sim = run.sim
            public = json.dumps(sim.ledger.dump()) + json.dumps([x.to_json() for x in sim.network.adversary.observed_leaks])
            identities = {e["details"]["identity"] for e in sim.trace.events if e["kind"] == "party"}
            assert identities <= set(IDENTITIES.values()) and identities
            for identity in identities:
                assert identity not in public, (name, identity)
            assert sent
            posted = {e.posted.nonce for esc in sim.contracts.escs() for e in esc.channels.values() if e.posted}
            for msg in sent:
                assert msg.encode().hex() not in public, (name, msg.kind)
                nonce = msg.get("nonce")
                if nonce and nonce not in posted:
                    assert nonce.hex() not in public, (name, msg.kind)
            assert sim.network.adversary.observed_payloads == []
            assert run.report.invariants["uutid-masking"]["passed"]


# 7 -------------------------------------------------------------------------

GLOBAL_KINDS = {"round-end", "start", "run-end"}


def _projection(run, k):
    ids = set()
    for name in (f"A{k}", f"B{k}", f"M{k}"):
        party = run.sim.party(name)
        ids |= {party.uutid, party.address}
    out = []
    for e in run.sim.trace.events:
        if e["kind"] in GLOBAL_KINDS:
            continue
        text = json.dumps(e["details"])
        if e["actor"] in ids or (e["actor"] == "" and any(i in text for i in ids)):
            out.append({key: v for key, v in e.items() if key != "seq"})
    return out


def test_independence():
    with criterion(7, "independence: 8 concurrent channels project to their solo runs", 30):
        full = _execute(scenarios.independence())
        assert full.report.passed
        for k in range(8):
            solo = _execute(scenarios.independence(only=k))
            mine = _projection(full, k)
            assert len(mine) > 50
            assert mine == _projection(solo, k), k


# 8 -------------------------------------------------------------------------


def test_cns_settlement():
    with criterion(8, "CNS: margin 1 recovers every debt; worked example reproduced", 30):
        rng = random.Random(8)
        for n in range(100):
            loss = rng.randint(0, 100)
            config = scenarios._cns_trade(f"cns-{n}", "randomized period", "1", loss)
            period = rng.randint(60, 160)
            config["merchant"]["period_end"] = period
            config["merchant"]["policy"]["period_length"] = period
            run = _execute(config)
            (report,) = run.sim.party("M").reports
            assert report.unrecovered == [], n
            assert sum(report.net.values()) == 0, n
            assert sum(d for _, d in report.collateral_draws) == loss
            assert run.report.passed and run.report.conservation_delta == 0

        run = _execute(scenarios.cns_settlement())
        (report,) = run.sim.party("M").reports
        assert [d for _, d in report.collateral_draws] == [40]
        assert [r for _, r in report.refunds] == [60]
        assert [p[2] for p in report.payouts] == [40]
        assert report.unrecovered == []


# 9 -------------------------------------------------------------------------


def test_marketplace():
    with criterion(9, "marketplace: dual conservation, record shapes, partial fills", 15):
        finals = {}
        for name in ("marketplace", "marketplace-partial", "marketplace-tso"):
            run = _execute(scenarios.builtin(name))
            assert run.report.passed, run.report.violations
            sim = run.sim
            for esc in sim.contracts.escs():
                for entry in esc.channels.values():
                    assert totals(entry.final) == totals(entry.initial)
                    finals[name] = entry.final
            for party in sim.parties.values():
                for session in party.sessions.values():
                    for endpoint in ([session.channel] if session.channel else []) + session.closed:
                        base = totals(endpoint.history[0].balances)
                        assert all(totals(s.balances) == base for s in endpoint.history)
            for record in sim.contracts.escs() + sim.contracts.mscs():
                assert shape_problems(record.to_json()) == [], (name, record.record_id)
        assert finals["marketplace"] == finals["marketplace-partial"] == ((50, 10), (150, 0))

        from chanforge.marketplace import EnergyOffer, MarketRole, negotiate

        start = make_balances(100, 100, 0, 10)
        roles = (MarketRole.CONSUMER, MarketRole.PROSUMER)
        offer = EnergyOffer("u-b", 10, 5, 100)
        (one_shot,) = negotiate(start, offer, 1, roles)
        partial = negotiate(start, offer, 1, roles, fills=[4, 3, 3])
        assert partial[-1] == one_shot
        assert [p[0] for p in one_shot] == [50, 150]
        assert [p[1] for p in one_shot] == [10, 0]


# 10 ------------------------------------------------------------------------


def _hash_in_subprocess(name, hash_seed):
    env = dict(os.environ, PYTHONHASHSEED=str(hash_seed))
    env.pop("CHANFORGE_SEED", None)
    out = subprocess.run(
        [sys.executable, "-m", "chanforge.harness.cli", "run", name],
        capture_output=True,
        text=True,
        env=env,
        check=False,
    )
    return next(line for line in out.stdout.splitlines() if line.startswith("trace hash"))


def test_determinism():
    with criterion(10, "determinism: every suite re-run with identical seeds gives identical hashes", 60):
        if len(HASHES) < 100:
            # run on its own: fill in the scenarios of the other suites first
            test_conservation()
            test_atomicity()
            test_stall_liveness()
            test_independence()
            test_cns_settlement()
            test_marketplace()
        first = dict(HASHES)
        for key, digest in first.items():
            assert runner.run(json.loads(key), keep_trace=False).trace_hash == digest, json.loads(key)["name"]
        # and across interpreter processes with different hash randomisation
        for name in ("honest-trade", "independence"):
            assert _hash_in_subprocess(name, 1) == _hash_in_subprocess(name, 2)
