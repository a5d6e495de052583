import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chanforge.channel import Phase
from chanforge.errors import (
    AlreadyClosed,
    BadSignature,
    ChannelDisputed,
    CreditLimitExceeded,
    DuplicateDispute,
    NonConservingBalance,
    StaleCounter,
    TimerElapsed,
)
from chanforge.harness import runner, scenarios
from chanforge.states import DisputeRecord, make_balances
from helpers import channel_pair, ready_sim, snapshot, update


def test_version_zero():
    a, b = channel_pair()
    assert a.latest.i == 0
    assert a.latest.balances == make_balances(100, 100)
    assert a.latest.is_cosigned(a.vkeys)


def test_open_creates_two_escrows():
    sim, _ = ready_sim()
    esc = sim.contracts.escs()[0]
    entry = next(iter(esc.channels.values()))
    assert [f.kind for f in entry.funding] == ["deposit", "deposit"]
    for f in entry.funding:
        escrow = sim.ledger.escrow(f.ref)
        assert escrow.amount == 100 and escrow.beneficiary == esc.scid and not escrow.consumed


def test_simple_update():
    a, b = channel_pair()
    update(a, b, make_balances(90, 110))
    assert a.latest.i == b.latest.i == 1
    assert a.latest.balances == make_balances(90, 110)
    assert a.latest == b.latest


def test_replayed_update_is_stale():
    a, b = channel_pair()
    msg, _, _ = update(a, b, make_balances(90, 110))
    before = snapshot(b)
    with pytest.raises(StaleCounter):
        b.accept_update(msg, 2)
    assert snapshot(b) == before


def test_non_conserving_proposal_refused():
    a, _ = channel_pair()
    with pytest.raises(NonConservingBalance):
        a.propose_update(make_balances(90, 100), 1)
    with pytest.raises(NonConservingBalance):
        a.propose_update(make_balances(-10, 210), 1)


def test_expired_channel_refuses_updates():
    a, _ = channel_pair(t_delta=5)
    with pytest.raises(TimerElapsed):
        a.propose_update(make_balances(90, 110), 5)


def test_random_updates_match_delta_sum():
    """Five random conserving updates (seed 7); finals equal deposits plus the deltas."""
    rng = random.Random(7)
    a, b = channel_pair()
    deltas = 0
    for _ in range(5):
        held = a.latest.balances[0][0]
        move = rng.randint(-b.latest.balances[1][0], held)
        deltas += move
        proposer, responder = (a, b) if rng.random() < 0.5 else (b, a)
        update(proposer, responder, make_balances(held - move, a.latest.balances[1][0] + move))
    # independent replay of the history
    replay = [100, 100]
    for prev, cur in zip(a.history, a.history[1:]):
        d = cur.balances[0][0] - prev.balances[0][0]
        replay = [replay[0] + d, replay[1] - d]
    assert a.latest.balances == make_balances(100 - deltas, 100 + deltas)
    assert [p[0] for p in a.latest.balances] == replay
    assert a.latest == b.latest


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.integers(-200, 200)), max_size=8))
def test_counter_and_totals_properties(moves):
    a, b = channel_pair()
    for a_proposes, move in moves:
        cur = a.latest.balances
        new = make_balances(cur[0][0] - move, cur[1][0] + move)
        proposer, responder = (a, b) if a_proposes else (b, a)
        try:
            update(proposer, responder, new)
        except NonConservingBalance:
            assert min(new[0][0], new[1][0]) < 0
            continue
    assert [s.i for s in a.history] == list(range(len(a.history)))
    assert all(s.balances[0][0] + s.balances[1][0] == 200 for s in a.history)
    assert all(s.is_cosigned(a.vkeys) for s in a.history)
    assert a.latest == b.latest


def test_note_funded_side_matches_deposit_side():
    run = runner.execute(scenarios.cns_settlement())
    esc = run.sim.contracts.escs()[0]
    entry = next(iter(esc.channels.values()))
    assert [f.kind for f in entry.funding] == ["credit-note", "deposit"]
    assert entry.initial == make_balances(100, 100)
    escrows = [e for e in run.sim.ledger.escrows.values() if e.beneficiary == esc.scid]
    assert len(escrows) == 1


def test_note_limit_enforced():
    sim, _ = ready_sim(scenarios.cns_settlement())
    p1 = sim.party("P1")
    sid = p1.sid_for(sim.uutid("P2"))
    msc = sim.contracts.read_msc(sid)
    assert msc.outstanding() == msc.credit_limit == 100
    from chanforge import cns

    merchant = sim.party("M")
    with pytest.raises(CreditLimitExceeded):
        cns.issue_credit_note(sim.contracts, sid, merchant.keys, p1.sessions[next(iter(p1.sessions))].scid, 1)


def test_dispute_resolved_by_evidence():
    a, b = channel_pair()
    for k in range(3):
        update(a, b, make_balances(90 - 10 * k, 110 + 10 * k))
    a.raise_dispute(DisputeRecord("u-a", a.channel_id, a.latest.hstate, 3, 0, 50))
    assert a.resolve_dispute(b.latest) == "resolved"
    assert a.phase == Phase.ACTIVE and a.latest.i == 3


def test_second_dispute_refused():
    a, _ = channel_pair()
    a.raise_dispute(DisputeRecord("u-a", a.channel_id, a.latest.hstate, 0, 0, 50))
    with pytest.raises(DuplicateDispute):
        a.dispute_tx("u-a")
    with pytest.raises(ChannelDisputed):
        a.propose_update(make_balances(90, 110), 1)


def test_stalled_peer_closes_at_t_end():
    run = runner.execute(scenarios.griefing_stall(50))
    assert run.report.passed
    p1 = run.sim.party("P1")
    closed = [e for e in run.sim.trace.events if e["kind"] == "channel-closed" and e["actor"] == p1.uutid]
    dispute = [e for e in run.sim.trace.events if e["kind"] == "dispute-raised"][0]
    assert closed[0]["height"] == dispute["height"] + 50
    # P1 paid 10, the stalled 5-coin update never completed
    assert run.sim.ledger.balance(p1.address) == 990


def test_cooperative_close_credits_finals():
    run = runner.execute(scenarios.honest_trade())
    sim = run.sim
    assert sim.ledger.balance(sim.party("P1").address) == 975
    assert sim.ledger.balance(sim.party("P2").address) == 1025
    entry = next(iter(sim.contracts.escs()[0].channels.values()))
    assert entry.final == make_balances(75, 125)
    assert entry.trigger == "trade-complete"


def test_stale_close_loses_to_newer_state():
    run = runner.execute(scenarios.stale_close())
    assert run.report.passed
    entry = next(iter(run.sim.contracts.escs()[0].channels.values()))
    assert entry.posted.i == 4
    assert entry.final == make_balances(140, 60)


def test_close_on_closed_channel():
    a, b = channel_pair()
    a.mark_closed()
    with pytest.raises(AlreadyClosed):
        a.close_channel("trade-complete")


def test_update_success_with_forged_peer_signature():
    a, b = channel_pair()
    msg = a.propose_update(make_balances(90, 110), 1)
    reply = b.accept_update(msg, 1)
    state = reply["state"]
    forged = reply.replace(state=state.with_sig(1, bytes(64)))
    before = snapshot(a)
    with pytest.raises(BadSignature):
        a.complete_update(forged)
    assert snapshot(a) == before


def test_simultaneous_proposals_lower_id_wins():
    a, b = channel_pair()
    mine = a.propose_update(make_balances(90, 110), 1)
    theirs = b.propose_update(make_balances(120, 80), 1)
    # "u-a" < "u-b", so a keeps its proposal and refuses b's
    with pytest.raises(StaleCounter):
        a.accept_update(theirs, 1)
    reply = b.accept_update(mine, 1)
    assert b.pending is None
    a.complete_update(reply)
    assert a.latest == b.latest and a.latest.balances == make_balances(90, 110)
