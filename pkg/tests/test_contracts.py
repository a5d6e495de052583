import pytest

from chanforge.contracts import make_scid
from chanforge.errors import DoubleFinalise
from chanforge.harness import runner, scenarios
from chanforge.harness.scenarios import ESC_ROUND, MSC_ROUND, OPEN_ROUND, _action, _base, _setup
from chanforge.states import make_balances
from helpers import ready_sim


def test_msc_without_cns():
    sim, _ = ready_sim()
    for msc in sim.contracts.mscs():
        assert msc.debit_ledger == [] and msc.collateral_ref == "" and not msc.use_cns


def test_msc_with_cns_posts_collateral():
    sim, _ = ready_sim(scenarios.cns_settlement())
    msc = sim.contracts.read_msc(sim.party("P1").sid_for(""))
    assert msc.use_cns and msc.collateral_ref
    escrow = sim.ledger.escrow(msc.collateral_ref)
    assert escrow.amount == 100
    assert escrow.beneficiary == sim.party("M").address
    assert escrow.owner == sim.party("P1").address


def test_msc_aborts_when_merchant_stalls():
    config = _base("msc-stall", "merchant never answers")
    config["adversary"] = [
        {"action": "corrupt", "target": "M", "round": 0},
        {"action": "stall", "target": "M", "round": 1},
    ]
    config["schedule"] = [_action(MSC_ROUND, "P1", "msc-init", merchant="M")]
    run = runner.execute(config)
    aborts = [e for e in run.sim.trace.events if e["kind"] == "abort"]
    assert aborts and aborts[0]["details"]["what"] == "msc-init"
    assert run.sim.ledger.contracts == {}
    assert run.report.passed


def test_scid_counter():
    config = scenarios.honest_trade()
    config["schedule"] += [_action(OPEN_ROUND + 30, "P2", "esc-init", peer="P1")]
    run = runner.execute(config)
    p1, p2 = run.sim.uutid("P1"), run.sim.uutid("P2")
    scids = sorted(e.scid for e in run.sim.contracts.escs())
    assert scids == sorted([make_scid(p1, p2, 0), make_scid(p1, p2, 1)])
    assert make_scid(p1, p2, 0) == make_scid(p2, p1, 0)


def test_peer_refusal_leaves_ledger_alone():
    config = scenarios.honest_trade()
    config["schedule"] = [s for s in config["schedule"] if s["action"] in ("msc-init", "esc-init")]
    from chanforge.harness.config import from_dict

    sim, _ = runner.build(from_dict(config))
    sim.party("P2").accept_esc = False
    sim.run(ESC_ROUND - 1)
    before = sim.ledger.dump()
    sim.run(10)
    assert sim.contracts.escs() == []
    assert sim.ledger.dump()["contracts"] == before["contracts"]
    assert any(e["kind"] == "abort" and e["details"]["what"].startswith("esc") for e in sim.trace.events)


def test_both_cns_exchange_notices():
    config = _base("both-cns", "both sides use credit")
    config["merchant"] = {"name": "M", "balance": 0, "policy": {"collateral_window": 40}}
    config["schedule"] = _setup(["P1", "P2"], [("P1", "P2")], cns={"P1": 50, "P2": 50})
    run = runner.execute(config)
    for name in ("P1", "P2"):
        party = run.sim.party(name)
        session = next(iter(party.sessions.values()))
        assert session.peer_notice
        assert party._check_notice(session.peer_notice)


def test_dispute_thresholds():
    run = runner.execute(scenarios.dispute_storm())
    contracts = run.sim.contracts
    p2 = run.sim.uutid("P2")
    esc = contracts.escs()[0]
    history = run.sim.ledger.history(esc.scid)
    statuses = []
    for version in history:
        record = version.record
        statuses.append((len(record.dispute_list), contracts.list_status(record).get(p2)))
    seen = dict(statuses)
    assert seen[1] is None
    assert seen[3] == "grey"
    assert seen[5] == "black"
    assert contracts.blacklisted(p2)
    # after the fifth dispute both a new channel and a new ESC are refused
    assert run.report.rejections.get("dispute-limit") == 2
    # disputes are mirrored into both MSCs
    for sid in esc.sids:
        assert len(contracts.read_msc(sid).dispute_list) == 5


def test_channel_result_sums_deltas():
    run = runner.execute(scenarios.honest_trade())
    esc = run.sim.contracts.escs()[0]
    entry = next(iter(esc.channels.values()))
    assert entry.initial == make_balances(100, 100)
    assert entry.final == make_balances(75, 125)
    assert esc.final_balances == make_balances(75, 125)


def test_zero_update_close_returns_deposits():
    config = scenarios.honest_trade()
    config["schedule"] = [s for s in config["schedule"] if s["action"] != "pay"]
    run = runner.execute(config)
    entry = next(iter(run.sim.contracts.escs()[0].channels.values()))
    assert entry.final == entry.initial == make_balances(100, 100)
    assert run.sim.ledger.balance(run.sim.party("P1").address) == 1000


def test_replayed_finalise_refused():
    run = runner.execute(scenarios.honest_trade())
    sim = run.sim
    esc = sim.contracts.escs()[0]
    entry = next(iter(esc.channels.values()))
    history = sim.ledger.history(esc.scid)
    close = history[-1]
    assert close.sigs.action == "close"
    from chanforge.channel import FinaliseTx

    sigs = tuple(sig for _, _, sig in close.sigs.entries)
    tx = FinaliseTx(entry.posted, sigs, "trade-complete")
    before = sim.ledger.dump()
    with pytest.raises(DoubleFinalise):
        sim.contracts.apply_channel_result(esc.scid, tx)
    assert sim.ledger.dump() == before
