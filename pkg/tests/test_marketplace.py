import pytest
from hypothesis import given
from hypothesis import strategies as st

from chanforge.errors import RoleViolation
from chanforge.harness import runner, scenarios
from chanforge.marketplace import EnergyOffer, MarketRole, fill, negotiate, role_validator, shape_problems
from chanforge.states import make_balances, totals

ROLES = (MarketRole.CONSUMER, MarketRole.PROSUMER)
START = make_balances(100, 100, 0, 10)


def test_full_fill():
    (version1,) = negotiate(START, EnergyOffer("u-b", 10, 5, 100), 1, ROLES)
    assert version1 == ((50, 10), (150, 0))


def test_consumer_cannot_sell():
    with pytest.raises(RoleViolation):
        negotiate(make_balances(100, 100, 10, 0), EnergyOffer("u-a", 10, 5, 100), 0, ROLES)
    check = role_validator(ROLES)
    with pytest.raises(RoleViolation):
        check(make_balances(100, 100, 10, 0), make_balances(150, 50, 0, 10), 0)


def test_partial_fills_match_one_shot():
    steps = negotiate(START, EnergyOffer("u-b", 10, 5, 100), 1, ROLES, fills=[4, 3, 3])
    assert steps[-1] == fill(START, 1, 10, 5)
    assert [s[0][1] for s in steps] == [4, 7, 10]


def test_expired_offer():
    with pytest.raises(RoleViolation):
        negotiate(START, EnergyOffer("u-b", 10, 5, 100), 1, ROLES, height=101)


def test_fills_must_fit_offer():
    with pytest.raises(ValueError):
        negotiate(START, EnergyOffer("u-b", 10, 5, 100), 1, ROLES, fills=[6, 6])


@given(st.lists(st.integers(1, 5), min_size=1, max_size=6), st.integers(0, 8))
def test_fill_path_independence(fills, price):
    quantity = sum(fills)
    start = make_balances(price * quantity + 7, 3, 0, quantity + 2)
    offer = EnergyOffer("u-b", quantity, price, 100)
    stepwise = negotiate(start, offer, 1, ROLES, fills=fills)
    assert stepwise[-1] == negotiate(start, offer, 1, ROLES)[0]
    assert all(totals(s) == totals(start) for s in stepwise)


def test_marketplace_scenario_finals():
    run = runner.execute(scenarios.marketplace())
    esc = run.sim.contracts.escs()[0]
    entry = next(iter(esc.channels.values()))
    assert entry.final == ((50, 10), (150, 0))
    assert run.report.passed


def test_zero_trade_keeps_packets():
    config = scenarios.marketplace()
    config["offers"] = []
    run = runner.execute(config)
    entry = next(iter(run.sim.contracts.escs()[0].channels.values()))
    assert entry.final == ((100, 0), (100, 10))
    for sid in run.sim.contracts.escs()[0].sids:
        assert run.sim.contracts.read_msc(sid).final_quantity == (0, 10)


def test_tso_sale_through_msc():
    run = runner.execute(scenarios.marketplace_tso())
    sim = run.sim
    p1 = sim.party("P1")
    msc = sim.contracts.read_msc(p1.sid_for(""))
    assert msc.final_quantity is not None
    side = sim.contracts.escs()[0].side_of(p1.uutid)
    assert msc.final_quantity[side] == 8
    assert all(n.status == "settled" for n in msc.debit_ledger)
    assert run.report.passed


def test_record_shapes():
    for name in ("marketplace", "marketplace-partial", "marketplace-tso"):
        run = runner.execute(scenarios.builtin(name))
        for record in run.sim.contracts.escs() + run.sim.contracts.mscs():
            assert shape_problems(record.to_json()) == []


def test_shape_checker_flags_missing_quantity():
    assert shape_problems({"type": "esc", "balances": [[1], [2, 0]]}) == ["esc.balances"]
