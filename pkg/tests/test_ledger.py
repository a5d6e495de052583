import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from chanforge import crypto
from chanforge.errors import (
    AlreadyConsumed,
    BadCredential,
    BadSignature,
    InsufficientFunds,
    PrematureClaim,
    Unauthorized,
)
from chanforge.harness import runner, scenarios
from chanforge.ledger import Ledger


def accounts(n=3, balance=100):
    ledger = Ledger()
    keys = [crypto.gen_keypair(bytes([k + 1]) * 32) for k in range(n)]
    names = [f"addr-{k}" for k in range(n)]
    for name, key in zip(names, keys):
        ledger.open_account(name, key.verification_key, balance)
    return ledger, names, keys


def test_advance():
    ledger = Ledger()
    assert ledger.advance(1) == 1
    assert ledger.advance(3) == 4


def test_watchers_fire_at_height():
    ledger = Ledger()
    fired = []
    ledger.watch(3, fired.append)
    ledger.advance(2)
    assert fired == []
    ledger.advance(1)
    assert fired == [3]


def test_zero_transfer_is_noop_receipt():
    ledger, names, keys = accounts()
    receipt = ledger.signed_transfer(keys[0], names[0], names[1], 0)
    assert receipt.amount == 0
    assert ledger.balance(names[0]) == ledger.balance(names[1]) == 100


def test_insufficient_funds_changes_nothing():
    ledger, names, keys = accounts(balance=50)
    before = ledger.dump()
    with pytest.raises(InsufficientFunds):
        ledger.signed_transfer(keys[0], names[0], names[1], 60)
    assert ledger.dump() == before


def test_transfer_needs_sender_signature():
    ledger, names, keys = accounts()
    dgst, seq = ledger.transfer_digest(names[0], names[1], 5)
    with pytest.raises(BadSignature):
        ledger.transfer(names[0], names[1], 5, crypto.sign(keys[1], dgst, seq))


def test_transfer_signature_cannot_be_replayed():
    ledger, names, keys = accounts()
    dgst, seq = ledger.transfer_digest(names[0], names[1], 5)
    sig = crypto.sign(keys[0], dgst, seq)
    ledger.transfer(names[0], names[1], 5, sig)
    with pytest.raises(BadSignature):
        ledger.transfer(names[0], names[1], 5, sig)


def test_random_transfer_fuzz_conserves_supply():
    ledger, names, keys = accounts()
    rng = random.Random(0)
    total = sum(ledger.balances.values())
    for _ in range(1000):
        a, b = rng.sample(range(3), 2)
        amount = rng.randint(0, 120)
        try:
            ledger.signed_transfer(keys[a], names[a], names[b], amount)
        except InsufficientFunds:
            pass
        assert sum(ledger.balances.values()) == total
    assert ledger.conservation_delta() == 0


def test_escrow_lock_and_refund_restores_owner():
    ledger, names, _ = accounts()
    escrow = ledger.lock_escrow(names[0], 100, 10, names[1])
    assert ledger.balance(names[0]) == 0
    assert ledger.conservation_delta() == 0
    ledger.refund_escrow(escrow.id, authorized_by=names[1])
    assert ledger.balance(names[0]) == 100


def test_claim_boundary_and_double_claim():
    ledger, names, _ = accounts()
    secret = b"s" * 32
    escrow = ledger.lock_escrow(names[0], 60, 10, names[1], crypto.digest(secret))
    ledger.advance(9)
    with pytest.raises(PrematureClaim):
        ledger.claim_escrow(escrow.id, secret)
    ledger.advance(1)
    with pytest.raises(BadCredential):
        ledger.claim_escrow(escrow.id, b"x" * 32)
    assert ledger.claim_escrow(escrow.id, secret) == 60
    assert ledger.balance(names[1]) == 160
    with pytest.raises(AlreadyConsumed):
        ledger.claim_escrow(escrow.id, secret)


def test_partial_claim_returns_rest_to_owner():
    ledger, names, _ = accounts()
    secret = b"s" * 32
    escrow = ledger.lock_escrow(names[0], 100, 0, names[1], crypto.digest(secret))
    ledger.claim_escrow(escrow.id, secret, amount=40)
    assert ledger.balance(names[1]) == 140
    assert ledger.balance(names[0]) == 60


def test_refund_only_by_beneficiary():
    ledger, names, _ = accounts()
    escrow = ledger.lock_escrow(names[0], 10, 0, names[1])
    with pytest.raises(Unauthorized):
        ledger.refund_escrow(escrow.id, authorized_by=names[0])


@given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 2), st.integers(0, 150), st.booleans()), max_size=40))
def test_conservation_under_mixed_operations(ops):
    ledger, names, keys = accounts()
    live = []
    for a, b, amount, lock in ops:
        try:
            if lock:
                live.append(ledger.lock_escrow(names[a], amount, 0, names[b]).id)
            elif live and amount % 3 == 0:
                escrow = ledger.escrow(live.pop())
                ledger.refund_escrow(escrow.id, authorized_by=escrow.beneficiary)
            else:
                ledger.signed_transfer(keys[a], names[a], names[b], amount)
        except InsufficientFunds:
            pass
        assert ledger.conservation_delta() == 0
        assert min(ledger.balances.values()) >= 0


def test_contract_commit_read_and_history_growth():
    run = runner.execute(scenarios.honest_trade())
    ledger = run.sim.ledger
    esc = run.sim.contracts.escs()[0]
    history = ledger.history(esc.scid)
    stored = ledger.read_contract(esc.scid)
    assert stored.to_fields() == history[-1].record.to_fields()
    # the cooperative close appended exactly one version
    assert history[-1].sigs.action == "close"
    assert history[-1].record.version == history[-2].record.version + 1


def test_commit_with_missing_signature_is_refused():
    from chanforge.contracts import MscRecord, make_sid, sign_record

    ledger = Ledger()
    merchant = crypto.gen_keypair(b"\x01" * 32)
    participant = crypto.gen_keypair(b"\x02" * 32)
    record = MscRecord(
        make_sid("u-m", "u-p", 0), "u-m", "u-p", merchant.verification_key, participant.verification_key
    )
    with pytest.raises(BadSignature):
        ledger.commit_contract(record, sign_record(record, "create", [("u-p", participant)]))
    assert not ledger.has_contract(record.sid)
    ledger.commit_contract(record, sign_record(record, "create", [("u-m", merchant), ("u-p", participant)]))
    stored = ledger.read_contract(record.sid)
    assert crypto.canonical_encode(stored.to_fields()) == crypto.canonical_encode(record.to_fields())
