"""Built-in scenarios, embedded so the acceptance suite needs no files.

Every builder returns a JSON-shaped config dict. The common set-up puts all
parties under one merchant: optional CNS applications in round 1, MSCs from
round 4, ESCs from round 12 and channel opens from round 18, which leaves
room for the note round trips before trading starts around round 26.
"""

from __future__ import annotations

import random
from typing import Callable

CNS_ROUND = 1
MSC_ROUND = 4
ESC_ROUND = 12
OPEN_ROUND = 18
TRADE_ROUND = 26


def _action(round_: int, party: str, action: str, **params) -> dict:
    return {"round": round_, "party": party, "action": action, "params": params}


def _setup(
    parties: list[str],
    pairs: list[tuple[str, str]],
    merchant: str = "M",
    cns: dict[str, int] | None = None,
) -> list[dict]:
    """Schedule MSCs for ``parties`` and ESCs for ``pairs`` (initiator first)."""
    cns = cns or {}
    schedule = []
    for name, limit in cns.items():
        schedule.append(_action(CNS_ROUND, name, "cns-apply", merchant=merchant, limit=limit, liability=limit))
    for name in parties:
        if name == merchant:
            continue
        schedule.append(_action(MSC_ROUND, name, "msc-init", merchant=merchant, use_cns=name in cns))
    for a, b in pairs:
        schedule.append(_action(ESC_ROUND, a, "esc-init", peer=b))
    return schedule


def _base(name: str, description: str, **extra) -> dict:
    config = {
        "name": name,
        "description": description,
        "seed": 42,
        "mode": "plain",
        "t_delta": 50,
        "blocks_per_round": 1,
        "max_rounds": 400,
        "max_delay": 10,
        "timeout": 3,
        "merchant": {"name": "M", "balance": 0},
        "parties": [{"name": "P1", "balance": 1000}, {"name": "P2", "balance": 1000}],
        "adversary": [],
        "schedule": [],
    }
    config.update(extra)
    return config


def honest_trade() -> dict:
    config = _base("honest-trade", "two parties, five updates, cooperative close")
    config["schedule"] = _setup(["P1", "P2"], [("P1", "P2")]) + [
        _action(OPEN_ROUND, "P1", "open", peer="P2", amounts=[100, 100]),
        *[_action(TRADE_ROUND + k, "P1", "pay", peer="P2", amount=5) for k in range(5)],
        _action(TRADE_ROUND + 10, "P1", "close", peer="P2"),
    ]
    return config


def random_trade(seed: int = 42, updates: int = 8) -> dict:
    """Seeded random conserving payments in both directions, then a close."""
    rng = random.Random(seed)
    config = _base("random-trade", "random payments drawn from the seed", seed=seed)
    deposits = [rng.randint(20, 200), rng.randint(20, 200)]
    funding = ["deposit", rng.choice(["deposit", "credit-note"])]
    cns = {"P2": deposits[1]} if funding[1] == "credit-note" else {}
    config["merchant"] = {
        "name": "M",
        "balance": 0,
        "policy": {"collateral_window": 40},
        "period_end": 160,
        "auto_settle": bool(cns),
    }
    schedule = _setup(["P1", "P2"], [("P1", "P2")], cns=cns)
    schedule.append(_action(OPEN_ROUND, "P1", "open", peer="P2", amounts=deposits, funding=funding))
    held = list(deposits)
    for k in range(updates):
        payer = rng.randrange(2)
        amount = rng.randint(0, held[payer])
        held[payer] -= amount
        held[1 - payer] += amount
        name, peer = ("P1", "P2") if payer == 0 else ("P2", "P1")
        schedule.append(_action(TRADE_ROUND + 3 * k, name, "pay", peer=peer, amount=amount))
    closer = rng.choice(["P1", "P2"])
    schedule.append(_action(TRADE_ROUND + 3 * updates + 4, closer, "close", peer="P1" if closer == "P2" else "P2"))
    config["schedule"] = schedule
    return config


def griefing_stall(t_delta: int = 50) -> dict:
    config = _base(
        "griefing-stall",
        "P2 is corrupted and goes silent right after the channel is funded",
        t_delta=t_delta,
        max_rounds=TRADE_ROUND + t_delta + 60,
    )
    config["adversary"] = [
        {"action": "corrupt", "target": "P2", "round": 0},
        {"action": "stall", "target": "P2", "round": TRADE_ROUND},
    ]
    config["schedule"] = _setup(["P1", "P2"], [("P1", "P2")]) + [
        _action(OPEN_ROUND, "P1", "open", peer="P2", amounts=[100, 100]),
        _action(TRADE_ROUND - 3, "P1", "pay", peer="P2", amount=10),
        _action(TRADE_ROUND, "P1", "pay", peer="P2", amount=5),
    ]
    return config


def forge_update() -> dict:
    config = _base("forge-update", "corrupted P2 injects forged updates and posts a forged state")
    config["adversary"] = [
        {"action": "corrupt", "target": "P2", "round": 0},
        {"action": "forge", "target": "P2", "round": TRADE_ROUND + 4, "params": {"victim": "P1"}},
    ]
    config["schedule"] = _setup(["P1", "P2"], [("P1", "P2")]) + [
        _action(OPEN_ROUND, "P1", "open", peer="P2", amounts=[100, 100]),
        _action(TRADE_ROUND, "P1", "pay", peer="P2", amount=20),
        _action(TRADE_ROUND + 10, "P1", "pay", peer="P2", amount=5),
        _action(TRADE_ROUND + 16, "P1", "close", peer="P2"),
    ]
    return config


def replay() -> dict:
    config = _base("replay", "corrupted P2 replays its first update after later versions")
    config["adversary"] = [
        {"action": "corrupt", "target": "P2", "round": 0},
        {"action": "replay", "target": "P2", "round": TRADE_ROUND + 12, "params": {"kind": "update", "nth": 0}},
        {"action": "replay", "target": "P2", "round": TRADE_ROUND + 13, "params": {"kind": "update-success", "nth": 0}},
    ]
    config["schedule"] = _setup(["P1", "P2"], [("P1", "P2")]) + [
        _action(OPEN_ROUND, "P1", "open", peer="P2", amounts=[100, 100]),
        _action(TRADE_ROUND, "P2", "pay", peer="P1", amount=30),
        _action(TRADE_ROUND + 3, "P1", "pay", peer="P2", amount=10),
        _action(TRADE_ROUND + 6, "P2", "pay", peer="P1", amount=5),
        _action(TRADE_ROUND + 18, "P1", "close", peer="P2"),
    ]
    return config


def stale_close() -> dict:
    config = _base("stale-close", "corrupted P2 posts version 2 while P1 holds version 4")
    config["adversary"] = [
        {"action": "corrupt", "target": "P2", "round": 0},
        {"action": "stale-close", "target": "P2", "round": TRADE_ROUND + 14, "params": {"victim": "P1", "counter": 2}},
    ]
    config["schedule"] = _setup(["P1", "P2"], [("P1", "P2")]) + [
        _action(OPEN_ROUND, "P1", "open", peer="P2", amounts=[100, 100]),
        *[_action(TRADE_ROUND + 3 * k, "P2", "pay", peer="P1", amount=10) for k in range(4)],
    ]
    return config


def dispute_storm() -> dict:
    config = _base(
        "dispute-storm",
        "corrupted P2 raises groundless disputes until it is blacklisted",
        t_delta=60,
    )
    config["adversary"] = [{"action": "corrupt", "target": "P2", "round": 0}] + [
        {"action": "dispute", "target": "P2", "round": TRADE_ROUND + 3 * k, "params": {"victim": "P1"}}
        for k in range(5)
    ]
    config["schedule"] = _setup(["P1", "P2"], [("P1", "P2")]) + [
        _action(OPEN_ROUND, "P1", "open", peer="P2", amounts=[100, 100]),
        _action(TRADE_ROUND - 4, "P1", "pay", peer="P2", amount=10),
        _action(TRADE_ROUND + 17, "P1", "pay", peer="P2", amount=10),
        _action(TRADE_ROUND + 22, "P1", "close", peer="P2"),
        _action(TRADE_ROUND + 28, "P1", "open", peer="P2", amounts=[50, 50]),
        _action(TRADE_ROUND + 29, "P1", "esc-init", peer="P2"),
        _action(TRADE_ROUND + 30, "P2", "cns-apply", merchant="M", limit=10, liability=10),
    ]
    return config


def _cns_trade(name: str, description: str, margin: str, loss: int) -> dict:
    config = _base(name, description)
    config["merchant"] = {
        "name": "M",
        "balance": 0,
        "policy": {"margin": margin, "collateral_window": 40, "period_length": 100},
        "period_end": 100,
        "auto_settle": True,
    }
    payments = []
    left = loss
    k = 0
    while left > 0:
        step = min(20, left)
        payments.append(_action(TRADE_ROUND + 2 * k, "P1", "pay", peer="P2", amount=step))
        left -= step
        k += 1
    config["schedule"] = (
        _setup(["P1", "P2"], [("P1", "P2")], cns={"P1": 100})
        + [_action(OPEN_ROUND, "P1", "open", peer="P2", amounts=[100, 100], funding=["credit-note", "deposit"])]
        + payments
        + [_action(TRADE_ROUND + 2 * k + 4, "P1", "close", peer="P2")]
    )
    return config


def cns_settlement() -> dict:
    return _cns_trade(
        "cns-settlement",
        "P1 trades on a credit note, owes 40 and is settled from collateral 100",
        "1",
        40,
    )


def cns_default() -> dict:
    return _cns_trade(
        "cns-default",
        "margin 0.5: P1 loses 80 against collateral 50, leaving 30 unrecovered",
        "0.5",
        80,
    )


def marketplace(fills: list[int] | None = None) -> dict:
    name = "marketplace" if fills is None else "marketplace-partial"
    description = "10 packets at 5 coins in one fill" if fills is None else f"10 packets at 5 coins in fills {fills}"
    config = _base(name, description, mode="marketplace")
    config["parties"] = [
        {"name": "P1", "balance": 1000, "role": "consumer"},
        {"name": "P2", "balance": 1000, "role": "prosumer"},
    ]
    offer = {"round": TRADE_ROUND, "buyer": "P1", "seller": "P2", "quantity": 10, "unit_price": 5}
    if fills is not None:
        offer["fills"] = fills
    config["offers"] = [offer]
    config["schedule"] = _setup(["P1", "P2"], [("P1", "P2")]) + [
        _action(OPEN_ROUND, "P1", "open", peer="P2", amounts=[100, 100], quantities=[0, 10]),
        _action(TRADE_ROUND + 12, "P1", "close", peer="P2"),
    ]
    return config


def marketplace_partial() -> dict:
    return marketplace([4, 3, 3])


def marketplace_tso() -> dict:
    """The merchant sells packets to a CNS participant over their own ESC."""
    config = _base("marketplace-tso", "merchant-as-TSO sells 8 packets to a note-funded consumer", mode="marketplace")
    config["merchant"] = {
        "name": "M",
        "balance": 500,
        "role": "distributor",
        "policy": {"collateral_window": 40},
        "period_end": 100,
        "auto_settle": True,
    }
    config["parties"] = [{"name": "P1", "balance": 1000, "role": "consumer"}]
    config["offers"] = [
        {"round": TRADE_ROUND, "buyer": "P1", "seller": "M", "quantity": 8, "unit_price": 5},
    ]
    config["schedule"] = _setup(["P1"], [("P1", "M")], cns={"P1": 100}) + [
        _action(
            OPEN_ROUND,
            "P1",
            "open",
            peer="M",
            amounts=[100, 0],
            quantities=[0, 8],
            funding=["credit-note", "deposit"],
        ),
        _action(TRADE_ROUND + 8, "P1", "close", peer="M"),
    ]
    return config


def independence(pairs: int = 8, only: int | None = None) -> dict:
    """``pairs`` disjoint pairs, each under its own merchant; ``only`` keeps one pair."""
    config = _base("independence", f"{pairs} disjoint pairs trading concurrently")
    config.pop("merchant")
    config["merchants"] = []
    config["parties"] = []
    schedule = []
    chosen = range(pairs) if only is None else [only]
    for k in chosen:
        a, b, m = f"A{k}", f"B{k}", f"M{k}"
        config["merchants"].append({"name": m, "balance": 0})
        config["parties"] += [{"name": a, "balance": 500}, {"name": b, "balance": 500}]
        schedule += _setup([a, b], [(a, b)], merchant=m)
        schedule.append(_action(OPEN_ROUND, a, "open", peer=b, amounts=[100 + k, 100]))
        for u in range(3):
            schedule.append(_action(TRADE_ROUND + 2 * u + k % 3, a, "pay", peer=b, amount=5 + k))
        if k % 2:
            schedule.append(_action(TRADE_ROUND + 8, b, "dispute", peer=a))
        schedule.append(_action(TRADE_ROUND + 20, a, "close", peer=b))
    config["schedule"] = schedule
    return config


BUILTINS: dict[str, Callable[[], dict]] = {
    "honest-trade": honest_trade,
    "random-trade": random_trade,
    "griefing-stall": griefing_stall,
    "forge-update": forge_update,
    "replay": replay,
    "stale-close": stale_close,
    "dispute-storm": dispute_storm,
    "cns-settlement": cns_settlement,
    "cns-default": cns_default,
    "marketplace": marketplace,
    "marketplace-partial": marketplace_partial,
    "marketplace-tso": marketplace_tso,
    "independence": independence,
}

ADVERSARIAL = ("griefing-stall", "forge-update", "replay", "stale-close", "dispute-storm", "cns-default")


def builtin(name: str) -> dict:
    try:
        return BUILTINS[name]()
    except KeyError:
        from ..errors import ConfigInvalid

        raise ConfigInvalid(f"no built-in scenario {name!r}") from None
