"""Energy trading over channels: roles, offers and (alpha, Q) fills.

A channel in marketplace mode carries energy packets next to coins. The
seller pre-loads packets when the channel opens; each fill moves
``q * unit_price`` coins from buyer to seller and ``q`` packets the other way
inside one co-signed version, so both totals are conserved.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from .contracts import Contracts, EscRecord, MscRecord
from .errors import NonConservingBalance, NotOpen, RoleViolation
from .states import Balances


class MarketRole(str, Enum):
    CONSUMER = "consumer"
    PROSUMER = "prosumer"
    PRODUCER = "producer"
    DISTRIBUTOR = "distributor"  # DSO / TSO

    @property
    def can_sell(self) -> bool:
        return self is not MarketRole.CONSUMER

    @property
    def can_buy(self) -> bool:
        return self is not MarketRole.PRODUCER


@dataclass(frozen=True)
class EnergyOffer:
    seller: str
    quantity: int  # energy packets
    unit_price: int  # coins per packet
    validity: int  # last block height at which the offer holds

    def __post_init__(self) -> None:
        if self.quantity < 1:
            raise ValueError("an offer needs at least one packet")
        if self.unit_price < 0:
            raise ValueError("negative unit price")


def role_validator(roles: tuple[MarketRole, MarketRole]):
    """Channel validator refusing versions where a side trades against its role."""

    def check(old: Balances, new: Balances, proposer: int) -> None:
        for k in (0, 1):
            if new[k][1] < old[k][1] and not roles[k].can_sell:
                raise RoleViolation(f"side {k} ({roles[k].value}) cannot sell packets")
            if new[k][1] > old[k][1] and not roles[k].can_buy:
                raise RoleViolation(f"side {k} ({roles[k].value}) cannot buy packets")

    return check


def fill(balances: Balances, seller_side: int, quantity: int, unit_price: int) -> Balances:
    """Balances after the buyer takes ``quantity`` packets at ``unit_price``."""
    buyer = 1 - seller_side
    cost = quantity * unit_price
    pairs = [list(balances[0]), list(balances[1])]
    pairs[buyer][0] -= cost
    pairs[seller_side][0] += cost
    pairs[seller_side][1] -= quantity
    pairs[buyer][1] += quantity
    if any(v < 0 for p in pairs for v in p):
        raise NonConservingBalance(f"fill of {quantity} @ {unit_price} overdraws {balances}")
    return ((pairs[0][0], pairs[0][1]), (pairs[1][0], pairs[1][1]))


def negotiate(
    balances: Balances,
    offer: EnergyOffer,
    seller_side: int,
    roles: tuple[MarketRole, MarketRole],
    fills: list[int] | None = None,
    height: int = 0,
) -> list[Balances]:
    """Plan the channel versions for filling ``offer`` in steps.

    ``fills`` lists packet counts per step (default: one full fill). The
    result is the target balances of each successive update.
    """
    if height > offer.validity:
        raise RoleViolation(f"offer expired at {offer.validity}")
    if not roles[seller_side].can_sell:
        raise RoleViolation(f"{roles[seller_side].value} cannot sell")
    if not roles[1 - seller_side].can_buy:
        raise RoleViolation(f"{roles[1 - seller_side].value} cannot buy")
    steps = [offer.quantity] if fills is None else list(fills)
    if any(q < 1 for q in steps) or sum(steps) > offer.quantity:
        raise ValueError(f"fills {steps} do not fit an offer of {offer.quantity}")
    plan = []
    current = balances
    for q in steps:
        current = fill(current, seller_side, q, offer.unit_price)
        plan.append(current)
    return plan


def settle_energy(contracts: Contracts, scid: str, channel_id: str) -> tuple[EscRecord, list[MscRecord]]:
    """Closed-channel records carrying the final (alpha, Q) pairs."""
    esc = contracts.read_esc(scid)
    entry = esc.entry(channel_id)
    if entry.status != "closed":
        raise NotOpen(f"{channel_id} has not been finalised")
    mscs = [contracts.read_msc(sid) for sid in dict.fromkeys(esc.sids)]
    return esc, mscs


def _is_pair_list(value) -> bool:
    return (
        isinstance(value, list)
        and len(value) == 2
        and all(isinstance(p, list) and len(p) == 2 and all(isinstance(x, int) for x in p) for p in value)
    )


def shape_problems(record_json: dict) -> list[str]:
    """Where a serialized record lacks a member of an (alpha, Q) pair."""
    problems = []
    if record_json.get("type") == "esc":
        for name in ("balances", "final_balances"):
            value = record_json.get(name)
            if value is not None and not _is_pair_list(value):
                problems.append(f"esc.{name}")
        for ch, entry in record_json.get("channels", {}).items():
            if entry.get("final") is not None and not _is_pair_list(entry["final"]):
                problems.append(f"esc.channels.{ch}.final")
    elif record_json.get("type") == "msc":
        value = record_json.get("final_pairs")
        if value is not None and not _is_pair_list(value):
            problems.append("msc.final_pairs")
        for link in record_json.get("links", []):
            if not _is_pair_list(link.get("balances")):
                problems.append(f"msc.links.{link.get('scid')}")
    return problems
