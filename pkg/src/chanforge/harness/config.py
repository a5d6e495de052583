"""Scenario configuration: JSON in, validated ``ScenarioConfig`` out."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Any

from ..errors import ConfigInvalid

SEED_ENV = "CHANFORGE_SEED"

PARTY_ACTIONS = {
    "cns-apply",
    "msc-init",
    "esc-init",
    "open",
    "pay",
    "update",
    "trade",
    "dispute",
    "close",
    "settle",
}
ADVERSARY_ACTIONS = {"corrupt", "stall", "delay", "forge", "replay", "stale-close", "dispute"}
ROLES = {"consumer", "prosumer", "producer", "distributor"}
NAME_PARAMS = ("peer", "merchant")  # parameters naming another party

TOP_LEVEL = {
    "name",
    "description",
    "seed",
    "mode",
    "t_delta",
    "blocks_per_round",
    "max_rounds",
    "max_delay",
    "timeout",
    "parties",
    "merchant",
    "merchants",
    "adversary",
    "schedule",
    "offers",
    "dispute_policy",
    "stop_when_quiet",
}


@dataclass
class PartySpec:
    name: str
    balance: int = 0
    role: str = "prosumer"


@dataclass
class MerchantSpec:
    name: str
    balance: int = 0
    role: str = "distributor"
    policy: dict = field(default_factory=dict)
    period_end: int | None = None
    auto_settle: bool = False


@dataclass
class ActionSpec:
    round: int
    party: str
    action: str
    params: dict = field(default_factory=dict)


@dataclass
class AdversarySpec:
    action: str
    target: str
    round: int = 0
    params: dict = field(default_factory=dict)


@dataclass
class ScenarioConfig:
    name: str = "custom"
    description: str = ""
    seed: int = 42
    mode: str = "plain"
    t_delta: int = 50
    blocks_per_round: int = 1
    max_rounds: int = 500
    max_delay: int = 10
    timeout: int = 3
    parties: list[PartySpec] = field(default_factory=list)
    merchants: list[MerchantSpec] = field(default_factory=list)
    adversary: list[AdversarySpec] = field(default_factory=list)
    schedule: list[ActionSpec] = field(default_factory=list)
    dispute_policy: dict = field(default_factory=dict)
    stop_when_quiet: bool = True

    @property
    def names(self) -> list[str]:
        return [m.name for m in self.merchants] + [p.name for p in self.parties]

    def validate(self) -> "ScenarioConfig":
        names = self.names
        if not self.parties:
            raise ConfigInvalid("a scenario needs at least one party")
        if len(set(names)) != len(names):
            raise ConfigInvalid("party names must be unique")
        if self.mode not in ("plain", "marketplace"):
            raise ConfigInvalid(f"unknown mode {self.mode!r}")
        for key in ("t_delta", "blocks_per_round", "max_rounds", "timeout"):
            value = getattr(self, key)
            if not isinstance(value, int) or value < 1:
                raise ConfigInvalid(f"{key} must be a positive integer")
        if not isinstance(self.max_delay, int) or self.max_delay < 0:
            raise ConfigInvalid("max_delay must be a non-negative integer")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigInvalid("seed must be a non-negative integer")
        for p in list(self.parties) + list(self.merchants):
            if p.role not in ROLES:
                raise ConfigInvalid(f"{p.name}: unknown role {p.role!r}")
            if not isinstance(p.balance, int) or p.balance < 0:
                raise ConfigInvalid(f"{p.name}: balance must be a non-negative integer")
        for item in self.schedule:
            if item.party not in names:
                raise ConfigInvalid(f"schedule references unknown party {item.party!r}")
            if item.action not in PARTY_ACTIONS:
                raise ConfigInvalid(f"unknown action {item.action!r}")
            if not isinstance(item.round, int) or item.round < 1:
                raise ConfigInvalid(f"action {item.action!r} needs a round >= 1")
            for key in NAME_PARAMS:
                if key in item.params and item.params[key] not in names:
                    raise ConfigInvalid(f"{item.action} references unknown party {item.params[key]!r}")
        corrupted = {a.target for a in self.adversary if a.action == "corrupt"}
        for a in self.adversary:
            if a.action not in ADVERSARY_ACTIONS:
                raise ConfigInvalid(f"unknown adversary action {a.action!r}")
            if a.target not in names:
                raise ConfigInvalid(f"adversary targets unknown party {a.target!r}")
            if a.action == "corrupt" and a.round != 0:
                raise ConfigInvalid("corruption is non-adaptive: it must happen at round 0")
            if a.action not in ("corrupt", "delay") and a.target not in corrupted:
                raise ConfigInvalid(f"{a.action} needs {a.target!r} to be corrupted")
            victim = a.params.get("victim")
            if victim is not None and victim not in names:
                raise ConfigInvalid(f"adversary references unknown party {victim!r}")
        return self

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "description": self.description,
            "seed": self.seed,
            "mode": self.mode,
            "t_delta": self.t_delta,
            "blocks_per_round": self.blocks_per_round,
            "max_rounds": self.max_rounds,
            "max_delay": self.max_delay,
            "timeout": self.timeout,
            "parties": [vars(p) for p in self.parties],
            "merchants": [vars(m) for m in self.merchants],
            "adversary": [vars(a) for a in self.adversary],
            "schedule": [vars(s) for s in self.schedule],
            "dispute_policy": self.dispute_policy,
            "stop_when_quiet": self.stop_when_quiet,
        }


def _build(cls, data: Any, what: str):
    if not isinstance(data, dict):
        raise ConfigInvalid(f"{what} must be an object")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigInvalid(f"{what}: {exc}") from None


def _offer_actions(offers: list) -> list[ActionSpec]:
    """Inline marketplace offers become 'trade' requests by the buyer."""
    actions = []
    for n, offer in enumerate(offers):
        if not isinstance(offer, dict):
            raise ConfigInvalid(f"offer {n} must be an object")
        try:
            params = {
                "peer": offer["seller"],
                "quantity": offer["quantity"],
                "unit_price": offer["unit_price"],
                "seller": "peer",
            }
            if "fills" in offer:
                params["fills"] = offer["fills"]
            actions.append(ActionSpec(offer["round"], offer["buyer"], "trade", params))
        except KeyError as exc:
            raise ConfigInvalid(f"offer {n} lacks {exc}") from None
    return actions


def from_dict(data: dict, seed: int | None = None) -> ScenarioConfig:
    """Validate a JSON-shaped config; ``seed`` (or CHANFORGE_SEED) overrides its seed."""
    if not isinstance(data, dict):
        raise ConfigInvalid("config must be a JSON object")
    unknown = set(data) - TOP_LEVEL
    if unknown:
        raise ConfigInvalid(f"unknown config keys: {sorted(unknown)}")
    values = {k: v for k, v in data.items() if k not in ("parties", "merchant", "merchants", "adversary", "schedule", "offers")}
    merchants = list(data.get("merchants", []))
    if data.get("merchant") is not None:
        merchants.insert(0, data["merchant"])
    config = ScenarioConfig(
        **values,
        parties=[_build(PartySpec, p, "party") for p in data.get("parties", [])],
        merchants=[_build(MerchantSpec, m, "merchant") for m in merchants],
        adversary=[_build(AdversarySpec, a, "adversary action") for a in data.get("adversary", [])],
        schedule=[_build(ActionSpec, s, "schedule entry") for s in data.get("schedule", [])]
        + _offer_actions(data.get("offers", [])),
    )
    env = os.environ.get(SEED_ENV)
    if env is not None and seed is None:
        try:
            seed = int(env)
        except ValueError:
            raise ConfigInvalid(f"{SEED_ENV}={env!r} is not an integer") from None
    if seed is not None:
        config.seed = seed
    return config.validate()


def load(path: str, seed: int | None = None) -> ScenarioConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigInvalid(f"cannot read {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigInvalid(f"{path} is not valid JSON: {exc}") from None
    return from_dict(data, seed)
