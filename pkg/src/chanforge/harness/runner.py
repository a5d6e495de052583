"""Run a scenario config and produce a ``RunReport``."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .. import cns
from ..contracts import DisputePolicy
from ..engine import Simulation
from ..errors import ConfigInvalid
from . import adversary
from .config import NAME_PARAMS, ScenarioConfig, from_dict
from .monitor import Monitor


@dataclass
class RunReport:
    scenario: str
    seed: int
    passed: bool
    invariants: dict
    violations: list[str]
    rounds: int
    quiescent: bool
    events: int
    trace_hash: str
    conservation_delta: int
    rejections: dict[str, int]
    settlements: list[dict]
    ledger: dict = field(repr=False)

    def to_json(self) -> dict:
        return {
            "scenario": self.scenario,
            "seed": self.seed,
            "passed": self.passed,
            "violations": self.violations,
            "invariants": self.invariants,
            "rounds": self.rounds,
            "quiescent": self.quiescent,
            "events": self.events,
            "trace_hash": self.trace_hash,
            "conservation_delta": self.conservation_delta,
            "rejections": self.rejections,
            "settlements": self.settlements,
            "ledger": self.ledger,
        }


@dataclass
class Run:
    """A finished run: the report plus the live simulation for inspection."""

    report: RunReport
    sim: Simulation
    monitor: Monitor


def _translate(sim: Simulation, params: dict) -> dict:
    out = dict(params)
    for key in NAME_PARAMS:
        if key in out:
            out[key] = sim.uutid(out[key])
    return out


def build(config: ScenarioConfig, *, keep_trace: bool = True, monitor: Monitor | None = None) -> tuple[Simulation, Monitor]:
    monitor = monitor or Monitor()
    policy = cns.Policy.from_json(config.merchants[0].policy) if config.merchants else cns.Policy()
    try:
        dispute_policy = DisputePolicy(**config.dispute_policy)
    except TypeError as exc:
        raise ConfigInvalid(f"dispute_policy: {exc}") from None
    sim = Simulation(
        config.seed,
        t_delta=config.t_delta,
        blocks_per_round=config.blocks_per_round,
        max_delay=config.max_delay,
        timeout=config.timeout,
        mode=config.mode,
        policy=policy,
        dispute_policy=dispute_policy,
        observer=monitor.observe,
        keep_trace=keep_trace,
    )
    for n, spec in enumerate(config.merchants):
        own = policy if n == 0 else cns.Policy.from_json(spec.policy)
        merchant = sim.add_party(
            spec.name, spec.balance, spec.role, merchant=True, policy=own, period_end=spec.period_end
        )
        merchant.auto_settle = spec.auto_settle
    for spec in config.parties:
        sim.add_party(spec.name, spec.balance, spec.role)
    for spec in config.adversary:
        if spec.action == "corrupt":
            sim.corrupt(spec.target)
    for spec in config.adversary:
        action = adversary.build(spec)
        if action is not None:
            sim.adversary_at(spec.round, action, f"{spec.action}:{spec.target}")
    for item in config.schedule:
        sim.at(item.round, item.party, item.action, **_translate(sim, item.params))
    return sim, monitor


def execute(config: ScenarioConfig | dict, *, keep_trace: bool = True) -> Run:
    if isinstance(config, dict):
        config = from_dict(config)
    sim, monitor = build(config, keep_trace=keep_trace)
    last = max([s.round for s in config.schedule] + [a.round for a in config.adversary] + [0])
    quiet = False
    while sim.round < config.max_rounds:
        sim.step()
        if config.stop_when_quiet and sim.round >= last and sim.quiescent():
            quiet = True
            break
    sim.finish()
    settlements = [r.to_json() for p in sim.by_uutid.values() for r in getattr(p, "reports", [])]
    report = RunReport(
        scenario=config.name,
        seed=config.seed,
        passed=monitor.passed,
        invariants=monitor.results(),
        violations=monitor.violations(),
        rounds=sim.round,
        quiescent=quiet,
        events=sim.trace.count,
        trace_hash=sim.trace.hash,
        conservation_delta=sim.ledger.conservation_delta(),
        rejections=dict(sorted(sim.rejections.items())),
        settlements=settlements,
        ledger=sim.ledger.dump(),
    )
    return Run(report, sim, monitor)


def run(config: ScenarioConfig | dict, *, keep_trace: bool = True) -> RunReport:
    return execute(config, keep_trace=keep_trace).report


def verify_lines(lines: list[str]) -> Monitor:
    """Re-check the invariants over a trace given as JSON lines."""
    monitor = Monitor()
    for n, line in enumerate(lines):
        if not line.strip():
            continue
        try:
            event = json.loads(line)
        except json.JSONDecodeError:
            monitor.event = {"seq": n}
            monitor.check("trace-integrity", False, f"line {n + 1} is not JSON")
            continue
        monitor.observe(event)
    return monitor
