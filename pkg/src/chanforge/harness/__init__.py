"""Scenario runner, invariant monitor and CLI."""

from .config import ScenarioConfig, from_dict, load
from .monitor import INVARIANTS, Monitor
from .runner import RunReport, execute, run, verify_lines
from .scenarios import BUILTINS, builtin

__all__ = [
    "BUILTINS",
    "INVARIANTS",
    "Monitor",
    "RunReport",
    "ScenarioConfig",
    "builtin",
    "execute",
    "from_dict",
    "load",
    "run",
    "verify_lines",
]
