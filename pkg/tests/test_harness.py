import json

import pytest

from chanforge.errors import ConfigInvalid
from chanforge.harness import cli, runner, scenarios
from chanforge.harness.config import SEED_ENV, from_dict
from chanforge.harness.monitor import INVARIANTS, verify_events


def test_unknown_party_in_schedule():
    config = scenarios.honest_trade()
    config["schedule"].append(scenarios._action(5, "P9", "pay", peer="P1", amount=1))
    with pytest.raises(ConfigInvalid):
        from_dict(config)


@pytest.mark.parametrize(
    "change",
    [
        {"t_delta": 0},
        {"seed": -1},
        {"mode": "barter"},
        {"nonsense": 1},
        {"adversary": [{"action": "corrupt", "target": "P2", "round": 3}]},
        {"adversary": [{"action": "stall", "target": "P2", "round": 3}]},
    ],
)
def test_bad_configs(change):
    config = scenarios.honest_trade()
    config.update(change)
    with pytest.raises(ConfigInvalid):
        from_dict(config)


def test_seed_precedence(monkeypatch):
    config = scenarios.honest_trade()
    config["seed"] = 3
    assert from_dict(config).seed == 3
    monkeypatch.setenv(SEED_ENV, "11")
    assert from_dict(config).seed == 11
    assert from_dict(config, seed=5).seed == 5
    monkeypatch.setenv(SEED_ENV, "x")
    with pytest.raises(ConfigInvalid):
        from_dict(config)


def test_honest_trade_report():
    report = runner.run(scenarios.honest_trade())
    assert report.passed and report.quiescent
    assert report.conservation_delta == 0
    assert set(report.invariants) == set(INVARIANTS)


def test_griefing_stall_has_no_violations():
    report = runner.run(scenarios.griefing_stall(50))
    assert report.violations == []


def test_offline_monitor_agrees_with_online():
    for name in ("honest-trade", "stale-close", "cns-settlement"):
        run = runner.execute(scenarios.builtin(name))
        offline = verify_events(json.loads(json.dumps(run.sim.trace.events)))
        assert offline.results() == run.monitor.results()


@pytest.mark.parametrize("name", sorted(scenarios.BUILTINS))
def test_builtins_reproducible(name):
    first = runner.run(scenarios.builtin(name))
    second = runner.run(scenarios.builtin(name))
    assert first.trace_hash == second.trace_hash
    assert first.passed and first.conservation_delta == 0


def test_different_seed_changes_trace():
    a = runner.run(scenarios.honest_trade())
    b = runner.run(from_dict(scenarios.honest_trade(), seed=43))
    assert a.trace_hash != b.trace_hash


def test_unknown_builtin():
    with pytest.raises(ConfigInvalid):
        scenarios.builtin("nope")


def test_cli_run_twice(tmp_path, capsys):
    hashes = []
    for k in range(2):
        trace = tmp_path / f"t{k}.jsonl"
        assert cli.main(["run", "honest-trade", "--trace", str(trace), "--report", str(tmp_path / "r.json")]) == 0
        out = capsys.readouterr().out
        hashes.append([ln for ln in out.splitlines() if ln.startswith("trace hash")][0])
    assert hashes[0] == hashes[1]
    assert (tmp_path / "t0.jsonl").read_bytes() == (tmp_path / "t1.jsonl").read_bytes()
    assert json.loads((tmp_path / "r.json").read_text())["passed"]


def test_cli_verify_clean_and_tampered(tmp_path, capsys):
    trace = tmp_path / "t.jsonl"
    cli.main(["run", "honest-trade", "--trace", str(trace)])
    capsys.readouterr()
    assert cli.main(["verify", str(trace)]) == 0
    lines = trace.read_text().splitlines()
    events = [json.loads(ln) for ln in lines]
    n = max(k for k, e in enumerate(events) if e["kind"] == "ledger")
    addr = next(iter(events[n]["details"]["balances"]))
    events[n]["details"]["balances"][addr] += 5
    lines[n] = json.dumps(events[n], sort_keys=True)
    bad = tmp_path / "bad.jsonl"
    bad.write_text("\n".join(lines) + "\n")
    capsys.readouterr()
    assert cli.main(["verify", str(bad)]) == 1
    out = capsys.readouterr().out
    assert "FAIL  ledger-conservation" in out


def test_cli_forge_update(capsys):
    assert cli.main(["run", "forge-update"]) == 0
    assert "bad-signature=" in capsys.readouterr().out


def test_cli_seed_flag(capsys):
    cli.main(["run", "honest-trade", "--seed", "9"])
    assert "seed 9:" in capsys.readouterr().out


def test_cli_scenarios(capsys):
    assert cli.main(["scenarios"]) == 0
    out = capsys.readouterr().out
    assert all(name in out for name in scenarios.BUILTINS)


def test_cli_usage_errors(tmp_path, capsys):
    assert cli.main([]) == 2
    assert cli.main(["run", str(tmp_path / "missing.json")]) == 2
    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    assert cli.main(["run", str(broken)]) == 2
    assert cli.main(["verify", str(tmp_path / "missing.jsonl")]) == 2


def test_cli_config_file(tmp_path, capsys):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(scenarios.honest_trade()))
    assert cli.main(["run", str(path)]) == 0
