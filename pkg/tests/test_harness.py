import os
import subprocess
import sys
from pathlib import Path

import pytest

from solid_ucon.cli import SECTIONS, main
from solid_ucon.codec import to_hex
from solid_ucon.harness import (
    ScenarioError,
    Simulation,
    bundled_scenario_path,
    load_scenario,
    parse_duration,
    parse_obligations,
    parse_scenario,
    run_scenario,
    validate_scenario,
)
from solid_ucon.ledger import verify_chain
from solid_ucon.pod import PodManager
from solid_ucon.policy import PurposeRestriction, TemporalRetention

ALICE_BOB = bundled_scenario_path("alice_bob.scn")
HEAD = "seed 1\ntaxonomy default\n"


@pytest.fixture(scope="module")
def alice_bob():
    return run_scenario(load_scenario(ALICE_BOB))


# --- parsing and validation ---------------------------------------------------------


def test_parse_basics():
    sc = parse_scenario(HEAD + "timeout 4\n0 a CreateActor  # trailing\n5 a PutResource x \"two words\" expect=allow\n")
    assert (sc.seed, sc.timeout_ticks, len(sc.steps)) == (1, 4, 2)
    step = sc.steps[1]
    assert (step.at, step.actor, step.action, step.args) == (5, "a", "PutResource", ("x", "two words"))
    assert step.option("expect") == "allow"


@pytest.mark.parametrize("text", ["0 a", "x a CreateActor", "seed", '0 a PutResource x "open'])
def test_parse_errors(text):
    with pytest.raises(ScenarioError):
        parse_scenario(text)


def test_durations_and_obligations():
    assert [parse_duration(t) for t in ("30d", "7d", "1w", "1mo", "90", "2h")] == [2592000, 604800, 604800, 2592000, 90, 7200]
    obs = parse_obligations(["retention=7d", "purpose=medical,academic"])
    assert obs == (TemporalRetention(604800), PurposeRestriction(frozenset({"medical", "academic"})))
    with pytest.raises(ValueError):
        parse_obligations(["colour=blue"])


def test_bundled_scenario_is_valid():
    assert validate_scenario(load_scenario(ALICE_BOB)) == []


@pytest.mark.parametrize(
    "body, needle",
    [
        ("0 a InitPod pod://a\n", "undeclared actor"),
        ("0 a CreateActor\n5 a InitPod pod://a\n3 a PutResource r x\n", "earlier than"),
        ("0 a CreateActor\n0 a Fly\n", "unknown action"),
        ("0 a CreateActor\n0 a Use nothing web-analytics\n", "undeclared resource"),
        ("0 a CreateActor\n0 a InitPod pod://a purpose=astrology\n", "not in taxonomy"),
        ("0 a CreateActor\n0 a CreateActor\n", "already declared"),
        ("0 a CreateActor\n0 a SetDishonest chaotic\n", "unknown mode"),
        ("0 a CreateActor\n0 a PayFee\n", "takes"),
    ],
)
def test_validation_errors(body, needle):
    issues = validate_scenario(parse_scenario(HEAD + body))
    assert any(needle in reason for _i, reason in issues), issues
    with pytest.raises(ScenarioError):
        run_scenario(parse_scenario(HEAD + body))


def test_runtime_failure_carries_partial_report():
    body = "0 a CreateActor\n0 a InitPod pod://a\n0 b CreateActor\n0 b InitPod pod://a\n"
    with pytest.raises(ScenarioError) as info:
        run_scenario(parse_scenario(HEAD + body))
    assert info.value.index == 3
    assert info.value.report is not None and len(info.value.report.steps) == 3


# --- runs ----------------------------------------------------------------------------


def test_empty_scenario_is_genesis_only():
    report = run_scenario(parse_scenario(HEAD))
    assert report.height == 0 and report.trace == () and report.ok


def test_alice_bob_passes(alice_bob):
    assert alice_bob.ok, alice_bob.render()
    assert len(alice_bob.assertions) == 11


def test_run_is_deterministic(alice_bob):
    again = run_scenario(load_scenario(ALICE_BOB))
    assert again.render() == alice_bob.render()
    other = run_scenario(load_scenario(ALICE_BOB), seed=43)
    assert other.final_head_hash != alice_bob.final_head_hash


def test_bob_copy_deleted_at_week(alice_bob):
    log = alice_bob.usage_logs["bob"].splitlines()
    assert "604800 " in next(line for line in log if "Deleted(Expired)" in line)


def test_quiescent_between_steps():
    sim = Simulation(3)
    for step in load_scenario(ALICE_BOB).steps:
        sim.run_step(len(sim.records), step)
        assert not sim.ledger.has_pending and not sim.ledger.event_queue and sim.bus.idle


def test_final_chain_verifies():
    sim = Simulation(42)
    for i, step in enumerate(load_scenario(ALICE_BOB).steps):
        sim.run_step(i, step)
    assert str(verify_chain(sim.ledger)) == "Ok"


def test_local_and_chain_policies_agree_after_each_step():
    sim = Simulation(42)
    for i, step in enumerate(load_scenario(ALICE_BOB).steps):
        sim.run_step(i, step)
        for label, (owner, rid) in sim.resources.items():
            actor = sim.actors[owner]
            local = actor.pm.pods[actor.pod_ref].local_policies[rid]
            onchain = sim.ledger.state.resources.get(rid)
            if onchain is not None:
                assert local == onchain.policy, (i, label)


def test_access_is_sound(monkeypatch):
    """Every access a pod serves is backed by a certificate already committed on chain."""
    served = []
    original = PodManager.handle_access

    def spy(self, req):
        resp = original(self, req)
        committed = sim.ledger.state.certificates.get((req.requester, req.resource_id))
        served.append((req.certificate, committed, sim.ledger.head.height))
        return resp

    monkeypatch.setattr(PodManager, "handle_access", spy)
    sim = Simulation(42)
    for i, step in enumerate(load_scenario(ALICE_BOB).steps):
        sim.run_step(i, step)
    assert len(served) == 2
    for cert, committed, height in served:
        assert cert == committed and cert.issued_at <= height
        assert cert.verify(sim.ledger.market_public)


def test_silent_tee_times_out():
    body = (
        "0 o CreateActor\n0 o InitPod pod://o\n0 o PutResource d data\n0 o Publish d\n"
        "0 c CreateActor\n0 c PayFee d\n0 c Lookup d\n0 c Acquire d web-analytics\n"
        "0 c SetDishonest silent\n1 o Monitor d\n"
        + "".join(f"{2 + i} * Tick\n" for i in range(3))
    )
    sim_text = "seed 5\ntaxonomy default\ntimeout 2\n" + body
    report = run_scenario(parse_scenario(sim_text))
    assert any("status=Violation violator=c" in m for m in report.monitors)
    timeout, notice = report.trace[-2:]
    assert (timeout.kind, timeout.origin, timeout.event_type) == ("PushIn", "oracle", "report_timeout")
    assert (notice.kind, notice.target, notice.event_type) == ("PushOut", "pm:o", "ViolationDetected")


def test_ignore_updates_tee_is_flagged():
    body = (
        "0 o CreateActor\n0 o InitPod pod://o\n0 o PutResource d data\n0 o Publish d retention=30d\n"
        "0 c CreateActor\n0 c PayFee d\n0 c Lookup d\n0 c Acquire d web-analytics\n"
        "0 h CreateActor\n0 h PayFee d\n0 h Lookup d\n0 h Acquire d web-analytics\n"
        "0 c SetDishonest ignore-updates\n1 o UpdatePolicy d retention=7d\n2 * SealBlock\n3 o Monitor d expect=Violation:c\n"
    )
    report = run_scenario(parse_scenario(HEAD + body))
    assert report.ok, report.render()


# --- CLI -------------------------------------------------------------------------------------


def _cli(*args, env=None):
    return subprocess.run(
        [sys.executable, "-m", "solid_ucon", *args], capture_output=True, text=True, env=env, timeout=120
    )


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["run", "alice_bob.scn", "--report", str(tmp_path / "r.txt")]) == 0
    assert main(["validate", str(ALICE_BOB)]) == 0
    assert main(["run", str(tmp_path / "missing.scn")]) == 2
    assert main(["frobnicate"]) == 2
    assert main(["run"]) == 2
    bad = tmp_path / "bad.scn"
    bad.write_text(HEAD + "0 a CreateActor\n0 a Use x web-analytics expect=allow\n")
    assert main(["validate", str(bad)]) == 1
    assert main(["run", str(bad)]) == 1
    failing = tmp_path / "failing.scn"
    failing.write_text(ALICE_BOB.read_text().replace("expect=deny:PurposeMismatch", "expect=allow"))
    assert main(["run", str(failing)]) == 1
    assert "FAIL" in capsys.readouterr().out


def test_cli_trace_identical(tmp_path):
    outs = []
    for i, hashseed in enumerate(("1", "2")):
        path = tmp_path / f"t{i}.log"
        env = dict(os.environ, PYTHONHASHSEED=hashseed)
        assert _cli("run", "alice_bob.scn", "--trace", str(path), "--report", str(tmp_path / f"r{i}.txt"), env=env).returncode == 0
        outs.append(path.read_bytes())
    assert outs[0] == outs[1] and outs[0]


def test_cli_demo_sections():
    res = _cli("demo")
    assert res.returncode == 0, res.stderr
    for n, section in enumerate(SECTIONS, 1):
        assert f"== {n}. {section}" in res.stdout
    assert "Deleted(Expired)" in res.stdout
    assert "all assertions passed" in res.stdout


def test_report_fields_in_stable_order(alice_bob):
    text = alice_bob.render()
    heads = [line.split(":")[0] for line in text.splitlines()[:5]]
    assert heads == ["seed", "final_head_hash", "height", "state_root", "status"]
    order = [text.index(s) for s in ("[steps]", "[trace]", "[monitors]", "[usage_logs]", "[assertions]")]
    assert order == sorted(order)
    assert to_hex(alice_bob.final_head_hash) in text


def test_bundled_scenario_resolves_outside_package(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(["validate", "alice_bob.scn"]) == 0
    assert not Path("alice_bob.scn").exists()
