from __future__ import annotations

import json

import pytest

from uarmor import corpus
from uarmor.build import BuildConfig, build_module
from uarmor.memmap import LM3S6965, LM3S6965_RAM
from uarmor.scenario import (POLICY_EFFECT, SHELLCODE, ScenarioError, attack_scripts, execute, load_scenario,
                             parse_scenario)
from uarmor.sim import SimConfig
from uarmor.uesp import Scenario
from uarmor.urng import SramDevice
from uarmor.ussp import PolicyKind

FULL = BuildConfig(ssp="default", esp=True, rng="urng")


def run_attack(name, policy="fatal", scenario=Scenario.FLASH, config=FULL):
    mm = LM3S6965_RAM if scenario is Scenario.RAM else LM3S6965
    prog, text = attack_scripts(policy)[name]
    sc = parse_scenario(text)
    sc.image = build_module(corpus.load(prog, mm), config).image
    sc.console_input = corpus.console_input(prog)
    dev = SramDevice.generate(mm.sram.size, 0)
    return execute(sc, mm, dev, 0, SimConfig(scenario=scenario, policy=PolicyKind(policy)))


@pytest.mark.parametrize("bad", [
    "frobnicate 1",
    "expect NoSuchEvent",
    "reg r99 1",
    "inject main zz",
    "expect Halt(0",
    "overflow vuln 00",
])
def test_parse_errors(bad):
    with pytest.raises(ScenarioError):
        parse_scenario(bad)


def test_parse_reports_line_number():
    with pytest.raises(ScenarioError, match="line 3"):
        parse_scenario("name x\nrun\nreg q 1\n")


def test_parse_actions():
    sc = parse_scenario('name demo\nload corpus:echo\ninput "hi"\nrun 100\nexpect Output("hi")\n')
    assert sc.name == "demo" and sc.load_ref == "corpus:echo"
    assert sc.console_input == b"hi"
    assert [a.op for a in sc.script] == ["run", "expect"]
    assert sc.expectations[0].args == ("Output", "hi")


def test_no_image_is_an_error():
    with pytest.raises(ScenarioError):
        execute(parse_scenario("run"))


@pytest.mark.parametrize("scenario", [Scenario.FLASH, Scenario.RAM])
@pytest.mark.parametrize("name", sorted(attack_scripts()))
def test_attack_suite(name, scenario):
    report, _ = run_attack(name, scenario=scenario)
    assert report.passed, report.to_text()


@pytest.mark.parametrize("scenario", [Scenario.FLASH, Scenario.RAM])
@pytest.mark.parametrize("policy", sorted(POLICY_EFFECT))
def test_stack_smash_under_every_policy(policy, scenario):
    report, machine = run_attack("stack-smash", policy, scenario)
    assert report.passed, report.to_text()
    assert len(machine.events("CanaryViolation")) == 1


def test_unprotected_injection_runs_shellcode():
    sc = parse_scenario(f"inject 0x20001000 {SHELLCODE.hex()}\ncall 0x20001000\nexpect Halt(66)\n")
    sc.image = build_module(corpus.load("bootloader"), BuildConfig()).image
    report, machine = execute(sc)
    assert report.passed and machine.halt_code == 66


def test_unprotected_smash_hijacks_return():
    report, machine = run_attack("stack-smash", config=BuildConfig())
    assert not report.passed
    assert not machine.events("CanaryViolation")
    assert machine.events("MemFault")


def test_output_expectation_and_records():
    sc = parse_scenario('expect Output("hello")\nexpect Halt(0)\n')
    sc.image = build_module(corpus.load("hello"), FULL).image
    report, _ = execute(sc)
    assert report.passed
    recs = [json.loads(line) for line in report.to_jsonl().splitlines()]
    assert recs[-1] == {"scenario": "scenario", "metric": "passed", "value": True}
    assert all(r["passed"] for r in recs if "expect" in r)


def test_order_matters():
    sc = parse_scenario("expect Halt(0)\nexpect Halt(0)\n")
    sc.image = build_module(corpus.load("hello"), FULL).image
    assert not execute(sc)[0].passed


def test_load_file(tmp_path):
    img = build_module(corpus.load("hello"), FULL).image
    (tmp_path / "h.img").write_bytes(img.to_bytes())
    (tmp_path / "s.scn").write_text("load h.img\nexpect Halt(0)\n")
    sc = load_scenario(tmp_path / "s.scn")
    assert sc.image == img
    assert execute(sc)[0].passed
