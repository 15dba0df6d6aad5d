from __future__ import annotations

import pytest

from uarmor import corpus
from uarmor.build import BuildConfig, build_module, build_source
from uarmor.memmap import LM3S6965, LM3S6965_RAM, MemoryMap, Range
from uarmor.sim import BOOT_STEPS, BootError, SimConfig, boot
from uarmor.uesp import Scenario, effective_permission
from uarmor.urng import InsufficientSeedEntropy, RngConfig, SramDevice
from uarmor.ussp import PolicyKind

DEV = SramDevice.generate(4096, device_id=1)
FULL = BuildConfig(ssp="default", esp=True, rng="urng")


def _run(image, mm=LM3S6965, seed=0, **cfg):
    m = boot(image, mm, DEV, seed, SimConfig(**cfg))
    m.run()
    return m


def test_boot_step_order():
    m = boot(build_module(corpus.load("hello"), FULL).image, LM3S6965, DEV)
    assert tuple(m.boot_steps) == BOOT_STEPS
    assert m.mpu is not None and m.mpu.locked


def test_same_seeds_same_log():
    img = build_module(corpus.load("threads"), FULL).image
    a, b = _run(img, seed=3), _run(img, seed=3)
    assert [e.line() for e in a.log] == [e.line() for e in b.log]
    assert a.observable() == b.observable()
    c = _run(img, seed=4)
    assert a.canary.value != c.canary.value
    assert a.output == c.output


def test_small_sram_cannot_seed_high_strength():
    img = build_source(".func main\n    HALT\n", BuildConfig(rng="urng")).image
    tiny = MemoryMap(sram=Range(0x20000000, 512), stack_size=64, max_threads=2)
    cfg = SimConfig(rng=RngConfig(security_strength_bits=128))
    with pytest.raises(InsufficientSeedEntropy):
        boot(img, tiny, DEV, 0, cfg)


def test_nop_costs_one_cycle():
    def cycles(n):
        img = build_source(".func main\n" + "    NOP\n" * n + "    HALT\n", BuildConfig()).image
        m = _run(img)
        return m.cycle - m.events("ThreadStart")[0].cycle

    assert cycles(10) - cycles(0) == 10


def test_flash_stores_fault():
    src = ".func main\n    MOVI r1, #0x100\n    MOVI r0, #7\n    STORE r0, [r1]\n    HALT\n"
    m = _run(build_source(src, BuildConfig(esp=True)).image)
    faults = m.events("MemFault")
    assert faults and faults[0].detail["access"] == "write"
    assert m.halt_code is None


def test_ram_boot_makes_flash_non_executable():
    img = build_module(corpus.load("hello"), FULL).image
    m = _run(img, LM3S6965_RAM, scenario=Scenario.RAM)
    assert m.halt_code == 0 and m.output
    assert not effective_permission(m.mpu, LM3S6965_RAM.flash.base).execute
    assert effective_permission(m.mpu, m.exec_addr("main")).execute


def test_ram_scenario_needs_ram_code_range():
    img = build_module(corpus.load("hello"), FULL).image
    with pytest.raises(BootError):
        boot(img, LM3S6965, DEV, 0, SimConfig(scenario=Scenario.RAM))


@pytest.mark.parametrize("name", ["echo", "threads", "crc32"])
def test_access_trace_matches_plan(name):
    img = build_module(corpus.load(name), FULL).image
    m = boot(img, LM3S6965, DEV, 0, SimConfig(trace_accesses=True), corpus.console_input(name))
    n_boot = len(m.access_trace)
    m.run()
    replayed = 0
    for _, kind, addr, ok in m.access_trace[n_boot:]:
        p = effective_permission(m.mpu, addr)
        want = p.execute if kind == "fetch" else p.write if kind == "write" else p.read
        assert want == ok
        replayed += 1
    assert replayed > 100


SPIN = """
.global counts 12
.func main
    ADR r0, spin
    MOVI r1, #1
    SVC #3
    ADR r0, spin
    MOVI r1, #2
    SVC #3
    MOVI r0, #0
    B spin
.func spin
    LA r4, counts
    LSL r0, r0, #2
    ADD r4, r4, r0
loop:
    LOAD r1, [r4]
    ADD r1, r1, #1
    STORE r1, [r4]
    B loop
"""


def test_round_robin_is_fair():
    img = build_source(SPIN, BuildConfig()).image
    m = boot(img, LM3S6965, DEV, 0, SimConfig(quantum=64))
    m.run(10_000)
    raw = m.global_bytes("counts")
    counts = [int.from_bytes(raw[i:i + 4], "little") for i in range(0, 12, 4)]
    assert min(counts) > 0
    # each iteration costs 8 cycles, so one quantum is worth 8 increments
    assert max(counts) - min(counts) <= 16


def test_restart_draws_fresh_canaries():
    img = build_module(corpus.load("vuln"), BuildConfig(ssp="default", rng="urng")).image
    m = boot(img, LM3S6965, DEV, 0, SimConfig(policy=PolicyKind.SYSTEM_RESTART))
    for _ in range(100):
        m.reboot()
    assert len(m.canary_history) == 101
    assert len(set(m.canary_history)) == 101
    assert m.boot_id == 100


def test_halt_policy_stops_machine():
    src = ".func main\n    MOVI r1, #0\n    LOAD r0, [r1, #-4]\n    HALT\n"
    img = build_source(src, BuildConfig(esp=True)).image
    assert _run(img, fault_policy="halt").halted
