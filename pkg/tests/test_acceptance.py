"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``criterion N <title>: PASS`` or ``FAIL`` line
(live with ``-s``; otherwise they are repeated in the terminal summary).
"""

from __future__ import annotations

import random
import time
from contextlib import contextmanager

import pytest

from keccak_reference import keccak_p
from uarmor import corpus
from uarmor.build import BuildConfig, build_module
from uarmor.cli import main as cli_main
from uarmor.firmware import FlatImage
from uarmor.gadgets import format_survival_table, survival
from uarmor.isa import Instruction, encode_bytes
from uarmor.keccak import keccak_f200
from uarmor.memmap import LM3S6965, LM3S6965_RAM, MemoryMap, Range
from uarmor.overhead import measure_overhead
from uarmor.scenario import POLICY_EFFECT, Scenario as Workload, attack_scripts, execute, parse_scenario
from uarmor.sim import SimConfig, boot
from uarmor.stats import monobit_test, runs_test
from uarmor.uesp import AlignmentUnsatisfiable, RegionBudgetExceeded, Scenario, lock_mpu, plan_mpu, plan_rows
from uarmor.urng import (EntropyModel, InsufficientSeedEntropy, ReseedMode, ReseedPolicy, RngConfig, SramDevice,
                         rand32, random_bytes, rng_init, sram_startup_sample, state_footprint_bytes)
from uarmor.uscramble import DiversificationSeed, DiversifyConfig, variant_seed
from uarmor.ussp import canonical_epilogues

RESULTS: list[str] = []    # echoed in the terminal summary by conftest
SEED_BASE = DiversificationSeed(bytes(range(32)))
FULL = BuildConfig(ssp="default", esp=True, rng="urng")


@contextmanager
def criterion(n: int, title: str, limit_s: float):
    t0 = time.perf_counter()
    try:
        yield
        took = time.perf_counter() - t0
        assert took < limit_s, f"took {took:.1f} s, limit {limit_s} s"
    except BaseException:
        _emit(f"criterion {n} {title}: FAIL")
        raise
    _emit(f"criterion {n} {title}: PASS ({time.perf_counter() - t0:.2f} s)")


def _emit(line: str) -> None:
    RESULTS.append(line)
    print(line)


def test_c01_keccak_vectors():
    with criterion(1, "keccak-f[200] vectors", 1.0):
        zero_out = bytes.fromhex("3c2826841cb35c171eaae9b811134ceaa3852c69d2c5abafea")
        assert keccak_f200(bytes(25)) == zero_out
        assert keccak_f200(zero_out) == keccak_p(zero_out, 8)
        rng = random.Random(1)
        for _ in range(10):
            s = rng.randbytes(25)
            assert keccak_f200(s) == keccak_p(s, 8)


def test_c02_seed_boundary():
    with criterion(2, "640-byte seeding bound", 1.0):
        model = EntropyModel(sram_entropy_density=0.05)
        cfg = RngConfig(security_strength_bits=128)
        assert model.min_sram_bytes(cfg) == 640
        rng_init(cfg, bytes(640), model)
        rng_init(cfg, bytes(641), model)
        with pytest.raises(InsufficientSeedEntropy):
            rng_init(cfg, bytes(639), model)


def test_c03_reseed_accounting():
    with criterion(3, "reseed accounting", 1.0):
        suv = bytes(range(256)) * 4
        st = rng_init(RngConfig(), suv, EntropyModel())
        for _ in range(2048 // 8):
            rand32(st)
        assert st.output_bits == 2048 * 8 and st.reseed_bits >= 256
        pol = ReseedPolicy(ReseedMode.PERIODIC, threshold_bytes=4096)
        st = rng_init(RngConfig(reseed_policy=pol), suv, EntropyModel())
        for _ in range(4096 // 8 - 1):
            rand32(st)
        assert st.reseeds == 0 and st.reseed_counter == 4096 - 8
        rand32(st)
        assert st.reseeds == 1 and st.reseed_counter == 0


FLASH_TABLE = [(0, "Default", "RW + XN", "4 GB"), (4, "SCB", "RO + XN", "64 B"), (5, "MPU", "RO + XN", "64 B"),
               (6, "Code (other)", "RO + X", "256 KB"), (7, "Code (sensitive)", "RO + XN", "*")]
RAM_TABLE = [(0, "Default", "RW + XN", "4 GB"), (2, "SCB", "RO + XN", "64 B"), (3, "MPU", "RO + XN", "64 B"),
             (4, "Code (other, RAM)", "RO + X", "*"), (5, "Code (sensitive, RAM)", "RO + XN", "*"),
             (6, "Code (other, flash)", "RO + X", "256 KB"), (7, "Code (sensitive, flash)", "RO + XN", "*")]


def _diff(rows, table) -> list:
    out = [] if len(rows) == len(table) else [("count", len(rows), len(table))]
    for got, want in zip(rows, table):
        if got[:3] != want[:3] or (want[3] != "*" and got[3] != want[3]):
            out.append((got, want))
    return out


def test_c04_mpu_tables():
    with criterion(4, "MPU plan fidelity", 1.0):
        image = build_module(corpus.load("bootloader"), FULL).image
        sens = [Range(a, b - a) for a, b in image.sensitive_ranges()]
        flash = lock_mpu(plan_mpu(LM3S6965.with_sensitive(sens), Scenario.FLASH))
        assert _diff(plan_rows(flash), FLASH_TABLE) == []
        assert flash.region(7).size >= sum(r.size for r in sens)
        off = LM3S6965_RAM.ram_code_range.base - image.code_base
        ram_sens = sens + [Range(r.base + off, r.size) for r in sens]
        ram = lock_mpu(plan_mpu(LM3S6965_RAM.with_sensitive(ram_sens), Scenario.RAM))
        assert _diff(plan_rows(ram), RAM_TABLE) == []
        assert ram.region(5).size == ram.region(7).size == flash.region(7).size


def _random_map(rng: random.Random) -> tuple[MemoryMap, Scenario]:
    flash = Range(0, 1 << rng.randint(16, 20))
    sram = Range(0x20000000, 1 << rng.randint(15, 17))
    spans = []
    for _ in range(rng.randint(1, 2)):
        size = 1 << rng.randint(5, 11)
        spans.append(Range(rng.randrange(0, flash.size // size) * size, size))
    scen = rng.choice(list(Scenario))
    ram_code = None
    if scen is Scenario.RAM:
        ram_code = Range(sram.base + sram.size // 2, sram.size // 2)
        size = 1 << rng.randint(5, 9)
        spans.append(Range(ram_code.base + rng.randrange(0, ram_code.size // size) * size, size))
    return MemoryMap(flash=flash, sram=sram, ram_code_range=ram_code, sensitive_ranges=tuple(spans)), scen


def test_c05_w_xor_x():
    with criterion(5, "W xor X over random maps", 10.0):
        rng = random.Random(2024)
        planned = violations = 0
        while planned < 10:
            mm, scen = _random_map(rng)
            try:
                plan = lock_mpu(plan_mpu(mm, scen))
            except (RegionBudgetExceeded, AlignmentUnsatisfiable):
                continue
            planned += 1
            probes = set()
            for b in plan.boundaries():
                probes.update(((b - 1) & 0xFFFFFFFF, b, (b + 1) & 0xFFFFFFFF))
            probes.update(rng.getrandbits(32) for _ in range(100_000))
            for addr in probes:
                p = plan.permission(addr)
                violations += p.write and p.execute
        assert violations == 0


def _attack(name, policy, scen):
    mm = LM3S6965_RAM if scen is Scenario.RAM else LM3S6965
    prog, text = attack_scripts(policy)[name]
    sc = parse_scenario(text)
    sc.image = build_module(corpus.load(prog, mm), FULL).image
    sc.console_input = corpus.console_input(prog)
    return execute(sc, mm, SramDevice.generate(mm.sram.size, 0), 0, SimConfig(scenario=scen, policy=policy))


def test_c06_attack_suite():
    with criterion(6, "attack scenario suite", 30.0):
        failures = []
        for scen in Scenario:
            for name in attack_scripts():
                if name == "stack-smash":
                    continue
                report, _ = _attack(name, "fatal", scen)
                if not report.passed:
                    failures.append((scen.value, name))
            for policy in POLICY_EFFECT:
                report, m = _attack("stack-smash", policy, scen)
                if not report.passed:
                    failures.append((scen.value, policy))
                if policy == "thread-restart":
                    # the registered handler ran and reported through the shared flag
                    assert m.output.endswith(b"2\n")
                if policy == "restart":
                    assert m.boot_id == 1 and m.canary_history[0] != m.canary_history[1]
        assert failures == []


def test_c07_semantics_preservation():
    with criterion(7, "semantics preservation", 120.0):
        dev = SramDevice.generate(LM3S6965.sram.size, 0)
        diffs, runs = [], 0
        for name in corpus.program_names():
            module, inp = corpus.load(name), corpus.console_input(name)
            ref = boot(build_module(module, BuildConfig()).image, LM3S6965, dev, 0, SimConfig(), inp)
            ref.run()
            assert ref.halted, name
            for i in range(20):
                cfg = BuildConfig(diversify=DiversifyConfig(), seed=variant_seed(SEED_BASE, i))
                m = boot(build_module(module, cfg).image, LM3S6965, dev, 0, SimConfig(), inp)
                m.run()
                runs += 1
                if m.observable() != ref.observable():
                    diffs.append((name, i))
        assert runs == 500 and diffs == []


def _log(path, seed=0):
    m = boot(FlatImage.from_bytes(path.read_bytes()), LM3S6965, SramDevice.generate(LM3S6965.sram.size, 3), seed,
             SimConfig(), corpus.console_input("vuln"))
    m.run()
    return [e.line() for e in m.log]


def test_c08_manifest_reproducibility(tmp_path, capsys):
    with criterion(8, "manifest reproducibility", 30.0):
        first = tmp_path / "a.img"
        again = tmp_path / "b.img"
        assert cli_main(["build", "corpus:vuln", "--out", str(first), "--ssp", "all", "--esp", "--rng", "urng",
                         "--diversify", "--seed", SEED_BASE.hex()]) == 0
        assert cli_main(["build", "--from-manifest", str(first.with_suffix(".manifest")), "--out", str(again)]) == 0
        capsys.readouterr()
        assert first.read_bytes() == again.read_bytes()
        assert _log(first, 5) == _log(again, 5)


def test_c09_overhead_envelopes():
    with criterion(9, "overhead envelopes", 120.0):
        names = corpus.program_names()
        flash = LM3S6965.flash.size
        per_fn = set()
        for name in names:
            m = corpus.load(name)
            base = build_module(m, BuildConfig()).image
            ssp = build_module(m, BuildConfig(ssp="default"))
            for fn in ssp.protected:
                if len(canonical_epilogues(m.function(fn).instructions)) == 1:
                    per_fn.add(ssp.module.function(fn).size_bytes - m.function(fn).size_bytes)
            assert (len(ssp.image.code_bytes) - len(base.code_bytes)) / flash <= 0.05
            sizes = [len(build_module(m, BuildConfig(diversify=DiversifyConfig(max_stub_instructions=4),
                                                     seed=variant_seed(SEED_BASE, i))).image.code_bytes)
                     for i in range(5)]
            assert (sum(sizes) / len(sizes) - len(base.code_bytes)) / flash <= 0.05
            work = Workload(name, None, [], corpus.console_input(name))
            esp = measure_overhead(base, build_module(m, BuildConfig(esp=True)).image, work, runs=2)
            assert esp.runtime_pct_app == 0.0, name
        assert per_fn == {36}
        m = corpus.load("hello")
        work = Workload("hello", None, [], corpus.console_input("hello"))
        r = measure_overhead(build_module(m, BuildConfig()).image, build_module(m, BuildConfig(rng="urng")).image,
                             work, runs=2, check_output=False)
        assert abs(r.memory_bytes - 52) <= 8 and state_footprint_bytes() == 52


def _img(code: bytes, base: int) -> FlatImage:
    return FlatImage(base, base, 0x20000800, code, b"", ())


def test_c10_survival():
    with criterion(10, "gadget survival", 300.0):
        dup = build_module(corpus.load("big30"), BuildConfig()).image
        assert survival([dup] * 4).avg_fraction == survival([dup] * 4).max_fraction == 1.0
        code = encode_bytes([Instruction("NOP"), Instruction("RET")])
        disjoint = survival([_img(code, 0), _img(code, 0x100), _img(code, 0x200)])
        assert disjoint.avg_survival == disjoint.max_survival == 0
        module = corpus.load("big30")
        assert len(module.functions) >= 30
        variants = [build_module(module, BuildConfig(diversify=DiversifyConfig(), seed=variant_seed(SEED_BASE, i)))
                    .image for i in range(200)]
        r = survival(variants, name="big30")
        table = format_survival_table([r])
        print()
        print(table, end="")
        assert r.avg_fraction < r.max_fraction < 1.0
        assert "Avg. GS" in table and "10.15" in table


def test_c11_rng_statistics():
    with criterion(11, "rng statistical smoke", 10.0):
        dev = SramDevice.generate(4096, 11)
        st = rng_init(RngConfig(), sram_startup_sample(dev, 0, 2048), EntropyModel())
        data = random_bytes(st, 1 << 20)
        assert len(data) == 1 << 20
        assert monobit_test(data) >= 0.01
        assert runs_test(data) >= 0.01
