from __future__ import annotations

import pytest
from hypothesis import given
from hypothesis import strategies as st

from uarmor import corpus
from uarmor.asm import parse_asm
from uarmor.build import BuildConfig, build_module
from uarmor.firmware import Block, FunctionDef, Local, encode
from uarmor.isa import Instruction
from uarmor.scenario import execute, parse_scenario
from uarmor.sim import SimConfig
from uarmor.urng import EntropyModel, RngConfig, rng_init
from uarmor.ussp import (CanaryConfig, NonCanonicalPrologue, PolicyKind, UnregisteredThread, ViolationPolicy,
                         canonical_epilogues, generate_master_canary, instrument_ssp, needs_protection,
                         protect_module, reorder_frame)

FRAME_FN = ".func f\n.local buf buffer 16\n.local p pointer 4\n    ENTER {r4}\n    LEAVE\n"


def _fn(src=FRAME_FN, name="f"):
    return parse_asm(src + ".func main\n    HALT\n").function(name)


def test_single_epilogue_costs_nine_instructions():
    fn = _fn()
    out = instrument_ssp(fn)
    assert len(out.instructions) - len(fn.instructions) == 9
    assert out.size_bytes - fn.size_bytes == 36


def test_growth_is_four_plus_five_per_epilogue():
    src = (".func f\n.local buf buffer 16\n    ENTER {}\n    MOVI r1, #0\n    BEQ r0, r1, other\n    LEAVE\n"
           "other:\n    LEAVE\n")
    fn = _fn(src)
    assert len(canonical_epilogues(fn.instructions)) == 2
    assert len(instrument_ssp(fn).instructions) - len(fn.instructions) == 4 + 5 * 2


@pytest.mark.parametrize("name", corpus.program_names())
def test_corpus_protection_cost(name):
    m = corpus.load(name)
    prot, names = protect_module(m, CanaryConfig(protect_all=True))
    for n in names:
        before, after = m.function(n), prot.function(n)
        k = len(canonical_epilogues(before.instructions))
        assert after.size_bytes - before.size_bytes == 4 * (4 + 5 * k)
        if k == 1:
            assert after.size_bytes - before.size_bytes == 36


def test_rejects_noncanonical_prologue():
    fn = FunctionDef("f", (Block(None, (Instruction("RET"),)),), locals=(Local("b", "buffer", 16),))
    with pytest.raises(NonCanonicalPrologue):
        instrument_ssp(fn)


def test_coverage_rules():
    big = _fn()
    small = _fn(".func f\n.local buf buffer 4\n    ENTER {}\n    LEAVE\n")
    assert needs_protection(big, CanaryConfig())
    assert not needs_protection(small, CanaryConfig())
    assert needs_protection(small, CanaryConfig(protect_all=True))
    assert not needs_protection(_fn(FRAME_FN.replace(" f\n", " __f\n"), "__f"), CanaryConfig(protect_all=True))
    assert CanaryConfig(protect_all=True).coverage == "all"


@st.composite
def frames(draw):
    locs = draw(st.lists(st.tuples(st.text("abcdefgh", min_size=1, max_size=4),
                                   st.sampled_from(["buffer", "pointer", "scalar"]), st.integers(1, 64)),
                         min_size=1, max_size=6, unique_by=lambda t: t[0]))
    body = ".func f\n" + "".join(f".local {n} {k} {s}\n" for n, k, s in locs) + "    ENTER {r4}\n    LEAVE\n"
    return _fn(body)


@given(frames())
def test_canary_sits_between_buffers_and_saved_state(fn):
    out = instrument_ssp(reorder_frame(fn))
    layout = out.frame_layout()
    canary = out.canary_offset
    assert canary + 4 == out.frame_size
    seen_buffer = False
    for loc in out.locals:
        assert layout[loc.name] + loc.size <= canary
        if loc.kind == "buffer":
            seen_buffer = True
        else:
            assert not seen_buffer, "non-buffer placed above a buffer"


def test_terminator_canary_has_zero_byte():
    rng = rng_init(RngConfig(), bytes(range(256)) * 4, EntropyModel())
    cfg = CanaryConfig(terminator_style=True)
    for _ in range(50):
        c = generate_master_canary(rng, cfg)
        assert c.to_bytes()[0] == 0
    assert cfg.entropy_bits == 24 and CanaryConfig().entropy_bits == 32


def test_policy_registry():
    p = ViolationPolicy.parse("thread-restart")
    assert p.kind is PolicyKind.THREAD_RESTART
    p.register(3, 0x100)
    assert p.lookup(3) == 0x100
    p.deregister(3)
    with pytest.raises(UnregisteredThread):
        p.lookup(3)
    with pytest.raises(ValueError):
        ViolationPolicy.parse("panic")


def _run(prog, script, policy, **cfg):
    img = build_module(corpus.load(prog), BuildConfig(ssp="default", **cfg)).image
    sc = parse_scenario(script)
    sc.image, sc.console_input = img, corpus.console_input(prog)
    return execute(sc, config=SimConfig(policy=policy))


def test_overflow_within_buffer_is_silent():
    rep, m = _run("fib", "overflow putnum.digits " + "00" * 12 + "\n", "fatal")
    assert not m.events("CanaryViolation")


def test_unregistered_thread_restart_falls_back_to_fatal():
    rep, m = _run("fib", "overflow putnum.digits " + "41" * 16 + "\n"
                  "expect CanaryViolation\nexpect PolicyFallback\nexpect ThreadKilled\n", "thread-restart")
    assert rep.passed, rep.to_text()


def test_passive_without_return_site_acts_fatal():
    rep, m = _run("hello", "call __violation\nexpect TrapViolation\nexpect PolicyFallback\nexpect ThreadKilled\n",
                  "passive")
    assert rep.passed, rep.to_text()
    assert not m.events("Alert")


def test_passive_logs_exactly_one_alert():
    rep, m = _run("vuln", "overflow vuln.buf " + "41" * 20 + "\nexpect CanaryViolation\nexpect Alert\n"
                  "expect Halt(0)\n", "passive")
    assert rep.passed and len(m.events("Alert")) == 1


def test_protected_image_encodes():
    m, names = protect_module(corpus.load("echo"), CanaryConfig())
    assert "putnum" in names
    encode(m)
