"""Hypothesis strategies for instructions and small firmware modules."""

from __future__ import annotations

from hypothesis import strategies as st

from uarmor.firmware import Block, FirmwareModule, FunctionDef, GlobalDef, Local
from uarmor.isa import ALU_OPS, CONDS, SAVABLE, SIGNED_IMM_ALU, Instruction

reg = st.integers(0, 15)
s16 = st.integers(-(1 << 15), (1 << 15) - 1)
u16 = st.integers(0, 0xFFFF)


@st.composite
def instructions(draw, privileged: bool = True, control: bool = True) -> Instruction:
    kinds = ["nullary", "imm16", "mov", "movi", "alu", "alui", "mem", "pushm", "popm"]
    if control:
        kinds += ["call", "callr", "br"]
    if privileged:
        kinds += ["mpuwr", "flashwr"]
    k = draw(st.sampled_from(kinds))
    if k == "nullary":
        return Instruction(draw(st.sampled_from(["NOP", "RET", "HALT"])))
    if k == "imm16":
        return Instruction(draw(st.sampled_from(["TRAP", "SVC"])), imm=draw(u16))
    if k == "mov":
        return Instruction("MOV", rd=draw(reg), rn=draw(reg))
    if k == "movi":
        return Instruction(draw(st.sampled_from(["MOVI", "MOVT"])), rd=draw(reg), imm=draw(u16))
    if k == "alu":
        return Instruction(draw(st.sampled_from(ALU_OPS)), rd=draw(reg), rn=draw(reg), rm=draw(reg))
    if k == "alui":
        op = draw(st.sampled_from(ALU_OPS))
        imm = draw(s16 if op in SIGNED_IMM_ALU else u16)
        return Instruction(op + "I", rd=draw(reg), rn=draw(reg), imm=imm)
    if k == "mem":
        return Instruction(draw(st.sampled_from(["LOAD", "LOADB", "STORE", "STOREB"])), rd=draw(reg),
                           rn=draw(reg), imm=draw(s16))
    if k in ("pushm", "popm"):
        regs = draw(st.permutations(SAVABLE).flatmap(lambda p: st.integers(0, 9).map(lambda n: tuple(p[:n]))))
        return Instruction("PUSHM" if k == "pushm" else "POPM", regs=regs)
    if k == "call":
        return Instruction("CALL", imm=draw(st.integers(-(1 << 23), (1 << 23) - 1)))
    if k == "callr":
        return Instruction("CALLR", rn=draw(reg))
    if k == "br":
        cond = draw(st.sampled_from(CONDS))
        rn, rm = (0, 0) if cond == "AL" else (draw(reg), draw(reg))
        return Instruction("BR", rn=rn, rm=rm, imm=draw(s16), cond=cond)
    if k == "mpuwr":
        return Instruction("MPUWR", rd=draw(reg), imm=draw(u16))
    return Instruction("FLASHWR", rd=draw(reg), rn=draw(reg))


names = st.text("abcdefghijklmnopqrstuvwxyz", min_size=1, max_size=6)


@st.composite
def modules(draw, max_functions: int = 5) -> FirmwareModule:
    fnames = draw(st.lists(names, min_size=1, max_size=max_functions, unique=True))
    gnames = draw(st.lists(names.map(lambda s: "g" + s), max_size=3, unique=True))
    fns = []
    for name in fnames:
        sensitive = draw(st.booleans())
        lock = sensitive and draw(st.booleans())
        body = draw(st.lists(instructions(privileged=sensitive, control=False), min_size=0, max_size=8))
        # a few symbolic references the linker must resolve
        if draw(st.booleans()):
            body.append(Instruction("CALL", sym=draw(st.sampled_from(fnames)), reloc="pc"))
        if gnames and draw(st.booleans()):
            g = draw(st.sampled_from(gnames))
            body += [Instruction("MOVI", rd=0, sym=g, reloc="lo"), Instruction("MOVT", rd=0, sym=g, reloc="hi")]
        body.append(Instruction("RET"))
        locs = draw(st.lists(st.tuples(names, st.sampled_from(["buffer", "pointer", "scalar"]),
                                       st.integers(1, 40)), max_size=3, unique_by=lambda t: t[0]))
        fns.append(FunctionDef(name, (Block(None, tuple(body)),), sensitive, draw(st.booleans()), lock,
                               tuple(Local(*l) for l in locs)))
    gl = []
    for g in gnames:
        size = draw(st.integers(1, 32))
        init = draw(st.binary(max_size=size))
        gl.append(GlobalDef(g, size, init))
    return FirmwareModule(tuple(fns), tuple(gl), draw(st.sampled_from(fnames)))
