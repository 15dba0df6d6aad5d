"""The uVM instruction set: fixed 32-bit words, stored little-endian.

Word layout (bit 31 is the most significant)::

    [31:24] opcode   [23:20] a   [19:16] b   [15:0] imm16 (or [15:12] c)

CALL uses bits [23:0] as a signed word offset, PUSHM/POPM borrow the low
opcode nibble to get a 28-bit payload: a 9-bit register mask (r4..r11, lr)
and the save order as a Lehmer code. Unused bits must be zero, so each
valid word decodes to exactly one instruction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

SP, LR, PC = 13, 14, 15
REG_NAMES = [f"r{i}" for i in range(13)] + ["sp", "lr", "pc"]
REG_INDEX = {name: i for i, name in enumerate(REG_NAMES)}
REG_INDEX.update({"r13": SP, "r14": LR, "r15": PC, "ip": 12})

# Registers a PUSHM/POPM mask can name, in mask-bit order.
SAVABLE = (4, 5, 6, 7, 8, 9, 10, 11, LR)
CALLEE_SAVED = SAVABLE[:-1]

ALU_OPS = ("ADD", "SUB", "MUL", "UDIV", "UREM", "AND", "ORR", "EOR", "LSL", "LSR", "ASR")
SIGNED_IMM_ALU = {"ADD", "SUB", "MUL"}
CONDS = ("AL", "EQ", "NE", "LT", "GE", "LO", "HS")

OPCODES = {
    "NOP": 0x00, "TRAP": 0x01, "HALT": 0x02, "RET": 0x03,
    "MOV": 0x10, "MOVI": 0x11, "MOVT": 0x12,
    "LOAD": 0x40, "LOADB": 0x41, "STORE": 0x48, "STOREB": 0x49,
    "CALL": 0x50, "CALLR": 0x51,
    "SVC": 0x90, "MPUWR": 0x91, "FLASHWR": 0x92,
}
for _i, _name in enumerate(ALU_OPS):
    OPCODES[_name] = 0x20 + _i
    OPCODES[_name + "I"] = 0x30 + _i
_BY_CODE = {v: k for k, v in OPCODES.items()}
BR_BASE, PUSHM_BASE, POPM_BASE = 0x80, 0x60, 0x70

MNEMONICS = frozenset(OPCODES) | {"BR", "PUSHM", "POPM"}

# Cycle cost per instruction; PUSHM/POPM are per register, BR depends on outcome.
CYCLES = {name: 1 for name in MNEMONICS}
CYCLES.update({
    "LOAD": 2, "LOADB": 2, "STORE": 2, "STOREB": 2,
    "CALL": 3, "CALLR": 3, "RET": 3, "SVC": 10, "MPUWR": 2, "FLASHWR": 2,
})
BR_TAKEN_CYCLES, BR_NOT_TAKEN_CYCLES, STACK_CYCLES_PER_REG = 3, 1, 2


class InvalidInstruction(ValueError):
    pass


@dataclass(frozen=True)
class Instruction:
    """One uVM instruction.

    ``sym``/``reloc`` carry an unresolved operand (label, function, global
    or frame slot); the linker folds them into ``imm``. Field use per
    mnemonic: ALU ``rd, rn, rm|imm``; LOAD/STORE ``rd, [rn + imm]``;
    BR ``cond rn, rm -> imm``; FLASHWR ``rd -> [rn]``; MPUWR ``rd -> imm``.
    """

    op: str
    rd: int = 0
    rn: int = 0
    rm: int = 0
    imm: int = 0
    cond: str = "AL"
    regs: tuple[int, ...] = ()
    sym: str | None = None
    reloc: str | None = None

    @property
    def resolved(self) -> bool:
        return self.sym is None

    @property
    def is_terminator(self) -> bool:
        return self.op in ("RET", "HALT", "TRAP") or (self.op == "BR" and self.cond == "AL")

    @property
    def is_indirect_transfer(self) -> bool:
        return self.op in ("RET", "CALLR")

    def cycles(self, taken: bool = True) -> int:
        if self.op in ("PUSHM", "POPM"):
            return max(1, STACK_CYCLES_PER_REG * len(self.regs))
        if self.op == "BR":
            return BR_TAKEN_CYCLES if taken else BR_NOT_TAKEN_CYCLES
        return CYCLES[self.op]

    def with_imm(self, imm: int) -> Instruction:
        return replace(self, imm=imm, sym=None, reloc=None)

    def __str__(self) -> str:
        return disassemble(self)


def sext(value: int, bits: int) -> int:
    value &= (1 << bits) - 1
    return value - (1 << bits) if value >> (bits - 1) else value


def lehmer_encode(order: tuple[int, ...]) -> int:
    ranks = sorted(order)
    perm = [ranks.index(r) for r in order]
    code = 0
    k = len(perm)
    for i, p in enumerate(perm):
        smaller = sum(1 for q in perm[i + 1:] if q < p)
        code += smaller * math.factorial(k - 1 - i)
    return code


def lehmer_decode(regs: list[int], code: int) -> tuple[int, ...]:
    pool = sorted(regs)
    out = []
    for i in range(len(pool) - 1, -1, -1):
        f = math.factorial(i)
        idx, code = divmod(code, f)
        out.append(pool.pop(idx))
    return tuple(out)


def _check_imm(ins: Instruction, lo: int, hi: int, what: str = "immediate") -> None:
    if not lo <= ins.imm <= hi:
        raise InvalidInstruction(f"{what} {ins.imm} out of range for {ins.op}")


def _check_regs(*regs: int) -> None:
    for r in regs:
        if not 0 <= r <= 15:
            raise InvalidInstruction(f"bad register {r}")


def encode_instruction(ins: Instruction) -> int:
    if not ins.resolved:
        raise InvalidInstruction(f"unresolved operand {ins.sym!r} in {ins.op}")
    op = ins.op
    _check_regs(ins.rd, ins.rn, ins.rm)
    if op in ("PUSHM", "POPM"):
        if len(set(ins.regs)) != len(ins.regs) or any(r not in SAVABLE for r in ins.regs):
            raise InvalidInstruction(f"{op} may only name r4-r11 and lr once each")
        mask = sum(1 << SAVABLE.index(r) for r in ins.regs)
        payload = mask | (lehmer_encode(ins.regs) << 9)
        base = PUSHM_BASE if op == "PUSHM" else POPM_BASE
        return ((base | (payload >> 24)) << 24) | (payload & 0xFFFFFF)
    if op == "BR":
        if ins.cond not in CONDS:
            raise InvalidInstruction(f"bad condition {ins.cond}")
        _check_imm(ins, -(1 << 15), (1 << 15) - 1, "branch offset")
        rn, rm = (0, 0) if ins.cond == "AL" else (ins.rn, ins.rm)
        return ((BR_BASE | CONDS.index(ins.cond)) << 24) | (rn << 20) | (rm << 16) | (ins.imm & 0xFFFF)
    if op not in OPCODES:
        raise InvalidInstruction(f"unknown mnemonic {op}")
    code = OPCODES[op] << 24
    if op in ("NOP", "RET", "HALT"):
        return code
    if op in ("TRAP", "SVC"):
        _check_imm(ins, 0, 0xFFFF)
        return code | ins.imm
    if op == "CALL":
        _check_imm(ins, -(1 << 23), (1 << 23) - 1, "call offset")
        return code | (ins.imm & 0xFFFFFF)
    if op == "CALLR":
        return code | (ins.rn << 20)
    if op == "MOV":
        return code | (ins.rd << 20) | (ins.rn << 16)
    if op in ("MOVI", "MOVT"):
        _check_imm(ins, 0, 0xFFFF)
        return code | (ins.rd << 20) | ins.imm
    if op == "MPUWR":
        _check_imm(ins, 0, 0xFFFF)
        return code | (ins.rd << 20) | ins.imm
    if op == "FLASHWR":
        return code | (ins.rd << 20) | (ins.rn << 16)
    if op in ALU_OPS:
        return code | (ins.rd << 20) | (ins.rn << 16) | (ins.rm << 12)
    if op.endswith("I") and op[:-1] in ALU_OPS:
        if op[:-1] in SIGNED_IMM_ALU:
            _check_imm(ins, -(1 << 15), (1 << 15) - 1)
        else:
            _check_imm(ins, 0, 0xFFFF)
        return code | (ins.rd << 20) | (ins.rn << 16) | (ins.imm & 0xFFFF)
    # LOAD/STORE families
    _check_imm(ins, -(1 << 15), (1 << 15) - 1, "offset")
    return code | (ins.rd << 20) | (ins.rn << 16) | (ins.imm & 0xFFFF)


def decode_instruction(word: int) -> Instruction:
    word &= 0xFFFFFFFF
    opc = word >> 24
    a, b = (word >> 20) & 0xF, (word >> 16) & 0xF
    imm16 = word & 0xFFFF
    hi = opc & 0xF0
    if hi in (PUSHM_BASE, POPM_BASE):
        payload = ((opc & 0xF) << 24) | (word & 0xFFFFFF)
        mask, code = payload & 0x1FF, payload >> 9
        regs = [SAVABLE[i] for i in range(9) if mask >> i & 1]
        if code >= math.factorial(len(regs)):
            raise InvalidInstruction(f"bad register order code in {word:#010x}")
        return Instruction("PUSHM" if hi == PUSHM_BASE else "POPM", regs=lehmer_decode(regs, code))
    if hi == BR_BASE:
        ci = opc & 0xF
        if ci >= len(CONDS) or (ci == 0 and (a or b)):
            raise InvalidInstruction(f"bad branch {word:#010x}")
        return Instruction("BR", rn=a, rm=b, imm=sext(imm16, 16), cond=CONDS[ci])
    op = _BY_CODE.get(opc)
    if op is None:
        raise InvalidInstruction(f"unknown opcode {opc:#04x}")
    low24 = word & 0xFFFFFF

    def need_zero(mask: int) -> None:
        if word & mask:
            raise InvalidInstruction(f"reserved bits set in {word:#010x}")

    if op in ("NOP", "RET", "HALT"):
        need_zero(0xFFFFFF)
        return Instruction(op)
    if op in ("TRAP", "SVC"):
        need_zero(0xFF0000)
        return Instruction(op, imm=imm16)
    if op == "CALL":
        return Instruction(op, imm=sext(low24, 24))
    if op == "CALLR":
        need_zero(0x0FFFFF)
        return Instruction(op, rn=a)
    if op == "MOV":
        need_zero(0xFFFF)
        return Instruction(op, rd=a, rn=b)
    if op in ("MOVI", "MOVT", "MPUWR"):
        need_zero(0x0F0000)
        return Instruction(op, rd=a, imm=imm16)
    if op == "FLASHWR":
        need_zero(0xFFFF)
        return Instruction(op, rd=a, rn=b)
    if op in ALU_OPS:
        need_zero(0x0FFF)
        return Instruction(op, rd=a, rn=b, rm=(word >> 12) & 0xF)
    if op.endswith("I") and op[:-1] in ALU_OPS:
        imm = sext(imm16, 16) if op[:-1] in SIGNED_IMM_ALU else imm16
        return Instruction(op, rd=a, rn=b, imm=imm)
    return Instruction(op, rd=a, rn=b, imm=sext(imm16, 16))


def encode_bytes(instructions) -> bytes:
    return b"".join(encode_instruction(i).to_bytes(4, "little") for i in instructions)


def decode_bytes(data: bytes) -> list[Instruction]:
    if len(data) % 4:
        raise InvalidInstruction("code length is not a multiple of 4")
    return [decode_instruction(int.from_bytes(data[i:i + 4], "little")) for i in range(0, len(data), 4)]


def try_decode(word: int) -> Instruction | None:
    try:
        return decode_instruction(word)
    except InvalidInstruction:
        return None


def _reglist(regs: tuple[int, ...]) -> str:
    return "{" + ", ".join(REG_NAMES[r] for r in regs) + "}"


def disassemble(ins: Instruction, operand: str | None = None) -> str:
    """Text form; ``operand`` overrides how a symbolic operand is printed."""
    r = REG_NAMES
    op = ins.op
    if operand is None and ins.sym is not None:
        operand = f"{ins.reloc}:{ins.sym}"
    if op in ("NOP", "RET", "HALT"):
        return op
    if op in ("TRAP", "SVC"):
        return f"{op} #{ins.imm}"
    if op == "CALL":
        return f"CALL {operand or ins.imm}"
    if op == "CALLR":
        return f"CALLR {r[ins.rn]}"
    if op == "MOV":
        return f"MOV {r[ins.rd]}, {r[ins.rn]}"
    if op in ("MOVI", "MOVT", "MPUWR"):
        return f"{op} {r[ins.rd]}, #{operand or ins.imm}"
    if op == "FLASHWR":
        return f"FLASHWR {r[ins.rd]}, [{r[ins.rn]}]"
    if op in ("PUSHM", "POPM"):
        return f"{op} {_reglist(ins.regs)}"
    if op == "BR":
        tgt = operand or ins.imm
        return f"B {tgt}" if ins.cond == "AL" else f"B{ins.cond} {r[ins.rn]}, {r[ins.rm]}, {tgt}"
    if op in ALU_OPS:
        return f"{op} {r[ins.rd]}, {r[ins.rn]}, {r[ins.rm]}"
    if op.endswith("I") and op[:-1] in ALU_OPS:
        return f"{op} {r[ins.rd]}, {r[ins.rn]}, #{operand or ins.imm}"
    return f"{op} {r[ins.rd]}, [{r[ins.rn]}, #{operand or ins.imm}]"
