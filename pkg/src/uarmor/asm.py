"""Line-oriented assembly source for uVM firmware.

Directives::

    .entry main
    .global name size [hex]      data, zero-filled past the optional initialiser
    .string name "text"          NUL-terminated initialised data
    .func name [sensitive] [ssp] [lock]
    .local name buffer|pointer|scalar size
    .endfunc

Comments start with ``;``. Immediates are written ``#value``; ``#@name`` is
the sp-relative offset of a local, ``#@frame`` the frame size and
``#@canary`` the canary slot; ``#lo(sym)``/``#hi(sym)`` are address halves. ``LA``,
``LI`` and ``ADR`` are address/constant pseudos; ``ENTER {regs}`` and
``LEAVE`` expand to the canonical prologue and epilogue.
"""

from __future__ import annotations

import ast
import re
from dataclasses import dataclass, field
from pathlib import Path

from .firmware import CANARY_SYM, FRAME_SYM, Block, FirmwareModule, FunctionDef, GlobalDef, Local
from .isa import ALU_OPS, CONDS, LR, PC, REG_INDEX, REG_NAMES, SP, Instruction, disassemble
from .memmap import LM3S6965, MemoryMap


class AsmError(ValueError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


_SWAPPED = {"GT": "LT", "LE": "GE", "HI": "LO", "LS": "HS"}
_LABEL = re.compile(r"^([A-Za-z_.$][\w.$]*):\s*(.*)$")
_SYMEXPR = re.compile(r"^([A-Za-z_.$@][\w.$]*)\s*(?:([+-])\s*(\w+))?$")


def _int(text: str) -> int:
    return int(text.strip().replace("_", ""), 0)


def _reg(tok: str, lineno: int) -> int:
    r = REG_INDEX.get(tok.strip().lower())
    if r is None:
        raise AsmError(lineno, f"bad register {tok!r}")
    return r


def _split_operands(text: str) -> list[str]:
    out, depth, cur = [], 0, ""
    for ch in text:
        if ch in "[{":
            depth += 1
        elif ch in "]}":
            depth -= 1
        if ch == "," and depth == 0:
            out.append(cur.strip())
            cur = ""
        else:
            cur += ch
    if cur.strip():
        out.append(cur.strip())
    return out


def _symexpr(text: str, lineno: int) -> tuple[str, int]:
    m = _SYMEXPR.match(text.strip())
    if not m:
        raise AsmError(lineno, f"bad symbol expression {text!r}")
    add = 0
    if m.group(2):
        add = _int(m.group(3)) * (1 if m.group(2) == "+" else -1)
    return m.group(1), add


def _imm(tok: str, lineno: int) -> tuple[int, str | None, str | None]:
    """Parse ``#...``; returns (imm or addend, sym, reloc)."""
    tok = tok.strip()
    if not tok.startswith("#"):
        raise AsmError(lineno, f"expected immediate, got {tok!r}")
    body = tok[1:].strip()
    if body.startswith("@"):
        sym, add = _symexpr(body[1:], lineno)
        return add, {"frame": FRAME_SYM, "canary": CANARY_SYM}.get(sym, sym), "frame"
    m = re.match(r"^(lo|hi)\((.*)\)$", body)
    if m:
        sym, add = _symexpr(m.group(2), lineno)
        return add, sym, m.group(1)
    try:
        return _int(body), None, None
    except ValueError:
        raise AsmError(lineno, f"bad immediate {tok!r}") from None


def _reglist(tok: str, lineno: int) -> tuple[int, ...]:
    tok = tok.strip()
    if not (tok.startswith("{") and tok.endswith("}")):
        raise AsmError(lineno, f"expected register list, got {tok!r}")
    inner = tok[1:-1].strip()
    return tuple(_reg(t, lineno) for t in inner.split(",")) if inner else ()


def _mem(tok: str, lineno: int) -> tuple[int, int, str | None, str | None]:
    tok = tok.strip()
    if not (tok.startswith("[") and tok.endswith("]")):
        raise AsmError(lineno, f"expected memory operand, got {tok!r}")
    parts = [p.strip() for p in tok[1:-1].split(",")]
    base = _reg(parts[0], lineno)
    if len(parts) == 1:
        return base, 0, None, None
    if len(parts) != 2:
        raise AsmError(lineno, f"bad memory operand {tok!r}")
    imm, sym, reloc = _imm(parts[1], lineno)
    return base, imm, sym, reloc


def _need(ops: list[str], n: int, mnem: str, lineno: int) -> None:
    if len(ops) != n:
        raise AsmError(lineno, f"{mnem} takes {n} operand(s), got {len(ops)}")


@dataclass
class _FuncBuilder:
    name: str
    sensitive: bool
    ssp: bool
    lock: bool
    lineno: int
    locals: list[Local] = field(default_factory=list)
    blocks: list[Block] = field(default_factory=list)
    cur_label: str | None = None
    cur: list[Instruction] = field(default_factory=list)
    enter_regs: tuple[int, ...] | None = None

    def close_block(self) -> None:
        if self.cur or self.cur_label is not None:
            self.blocks.append(Block(self.cur_label, tuple(self.cur)))
        self.cur_label, self.cur = None, []

    def label(self, name: str) -> None:
        self.close_block()
        self.cur_label = name

    def emit(self, ins: Instruction) -> None:
        self.cur.append(ins)
        if ins.is_terminator or ins.op in ("CALL", "CALLR", "BR"):
            self.close_block()

    def build(self) -> FunctionDef:
        self.close_block()
        return FunctionDef(self.name, tuple(self.blocks), self.sensitive, self.ssp, self.lock,
                           tuple(self.locals))


def _parse_instruction(fb: _FuncBuilder, mnem: str, ops: list[str], lineno: int) -> None:
    m = mnem.upper()
    emit = fb.emit
    if m in ("NOP", "RET", "HALT"):
        _need(ops, 0, m, lineno)
        emit(Instruction(m))
    elif m in ("TRAP", "SVC"):
        if m == "TRAP" and not ops:
            emit(Instruction("TRAP"))
            return
        _need(ops, 1, m, lineno)
        emit(Instruction(m, imm=_imm(ops[0], lineno)[0]))
    elif m == "ENTER":
        _need(ops, 1, m, lineno)
        regs = _reglist(ops[0], lineno)
        if LR in regs:
            raise AsmError(lineno, "ENTER saves lr implicitly")
        fb.enter_regs = regs + (LR,)
        emit(Instruction("PUSHM", regs=fb.enter_regs))
        emit(Instruction("SUBI", rd=SP, rn=SP, sym=FRAME_SYM, reloc="frame"))
    elif m == "LEAVE":
        _need(ops, 0, m, lineno)
        if fb.enter_regs is None:
            raise AsmError(lineno, "LEAVE without ENTER")
        emit(Instruction("ADDI", rd=SP, rn=SP, sym=FRAME_SYM, reloc="frame"))
        emit(Instruction("POPM", regs=tuple(reversed(fb.enter_regs))))
        emit(Instruction("RET"))
    elif m in ("PUSHM", "POPM"):
        _need(ops, 1, m, lineno)
        emit(Instruction(m, regs=_reglist(ops[0], lineno)))
    elif m == "MOV":
        _need(ops, 2, m, lineno)
        rd = _reg(ops[0], lineno)
        if ops[1].startswith("#"):
            imm, sym, reloc = _imm(ops[1], lineno)
            if sym is None and not 0 <= imm <= 0xFFFF:
                raise AsmError(lineno, "MOV immediate must fit 16 bits; use LI")
            emit(Instruction("MOVI", rd=rd, imm=imm, sym=sym, reloc=reloc))
        else:
            emit(Instruction("MOV", rd=rd, rn=_reg(ops[1], lineno)))
    elif m in ("MOVI", "MOVT"):
        _need(ops, 2, m, lineno)
        imm, sym, reloc = _imm(ops[1], lineno)
        emit(Instruction(m, rd=_reg(ops[0], lineno), imm=imm, sym=sym, reloc=reloc))
    elif m == "LI":
        _need(ops, 2, m, lineno)
        rd = _reg(ops[0], lineno)
        val = _imm(ops[1], lineno)[0] & 0xFFFFFFFF
        emit(Instruction("MOVI", rd=rd, imm=val & 0xFFFF))
        if val >> 16:
            emit(Instruction("MOVT", rd=rd, imm=val >> 16))
    elif m == "LA":
        _need(ops, 2, m, lineno)
        rd = _reg(ops[0], lineno)
        sym, add = _symexpr(ops[1], lineno)
        emit(Instruction("MOVI", rd=rd, imm=add, sym=sym, reloc="lo"))
        emit(Instruction("MOVT", rd=rd, imm=add, sym=sym, reloc="hi"))
    elif m == "ADR":
        _need(ops, 2, m, lineno)
        sym, add = _symexpr(ops[1], lineno)
        emit(Instruction("ADDI", rd=_reg(ops[0], lineno), rn=PC, imm=add, sym=sym, reloc="adr"))
    elif m in ALU_OPS or (m.endswith("I") and m[:-1] in ALU_OPS):
        _need(ops, 3, m, lineno)
        rd, rn = _reg(ops[0], lineno), _reg(ops[1], lineno)
        base = m[:-1] if m.endswith("I") and m[:-1] in ALU_OPS else m
        if ops[2].startswith("#"):
            imm, sym, reloc = _imm(ops[2], lineno)
            emit(Instruction(base + "I", rd=rd, rn=rn, imm=imm, sym=sym, reloc=reloc))
        else:
            if m != base:
                raise AsmError(lineno, f"{m} needs an immediate")
            emit(Instruction(base, rd=rd, rn=rn, rm=_reg(ops[2], lineno)))
    elif m in ("LOAD", "LOADB", "STORE", "STOREB"):
        _need(ops, 2, m, lineno)
        base, imm, sym, reloc = _mem(ops[1], lineno)
        emit(Instruction(m, rd=_reg(ops[0], lineno), rn=base, imm=imm, sym=sym, reloc=reloc))
    elif m == "CALL":
        _need(ops, 1, m, lineno)
        sym, add = _symexpr(ops[0], lineno)
        emit(Instruction("CALL", imm=add, sym=sym, reloc="pc"))
    elif m == "CALLR":
        _need(ops, 1, m, lineno)
        emit(Instruction("CALLR", rn=_reg(ops[0], lineno)))
    elif m == "MPUWR":
        _need(ops, 2, m, lineno)
        emit(Instruction("MPUWR", rd=_reg(ops[0], lineno), imm=_imm(ops[1], lineno)[0]))
    elif m == "FLASHWR":
        _need(ops, 2, m, lineno)
        base, imm, _, _ = _mem(ops[1], lineno)
        if imm:
            raise AsmError(lineno, "FLASHWR takes [rn] without offset")
        emit(Instruction("FLASHWR", rd=_reg(ops[0], lineno), rn=base))
    elif m == "B" or (m.startswith("B") and (m[1:] in CONDS or m[1:] in _SWAPPED)):
        cond = m[1:] or "AL"
        if cond == "AL":
            _need(ops, 1, m, lineno)
            sym, add = _symexpr(ops[0], lineno)
            emit(Instruction("BR", cond="AL", imm=add, sym=sym, reloc="pc"))
            return
        _need(ops, 3, m, lineno)
        rn, rm = _reg(ops[0], lineno), _reg(ops[1], lineno)
        if cond in _SWAPPED:
            cond, rn, rm = _SWAPPED[cond], rm, rn
        sym, add = _symexpr(ops[2], lineno)
        emit(Instruction("BR", cond=cond, rn=rn, rm=rm, imm=add, sym=sym, reloc="pc"))
    else:
        raise AsmError(lineno, f"unknown mnemonic {mnem!r}")


def parse_asm(text: str, memory_map: MemoryMap = LM3S6965) -> FirmwareModule:
    funcs: list[FunctionDef] = []
    globs: list[GlobalDef] = []
    entry = "main"
    fb: _FuncBuilder | None = None

    def finish():
        nonlocal fb
        if fb is not None:
            fn = fb.build()
            if not fn.instructions:
                raise AsmError(fb.lineno, f"function {fn.name} is empty")
            funcs.append(fn)
        fb = None

    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split(";", 1)[0].strip()
        if not line:
            continue
        if line.startswith("."):
            parts = line.split(None, 2)
            d = parts[0].lower()
            if d == ".func":
                finish()
                words = line.split()
                if len(words) < 2:
                    raise AsmError(lineno, ".func needs a name")
                attrs = {w.lower() for w in words[2:]}
                bad = attrs - {"sensitive", "ssp", "lock"}
                if bad:
                    raise AsmError(lineno, f"unknown function attribute(s) {sorted(bad)}")
                fb = _FuncBuilder(words[1], "sensitive" in attrs or "lock" in attrs,
                                  "ssp" in attrs, "lock" in attrs, lineno)
            elif d == ".endfunc":
                finish()
            elif d == ".entry":
                entry = line.split()[1]
            elif d == ".global":
                words = line.split()
                if len(words) not in (3, 4):
                    raise AsmError(lineno, ".global takes name, size and optional hex initializer")
                try:
                    init = bytes.fromhex(words[3]) if len(words) == 4 else b""
                    globs.append(GlobalDef(words[1], _int(words[2]), init))
                except ValueError as exc:
                    raise AsmError(lineno, str(exc)) from None
            elif d == ".string":
                if len(parts) != 3:
                    raise AsmError(lineno, ".string takes name and a quoted string")
                try:
                    s = ast.literal_eval(parts[2].strip())
                except (ValueError, SyntaxError):
                    raise AsmError(lineno, "bad string literal") from None
                data = s.encode() + b"\0"
                globs.append(GlobalDef(parts[1], len(data), data))
            elif d == ".local":
                if fb is None:
                    raise AsmError(lineno, ".local outside a function")
                words = line.split()
                if len(words) != 4:
                    raise AsmError(lineno, ".local takes name, kind and size")
                try:
                    fb.locals.append(Local(words[1], words[2].lower(), _int(words[3])))
                except ValueError as exc:
                    raise AsmError(lineno, str(exc)) from None
            else:
                raise AsmError(lineno, f"unknown directive {d}")
            continue
        if fb is None:
            raise AsmError(lineno, "instruction outside a function")
        m = _LABEL.match(line)
        if m:
            fb.label(m.group(1))
            line = m.group(2).strip()
            if not line:
                continue
        mnem, _, rest = line.partition(" ")
        _parse_instruction(fb, mnem, _split_operands(rest), lineno)
    finish()
    return FirmwareModule(tuple(funcs), tuple(globs), entry, memory_map)


def expand_includes(text: str, base_dir, _depth: int = 0) -> str:
    """Splice ``.include "file"`` lines (paths relative to ``base_dir``)."""
    if _depth > 8:
        raise AsmError(0, "includes nested too deeply")
    out = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        words = raw.split(";", 1)[0].split(None, 1)
        if words and words[0].lower() == ".include":
            if len(words) != 2:
                raise AsmError(lineno, ".include takes a quoted path")
            target = Path(base_dir) / ast.literal_eval(words[1].strip())
            try:
                body = target.read_text()
            except OSError as exc:
                raise AsmError(lineno, f"cannot include {target}: {exc}") from None
            out.append(expand_includes(body, target.parent, _depth + 1))
        else:
            out.append(raw)
    return "\n".join(out)


def load_asm(path, memory_map: MemoryMap = LM3S6965) -> FirmwareModule:
    path = Path(path)
    return parse_asm(expand_includes(path.read_text(), path.parent), memory_map)


def _with_addend(sym: str, add: int) -> str:
    return sym if not add else f"{sym}{add:+d}"


def format_instruction(ins: Instruction) -> str:
    """Source text for one instruction, symbolic operands included."""
    if ins.sym is None:
        return disassemble(ins)
    if ins.reloc == "adr":
        return f"ADR {REG_NAMES[ins.rd]}, {_with_addend(ins.sym, ins.imm)}"
    if ins.reloc == "frame":
        name = {FRAME_SYM: "frame", CANARY_SYM: "canary"}.get(ins.sym, ins.sym)
        return disassemble(ins, "@" + _with_addend(name, ins.imm))
    if ins.reloc in ("lo", "hi"):
        return disassemble(ins, f"{ins.reloc}({_with_addend(ins.sym, ins.imm)})")
    return disassemble(ins, _with_addend(ins.sym, ins.imm))


def format_asm(module: FirmwareModule) -> str:
    """Render a module back to source (resolved operands print numerically)."""
    lines = [f".entry {module.entry}"]
    for g in module.globals:
        lines.append(f".global {g.name} {g.size} {g.init.hex()}".rstrip())
    for f in module.functions:
        attrs = [a for a, on in (("sensitive", f.is_sensitive and not f.is_lock), ("ssp", f.protected_by_ssp),
                                 ("lock", f.is_lock)) if on]
        lines.append(f".func {f.name} {' '.join(attrs)}".rstrip())
        for loc in f.locals:
            lines.append(f".local {loc.name} {loc.kind} {loc.size}")
        for b in f.blocks:
            if b.label:
                lines.append(f"{b.label}:")
            lines += [f"    {format_instruction(i)}" for i in b.instrs]
        lines.append(".endfunc")
    return "\n".join(lines) + "\n"
