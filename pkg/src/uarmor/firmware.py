"""Firmware object model, linker, flat image format and call-graph analysis.

Flat image layout (all integers little-endian)::

    "UVM1" | u32 version | u32 code_base | u32 entry | u32 data_base
    u32 n_symbols | u32 code_len | u32 data_len
    n_symbols x { u8 kind, u8 flags, u16 name_len, u32 addr, u32 size,
                  u16 pad_bytes, u16 prologue_bytes, name utf-8 }
    code bytes | initial data bytes

Functions flagged sensitive (but not ``lock``) are grouped at the code base
and padded with TRAP words so the group can be covered by one MPU region
with sub-regions. The padding belongs to the last sensitive function's range.
"""

from __future__ import annotations

import struct
from collections import Counter
from dataclasses import dataclass, replace

from .isa import Instruction, InvalidInstruction, SP, decode_instruction, encode_instruction
from .memmap import LM3S6965, MemoryMap

MAGIC = b"UVM1"
VERSION = 1
LOCAL_KINDS = ("buffer", "pointer", "scalar")
SYM_FUNC, SYM_GLOBAL, SYM_LOCAL = 0, 1, 2
F_SENSITIVE, F_SSP, F_LOCK = 1, 2, 4
TRAP_WORD = encode_instruction(Instruction("TRAP"))
FRAME_SYM = "@frame"
CANARY_SYM = "@canary"


class LinkError(ValueError):
    pass


class ImageOverflow(LinkError):
    pass


class ImageFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Local:
    name: str
    kind: str
    size: int

    def __post_init__(self):
        if self.kind not in LOCAL_KINDS:
            raise ValueError(f"unknown local kind {self.kind!r}")
        if self.size <= 0:
            raise ValueError("local size must be positive")


@dataclass(frozen=True)
class Block:
    label: str | None
    instrs: tuple[Instruction, ...]


def _align4(n: int) -> int:
    return (n + 3) & ~3


@dataclass(frozen=True)
class FunctionDef:
    name: str
    blocks: tuple[Block, ...]
    is_sensitive: bool = False
    protected_by_ssp: bool = False
    is_lock: bool = False
    locals: tuple[Local, ...] = ()

    @property
    def instructions(self) -> list[Instruction]:
        return [i for b in self.blocks for i in b.instrs]

    @property
    def size_bytes(self) -> int:
        return 4 * sum(len(b.instrs) for b in self.blocks)

    def frame_layout(self) -> dict[str, int]:
        """Offsets from sp (after the frame allocation) in declaration order."""
        out, off = {}, 0
        for loc in self.locals:
            out[loc.name] = off
            off += _align4(loc.size)
        return out

    @property
    def locals_size(self) -> int:
        return sum(_align4(l.size) for l in self.locals)

    @property
    def canary_offset(self) -> int | None:
        # canary sits right above every local, right below the saved registers
        return self.locals_size if self.protected_by_ssp else None

    @property
    def frame_size(self) -> int:
        return self.locals_size + (4 if self.protected_by_ssp else 0)

    def with_instructions(self, instrs) -> FunctionDef:
        return replace(self, blocks=(Block(None, tuple(instrs)),))

    @property
    def largest_buffer(self) -> int:
        return max((l.size for l in self.locals if l.kind == "buffer"), default=0)


@dataclass(frozen=True)
class GlobalDef:
    name: str
    size: int
    init: bytes = b""

    def __post_init__(self):
        if len(self.init) > self.size:
            raise ValueError(f"initializer of {self.name} larger than its size")


@dataclass(frozen=True)
class FirmwareModule:
    functions: tuple[FunctionDef, ...]
    globals: tuple[GlobalDef, ...] = ()
    entry: str = "main"
    memory_map: MemoryMap = LM3S6965

    def function(self, name: str) -> FunctionDef:
        for f in self.functions:
            if f.name == name:
                return f
        raise KeyError(name)

    def has_function(self, name: str) -> bool:
        return any(f.name == name for f in self.functions)

    def replace_function(self, fn: FunctionDef) -> FirmwareModule:
        return replace(self, functions=tuple(fn if f.name == fn.name else f for f in self.functions))

    def validate(self) -> None:
        names = [f.name for f in self.functions] + [g.name for g in self.globals]
        dup = [n for n, c in Counter(names).items() if c > 1]
        if dup:
            raise LinkError(f"duplicate symbols: {', '.join(sorted(dup))}")
        if self.functions and not self.has_function(self.entry):
            raise LinkError(f"entry {self.entry!r} does not resolve")
        for f in self.functions:
            if not f.is_sensitive and any(i.op in ("MPUWR", "FLASHWR") for i in f.instructions):
                raise LinkError(f"{f.name}: MPUWR/FLASHWR outside a sensitive function")
            labels = [b.label for b in f.blocks if b.label]
            if len(labels) != len(set(labels)):
                raise LinkError(f"{f.name}: duplicate labels")
            lnames = [l.name for l in f.locals]
            if len(lnames) != len(set(lnames)):
                raise LinkError(f"{f.name}: duplicate locals")


def mpu_cover_size(n: int) -> int:
    """Bytes a section of ``n`` bytes at an aligned base must span so that one
    MPU region plus sub-region disables covers it exactly."""
    if n == 0:
        return 0
    region = 32
    while region < n:
        region <<= 1
    if region <= 128:
        return region
    sub = region // 8
    return -(-n // sub) * sub


@dataclass(frozen=True)
class Symbol:
    name: str
    kind: int
    addr: int
    size: int
    flags: int = 0
    pad: int = 0
    prologue: int = 0


@dataclass(frozen=True)
class FlatImage:
    code_base: int
    entry: int
    data_base: int
    code_bytes: bytes
    data_bytes: bytes
    symbols: tuple[Symbol, ...]

    @property
    def symbol_table(self) -> dict[str, int]:
        return {s.name: s.addr for s in self.symbols if s.kind != SYM_LOCAL}

    @property
    def function_ranges(self) -> dict[str, tuple[int, int]]:
        return {s.name: (s.addr, s.addr + s.size) for s in self.symbols if s.kind == SYM_FUNC}

    def functions(self) -> list[Symbol]:
        return sorted((s for s in self.symbols if s.kind == SYM_FUNC), key=lambda s: s.addr)

    def globals(self) -> list[Symbol]:
        return [s for s in self.symbols if s.kind == SYM_GLOBAL]

    def symbol(self, name: str) -> Symbol:
        for s in self.symbols:
            if s.name == name:
                return s
        raise KeyError(name)

    def locals_of(self, fn: str) -> dict[str, Symbol]:
        pre = fn + "."
        return {s.name[len(pre):]: s for s in self.symbols if s.kind == SYM_LOCAL and s.name.startswith(pre)}

    def function_at(self, addr: int) -> Symbol | None:
        for s in self.symbols:
            if s.kind == SYM_FUNC and s.addr <= addr < s.addr + s.size:
                return s
        return None

    def sensitive_ranges(self) -> list[tuple[int, int]]:
        """Merged [start, end) spans of XN-overlay code (sensitive, not lock)."""
        spans = sorted((s.addr, s.addr + s.size) for s in self.symbols
                       if s.kind == SYM_FUNC and s.flags & F_SENSITIVE and not s.flags & F_LOCK)
        merged: list[list[int]] = []
        for a, b in spans:
            if merged and merged[-1][1] == a:
                merged[-1][1] = b
            else:
                merged.append([a, b])
        return [(a, b) for a, b in merged]

    @property
    def code_end(self) -> int:
        return self.code_base + len(self.code_bytes)

    def word_at(self, addr: int) -> int:
        off = addr - self.code_base
        return int.from_bytes(self.code_bytes[off:off + 4], "little")

    def to_bytes(self) -> bytes:
        out = [MAGIC, struct.pack("<7I", VERSION, self.code_base, self.entry, self.data_base,
                                  len(self.symbols), len(self.code_bytes), len(self.data_bytes))]
        for s in self.symbols:
            name = s.name.encode()
            out.append(struct.pack("<BBHIIHH", s.kind, s.flags, len(name), s.addr, s.size, s.pad, s.prologue))
            out.append(name)
        out += [self.code_bytes, self.data_bytes]
        return b"".join(out)

    @classmethod
    def from_bytes(cls, blob: bytes) -> FlatImage:
        if blob[:4] != MAGIC:
            raise ImageFormatError("bad magic")
        try:
            version, code_base, entry, data_base, nsym, ncode, ndata = struct.unpack_from("<7I", blob, 4)
            if version != VERSION:
                raise ImageFormatError(f"unsupported image version {version}")
            pos = 32
            syms = []
            for _ in range(nsym):
                kind, flags, nlen, addr, size, pad, pro = struct.unpack_from("<BBHIIHH", blob, pos)
                pos += 16
                syms.append(Symbol(blob[pos:pos + nlen].decode(), kind, addr, size, flags, pad, pro))
                pos += nlen
        except struct.error as exc:
            raise ImageFormatError(f"truncated image: {exc}") from None
        code = blob[pos:pos + ncode]
        data = blob[pos + ncode:pos + ncode + ndata]
        if len(code) != ncode or len(data) != ndata or pos + ncode + ndata != len(blob):
            raise ImageFormatError("image length mismatch")
        return cls(code_base, entry, data_base, code, data, tuple(syms))


@dataclass
class Linked:
    order: list[FunctionDef]
    addr: dict[str, int]
    pad: dict[str, int]
    code: dict[str, list[Instruction]]
    global_addr: dict[str, int]
    data_size: int
    code_size: int


def layout_order(functions) -> list[FunctionDef]:
    sens = [f for f in functions if f.is_sensitive and not f.is_lock]
    return sens + [f for f in functions if not (f.is_sensitive and not f.is_lock)]


def _resolve(fn: FunctionDef, ins: Instruction, pc: int, labels: dict[str, int],
             addr: dict[str, int], gaddr: dict[str, int]) -> Instruction:
    if ins.sym is None:
        return ins
    kind, sym = ins.reloc, ins.sym
    if kind == "frame":
        if sym == FRAME_SYM:
            return ins.with_imm(fn.frame_size + ins.imm)
        if sym == CANARY_SYM:
            if fn.canary_offset is None:
                raise LinkError(f"{fn.name}: canary slot referenced but function is unprotected")
            return ins.with_imm(fn.canary_offset + ins.imm)
        layout = fn.frame_layout()
        if sym not in layout:
            raise LinkError(f"{fn.name}: unknown local {sym!r}")
        return ins.with_imm(layout[sym] + ins.imm)
    target = labels.get(sym, addr.get(sym, gaddr.get(sym)))
    if target is None:
        raise LinkError(f"{fn.name}: undefined symbol {sym!r}")
    target += ins.imm
    if kind == "pc":
        return ins.with_imm((target - pc) // 4)
    if kind == "adr":
        return ins.with_imm(target - pc)
    if kind == "lo":
        return ins.with_imm(target & 0xFFFF)
    if kind == "hi":
        return ins.with_imm((target >> 16) & 0xFFFF)
    raise LinkError(f"{fn.name}: unknown relocation {kind!r}")


def link(module: FirmwareModule) -> Linked:
    module.validate()
    mm = module.memory_map
    order = layout_order(module.functions)
    addr, pad = {}, {}
    pc = mm.flash.base
    sens = [f for f in order if f.is_sensitive and not f.is_lock]
    sens_bytes = sum(f.size_bytes for f in sens)
    sens_pad = mpu_cover_size(sens_bytes) - sens_bytes
    for f in order:
        addr[f.name] = pc
        pc += f.size_bytes
        if sens and f is sens[-1] and sens_pad:
            pad[f.name] = sens_pad
            pc += sens_pad
    code_size = pc - mm.flash.base
    if code_size > mm.flash.size:
        raise ImageOverflow(f"code needs {code_size} bytes, flash holds {mm.flash.size}")
    gaddr, dpos = {}, mm.data_base
    for g in module.globals:
        gaddr[g.name] = dpos
        dpos += _align4(g.size)
    data_size = dpos - mm.data_base
    limit = mm.ram_code_range.base if mm.ram_code_range else mm.sram.end
    if dpos > limit:
        raise ImageOverflow(f"globals need {data_size} bytes, SRAM data area too small")
    code = {}
    for f in order:
        labels, p = {}, addr[f.name]
        for b in f.blocks:
            if b.label:
                labels[b.label] = p
            p += 4 * len(b.instrs)
        out, p = [], addr[f.name]
        for ins in f.instructions:
            try:
                r = _resolve(f, ins, p, labels, addr, gaddr)
                encode_instruction(r)
            except InvalidInstruction as exc:
                raise LinkError(f"{f.name}+{p - addr[f.name]:#x}: {exc}") from None
            out.append(r)
            p += 4
        code[f.name] = out
    return Linked(order, addr, pad, code, gaddr, data_size, code_size)


def prologue_bytes(fn: FunctionDef, instrs: list[Instruction] | None = None) -> int:
    """Length of the canonical prologue (PUSHM; SUBI sp [; canary store]), 0 if absent."""
    ins = instrs if instrs is not None else fn.instructions
    if len(ins) < 2 or ins[0].op != "PUSHM" or not (ins[1].op == "SUBI" and ins[1].rd == SP and ins[1].rn == SP):
        return 0
    n = 2
    if fn.protected_by_ssp and len(ins) >= 6 and ins[5].op == "STORE" and ins[5].rn == SP:
        n = 6
    return 4 * n


def encode(module: FirmwareModule) -> FlatImage:
    ld = link(module)
    mm = module.memory_map
    code = bytearray()
    syms = []
    for f in ld.order:
        words = ld.code[f.name]
        for ins in words:
            code += encode_instruction(ins).to_bytes(4, "little")
        p = ld.pad.get(f.name, 0)
        code += TRAP_WORD.to_bytes(4, "little") * (p // 4)
        flags = (F_SENSITIVE * f.is_sensitive) | (F_SSP * f.protected_by_ssp) | (F_LOCK * f.is_lock)
        syms.append(Symbol(f.name, SYM_FUNC, ld.addr[f.name], f.size_bytes + p, flags, p,
                           prologue_bytes(f, words)))
        layout = f.frame_layout()
        for loc in f.locals:
            syms.append(Symbol(f"{f.name}.{loc.name}", SYM_LOCAL, layout[loc.name], loc.size,
                               LOCAL_KINDS.index(loc.kind)))
    data = bytearray(ld.data_size)
    for g in module.globals:
        off = ld.global_addr[g.name] - mm.data_base
        data[off:off + len(g.init)] = g.init
        syms.append(Symbol(g.name, SYM_GLOBAL, ld.global_addr[g.name], g.size))
    entry = ld.addr.get(module.entry, mm.flash.base)
    return FlatImage(mm.flash.base, entry, mm.data_base, bytes(code), bytes(data), tuple(syms))


def lower(module: FirmwareModule) -> FirmwareModule:
    """The module as the image sees it: layout order, resolved, single block each."""
    ld = link(module)
    fns = tuple(replace(f, blocks=(Block(None, tuple(ld.code[f.name])),)) for f in ld.order)
    return replace(module, functions=fns)


def decode(image: FlatImage, memory_map: MemoryMap = LM3S6965) -> FirmwareModule:
    fns = []
    for s in image.functions():
        off = s.addr - image.code_base
        body = image.code_bytes[off:off + s.size - s.pad]
        instrs = tuple(decode_instruction(int.from_bytes(body[i:i + 4], "little"))
                       for i in range(0, len(body), 4))
        locs = sorted(image.locals_of(s.name).items(), key=lambda kv: kv[1].addr)
        fns.append(FunctionDef(
            s.name, (Block(None, instrs),), bool(s.flags & F_SENSITIVE), bool(s.flags & F_SSP),
            bool(s.flags & F_LOCK), tuple(Local(n, LOCAL_KINDS[l.flags], l.size) for n, l in locs)))
    gl = []
    for s in image.globals():
        off = s.addr - image.data_base
        init = image.data_bytes[off:off + s.size].rstrip(b"\0")
        gl.append(GlobalDef(s.name, s.size, init))
    entry = next((s.name for s in image.functions() if s.addr == image.entry), "main")
    return FirmwareModule(tuple(fns), tuple(gl), entry, memory_map)


def normalized(module: FirmwareModule) -> FirmwareModule:
    """Lowered module with global initializers stripped of trailing zeros (as decode sees them)."""
    low = lower(module)
    gl = tuple(replace(g, init=g.init.rstrip(b"\0")) for g in low.globals)
    return replace(low, globals=gl)


# ---------------------------------------------------------------- call graph

def call_graph(module: FirmwareModule) -> dict[str, list[str]]:
    """Static CALL edges (CALLR is not followed), in instruction order, deduplicated."""
    ld = link(module)
    starts = sorted((a, n) for n, a in ld.addr.items())
    size = {f.name: f.size_bytes for f in ld.order}
    graph: dict[str, list[str]] = {f.name: [] for f in module.functions}
    for f in ld.order:
        pc = ld.addr[f.name]
        for ins in ld.code[f.name]:
            if ins.op == "CALL":
                tgt = pc + 4 * ins.imm
                for a, n in starts:
                    if a <= tgt < a + size[n] and n not in graph[f.name]:
                        graph[f.name].append(n)
            pc += 4
    return graph


@dataclass(frozen=True)
class CallChainReport:
    longest_chain: tuple[str, ...]
    length: int
    has_recursion: bool


def _reachable_cycle(graph, entry) -> bool:
    color: dict[str, int] = {}

    def visit(u) -> bool:
        color[u] = 1
        for v in graph.get(u, ()):
            c = color.get(v, 0)
            if c == 1 or (c == 0 and visit(v)):
                return True
        color[u] = 2
        return False

    return visit(entry)


def longest_chain_in_graph(graph: dict[str, list[str]], entry: str | None,
                           recursion_bound: int = 1) -> CallChainReport:
    if entry is None or entry not in graph:
        return CallChainReport((), 0, False)
    recursive = _reachable_cycle(graph, entry)
    if not recursive:
        memo: dict[str, tuple[str, ...]] = {}

        def best(u):
            if u not in memo:
                tail = max((best(v) for v in graph[u]), key=len, default=())
                memo[u] = (u,) + tail
            return memo[u]

        chain = best(entry)
        return CallChainReport(chain, len(chain), False)
    # cyclic: longest walk using each call edge at most `recursion_bound` times
    # (bound 0: no node repeats)
    used: Counter = Counter()
    path = [entry]
    found = [tuple(path)]

    def dfs(u):
        if len(path) > len(found[0]):
            found[0] = tuple(path)
        for v in graph[u]:
            if recursion_bound == 0:
                if v in path:
                    continue
            elif used[(u, v)] >= recursion_bound:
                continue
            used[(u, v)] += 1
            path.append(v)
            dfs(v)
            path.pop()
            used[(u, v)] -= 1

    dfs(entry)
    return CallChainReport(found[0], len(found[0]), True)


def longest_call_chain(module: FirmwareModule, recursion_bound: int = 1) -> CallChainReport:
    if not module.functions:
        return CallChainReport((), 0, False)
    return longest_chain_in_graph(call_graph(module), module.entry, recursion_bound)


def stack_depth_estimate(module: FirmwareModule, per_frame_overhead_bytes: int,
                         recursion_bound: int = 1) -> int:
    if per_frame_overhead_bytes <= 0:
        raise ValueError("per_frame_overhead_bytes must be positive")
    return longest_call_chain(module, recursion_bound).length * per_frame_overhead_bytes
