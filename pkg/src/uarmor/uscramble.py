"""Build-time diversification driven by a seeded sponge stream."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, replace

from .firmware import Block, FirmwareModule, FunctionDef
from .isa import Instruction
from .keccak import SpongeState, absorb, squeeze
from .ussp import HANDLER_SYMBOL, NonCanonicalPrologue

log = logging.getLogger(__name__)

DEAD_LABEL = "__dead"


class StubKind(enum.Enum):
    NOP = "nop"
    TRAP = "trap"


@dataclass(frozen=True)
class DiversificationSeed:
    seed_bytes: bytes

    def __post_init__(self):
        if len(self.seed_bytes) != 32:
            raise ValueError("diversification seed must be 32 bytes")

    @classmethod
    def from_hex(cls, text: str) -> DiversificationSeed:
        text = text.strip()
        if len(text) != 64:
            raise ValueError("seed must be 64 hex characters")
        return cls(bytes.fromhex(text))

    def hex(self) -> str:
        return self.seed_bytes.hex()


@dataclass(frozen=True)
class DiversifyConfig:
    enable_reg_reorder: bool = True
    enable_dead_code: bool = True
    dead_code_kind: StubKind = StubKind.NOP
    max_stub_instructions: int = 4
    enable_func_reorder: bool = True

    def __post_init__(self):
        if self.max_stub_instructions < 0:
            raise ValueError("max_stub_instructions must be >= 0")

    @classmethod
    def disabled(cls) -> DiversifyConfig:
        return cls(False, False, StubKind.NOP, 0, False)


class SeedStream:
    """rand32 draws squeezed from a sponge over seed ‖ domain tag."""

    def __init__(self, seed: bytes | DiversificationSeed, tag: bytes | str = b""):
        if isinstance(seed, DiversificationSeed):
            seed = seed.seed_bytes
        if isinstance(tag, str):
            tag = tag.encode()
        st = absorb(SpongeState(), bytes(seed) + b"\x00" + tag)
        self._state = st
        self._buf = b""

    def rand32(self) -> int:
        if len(self._buf) < 4:
            chunk, self._state = squeeze(self._state, 64 * 8)
            self._buf += chunk
        out, self._buf = self._buf[:4], self._buf[4:]
        return int.from_bytes(out, "little")

    def below(self, n: int) -> int:
        """Uniform integer in [0, n) by rejection sampling."""
        if n <= 0:
            raise ValueError("n must be positive")
        limit = (1 << 32) - (1 << 32) % n
        while True:
            r = self.rand32()
            if r < limit:
                return r % n


def shuffle(stream: SeedStream, items) -> list:
    out = list(items)
    for i in range(len(out) - 1, 0, -1):
        j = stream.below(i + 1)
        out[i], out[j] = out[j], out[i]
    return out


def variant_seed(seed_base: bytes | DiversificationSeed, index: int) -> DiversificationSeed:
    if isinstance(seed_base, DiversificationSeed):
        seed_base = seed_base.seed_bytes
    out, _ = squeeze(absorb(SpongeState(), bytes(seed_base) + index.to_bytes(8, "little")), 256)
    return DiversificationSeed(out)


# ------------------------------------------------------------------ passes

def reorder_register_preservation(fn: FunctionDef, stream: SeedStream) -> FunctionDef:
    flat = fn.instructions
    if not flat or flat[0].op != "PUSHM":
        raise NonCanonicalPrologue(f"{fn.name}: does not start with PUSHM")
    saved = flat[0].regs
    pops = [i for i in range(len(flat) - 1) if flat[i].op == "POPM" and flat[i + 1].op == "RET"]
    if not pops or any(sorted(flat[i].regs) != sorted(saved) for i in pops):
        raise NonCanonicalPrologue(f"{fn.name}: epilogue POPM does not mirror the prologue")
    if len(saved) < 2:
        return fn
    order = tuple(shuffle(stream, saved))
    restore = tuple(reversed(order))
    blocks, pos = [], 0
    for b in fn.blocks:
        out = []
        for ins in b.instrs:
            if pos == 0:
                ins = replace(ins, regs=order)
            elif pos in pops:
                ins = replace(ins, regs=restore)
            out.append(ins)
            pos += 1
        blocks.append(Block(b.label, tuple(out)))
    return replace(fn, blocks=tuple(blocks))


def dead_stub(kind: StubKind, k: int) -> tuple[Instruction, ...]:
    if kind is StubKind.NOP:
        return (Instruction("NOP"),) * k
    return (Instruction("BR", cond="AL", sym=HANDLER_SYMBOL, reloc="pc"),) * k


def insert_dead_code(fn: FunctionDef, config: DiversifyConfig, stream: SeedStream) -> FunctionDef:
    if config.max_stub_instructions == 0:
        return fn
    k = stream.below(config.max_stub_instructions + 1)
    if k == 0:
        return fn
    return replace(fn, blocks=fn.blocks + (Block(DEAD_LABEL, dead_stub(config.dead_code_kind, k)),))


def reorder_functions(module: FirmwareModule, stream: SeedStream) -> FirmwareModule:
    return replace(module, functions=tuple(shuffle(stream, module.functions)))


def diversify(module: FirmwareModule, seed: DiversificationSeed, config: DiversifyConfig) -> FirmwareModule:
    fns = list(module.functions)
    if config.enable_reg_reorder:
        for i, fn in enumerate(fns):
            if fn.instructions and fn.instructions[0].op == "PUSHM":
                try:
                    fns[i] = reorder_register_preservation(fn, SeedStream(seed, f"REG:{i}"))
                except NonCanonicalPrologue as exc:
                    log.warning("register reorder skipped: %s", exc)
    if config.enable_dead_code:
        if config.dead_code_kind is StubKind.TRAP and not any(f.name == HANDLER_SYMBOL for f in fns):
            raise ValueError(f"trap stubs need a {HANDLER_SYMBOL} function in the module")
        for i, fn in enumerate(fns):
            fns[i] = insert_dead_code(fn, config, SeedStream(seed, f"DEAD:{i}"))
    out = replace(module, functions=tuple(fns))
    if config.enable_func_reorder:
        out = reorder_functions(out, SeedStream(seed, "FUNC"))
    return out
