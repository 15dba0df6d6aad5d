"""Stack-smashing protection: frame reordering, canary instrumentation,
master canary generation and the violation policies."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field, replace

from .firmware import CANARY_SYM, FRAME_SYM, Block, FirmwareModule, FunctionDef, GlobalDef
from .isa import SP, Instruction
from .urng import RngState, rand32

log = logging.getLogger(__name__)

GUARD_SYMBOL = "__stack_chk_guard"
HANDLER_SYMBOL = "__violation"
SVC_VIOLATION = 6
SCRATCH_GUARD, SCRATCH_SLOT = 12, 3  # caller-saved registers used by the check


class NonCanonicalPrologue(ValueError):
    pass


class UnregisteredThread(LookupError):
    pass


@dataclass(frozen=True)
class CanaryConfig:
    terminator_style: bool = False
    protect_threshold_buffer_bytes: int = 8
    protect_all: bool = False

    @property
    def entropy_bits(self) -> int:
        return 24 if self.terminator_style else 32

    @property
    def coverage(self) -> str:
        if self.protect_all:
            return "all"
        return f"buffer>={self.protect_threshold_buffer_bytes}"


@dataclass(frozen=True)
class MasterCanary:
    value: int
    boot_id: int

    def to_bytes(self) -> bytes:
        return self.value.to_bytes(4, "little")


class PolicyKind(enum.Enum):
    PASSIVE = "passive"
    FATAL = "fatal"
    THREAD_RESTART = "thread-restart"
    SYSTEM_RESTART = "restart"
    SHUTDOWN = "shutdown"


@dataclass
class ViolationPolicy:
    kind: PolicyKind = PolicyKind.FATAL
    restart_handlers: dict[int, int] = field(default_factory=dict)

    @classmethod
    def parse(cls, name: str) -> ViolationPolicy:
        return cls(PolicyKind(name))

    def register(self, thread_id: int, handler: int) -> None:
        self.restart_handlers[thread_id] = handler

    def deregister(self, thread_id: int) -> None:
        self.restart_handlers.pop(thread_id, None)

    def lookup(self, thread_id: int) -> int:
        try:
            return self.restart_handlers[thread_id]
        except KeyError:
            raise UnregisteredThread(f"thread {thread_id} has no restart handler") from None


def generate_master_canary(rng: RngState, config: CanaryConfig, boot_id: int = 0) -> MasterCanary:
    value = rand32(rng)
    if config.terminator_style:
        value &= 0xFFFFFF00  # lowest-address byte of the little-endian word
    return MasterCanary(value, boot_id)


# ------------------------------------------------------------ compile time

def reorder_frame(fn: FunctionDef) -> FunctionDef:
    """Pointers and scalars go to the low offsets, buffers to the top next to the canary."""
    if not any(l.kind == "buffer" for l in fn.locals):
        return fn
    front = [l for l in fn.locals if l.kind != "buffer"]
    bufs = [l for l in fn.locals if l.kind == "buffer"]
    return replace(fn, locals=tuple(front + bufs))


def needs_protection(fn: FunctionDef, config: CanaryConfig) -> bool:
    if fn.name.startswith("__") or fn.protected_by_ssp:
        return False
    return config.protect_all or fn.largest_buffer >= config.protect_threshold_buffer_bytes


def _is_alloc(ins: Instruction, op: str) -> bool:
    return ins.op == op and ins.rd == SP and ins.rn == SP and ins.sym == FRAME_SYM


def _guard_load(reg: int) -> list[Instruction]:
    return [
        Instruction("MOVI", rd=reg, sym=GUARD_SYMBOL, reloc="lo"),
        Instruction("MOVT", rd=reg, sym=GUARD_SYMBOL, reloc="hi"),
        Instruction("LOAD", rd=reg, rn=reg),
    ]


def canonical_epilogues(instrs: list[Instruction]) -> list[int]:
    """Indices of ``ADDI sp, sp, #@frame`` that start an ADDI; POPM; RET tail."""
    return [i for i in range(len(instrs) - 2)
            if _is_alloc(instrs[i], "ADDI") and instrs[i + 1].op == "POPM" and instrs[i + 2].op == "RET"]


def instrument_ssp(fn: FunctionDef, config: CanaryConfig | None = None) -> FunctionDef:
    """Insert the canary store after the frame allocation and a check before
    every epilogue. Grows the function by 4 + 5k instructions (k epilogues)."""
    if fn.protected_by_ssp:
        return fn
    flat = fn.instructions
    if len(flat) < 2 or flat[0].op != "PUSHM" or not _is_alloc(flat[1], "SUBI"):
        raise NonCanonicalPrologue(f"{fn.name}: prologue is not PUSHM; SUBI sp, sp, #@frame")
    epis = canonical_epilogues(flat)
    if not epis:
        raise NonCanonicalPrologue(f"{fn.name}: no canonical epilogue")
    g, s = SCRATCH_GUARD, SCRATCH_SLOT
    store = _guard_load(g) + [Instruction("STORE", rd=g, rn=SP, sym=CANARY_SYM, reloc="frame")]
    check = _guard_load(g) + [
        Instruction("LOAD", rd=s, rn=SP, sym=CANARY_SYM, reloc="frame"),
        Instruction("BR", cond="NE", rn=s, rm=g, sym=HANDLER_SYMBOL, reloc="pc"),
    ]
    blocks = []
    pos = 0
    for b in fn.blocks:
        out = []
        for ins in b.instrs:
            if pos in epis:
                out += check
            out.append(ins)
            if pos == 1:
                out += store
            pos += 1
        blocks.append(Block(b.label, tuple(out)))
    return replace(fn, blocks=tuple(blocks), protected_by_ssp=True)


def violation_handler() -> FunctionDef:
    return FunctionDef(HANDLER_SYMBOL, (Block(None, (Instruction("SVC", imm=SVC_VIOLATION),
                                                     Instruction("TRAP"))),))


def add_runtime(module: FirmwareModule) -> FirmwareModule:
    """Ensure the guard word and the violation handler exist."""
    fns, gl = module.functions, module.globals
    if not module.has_function(HANDLER_SYMBOL):
        fns = fns + (violation_handler(),)
    if not any(x.name == GUARD_SYMBOL for x in gl):
        gl = gl + (GlobalDef(GUARD_SYMBOL, 4),)
    return replace(module, functions=fns, globals=gl)


def protect_module(module: FirmwareModule, config: CanaryConfig) -> tuple[FirmwareModule, list[str]]:
    module = add_runtime(module)
    out, done = [], []
    for fn in module.functions:
        if needs_protection(fn, config):
            try:
                fn = instrument_ssp(reorder_frame(fn), config)
                done.append(fn.name)
            except NonCanonicalPrologue as exc:
                log.warning("skipping SSP: %s", exc)
        out.append(fn)
    return replace(module, functions=tuple(out)), done


# ------------------------------------------------------------ run time

def handle_violation(machine, policy: ViolationPolicy, violating_thread: int,
                     resume_pc: int | None = None) -> str:
    """Apply ``policy`` to ``machine``; returns the effect that was taken.

    ``resume_pc`` is the instruction after the failed check; without one
    (trap stubs) Passive has nowhere safe to go and acts as Fatal.
    """
    kind = policy.kind
    t = machine.thread(violating_thread)
    if kind is PolicyKind.PASSIVE:
        if resume_pc is not None:
            t.pc = resume_pc
            machine.emit("Alert", t, policy=kind.value)
            return "alert"
        machine.emit("PolicyFallback", t, policy=kind.value, reason="no return site")
        kind = PolicyKind.FATAL
    if kind is PolicyKind.THREAD_RESTART:
        try:
            handler = policy.lookup(violating_thread)
        except UnregisteredThread:
            machine.emit("PolicyFallback", t, policy=kind.value, reason="unregistered thread")
            kind = PolicyKind.FATAL
        else:
            machine.restart_thread(violating_thread, handler)
            return "thread-restart"
    if kind is PolicyKind.FATAL:
        machine.kill_thread(violating_thread, reason="violation")
        return "fatal"
    if kind is PolicyKind.SYSTEM_RESTART:
        machine.reboot()
        return "restart"
    machine.shutdown()
    return "shutdown"
